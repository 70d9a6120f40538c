"""Symmetric quadrature rules on triangles (Dunavant)."""

from __future__ import annotations

import dataclasses
import itertools

import numpy as np


@dataclasses.dataclass(frozen=True)
class QuadratureRule:
    """Barycentric points and weights; weights sum to 1 (multiply by area)."""

    barycentric: np.ndarray
    weights: np.ndarray
    degree: int

    def __len__(self) -> int:
        return len(self.weights)


def _orbit(*coords):
    return sorted(set(itertools.permutations(coords)))


def _rule(groups, degree):
    pts, wts = [], []
    for w, coords in groups:
        orbit = _orbit(*coords)
        pts.extend(orbit)
        wts.extend([w] * len(orbit))
    return QuadratureRule(np.array(pts, dtype=np.float64),
                          np.array(wts, dtype=np.float64), degree)


DEGREE4 = _rule([
    (0.223381589678011, (0.445948490915965, 0.445948490915965, 0.108103018168070)),
    (0.109951743655322, (0.091576213509771, 0.091576213509771, 0.816847572980459)),
], 4)

DEGREE6 = _rule([
    (0.116786275726379, (0.249286745170910, 0.249286745170910, 0.501426509658179)),
    (0.050844906370207, (0.063089014491502, 0.063089014491502, 0.873821971016996)),
    (0.082851075618374, (0.053145049844817, 0.310352451033784, 0.636502499121399)),
], 6)

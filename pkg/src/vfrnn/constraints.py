"""Polytopic input/output constraint sets ``{z : G z <= b}``."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog


@dataclass(frozen=True)
class Polytope:
    G: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        G = np.atleast_2d(np.asarray(self.G, dtype=float))
        b = np.asarray(self.b, dtype=float).reshape(-1)
        if G.shape[0] != b.size:
            raise ValueError(f"G has {G.shape[0]} rows but b has {b.size}")
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "b", b)

    @property
    def dim(self):
        return self.G.shape[1]

    def margins(self, z):
        """``b - G z``; nonnegative entries mean satisfied."""
        return self.b - np.asarray(z, dtype=float) @ self.G.T

    def contains(self, z, tol=0.0):
        return bool(np.all(self.margins(z) >= -tol))

    def nonempty(self):
        """Whether some ``z`` satisfies every row (an LP feasibility check)."""
        res = linprog(np.zeros(self.dim), A_ub=self.G, b_ub=self.b, bounds=[(None, None)] * self.dim,
                      method="highs")
        return res.status == 0

    def box_bounds(self):
        """``(lo, hi)`` if the rows are exactly ``[I; -I]``, else ``None``."""
        d = self.dim
        if self.G.shape != (2 * d, d) or not np.array_equal(self.G, np.vstack([np.eye(d), -np.eye(d)])):
            return None
        return -self.b[d:], self.b[:d]

    def to_dict(self):
        return {"G": self.G.tolist(), "b": self.b.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["G"], d["b"])


def box(lo, hi):
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    if np.any(lo >= hi):
        raise ValueError("box needs lo < hi componentwise")
    eye = np.eye(lo.size)
    return Polytope(np.vstack([eye, -eye]), np.concatenate([hi, -lo]))

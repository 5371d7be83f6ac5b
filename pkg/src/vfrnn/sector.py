"""Regional incremental sector bounds for sigmoid activations."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .activations import ActivationDescriptor
from .errors import DomainViolation, UnsupportedActivation

# largest admissible slope bound strictly below one
LAMBDA_CEIL = 1.0 - 1e-12


def _tanh_radius(lam):
    return float(np.arctanh(np.sqrt(1.0 - lam)))


def _bisect_side(deriv, lam, sign, tol=1e-12):
    lo, hi = 0.0, 1.0
    while deriv(sign * hi) >= lam:
        lo, hi = hi, 2 * hi
        if hi > 1e12:
            return np.inf
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if deriv(sign * mid) >= lam:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def sector_radius(activation: ActivationDescriptor, lam: float, method="auto") -> float:
    """Largest ``r`` with ``sigma'(v) >= lam`` for all ``|v| <= r``.

    ``lam = 0`` gives ``inf`` (the global sector). ``method="bisection"``
    forces the generic path, which assumes the derivative decays
    monotonically away from the origin on each side.
    """
    lam = float(lam)
    if lam == 0.0:
        return np.inf
    if not 0.0 < lam < 1.0:
        raise ValueError(f"lambda must lie in [0, 1), got {lam}")
    if activation.kind == "tanh" and method == "auto":
        return _tanh_radius(lam)
    if activation.derivative is None:
        raise UnsupportedActivation(f"{activation.kind}: no derivative available")
    d = lambda v: float(activation.derivative(np.asarray(v, dtype=float)))
    return min(_bisect_side(d, lam, +1.0), _bisect_side(d, lam, -1.0))


def lambda_from_radius(activation: ActivationDescriptor, v_bar: float) -> float:
    """Smallest slope bound whose validity radius is at most ``v_bar``."""
    v_bar = float(v_bar)
    if v_bar < 0:
        raise ValueError("v_bar must be non-negative")
    if np.isinf(v_bar):
        return 0.0
    lam = min(float(activation.derivative(np.asarray(v_bar))), float(activation.derivative(np.asarray(-v_bar))))
    return float(np.clip(lam, 0.0, LAMBDA_CEIL))


@dataclass(frozen=True)
class SectorSpec:
    """Per-channel slope bounds and their validity radii."""

    lambdas: np.ndarray
    v_bars: np.ndarray

    def __post_init__(self):
        lam = np.asarray(self.lambdas, dtype=float).copy()
        vb = np.asarray(self.v_bars, dtype=float).copy()
        if lam.shape != vb.shape:
            raise ValueError("lambdas and v_bars differ in length")
        if np.any(lam < 0) or np.any(lam >= 1):
            raise ValueError("lambdas must lie in [0, 1)")
        if np.any(np.isinf(vb) != (lam == 0)):
            raise ValueError("v_bar is infinite exactly when lambda == 0")
        lam.setflags(write=False)
        vb.setflags(write=False)
        object.__setattr__(self, "lambdas", lam)
        object.__setattr__(self, "v_bars", vb)

    @classmethod
    def from_lambdas(cls, lambdas, activations):
        lambdas = np.asarray(lambdas, dtype=float)
        return cls(lambdas, np.array([sector_radius(a, l) for a, l in zip(activations, lambdas)]))

    @classmethod
    def zero(cls, nu):
        return cls(np.zeros(nu), np.full(nu, np.inf))

    @property
    def active_set(self):
        return np.flatnonzero((self.lambdas > 0) & (self.lambdas < 1))

    @property
    def Lambda(self):
        return np.diag(self.lambdas)

    def inflate(self, eps, cap, activations):
        return SectorSpec.from_lambdas(np.minimum(self.lambdas + eps, cap), activations)

    def contains(self, v):
        """Whether ``v`` (or each row of a batch) lies in the validity box."""
        v = np.asarray(v, dtype=float)
        idx = self.active_set
        return np.all(np.abs(v[..., idx]) <= self.v_bars[idx], axis=-1)


def sector_value(S, lambdas, dv, ds):
    """``(dv - ds)' S (ds - Lambda dv)`` row-wise; ``S`` diagonal matrix or vector."""
    Sd = np.diag(S) if np.ndim(S) == 2 else np.asarray(S, dtype=float)
    dv = np.asarray(dv, dtype=float)
    ds = np.asarray(ds, dtype=float)
    return np.sum((dv - ds) * Sd * (ds - lambdas * dv), axis=-1)


def check_incremental_sector(spec: SectorSpec, S, v, dv, activations, tol=1e-12):
    """Evaluate the compact incremental sector inequality at ``(v, v + dv)``.

    Raises ``DomainViolation`` if either point leaves the validity box.
    Accepts single points or batches; returns a bool or a bool array.
    """
    v = np.asarray(v, dtype=float)
    dv = np.asarray(dv, dtype=float)
    if not (np.all(spec.contains(v)) and np.all(spec.contains(v + dv))):
        raise DomainViolation("point pair outside the sector validity box")
    sig = np.stack([a.value(v[..., i]) for i, a in enumerate(activations)], axis=-1)
    sig2 = np.stack([a.value(v[..., i] + dv[..., i]) for i, a in enumerate(activations)], axis=-1)
    val = sector_value(S, spec.lambdas, dv, sig2 - sig)
    out = val >= -tol
    return bool(out) if np.ndim(out) == 0 else out

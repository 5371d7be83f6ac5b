"""Scalar sigmoid activations and the numerical checks they must pass."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import UnsupportedActivation


@dataclass(frozen=True)
class ActivationDescriptor:
    kind: str
    value: Callable[[np.ndarray], np.ndarray]
    derivative: Callable[[np.ndarray], np.ndarray]

    def __call__(self, v):
        return self.value(v)


def _dtanh(v):
    t = np.tanh(v)
    return 1.0 - t * t


TANH = ActivationDescriptor("tanh", np.tanh, _dtanh)

_REGISTRY = {"tanh": TANH}


def get_activation(kind: str) -> ActivationDescriptor:
    try:
        return _REGISTRY[kind]
    except KeyError:
        raise UnsupportedActivation(f"unknown activation kind {kind!r}") from None


def check_activation(act: ActivationDescriptor, n_grid=2001, n_pairs=10_000, seed=0) -> dict:
    """Numerically check the sigmoid requirements on a sampled grid.

    Returns a dict of named boolean checks plus ``ok``: zero at the origin,
    unit slope at the origin, range in [-1, 1], slope in (0, 1] and the
    1-Lipschitz bound on random pairs.
    """
    v = np.linspace(-20.0, 20.0, n_grid)
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(-10, 10, size=(2, n_pairs))
    d = act.derivative(v)
    checks = {
        "zero_at_origin": abs(float(act.value(np.array(0.0)))) <= 1e-15,
        "unit_slope_at_origin": abs(float(act.derivative(np.array(0.0))) - 1.0) <= 1e-12,
        "bounded": bool(np.all(np.abs(act.value(v)) <= 1.0)),
        "slope_in_unit_interval": bool(np.all((d >= 0.0) & (d <= 1.0 + 1e-15))),
        "lipschitz": bool(np.all(np.abs(act.value(a) - act.value(b)) <= np.abs(a - b) + 1e-15)),
    }
    # tanh' underflows to exactly 0 far out; strict positivity is checked on |v| <= 15
    inner = np.abs(v) <= 15.0
    checks["slope_in_unit_interval"] &= bool(np.all(d[inner] > 0.0))
    checks["ok"] = all(checks.values())
    return checks

"""Return-transformation homeomorphisms.

The scaled square-root transform ``phi(x) = beta * h(x)`` with

    h(x) = sign(x) * (sqrt(1 + |x|) - 1) + eps * x

squashes large returns while staying invertible, odd and strictly increasing.
Functions accept scalars or numpy arrays and return the same kind.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

DEFAULT_EPS = 0.001
DEFAULT_BETA = 1.99


class DomainError(ValueError):
    """Raised when a transform receives a non-finite value."""


def _check_finite(x, what: str):
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{what}: non-finite input {x!r}")
    return arr


def _like(arr: np.ndarray, x):
    return float(arr) if np.ndim(x) == 0 else arr


def h_forward(x, eps: float = DEFAULT_EPS):
    if eps <= 0:
        raise ValueError("eps must be positive")
    a = _check_finite(x, "h_forward")
    y = np.sign(a) * (np.sqrt(1.0 + np.abs(a)) - 1.0) + eps * a
    return _like(y, x)


def h_inverse(y, eps: float = DEFAULT_EPS):
    """Closed-form inverse of :func:`h_forward`.

    ``(sqrt(1 + 4 eps (|y| + 1 + eps)) - 1) / (2 eps)`` is evaluated in the
    rationalised form ``2 (|y| + 1 + eps) / (sqrt(...) + 1)``, which is the same
    quantity without the cancellation for small ``eps``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    b = _check_finite(y, "h_inverse")
    t = np.abs(b) + 1.0 + eps
    u = 2.0 * t / (np.sqrt(1.0 + 4.0 * eps * t) + 1.0)
    x = np.sign(b) * (u * u - 1.0)
    return _like(x, y)


@dataclass(frozen=True)
class Homeomorphism:
    """Invertible odd monotone map ``R -> J``; ``kind`` is ``identity`` or ``scaled-h``."""

    kind: str = "scaled-h"
    beta: float = DEFAULT_BETA
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        if self.kind not in ("identity", "scaled-h"):
            raise ValueError(f"unknown homeomorphism kind {self.kind!r}")
        if self.kind == "scaled-h" and not (self.beta > 0 and self.eps > 0):
            raise ValueError("beta and eps must be positive")

    @classmethod
    def identity(cls) -> "Homeomorphism":
        return cls(kind="identity")

    @classmethod
    def scaled_h(cls, beta: float = DEFAULT_BETA, eps: float = DEFAULT_EPS) -> "Homeomorphism":
        return cls(kind="scaled-h", beta=beta, eps=eps)

    @property
    def is_identity(self) -> bool:
        return self.kind == "identity"

    def forward(self, x):
        return phi_forward(self, x)

    def inverse(self, w):
        return phi_inverse(self, w)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "beta": self.beta, "eps": self.eps}


def phi_forward(phi: Homeomorphism, x):
    if phi.is_identity:
        _check_finite(x, "phi_forward")
        return x
    return phi.beta * h_forward(x, phi.eps)


def phi_inverse(phi: Homeomorphism, w):
    if phi.is_identity:
        _check_finite(w, "phi_inverse")
        return w
    return h_inverse(np.asarray(w, dtype=float) / phi.beta if np.ndim(w) else w / phi.beta, phi.eps)


def conjugate_map(phi: Homeomorphism, r: float, gamma: float) -> Callable:
    """Return ``w -> phi(r + gamma * phi^-1(w))``, the affine return map seen through ``phi``."""
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")

    def g(w):
        return phi_forward(phi, r + gamma * phi_inverse(phi, w))

    return g

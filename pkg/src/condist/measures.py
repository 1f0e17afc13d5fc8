"""Discrete measures on the real line with free supports.

A :class:`DiscreteMeasure` is ``sum_i p_i delta_{x_i}`` kept in canonical form:
atoms strictly increasing, exactly-equal atoms merged.  The squared Cramer
distance between two such measures is computed by merging both supports and
integrating the squared CDF difference of the signed measure ``mu - nu``.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

MASS_TOL = 1e-6
NEG_MASS_TOL = 1e-9


class MeasureError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    atoms: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        self.atoms.setflags(write=False)
        self.masses.setflags(write=False)

    def __len__(self) -> int:
        return self.atoms.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, DiscreteMeasure):
            return NotImplemented
        return np.array_equal(self.atoms, other.atoms) and np.array_equal(self.masses, other.masses)

    def __repr__(self) -> str:
        return f"DiscreteMeasure(atoms={self.atoms.tolist()}, masses={self.masses.tolist()})"

    @property
    def total_mass(self) -> float:
        return float(self.masses.sum())

    def to_dict(self) -> dict:
        return {"count": int(self.atoms.size), "atoms": self.atoms.tolist(), "masses": self.masses.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "DiscreteMeasure":
        m = make_measure(d["atoms"], d["masses"])
        if len(m) != d.get("count", len(m)):
            raise MeasureError("count does not match canonical atom count")
        return m


def _canonical(atoms: np.ndarray, masses: np.ndarray) -> DiscreteMeasure:
    if atoms.size > 1 and np.any(np.diff(atoms) <= 0):
        ux, inv = np.unique(atoms, return_inverse=True)
        masses = np.bincount(inv.ravel(), weights=masses, minlength=ux.size)
        atoms = ux
    return DiscreteMeasure(np.array(atoms, dtype=float), np.array(masses, dtype=float))


def canonicalize(atoms, masses) -> DiscreteMeasure:
    """Sort and merge duplicates without any probability checks (signed measures allowed)."""
    a = np.asarray(atoms, dtype=float).ravel()
    p = np.asarray(masses, dtype=float).ravel()
    if a.shape != p.shape:
        raise MeasureError(f"atoms/masses length mismatch: {a.size} vs {p.size}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(p))):
        raise MeasureError("atoms and masses must be finite")
    return _canonical(a, p)


def make_measure(atoms, masses) -> DiscreteMeasure:
    """Build a canonical probability measure.

    Masses within ``1e-6`` of unit total are renormalised; small negative
    masses (above ``-1e-9``) are clamped to zero.
    """
    a = np.asarray(atoms, dtype=float).ravel()
    p = np.asarray(masses, dtype=float).ravel()
    if a.size == 0:
        raise MeasureError("a measure needs at least one atom")
    if a.shape != p.shape:
        raise MeasureError(f"atoms/masses length mismatch: {a.size} vs {p.size}")
    if not np.all(np.isfinite(a)):
        raise MeasureError("non-finite atom")
    if not np.all(np.isfinite(p)):
        raise MeasureError("non-finite mass")
    if np.any(p < -NEG_MASS_TOL):
        raise MeasureError(f"negative mass {p.min()}")
    p = np.clip(p, 0.0, None)
    total = p.sum()
    if abs(total - 1.0) > MASS_TOL + 1e-12:
        raise MeasureError(f"masses sum to {total}, not 1")
    return _canonical(a, p / total)


def dirac(x: float) -> DiscreteMeasure:
    return DiscreteMeasure(np.array([float(x)]), np.array([1.0]))


def pushforward(f: Callable, mu: DiscreteMeasure) -> DiscreteMeasure:
    """Image measure ``f # mu``; ``f`` must accept an array of atoms."""
    y = np.asarray(f(mu.atoms), dtype=float)
    if y.shape != mu.atoms.shape:
        y = np.broadcast_to(y, mu.atoms.shape).astype(float)
    if not np.all(np.isfinite(y)):
        raise MeasureError("pushforward map produced non-finite atoms")
    return _canonical(y, mu.masses.copy())


def mixture(weights: Sequence[float], measures: Sequence[DiscreteMeasure]) -> DiscreteMeasure:
    if len(weights) != len(measures):
        raise MeasureError(f"{len(weights)} weights for {len(measures)} measures")
    if not measures:
        raise MeasureError("empty mixture")
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise MeasureError("mixture weights must be nonnegative and sum to 1")
    if len(measures) == 1 and w[0] == 1.0:
        return measures[0]
    atoms = np.concatenate([m.atoms for m in measures])
    masses = np.concatenate([wi * m.masses for wi, m in zip(w, measures)])
    return _canonical(atoms, masses)


def expectation(mu: DiscreteMeasure, g: Callable | None = None) -> float:
    vals = mu.atoms if g is None else np.asarray(g(mu.atoms), dtype=float)
    if not np.all(np.isfinite(vals)):
        raise MeasureError("integrand is non-finite on the support")
    return float(np.dot(mu.masses, vals))


def cdf_eval(mu: DiscreteMeasure, w: float) -> float:
    k = np.searchsorted(mu.atoms, w, side="right")
    return float(mu.masses[:k].sum())


def _signed_support(mu: DiscreteMeasure, nu: DiscreteMeasure) -> tuple[np.ndarray, np.ndarray]:
    atoms = np.concatenate([mu.atoms, nu.atoms])
    signed = np.concatenate([mu.masses, -nu.masses])
    w, inv = np.unique(atoms, return_inverse=True)
    r = np.bincount(inv.ravel(), weights=signed, minlength=w.size)
    return w, r


def cramer_sq(mu: DiscreteMeasure, nu: DiscreteMeasure) -> float:
    """Squared Cramer distance ``int (F_mu - F_nu)^2 dw``.

    Shared atoms carry the net signed mass at a single support point, so no
    zero-width intervals appear.
    """
    w, r = _signed_support(mu, nu)
    if w.size < 2:
        return 0.0
    P = np.cumsum(r)[:-1]
    return float(np.dot(P * P, np.diff(w)))


def cramer_terms(x: np.ndarray, p: np.ndarray, y: np.ndarray, q: np.ndarray):
    """Batched squared Cramer distance with analytic partials for the first measure.

    ``x, p`` have shape ``(B, n)`` and ``y, q`` shape ``(B, m)``; atoms need not
    be sorted.  Returns ``(loss[B], dL/dx[B, n], dL/dp[B, n])``.  The merged sort
    is stable with ``mu`` atoms placed first among ties, which selects one
    one-sided derivative at coincident atoms.
    """
    x = np.atleast_2d(x)
    p = np.atleast_2d(p)
    y = np.atleast_2d(y)
    q = np.atleast_2d(q)
    n = x.shape[1]
    atoms = np.concatenate([x, y], axis=1)
    signed = np.concatenate([p, -q], axis=1)
    order = np.argsort(atoms, axis=1, kind="stable")
    rows = np.arange(atoms.shape[0])[:, None]
    w = atoms[rows, order]
    r = signed[rows, order]
    P = np.cumsum(r, axis=1)[:, :-1]
    dw = np.diff(w, axis=1)
    P2 = P * P
    loss = np.einsum("bk,bk->b", P2, dw)
    zero = np.zeros((x.shape[0], 1))
    # d/dw_k of sum_k P_k^2 (w_{k+1} - w_k) = P_{k-1}^2 - P_k^2, with P_0 = P_n = 0
    g_w = np.concatenate([zero, P2], axis=1) - np.concatenate([P2, zero], axis=1)
    # d/dr_j = 2 sum_{k >= j} P_k dw_k
    tail = np.cumsum((2.0 * P * dw)[:, ::-1], axis=1)[:, ::-1]
    g_r = np.concatenate([tail, zero], axis=1)
    g_atoms = np.empty_like(g_w)
    g_signed = np.empty_like(g_r)
    g_atoms[rows, order] = g_w
    g_signed[rows, order] = g_r
    return loss, g_atoms[:, :n], g_signed[:, :n]


def cramer_sq_grad(mu: DiscreteMeasure, nu: DiscreteMeasure) -> tuple[np.ndarray, np.ndarray]:
    """Partials of :func:`cramer_sq` with respect to ``mu``'s atoms and masses."""
    _, gx, gp = cramer_terms(mu.atoms[None, :], mu.masses[None, :], nu.atoms[None, :], nu.masses[None, :])
    return gx[0], gp[0]


def merge_atoms(mu: DiscreteMeasure, max_atoms: int, transform=None) -> DiscreteMeasure:
    """Cap the support size by repeatedly fusing the closest adjacent pair.

    A fused pair becomes one atom at the mass-weighted mean, so total mass and
    first moment are preserved.  With ``transform`` (a :class:`Homeomorphism`)
    the mean is taken in pre-image coordinates, ``phi(sum p phi^-1(x) / sum p)``,
    which preserves the ``phi^-1``-expectation instead.
    """
    if max_atoms < 1:
        raise ValueError("max_atoms must be at least 1")
    n = len(mu)
    if n <= max_atoms:
        return mu
    if transform is None or transform.is_identity:
        coords = mu.atoms.astype(float).tolist()
    else:
        coords = np.asarray(transform.inverse(mu.atoms), dtype=float).tolist()
    mass = mu.masses.astype(float).tolist()
    prev = list(range(-1, n - 1))
    nxt = list(range(1, n + 1))
    nxt[-1] = -1
    alive = [True] * n
    version = [0] * n
    heap = [(coords[i + 1] - coords[i], i, 0, 0) for i in range(n - 1)]
    heapq.heapify(heap)
    count = n
    while count > max_atoms:
        gap, i, vi, vj = heapq.heappop(heap)
        j = nxt[i] if alive[i] else -1
        if j < 0 or version[i] != vi or version[j] != vj:
            continue
        m = mass[i] + mass[j]
        if m > 0:
            coords[i] = (mass[i] * coords[i] + mass[j] * coords[j]) / m
        else:
            coords[i] = 0.5 * (coords[i] + coords[j])
        mass[i] = m
        version[i] += 1
        alive[j] = False
        nxt[i] = nxt[j]
        if nxt[j] >= 0:
            prev[nxt[j]] = i
        count -= 1
        if prev[i] >= 0:
            k = prev[i]
            heapq.heappush(heap, (coords[i] - coords[k], k, version[k], version[i]))
        if nxt[i] >= 0:
            k = nxt[i]
            heapq.heappush(heap, (coords[k] - coords[i], i, version[i], version[k]))
    keep = [i for i in range(n) if alive[i]]
    c = np.array([coords[i] for i in keep])
    if transform is not None and not transform.is_identity:
        c = np.asarray(transform.forward(c), dtype=float)
    return _canonical(c, np.array([mass[i] for i in keep]))


def project_to_grid(mu: DiscreteMeasure, grid) -> DiscreteMeasure:
    """Cramer projection onto a fixed increasing grid.

    Each atom's mass is split between its two neighbouring grid points in
    proportion to proximity; atoms beyond the ends go to the end points.  The
    map is a non-expansion in the Cramer distance and keeps the mean of any
    measure supported inside the grid range.
    """
    z = np.asarray(grid, dtype=float)
    if z.ndim != 1 or z.size < 1 or np.any(np.diff(z) <= 0):
        raise ValueError("grid must be a nonempty strictly increasing 1-d array")
    out = np.zeros(z.size)
    if z.size == 1:
        out[0] = mu.masses.sum()
        return _canonical(z, out)
    x = np.clip(mu.atoms, z[0], z[-1])
    hi = np.clip(np.searchsorted(z, x, side="right"), 1, z.size - 1)
    lo = hi - 1
    frac = (x - z[lo]) / (z[hi] - z[lo])
    np.add.at(out, lo, mu.masses * (1.0 - frac))
    np.add.at(out, hi, mu.masses * frac)
    keep = out > 0
    return _canonical(z[keep], out[keep])


class DistributionCollection:
    """``(state, action)``-indexed table of :class:`DiscreteMeasure`."""

    def __init__(self, measures: Sequence[Sequence[DiscreteMeasure]]):
        rows = tuple(tuple(row) for row in measures)
        if not rows or any(len(row) != len(rows[0]) for row in rows) or not rows[0]:
            raise MeasureError("collection must be a non-empty rectangular table")
        self._rows = rows

    @classmethod
    def constant(cls, n_states: int, n_actions: int, measure: DiscreteMeasure) -> "DistributionCollection":
        return cls([[measure] * n_actions for _ in range(n_states)])

    @property
    def shape(self) -> tuple[int, int]:
        return len(self._rows), len(self._rows[0])

    def __getitem__(self, sa: tuple[int, int]) -> DiscreteMeasure:
        s, a = sa
        return self._rows[s][a]

    def row(self, s: int) -> tuple[DiscreteMeasure, ...]:
        return self._rows[s]

    def __iter__(self):
        for s, row in enumerate(self._rows):
            for a, m in enumerate(row):
                yield (s, a), m

    def __eq__(self, other) -> bool:
        if not isinstance(other, DistributionCollection):
            return NotImplemented
        return self._rows == other._rows

    def max_atoms(self) -> int:
        return max(len(m) for _, m in self)

    def to_dict(self) -> dict:
        return {"measures": [[m.to_dict() for m in row] for row in self._rows]}

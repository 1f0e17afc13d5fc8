"""Exact tabular operators on finite MDPs.

Q-functions are ``(n_states, n_actions)`` float arrays.  Distribution
collections are :class:`~condist.measures.DistributionCollection` tables.
Greedy selection uses the lowest maximising action index unless a random
tie-break generator is supplied.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .mdp import FiniteMdp, admissible_r_interval, build_counterexample
from .measures import (DistributionCollection, cramer_sq, dirac, expectation, merge_atoms,
                       mixture, project_to_grid, pushforward)
from .transforms import DEFAULT_BETA, DEFAULT_EPS, Homeomorphism, conjugate_map, h_forward, h_inverse


@dataclass
class IterationReport:
    iterations: int
    residual: float
    converged: bool
    trace: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _argmax(values, rng: np.random.Generator | None = None) -> int:
    values = np.asarray(values)
    if rng is None:
        return int(np.argmax(values))
    best = np.flatnonzero(values == values.max())
    return int(best[rng.integers(best.size)])


def greedy_policy(Q: np.ndarray) -> np.ndarray:
    """Deterministic greedy policy (lowest index among maximisers) per state."""
    return np.argmax(np.asarray(Q), axis=1)


def _state_values(mdp: FiniteMdp, Q: np.ndarray) -> np.ndarray:
    V = np.max(Q, axis=1)
    return np.where(np.array(mdp.terminal), 0.0, V)


def bellman_backup(mdp: FiniteMdp, Q: np.ndarray) -> np.ndarray:
    Q = np.asarray(Q, dtype=float)
    P = mdp.dense()
    r = np.asarray(mdp.rewards)
    V = _state_values(mdp, Q)
    # P[s,a,ri,s'] * (r[ri] + gamma V[s'])
    return np.einsum("sarn,rn->sa", P, r[:, None] + mdp.gamma * V[None, :])


def transformed_value_backup(mdp: FiniteMdp, Q: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    """``E[h(R + gamma max_a' h^-1(Q(S', a')))]``; a terminal successor contributes ``h(R)``."""
    Q = np.asarray(Q, dtype=float)
    P = mdp.dense()
    r = np.asarray(mdp.rewards)
    V = np.where(np.array(mdp.terminal), 0.0, np.max(h_inverse(Q, eps), axis=1))
    target = h_forward(r[:, None] + mdp.gamma * V[None, :], eps)
    return np.einsum("sarn,rn->sa", P, target)


def q_from_collection(xi: DistributionCollection, phi: Homeomorphism | None = None) -> np.ndarray:
    """Expected return per ``(s, a)``: the ``phi^-1``-expectation of each measure."""
    g = None if phi is None or phi.is_identity else phi.inverse
    S, A = xi.shape
    return np.array([[expectation(xi[s, a], g) for a in range(A)] for s in range(S)])


def distributional_backup(mdp: FiniteMdp, eta: DistributionCollection,
                          rng: np.random.Generator | None = None) -> DistributionCollection:
    """Distributional optimality backup: mix ``f_{r,gamma} # eta(s', a*(s'))`` over each kernel row."""
    Qeta = q_from_collection(eta)
    greedy = [_argmax(Qeta[s], rng) for s in range(mdp.n_states)]
    gamma = mdp.gamma
    out = []
    for s in range(mdp.n_states):
        row = []
        for a in range(mdp.n_actions):
            weights, parts = [], []
            for ri, s2, p in mdp.kernel[s][a]:
                r = mdp.rewards[ri]
                if mdp.terminal[s2]:
                    parts.append(dirac(r))
                else:
                    parts.append(pushforward(lambda z, r=r: r + gamma * z, eta[s2, greedy[s2]]))
                weights.append(p)
            row.append(mixture(weights, parts))
        out.append(row)
    return DistributionCollection(out)


def support_grid(mdp: FiniteMdp, phi: Homeomorphism, n: int) -> np.ndarray:
    """``n`` evenly spaced points spanning ``phi([-V, V])`` with ``V = max|r| / (1 - gamma)``."""
    v = mdp.max_abs_return()
    if v == 0.0 or n == 1:
        return np.array([phi.forward(0.0)])
    return np.linspace(phi.forward(-v), phi.forward(v), n)


def conjugated_backup(mdp: FiniteMdp, xi: DistributionCollection, phi: Homeomorphism,
                      merge_cap: int | None = None, rng: np.random.Generator | None = None,
                      merge_in_preimage: bool = False, projection: str = "merge") -> DistributionCollection:
    """Conjugated optimality backup: mix ``(phi . f_{r,gamma} . phi^-1) # xi(s', a*(s'))``.

    ``a*`` maximises the ``phi^-1``-expectation; terminal successors contribute
    ``delta_{phi(r)}``.  ``merge_cap`` bounds support growth.  With
    ``projection="merge"`` it applies :func:`merge_atoms` (in ``phi^-1``
    coordinates when ``merge_in_preimage``); with ``"grid"`` every row is
    projected onto ``merge_cap`` fixed points from :func:`support_grid`, which
    makes the capped iteration settle to a fixed point.
    """
    if projection not in ("merge", "grid"):
        raise ValueError(f"unknown projection {projection!r}")
    grid = support_grid(mdp, phi, merge_cap) if merge_cap is not None and projection == "grid" else None
    Qxi = q_from_collection(xi, phi)
    greedy = [_argmax(Qxi[s], rng) for s in range(mdp.n_states)]
    maps = {}
    out = []
    for s in range(mdp.n_states):
        row = []
        for a in range(mdp.n_actions):
            weights, parts = [], []
            for ri, s2, p in mdp.kernel[s][a]:
                r = mdp.rewards[ri]
                if mdp.terminal[s2]:
                    parts.append(dirac(phi.forward(r)))
                else:
                    if ri not in maps:
                        maps[ri] = conjugate_map(phi, r, mdp.gamma)
                    parts.append(pushforward(maps[ri], xi[s2, greedy[s2]]))
                weights.append(p)
            m = mixture(weights, parts)
            if grid is not None:
                m = project_to_grid(m, grid)
            elif merge_cap is not None:
                m = merge_atoms(m, merge_cap, phi if merge_in_preimage else None)
            row.append(m)
        out.append(row)
    return DistributionCollection(out)


def initial_collection(mdp: FiniteMdp, phi: Homeomorphism | None = None) -> DistributionCollection:
    origin = 0.0 if phi is None else phi.forward(0.0)
    return DistributionCollection.constant(mdp.n_states, mdp.n_actions, dirac(origin))


def collection_distance(a: DistributionCollection, b: DistributionCollection) -> float:
    """Max over ``(s, a)`` of the Cramer distance."""
    return max(math.sqrt(max(cramer_sq(m, b[sa]), 0.0)) for sa, m in a)


def _residual(new, old) -> float:
    if isinstance(new, DistributionCollection):
        return collection_distance(new, old)
    return float(np.max(np.abs(np.asarray(new) - np.asarray(old))))


def fixed_point(step: Callable, init, tol: float, max_iter: int = 10_000,
                residual: Callable | None = None):
    """Iterate ``step`` until the residual between iterates is at most ``tol``.

    The default residual is the sup-norm for arrays and the max Cramer distance
    for collections.  Returns ``(last_iterate, IterationReport)``; a run that
    exhausts ``max_iter`` is flagged ``converged=False``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    dist = residual or _residual
    x = init
    trace = []
    for it in range(1, max_iter + 1):
        nx = step(x)
        res = dist(nx, x)
        trace.append(res)
        x = nx
        if res <= tol:
            return x, IterationReport(it, res, True, trace)
    return x, IterationReport(max_iter, trace[-1] if trace else math.inf, False, trace)


def value_iteration(mdp: FiniteMdp, tol: float = 1e-10, max_iter: int = 100_000, Q0=None):
    Q0 = np.zeros((mdp.n_states, mdp.n_actions)) if Q0 is None else np.asarray(Q0, dtype=float)
    return fixed_point(lambda Q: bellman_backup(mdp, Q), Q0, tol, max_iter)


def value_iterates(mdp: FiniteMdp, k: int, Q0=None) -> list[np.ndarray]:
    """``[Q_0, T Q_0, ..., T^k Q_0]`` under the Bellman optimality operator."""
    Q = np.zeros((mdp.n_states, mdp.n_actions)) if Q0 is None else np.asarray(Q0, dtype=float)
    out = [Q]
    for _ in range(k):
        Q = bellman_backup(mdp, Q)
        out.append(Q)
    return out


@dataclass
class CounterexampleReport:
    R: float
    r: float
    eps: float
    interval: tuple[float, float]
    q_star: list[float]
    th_fixed_point: list[float]
    tphi_q: list[float]
    optimal_action: str
    th_action: str
    tphi_action: str

    @property
    def claims(self) -> dict[str, bool]:
        return {
            "optimal_is_a": self.optimal_action == "a",
            "th_greedy_is_b": self.th_action == "b",
            "tphi_greedy_is_a": self.tphi_action == "a",
        }

    @property
    def passed(self) -> bool:
        return all(self.claims.values())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["interval"] = list(self.interval)
        d["claims"] = self.claims
        d["passed"] = self.passed
        return d


def verify_counterexample(R: float, r: float | None = None, eps: float = DEFAULT_EPS,
                          beta: float = DEFAULT_BETA, gamma: float = 0.99) -> CounterexampleReport:
    """Compare greedy actions at the start state under three fixed points.

    Bellman value iteration (the optimum), the transformed value operator, and
    the conjugated distributional operator with ``phi = beta * h``.
    """
    mdp = build_counterexample(R, r, gamma=gamma, eps=eps)
    r = mdp.rewards[2]
    names = "ab"
    Q_star, _ = value_iteration(mdp, tol=1e-12)
    zero = np.zeros((mdp.n_states, mdp.n_actions))
    Q_h, _ = fixed_point(lambda Q: transformed_value_backup(mdp, Q, eps), zero, 1e-12)
    phi = Homeomorphism.scaled_h(beta, eps)
    xi, _ = fixed_point(lambda c: conjugated_backup(mdp, c, phi), initial_collection(mdp, phi), 1e-12)
    Q_phi = q_from_collection(xi, phi)
    return CounterexampleReport(
        R=float(R), r=float(r), eps=eps, interval=admissible_r_interval(R, eps),
        q_star=Q_star[0].tolist(), th_fixed_point=Q_h[0].tolist(), tphi_q=Q_phi[0].tolist(),
        optimal_action=names[int(greedy_policy(Q_star)[0])],
        th_action=names[int(greedy_policy(Q_h)[0])],
        tphi_action=names[int(greedy_policy(Q_phi)[0])],
    )

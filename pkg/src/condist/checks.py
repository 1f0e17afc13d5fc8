"""Randomised verification sweeps behind the ``equivalence`` and ``cramer-selftest`` commands."""
from __future__ import annotations

import math

import numpy as np

from .mdp import random_mdp
from .measures import (DiscreteMeasure, DistributionCollection, canonicalize, cdf_eval, cramer_sq, cramer_sq_grad,
                       make_measure, pushforward)
from .operators import (bellman_backup, conjugated_backup, distributional_backup, initial_collection,
                        q_from_collection, value_iterates, value_iteration)
from .transforms import Homeomorphism

EQUIVALENCE_TOL = 1e-9
EQUIVALENCE_COLUMNS = ["instance", "n_states", "n_actions", "n_rewards", "lemma_dev", "iterate_dev", "bound_excess",
                       "max_atoms", "max_dev"]


def random_collection(mdp, rng: np.random.Generator, max_atoms: int = 8, scale: float = 5.0):
    rows = []
    for _ in range(mdp.n_states):
        row = []
        for _ in range(mdp.n_actions):
            n = int(rng.integers(1, max_atoms + 1))
            row.append(make_measure(rng.uniform(-scale, scale, n), rng.dirichlet(np.ones(n))))
        rows.append(row)
    return DistributionCollection(rows)


def equivalence_case(index: int, seed: int, k_max: int, family: str = "single", gamma: float = 0.9) -> dict:
    """One random instance: expectation commutation for the distributional backup, then ``k_max`` exact
    conjugated backups against value iteration.

    ``family="single"`` draws MDPs whose rows have at most one non-terminal
    outcome, so exact supports grow linearly; ``"dense"`` allows any row and
    is only practical for small ``k_max``.
    """
    rng = np.random.default_rng([seed, index])
    n_s, n_a, n_r = int(rng.integers(2, 6)), int(rng.integers(1, 4)), int(rng.integers(1, 5))
    if family == "single":
        mdp = random_mdp(n_s, n_a, n_r, gamma, rng, n_terminal=1, max_continuations=1)
    elif family == "dense":
        mdp = random_mdp(n_s, n_a, n_r, gamma, rng, n_terminal=int(rng.integers(0, 2)))
    else:
        raise ValueError(f"unknown MDP family {family!r}")
    eta = random_collection(mdp, rng)
    lemma_dev = float(np.abs(q_from_collection(distributional_backup(mdp, eta))
                             - bellman_backup(mdp, q_from_collection(eta))).max())
    phi = Homeomorphism.scaled_h()
    Qs = value_iterates(mdp, k_max)
    Q_star, _ = value_iteration(mdp, tol=1e-13)
    xi = initial_collection(mdp, phi)
    iterate_dev = 0.0
    Q = Qs[0]
    for k in range(1, k_max + 1):
        xi = conjugated_backup(mdp, xi, phi)
        Q = q_from_collection(xi, phi)
        iterate_dev = max(iterate_dev, float(np.abs(Q - Qs[k]).max()))
    bound = mdp.gamma ** k_max * float(np.abs(Qs[0] - Q_star).max())
    excess = float(np.abs(Q - Q_star).max()) - bound
    return {
        "instance": index, "n_states": n_s, "n_actions": n_a, "n_rewards": len(mdp.rewards),
        "lemma_dev": lemma_dev, "iterate_dev": iterate_dev, "bound_excess": excess,
        "max_atoms": xi.max_atoms(), "max_dev": max(lemma_dev, iterate_dev),
    }


def equivalence_passed(row: dict) -> bool:
    return row["max_dev"] <= EQUIVALENCE_TOL and row["bound_excess"] <= EQUIVALENCE_TOL


# --------------------------------------------------------------------------- Cramer self-test

LATTICE = 1e-5


def _lattice_measure(rng, n_max=32, lo=-100.0, hi=100.0) -> DiscreteMeasure:
    n = int(rng.integers(1, n_max + 1))
    k = rng.integers(int(lo / LATTICE), int(hi / LATTICE) + 1, size=n)
    return make_measure(k * LATTICE, rng.dirichlet(np.ones(n)))


def _energy(mu: DiscreteMeasure, nu: DiscreteMeasure) -> float:
    def mean_abs(a, p, b, q):
        return float(p @ np.abs(a[:, None] - b[None, :]) @ q)

    return (mean_abs(mu.atoms, mu.masses, nu.atoms, nu.masses)
            - 0.5 * (mean_abs(mu.atoms, mu.masses, mu.atoms, mu.masses)
                     + mean_abs(nu.atoms, nu.masses, nu.atoms, nu.masses)))


def _lattice_grid(mu: DiscreteMeasure, nu: DiscreteMeasure) -> float:
    # left Riemann sum at spacing LATTICE, counted piece by piece
    ks = np.unique(np.round(np.concatenate([mu.atoms, nu.atoms]) / LATTICE).astype(np.int64))
    total = 0.0
    for k0, k1 in zip(ks[:-1], ks[1:]):
        d = cdf_eval(mu, float(k0) * LATTICE) - cdf_eval(nu, float(k0) * LATTICE)
        total += d * d * int(k1 - k0) * LATTICE
    return total


def _case(rng):
    """Every suite on one random case as ``name -> (discrepancy, tolerance)``."""
    mu, nu, rho = _lattice_measure(rng), _lattice_measure(rng), _lattice_measure(rng)
    base = cramer_sq(mu, nu)

    def l2(a, b):
        return math.sqrt(max(cramer_sq(a, b), 0.0))

    r = float(rng.uniform(-50, 50))
    g = float(rng.uniform(0.05, 1.0))
    shifted = cramer_sq(pushforward(lambda z: r + z, mu), pushforward(lambda z: r + z, nu))
    scaled = cramer_sq(pushforward(lambda z: g * z, mu), pushforward(lambda z: g * z, nu))
    rel = 1e-9 * max(1.0, base)
    out = {
        "symmetry": (abs(base - cramer_sq(nu, mu)), 0.0),
        "nonnegative": (max(0.0, -base), 1e-12),
        "identity": (abs(cramer_sq(mu, mu)), 0.0),
        "triangle": (max(0.0, l2(mu, rho) - l2(mu, nu) - l2(nu, rho)), 1e-9),
        "translation": (abs(shifted - base), rel),
        "scale": (abs(scaled - g * base), rel),
        "grid_oracle": (abs(base - _lattice_grid(mu, nu)), 1e-6),
        "energy_oracle": (abs(base - _energy(mu, nu)), rel),
    }
    # gradients on a generic pair (continuous atoms, so ties have probability zero)
    n = int(rng.integers(1, 9))
    a = make_measure(rng.uniform(-10, 10, n), rng.dirichlet(np.ones(n)))
    b = make_measure(rng.uniform(-10, 10, 8), rng.dirichlet(np.ones(8)))
    an = np.concatenate(cramer_sq_grad(a, b))
    fd = np.concatenate(_fd_grad(a, b, 1e-6))
    out["gradient"] = (float(np.max(np.abs(an - fd) / np.maximum(1e-6, 1e-4 * np.abs(fd)))), 1.0)
    case = {"mu": mu.to_dict(), "nu": nu.to_dict(), "rho": rho.to_dict(), "shift": r, "scale": g,
            "grad_mu": a.to_dict(), "grad_nu": b.to_dict()}
    return out, case


def _fd_grad(a: DiscreteMeasure, b: DiscreteMeasure, h: float):
    def f(x, p):
        return cramer_sq(canonicalize(x, p), b)

    gx = np.zeros(len(a))
    gp = np.zeros(len(a))
    for i in range(len(a)):
        e = np.zeros(len(a))
        e[i] = h
        gx[i] = (f(a.atoms + e, a.masses) - f(a.atoms - e, a.masses)) / (2 * h)
        gp[i] = (f(a.atoms, a.masses + e) - f(a.atoms, a.masses - e)) / (2 * h)
    return gx, gp


SELFTEST_SUITES = ("symmetry", "nonnegative", "identity", "triangle", "translation", "scale", "grid_oracle",
                   "energy_oracle", "gradient")


def cramer_selftest(n_cases: int, seed: int, fault: str | None = None) -> tuple[dict, dict | None]:
    """Run every suite on ``n_cases`` random cases; stop at the first failure.

    Returns ``(summary, failure)`` where ``failure`` is ``None`` when everything
    passed.  ``fault`` names a suite whose discrepancy is deliberately inflated,
    to exercise the failure path.
    """
    if fault is not None and fault not in SELFTEST_SUITES:
        raise ValueError(f"unknown suite {fault!r}")
    rng = np.random.default_rng(seed)
    counts = {name: 0 for name in SELFTEST_SUITES}
    for i in range(n_cases):
        checks, case = _case(rng)
        for name in SELFTEST_SUITES:
            disc, tol = checks[name]
            if name == fault:
                disc += 10.0
            if not disc <= tol:
                failure = {"suite": name, "case_index": i, "discrepancy": disc, "tolerance": tol, **case}
                return {"cases": i, "suite_passes": counts}, failure
            counts[name] += 1
    return {"cases": n_cases, "suite_passes": counts}, None

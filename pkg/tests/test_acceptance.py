"""Numbered acceptance criteria; the terminal summary prints one PASS/FAIL line per criterion."""
import json
import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from condist.cli import main
from condist.mdp import random_mdp
from condist.measures import DistributionCollection, cramer_sq, make_measure, pushforward
from condist.operators import (bellman_backup, conjugated_backup, distributional_backup, initial_collection,
                               q_from_collection, value_iterates, value_iteration, verify_counterexample)
from condist.trainer import Batch, flatten, init_params, loss_and_grad
from condist.transforms import Homeomorphism

from oracles import (central_difference, energy_cramer_sq, enumerated_grid_cramer_sq, grid_cramer_sq,
                     random_lattice_measure)

PHI = Homeomorphism.scaled_h(1.99, 0.001)


def random_collection(mdp, rng, max_atoms=8):
    return DistributionCollection([
        [make_measure(rng.uniform(-5, 5, n), rng.dirichlet(np.ones(n)))
         for n in rng.integers(1, max_atoms + 1, size=mdp.n_actions)]
        for _ in range(mdp.n_states)])


# --------------------------------------------------------------------------- 1

@pytest.mark.acceptance(1, "counterexample: optimal a, transformed-value greedy b, conjugated greedy a")
def test_criterion_1_counterexample(tmp_path, record_property):
    t0 = time.perf_counter()
    code = main(["verify-counterexample", "--R", "10", "--out", str(tmp_path / "rep.json")])
    elapsed = time.perf_counter() - t0
    rep = json.loads((tmp_path / "rep.json").read_text())
    lo, hi = rep["interval"]
    assert code == 0
    assert (rep["optimal_action"], rep["th_action"], rep["tphi_action"]) == ("a", "b", "a")
    assert rep["q_star"] == pytest.approx([5.0, rep["r"]], abs=1e-12)
    assert rep["r"] == pytest.approx(0.5 * (lo + hi), abs=0)
    assert rep["th_fixed_point"][0] == pytest.approx(1.163, abs=1e-3)
    assert elapsed < 1.0

    rng = np.random.default_rng(2024)
    Rs = np.exp(rng.uniform(math.log(0.1), math.log(1e6), 100))
    inversions = sum(verify_counterexample(float(R)).passed for R in Rs)
    record_property("detail", f"R=10 in {elapsed:.2f}s, interval ({lo:.5f}, {hi}); random R: {inversions}/100")
    assert inversions == 100


# --------------------------------------------------------------------------- 2

@pytest.mark.acceptance(2, "expectation of the distributional backup equals the Bellman backup")
def test_criterion_2_lemma(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = 0.0
    for i in range(200):
        n_s = int(rng.integers(1, 6))
        mdp = random_mdp(n_s, int(rng.integers(1, 4)), int(rng.integers(1, 5)), float(rng.uniform(0.05, 0.99)),
                         rng, n_terminal=int(rng.integers(0, n_s)))
        eta = random_collection(mdp, rng)
        lhs = q_from_collection(distributional_backup(mdp, eta))
        rhs = bellman_backup(mdp, q_from_collection(eta))
        worst = max(worst, float(np.abs(lhs - rhs).max()))
    elapsed = time.perf_counter() - t0
    record_property("detail", f"max deviation {worst:.2e} over 200 MDPs in {elapsed:.1f}s")
    assert worst <= 1e-12
    assert elapsed < 10.0


# --------------------------------------------------------------------------- 3

@pytest.mark.acceptance(3, "exact conjugated iterates track value iteration for k = 1..30")
def test_criterion_3_iterates(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(30)
    worst_iter, worst_excess, max_atoms = 0.0, -math.inf, 0
    for _ in range(100):
        # at most one non-terminal outcome per row keeps exact supports small (see notes)
        mdp = random_mdp(int(rng.integers(2, 6)), int(rng.integers(1, 4)), int(rng.integers(1, 5)), 0.9, rng,
                         n_terminal=1, max_continuations=1)
        Qs = value_iterates(mdp, 30)
        Q_star, _ = value_iteration(mdp, tol=1e-13)
        xi = initial_collection(mdp, PHI)
        for k in range(1, 31):
            xi = conjugated_backup(mdp, xi, PHI)
            Q = q_from_collection(xi, PHI)
            worst_iter = max(worst_iter, float(np.abs(Q - Qs[k]).max()))
        bound = 0.9 ** 30 * float(np.abs(Qs[0] - Q_star).max())
        worst_excess = max(worst_excess, float(np.abs(Q - Q_star).max()) - bound)
        max_atoms = max(max_atoms, xi.max_atoms())
    elapsed = time.perf_counter() - t0
    record_property("detail", f"max |Q_k - Q_k^VI| {worst_iter:.2e}, bound excess {worst_excess:.2e}, "
                              f"largest support {max_atoms}, {elapsed:.1f}s")
    assert worst_iter <= 1e-9
    assert worst_excess <= 1e-9
    assert elapsed < 300.0


# --------------------------------------------------------------------------- 4

@pytest.mark.acceptance(4, "Cramer distance vs grid oracle, metric axioms, invariances")
def test_criterion_4_cramer(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst_grid = worst_energy = worst_inv = worst_tri = 0.0
    for i in range(1000):
        mu, nu, rho = (random_lattice_measure(rng) for _ in range(3))
        d = cramer_sq(mu, nu)
        worst_grid = max(worst_grid, abs(d - grid_cramer_sq(mu, nu)))
        worst_energy = max(worst_energy, abs(d - energy_cramer_sq(mu, nu)))
        assert d == cramer_sq(nu, mu)
        assert d >= 0.0
        assert cramer_sq(mu, mu) == 0.0
        l2 = lambda a, b: math.sqrt(cramer_sq(a, b))  # noqa: E731
        worst_tri = max(worst_tri, l2(mu, rho) - l2(mu, nu) - l2(nu, rho))
        r, g = float(rng.uniform(-50, 50)), float(rng.uniform(0.05, 1.0))
        shifted = cramer_sq(pushforward(lambda z: r + z, mu), pushforward(lambda z: r + z, nu))
        scaled = cramer_sq(pushforward(lambda z: g * z, mu), pushforward(lambda z: g * z, nu))
        worst_inv = max(worst_inv, abs(shifted - d), abs(scaled - g * d))
        if i < 5:
            # cross-check the counted grid sum by brute-force enumeration on a narrow support
            a, b = random_lattice_measure(rng, 8, -2, 2), random_lattice_measure(rng, 8, -2, 2)
            assert abs(grid_cramer_sq(a, b) - enumerated_grid_cramer_sq(a, b)) <= 1e-9
    elapsed = time.perf_counter() - t0
    record_property("detail", f"grid {worst_grid:.1e}, energy {worst_energy:.1e}, invariance {worst_inv:.1e}, "
                              f"triangle slack {worst_tri:.1e}, {elapsed:.1f}s")
    assert worst_grid <= 1e-6
    assert worst_energy <= 1e-9
    assert worst_inv <= 1e-9
    assert worst_tri <= 1e-9
    assert elapsed < 60.0


# --------------------------------------------------------------------------- 5

@pytest.mark.acceptance(5, "analytic network gradients match central finite differences")
def test_criterion_5_gradients(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    worst_ratio, n_checked = 0.0, 0
    for _ in range(50):
        S, A = int(rng.integers(1, 6)), int(rng.integers(1, 4))
        N, H, E = int(rng.integers(2, 9)), int(rng.integers(2, 33)), int(rng.integers(2, 17))
        params = init_params(S, A, N, rng, hidden=H, embed=E, alpha0=float(rng.uniform(1, 10)),
                             c=float(rng.uniform(1, 5)))
        target = init_params(S, A, N, rng, hidden=H, embed=E, alpha0=float(rng.uniform(1, 10)))
        # random biases keep pre-activations off the ReLU kink at exactly zero
        for name in ("b1", "b2", "bp", "be", "bx"):
            params[name][...] = rng.normal(scale=0.1, size=params[name].shape)
        B = int(rng.integers(1, 5))
        batch = Batch(rng.integers(0, S, B), rng.integers(0, A, B), rng.uniform(-2, 2, B), rng.integers(0, S, B),
                      rng.random(B) < 0.25)
        gamma = float(rng.uniform(0.5, 0.99))
        _, grads = loss_and_grad(params, batch, target, PHI, gamma)
        an = flatten(grads)
        fd = central_difference(lambda v: loss_and_grad(params.with_flat(v), batch, target, PHI, gamma)[0],
                                params.flat, 1e-5)
        ratio = np.abs(an - fd) / np.maximum(1e-6, 1e-3 * np.maximum(np.abs(an), np.abs(fd)))
        worst_ratio = max(worst_ratio, float(ratio.max()))
        n_checked += an.size
    elapsed = time.perf_counter() - t0
    record_property("detail", f"{n_checked} partials, worst error / tolerance {worst_ratio:.2e}, {elapsed:.1f}s")
    assert worst_ratio <= 1.0
    assert elapsed < 60.0


# --------------------------------------------------------------------------- 6

TRAIN_CONFIG = {"seeds": [0, 1, 2, 3, 4], "n_atoms": 32, "alpha0": 10.0, "learning_rate": 1e-3,
                "total_steps": 50_000}


@pytest.mark.slow
@pytest.mark.acceptance(6, "C2D recovers the optimal policy (>= 4/5 seeds, Q within 0.25 on visited pairs)")
@pytest.mark.parametrize("env", ["chain", "counterexample"])
def test_criterion_6_learning(env, tmp_path, record_property):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({**TRAIN_CONFIG, "env": env, "R": 10.0}))
    t0 = time.perf_counter()
    code = main(["train", str(cfg), "--out", str(tmp_path / "run")])
    elapsed = time.perf_counter() - t0
    summary = json.loads((tmp_path / "run" / "summary.json").read_text())
    good = [s["seed"] for s in summary["seeds"]
            if s["policy_agreement"] == 1.0 and s["max_q_error_visited"] is not None
            and s["max_q_error_visited"] <= 0.25]
    errors = ", ".join(f"{s['max_q_error_visited']:.3f}" for s in summary["seeds"])
    record_property("detail", f"{env}: {len(good)}/5 seeds (Q errors {errors}) in {elapsed:.0f}s")
    assert code == 0
    assert len(good) >= 4
    assert elapsed < 600.0


# --------------------------------------------------------------------------- 7

def _cli(args, cwd):
    proc = subprocess.run([sys.executable, "-m", "condist.cli", *args], cwd=cwd, capture_output=True)
    return proc.returncode, proc.stdout


def _tree(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.mark.acceptance(7, "every CLI command is byte-for-byte deterministic")
def test_criterion_7_determinism(tmp_path, record_property):
    (tmp_path / "cfg.json").write_text(json.dumps({
        "env": "counterexample", "seeds": [0, 1], "n_atoms": 8, "hidden": 16, "embed": 16, "alpha0": 10.0,
        "learning_rate": 1e-3, "min_history": 100, "epsilon_decay_steps": 500, "target_period": 100,
        "total_steps": 800}))
    commands = {
        "verify-counterexample": ["verify-counterexample", "--R", "10", "--out", "{d}/rep.json"],
        "equivalence": ["equivalence", "--n-mdps", "10", "--k-max", "30", "--seed", "1", "--out", "{d}/eq.csv"],
        "cramer-selftest": ["cramer-selftest", "--n-cases", "20", "--seed", "2"],
        "train": ["train", "cfg.json", "--out", "{d}/train"],
    }
    checked = []
    for name, argv in commands.items():
        runs = []
        for d in ("a", "b"):
            (tmp_path / d).mkdir(exist_ok=True)
            code, out = _cli([a.format(d=d) for a in argv], tmp_path)
            runs.append((code, out, _tree(tmp_path / d)))
            assert code == 0, name
        assert runs[0] == runs[1], name
        checked.append(name)
        for d in ("a", "b"):
            for p in (tmp_path / d).rglob("*"):
                if p.is_file():
                    p.unlink()
    record_property("detail", f"identical across two runs: {', '.join(checked)}")

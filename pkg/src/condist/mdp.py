"""Finite MDPs with an indexed reward set.

Kernel rows are lists of ``(reward_index, next_state, probability)``.  Terminal
states are absorbing: their only row entry is a self-loop with a zero reward,
so operators never need a separate episode-end case.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .transforms import DEFAULT_EPS, h_forward, h_inverse

Outcome = tuple[int, int, float]


class InvalidMdp(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


@dataclass(frozen=True, eq=False)
class FiniteMdp:
    n_states: int
    n_actions: int
    rewards: tuple[float, ...]
    gamma: float
    kernel: tuple[tuple[tuple[Outcome, ...], ...], ...]
    terminal: tuple[bool, ...]
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FiniteMdp):
            return NotImplemented
        return (self.n_states, self.n_actions, self.rewards, self.gamma, self.kernel, self.terminal) == (
            other.n_states, other.n_actions, other.rewards, other.gamma, other.kernel, other.terminal)

    def row(self, s: int, a: int) -> tuple[Outcome, ...]:
        return self.kernel[s][a]

    @property
    def nonterminal_states(self) -> list[int]:
        return [s for s in range(self.n_states) if not self.terminal[s]]

    def dense(self) -> np.ndarray:
        """Kernel as an array ``P[s, a, reward_index, next_state]``."""
        if "dense" not in self._cache:
            P = np.zeros((self.n_states, self.n_actions, len(self.rewards), self.n_states))
            for s in range(self.n_states):
                for a in range(self.n_actions):
                    for ri, s2, p in self.kernel[s][a]:
                        P[s, a, ri, s2] += p
            self._cache["dense"] = P
        return self._cache["dense"]

    def _row_cdf(self, s: int, a: int) -> np.ndarray:
        key = ("cdf", s, a)
        if key not in self._cache:
            self._cache[key] = np.cumsum([p for _, _, p in self.kernel[s][a]])
        return self._cache[key]

    def max_abs_return(self) -> float:
        return max(abs(r) for r in self.rewards) / (1.0 - self.gamma)

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "gamma": self.gamma,
            "rewards": list(self.rewards),
            "kernel": [[[[ri, s2, p] for ri, s2, p in row] for row in rows] for rows in self.kernel],
            "terminal": list(self.terminal),
        }


def build_mdp(n_states, n_actions, rewards, gamma, kernel, terminal=None, *, check=True) -> FiniteMdp:
    if terminal is None:
        terminal = [False] * n_states
    k = tuple(
        tuple(tuple((int(ri), int(s2), float(p)) for ri, s2, p in row) for row in rows)
        for rows in kernel
    )
    mdp = FiniteMdp(int(n_states), int(n_actions), tuple(float(r) for r in rewards), float(gamma), k,
                    tuple(bool(t) for t in terminal))
    if check:
        errors = validate(mdp)
        if errors:
            raise InvalidMdp(errors)
    return mdp


def validate(mdp: FiniteMdp) -> list[str]:
    """Return every invariant violation; an empty list means the MDP is well formed."""
    errors = []
    if mdp.n_states < 1 or mdp.n_actions < 1:
        errors.append("n_states and n_actions must be positive")
    if not mdp.rewards:
        errors.append("reward set is empty")
    if not all(math.isfinite(r) for r in mdp.rewards):
        errors.append("rewards must be finite")
    if not (0.0 < mdp.gamma < 1.0):
        errors.append(f"gamma={mdp.gamma} outside (0, 1)")
    if len(mdp.terminal) != mdp.n_states:
        errors.append(f"terminal flags: expected {mdp.n_states}, got {len(mdp.terminal)}")
    if len(mdp.kernel) != mdp.n_states:
        errors.append(f"kernel: expected {mdp.n_states} state rows, got {len(mdp.kernel)}")
        return errors
    for s, rows in enumerate(mdp.kernel):
        if len(rows) != mdp.n_actions:
            errors.append(f"kernel[{s}]: expected {mdp.n_actions} actions, got {len(rows)}")
            continue
        for a, row in enumerate(rows):
            if not row:
                errors.append(f"kernel[{s}][{a}] is empty")
                continue
            total = 0.0
            for ri, s2, p in row:
                if not 0 <= ri < len(mdp.rewards):
                    errors.append(f"kernel[{s}][{a}]: reward index {ri} out of range")
                if not 0 <= s2 < mdp.n_states:
                    errors.append(f"kernel[{s}][{a}]: next state {s2} out of range")
                if not (math.isfinite(p) and p >= 0):
                    errors.append(f"kernel[{s}][{a}]: bad probability {p}")
                total += p
            if abs(total - 1.0) > 1e-12:
                errors.append(f"kernel[{s}][{a}] probabilities sum to {total!r}")
            if s < len(mdp.terminal) and mdp.terminal[s]:
                ok = all(s2 == s and 0 <= ri < len(mdp.rewards) and mdp.rewards[ri] == 0.0
                         for ri, s2, p in row if p > 0)
                if not ok:
                    errors.append(f"terminal state {s}, action {a}: must be a zero-reward self-loop")
    return errors


def sample_transition(mdp: FiniteMdp, s: int, a: int, rng: np.random.Generator) -> tuple[float, int, bool]:
    if mdp.terminal[s]:
        raise ValueError(f"cannot act from terminal state {s}")
    cdf = mdp._row_cdf(s, a)
    k = int(np.searchsorted(cdf, rng.random(), side="right"))
    ri, s2, _ = mdp.kernel[s][a][min(k, len(cdf) - 1)]
    return mdp.rewards[ri], s2, mdp.terminal[s2]


def admissible_r_interval(R: float, eps: float = DEFAULT_EPS) -> tuple[float, float]:
    """Open interval of deterministic rewards ``r`` for which the transformed backup picks the wrong action."""
    if not R > 0:
        raise ValueError(f"R must be positive, got {R}")
    return h_inverse(h_forward(R, eps) / 2.0, eps), R / 2.0


def build_counterexample(R: float, r: float | None = None, gamma: float = 0.99,
                         eps: float = DEFAULT_EPS) -> FiniteMdp:
    """Two-action MDP: ``a`` is a fair coin between rewards 0 and R, ``b`` pays ``r`` surely.

    State 0 is the start state; states 1-3 are the terminals reached by
    (a, reward 0), (a, reward R) and (b, reward r).  ``r`` defaults to the
    midpoint of :func:`admissible_r_interval`.
    """
    lo, hi = admissible_r_interval(R, eps)
    if r is None:
        r = 0.5 * (lo + hi)
    if not lo < r < hi:
        raise ValueError(f"r={r} outside admissible interval ({lo}, {hi})")
    rewards = [0.0, float(R), float(r)]
    kernel = [
        [[(0, 1, 0.5), (1, 2, 0.5)], [(2, 3, 1.0)]],
        [[(0, 1, 1.0)]] * 2,
        [[(0, 2, 1.0)]] * 2,
        [[(0, 3, 1.0)]] * 2,
    ]
    return build_mdp(4, 2, rewards, gamma, kernel, [False, True, True, True])


def random_mdp(n_states: int, n_actions: int, n_rewards: int, gamma: float, rng: np.random.Generator, *,
               reward_range: tuple[float, float] = (-1.0, 1.0), n_terminal: int = 0,
               max_continuations: int | None = None, rewards: list[float] | None = None) -> FiniteMdp:
    """Random finite MDP for tests and sweeps.

    Each non-terminal row puts Dirichlet(1) weights on a random subset of
    ``(reward, next_state)`` outcomes.  The last ``n_terminal`` states are
    terminal (a zero reward is then forced into the reward set).
    ``max_continuations`` caps the number of outcomes per row that lead to a
    non-terminal state; with ``1`` the exact distributional iterates grow only
    linearly in the number of backups.
    """
    if min(n_states, n_actions, n_rewards) < 1:
        raise ValueError("counts must be positive")
    if not 0 <= n_terminal < n_states:
        raise ValueError("need at least one non-terminal state")
    if rewards is None:
        rewards = [float(v) for v in rng.uniform(*reward_range, size=n_rewards)]
    rewards = list(rewards)
    if n_terminal and 0.0 not in rewards:
        rewards[0] = 0.0
    zero = rewards.index(0.0) if 0.0 in rewards else None
    n_live = n_states - n_terminal
    terminal = [s >= n_live for s in range(n_states)]
    outcomes = [(ri, s2) for ri in range(len(rewards)) for s2 in range(n_states)]
    kernel = []
    for s in range(n_states):
        rows = []
        for _ in range(n_actions):
            if terminal[s]:
                rows.append([(zero, s, 1.0)])
                continue
            if max_continuations is None:
                k = int(rng.integers(1, len(outcomes) + 1))
                chosen = [outcomes[i] for i in sorted(rng.choice(len(outcomes), size=k, replace=False))]
            else:
                live = [o for o in outcomes if not terminal[o[1]]]
                dead = [o for o in outcomes if terminal[o[1]]]
                kc = int(rng.integers(1, min(max_continuations, len(live)) + 1))
                kd = int(rng.integers(0, len(dead) + 1)) if dead else 0
                chosen = [live[i] for i in sorted(rng.choice(len(live), size=kc, replace=False))]
                chosen += [dead[i] for i in sorted(rng.choice(len(dead), size=kd, replace=False))] if kd else []
            w = rng.gamma(1.0, size=len(chosen)) + 1e-3
            p = w / w.sum()
            p[-1] = 1.0 - p[:-1].sum()
            if p[-1] < 0:
                p = np.clip(p, 0, None)
                p /= p.sum()
            rows.append([(ri, s2, float(pi)) for (ri, s2), pi in zip(chosen, p)])
        kernel.append(rows)
    return build_mdp(n_states, n_actions, rewards, gamma, kernel, terminal)


def mdp_to_json(mdp: FiniteMdp) -> str:
    # repr-based float encoding in json round-trips doubles exactly
    return json.dumps(mdp.to_dict(), indent=1)


def mdp_from_json(text: str) -> FiniteMdp:
    d = json.loads(text)
    missing = {"n_states", "n_actions", "gamma", "rewards", "kernel"} - d.keys()
    if missing:
        raise InvalidMdp([f"missing field {m}" for m in sorted(missing)])
    return build_mdp(d["n_states"], d["n_actions"], d["rewards"], d["gamma"], d["kernel"], d.get("terminal"))


def save_mdp(mdp: FiniteMdp, path) -> None:
    Path(path).write_text(mdp_to_json(mdp))


def load_mdp(path) -> FiniteMdp:
    return mdp_from_json(Path(path).read_text())


def stochastic_chain(gamma: float = 0.99, advance_prob: float = 0.9, quit_rewards=(0.0, 0.4),
                     goal_reward: float = 1.0) -> FiniteMdp:
    """Five-state chain: states 0-3 are live, state 4 is terminal.

    Action 0 quits to the terminal with a fair-coin reward from ``quit_rewards``.
    Action 1 advances with probability ``advance_prob`` (reward 0) and otherwise
    slips into the terminal with reward 0; advancing from state 3 reaches the
    goal and pays ``goal_reward``.
    """
    q0, q1 = quit_rewards
    rewards = sorted({0.0, float(q0), float(q1), float(goal_reward)})
    ri = {v: i for i, v in enumerate(rewards)}
    T = 4
    slip = 1.0 - advance_prob
    kernel = []
    for s in range(4):
        quit = [(ri[float(q0)], T, 0.5), (ri[float(q1)], T, 0.5)]
        if s < 3:
            adv = [(ri[0.0], s + 1, advance_prob), (ri[0.0], T, slip)]
        else:
            adv = [(ri[float(goal_reward)], T, advance_prob), (ri[0.0], T, slip)]
        kernel.append([quit, adv])
    kernel.append([[(ri[0.0], T, 1.0)]] * 2)
    return build_mdp(5, 2, rewards, gamma, kernel, [False] * 4 + [True])

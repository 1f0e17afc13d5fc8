"""Desk-scale C2D learner.

A small fully-connected distribution network maps a one-hot state to, per
action, ``N`` probabilities (softmax head) and ``N`` free atoms.  The atom head
sees the state features concatenated with a ReLU embedding of all
probabilities, and its output passes through ``alpha * tanh(u / c)`` with a
trainable ``alpha``.  Training follows the DQN loop: epsilon-greedy acting, a
replay buffer, a periodically cloned target network, and the squared Cramer
distance between the predicted measure and the conjugated one-sample target.

Gradients are written out by hand in numpy.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .mdp import FiniteMdp, sample_transition
from .measures import DiscreteMeasure, cramer_terms, make_measure
from .transforms import DomainError, Homeomorphism

log = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = "condist.checkpoint/1"
RECORD_COLUMNS = ["step", "episode", "return", "mean_loss", "epsilon", "alpha", "support_min", "support_max"]
PARAM_NAMES = ("W1", "b1", "W2", "b2", "Wp", "bp", "We", "be", "Wx", "bx", "alpha")


class TrainingError(RuntimeError):
    def __init__(self, message: str, step: int | None = None, diagnostics: dict | None = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step
        self.diagnostics = diagnostics or {}


@dataclass
class TrainerConfig:
    n_atoms: int = 32
    gamma: float = 0.99
    beta: float = 1.99
    h_eps: float = 0.001
    hidden: int = 64
    embed: int = 64
    alpha0: float = 50.0
    c: float = 5.0
    learning_rate: float = 0.5e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 3.125e-4
    clip_norm: float = 10.0
    batch_size: int = 32
    buffer_size: int = 50_000
    target_period: int = 1_000
    epsilon_start: float = 1.0
    epsilon_min: float = 0.01
    epsilon_decay_steps: int = 10_000
    min_history: int = 1_000
    train_frequency: int = 1
    total_steps: int = 50_000
    max_episode_steps: int = 500
    log_interval: int = 1_000
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        positive = ("n_atoms", "hidden", "embed", "c", "learning_rate", "adam_eps", "clip_norm", "batch_size",
                    "buffer_size", "target_period", "epsilon_decay_steps", "train_frequency",
                    "max_episode_steps", "log_interval", "beta", "h_eps")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.total_steps < 0 or self.min_history < 0:
            raise ValueError("total_steps and min_history must be nonnegative")
        if not 0.0 <= self.epsilon_min <= self.epsilon_start <= 1.0:
            raise ValueError("need 0 <= epsilon_min <= epsilon_start <= 1")

    @property
    def phi(self) -> Homeomorphism:
        return Homeomorphism.scaled_h(self.beta, self.h_eps)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainerConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown trainer settings: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------- network

class NetworkParams:
    """Weights of the distribution network; ``c`` is a fixed scale, not trained.

    All parameters live in one flat vector; ``arrays`` holds named views into it.
    """

    def __init__(self, arrays: dict[str, np.ndarray], n_states: int, n_actions: int, n_atoms: int, c: float):
        self.shapes = {k: np.shape(arrays[k]) for k in PARAM_NAMES}
        self.flat = np.concatenate([np.ravel(arrays[k]).astype(float) for k in PARAM_NAMES])
        self.arrays = _views(self.flat, self.shapes)
        self.n_states = n_states
        self.n_actions = n_actions
        self.n_atoms = n_atoms
        self.c = c

    def copy(self) -> "NetworkParams":
        return self.with_flat(self.flat.copy())

    def with_flat(self, flat: np.ndarray) -> "NetworkParams":
        new = object.__new__(NetworkParams)
        new.shapes = self.shapes
        new.flat = flat
        new.arrays = _views(flat, self.shapes)
        new.n_states, new.n_actions, new.n_atoms, new.c = self.n_states, self.n_actions, self.n_atoms, self.c
        return new

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    @property
    def alpha(self) -> float:
        return float(self.arrays["alpha"][0])

    def zeros_like(self) -> dict[str, np.ndarray]:
        return _views(np.zeros_like(self.flat), self.shapes)

    def n_parameters(self) -> int:
        return self.flat.size


def _views(flat: np.ndarray, shapes: dict) -> dict[str, np.ndarray]:
    out, i = {}, 0
    for k in PARAM_NAMES:
        n = int(np.prod(shapes[k]))
        out[k] = flat[i:i + n].reshape(shapes[k])
        i += n
    return out


def flatten(grads: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([np.ravel(grads[k]) for k in PARAM_NAMES])


def init_params(n_states: int, n_actions: int, n_atoms: int, rng: np.random.Generator, *, hidden: int = 64,
                embed: int = 64, alpha0: float = 50.0, c: float = 5.0) -> NetworkParams:
    """Uniform fan-in initialisation, zero biases."""
    AN = n_actions * n_atoms

    def dense(n_out, n_in):
        bound = 1.0 / math.sqrt(n_in)
        return rng.uniform(-bound, bound, size=(n_out, n_in))

    arrays = {
        "W1": dense(hidden, n_states), "b1": np.zeros(hidden),
        "W2": dense(hidden, hidden), "b2": np.zeros(hidden),
        "Wp": dense(AN, hidden), "bp": np.zeros(AN),
        "We": dense(embed, AN), "be": np.zeros(embed),
        "Wx": dense(AN, embed + hidden), "bx": np.zeros(AN),
        "alpha": np.array([float(alpha0)]),
    }
    return NetworkParams(arrays, n_states, n_actions, n_atoms, float(c))


def _forward(params: NetworkParams, states: np.ndarray):
    """Batched forward pass; returns ``(masses[B,A,N], atoms[B,A,N], cache)``."""
    w = params.arrays
    B = states.shape[0]
    A, N = params.n_actions, params.n_atoms
    z1 = w["W1"].T[states] + w["b1"]  # one-hot input: row lookup
    h1 = np.maximum(z1, 0.0)
    z2 = h1 @ w["W2"].T + w["b2"]
    psi = np.maximum(z2, 0.0)
    logits = (psi @ w["Wp"].T + w["bp"]).reshape(B, A, N)
    logits = logits - logits.max(axis=2, keepdims=True)
    ex = np.exp(logits)
    p = ex / ex.sum(axis=2, keepdims=True)
    pf = p.reshape(B, A * N)
    ze = pf @ w["We"].T + w["be"]
    e = np.maximum(ze, 0.0)
    cat = np.concatenate([e, psi], axis=1)
    u = cat @ w["Wx"].T + w["bx"]
    t = np.tanh(u / params.c).reshape(B, A, N)
    x = w["alpha"][0] * t
    cache = (states, z1, h1, z2, psi, p, pf, ze, cat, t)
    return p, x, cache


def forward(params: NetworkParams, s) -> tuple[np.ndarray, np.ndarray]:
    """Per-action ``(masses, atoms)`` for one state (arrays of shape ``[A, N]``) or a batch.

    Atoms are left unordered.
    """
    states = np.atleast_1d(np.asarray(s, dtype=np.int64))
    p, x, _ = _forward(params, states)
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(x))):
        raise TrainingError("non-finite network output")
    if np.ndim(s) == 0:
        return p[0], x[0]
    return p, x


def _backward(params: NetworkParams, cache, gp: np.ndarray, gx: np.ndarray) -> dict[str, np.ndarray]:
    """Backpropagate upstream gradients on masses ``gp[B,A,N]`` and atoms ``gx[B,A,N]``."""
    w = params.arrays
    states, z1, h1, z2, psi, p, pf, ze, cat, t = cache
    B = states.shape[0]
    H = psi.shape[1]
    E = ze.shape[1]
    alpha = w["alpha"][0]
    g = {}
    g["alpha"] = np.array([np.sum(gx * t)])
    gu = (gx * alpha * (1.0 - t * t) / params.c).reshape(B, -1)
    g["Wx"] = gu.T @ cat
    g["bx"] = gu.sum(axis=0)
    gcat = gu @ w["Wx"]
    ge, gpsi = gcat[:, :E], gcat[:, E:].copy()
    gze = ge * (ze > 0)
    g["We"] = gze.T @ pf
    g["be"] = gze.sum(axis=0)
    gpf = gze @ w["We"]
    gp_total = gp + gpf.reshape(p.shape)
    gl = p * (gp_total - np.sum(gp_total * p, axis=2, keepdims=True))
    gl = gl.reshape(B, -1)
    g["Wp"] = gl.T @ psi
    g["bp"] = gl.sum(axis=0)
    gpsi += gl @ w["Wp"]
    gz2 = gpsi * (z2 > 0)
    g["W2"] = gz2.T @ h1
    g["b2"] = gz2.sum(axis=0)
    gz1 = (gz2 @ w["W2"]) * (z1 > 0)
    gW1 = np.zeros((H, params.n_states))
    np.add.at(gW1.T, states, gz1)
    g["W1"] = gW1
    g["b1"] = gz1.sum(axis=0)
    return g


def greedy_action(output, phi: Homeomorphism) -> int:
    """Lowest-index maximiser of ``sum_i p_i phi^-1(x_i)`` over actions."""
    p, x = output
    q = np.sum(np.asarray(p) * np.asarray(phi.inverse(np.asarray(x, dtype=float))), axis=-1)
    return int(np.argmax(q))


def q_values(params: NetworkParams, phi: Homeomorphism, states=None) -> np.ndarray:
    """``sum_i p_i phi^-1(x_i)`` for every state (or the given states) and action."""
    states = np.arange(params.n_states) if states is None else np.asarray(states)
    p, x = forward(params, states)
    return np.sum(p * phi.inverse(x), axis=-1)


# --------------------------------------------------------------------------- targets and loss

@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray

    def __len__(self) -> int:
        return self.states.shape[0]

    @classmethod
    def of(cls, transitions) -> "Batch":
        s, a, r, s2, d = zip(*transitions)
        return cls(np.array(s, dtype=np.int64), np.array(a, dtype=np.int64), np.array(r, dtype=float),
                   np.array(s2, dtype=np.int64), np.array(d, dtype=bool))


def _target_arrays(batch: Batch, target_params: NetworkParams, phi: Homeomorphism, gamma: float):
    """Target atoms/masses ``[B, N]``; terminal rows put every atom at ``phi(r)``."""
    p, x, _ = _forward(target_params, batch.next_states)
    zx = phi.inverse(x)
    q = np.sum(p * zx, axis=2)
    a_star = np.argmax(q, axis=1)
    idx = np.arange(len(batch))
    r = batch.rewards[:, None]
    z = np.where(batch.terminals[:, None], r, r + gamma * zx[idx, a_star])
    try:
        atoms = np.asarray(phi.forward(z), dtype=float)
    except DomainError as err:
        raise TrainingError("non-finite target atoms") from err
    return atoms, p[idx, a_star]


def target_distribution(transition, target_params: NetworkParams, phi: Homeomorphism,
                        gamma: float) -> DiscreteMeasure:
    """One-sample conjugated target for ``(s, a, r, s', terminal)``."""
    s, a, r, s2, terminal = transition
    if terminal:
        return make_measure([phi.forward(float(r))], [1.0])
    p, x = forward(target_params, s2)
    a_star = greedy_action((p, x), phi)
    atoms = phi.forward(r + gamma * phi.inverse(x[a_star]))
    return make_measure(atoms, p[a_star])


def loss_and_grad(params: NetworkParams, batch: Batch, target_params: NetworkParams, phi: Homeomorphism,
                  gamma: float) -> tuple[float, dict[str, np.ndarray]]:
    """Mean squared Cramer distance between targets and predictions, with its gradient.

    Targets come from ``target_params`` and carry no gradient.
    """
    B = len(batch)
    if B == 0:
        raise ValueError("empty batch")
    y, q = _target_arrays(batch, target_params, phi, gamma)
    p, x, cache = _forward(params, batch.states)
    idx = np.arange(B)
    mu_p = p[idx, batch.actions]
    mu_x = x[idx, batch.actions]
    losses, g_x, g_p = cramer_terms(mu_x, mu_p, y, q)
    loss = float(losses.mean())
    if not math.isfinite(loss):
        raise TrainingError("non-finite loss")
    gx = np.zeros_like(x)
    gp = np.zeros_like(p)
    gx[idx, batch.actions] = g_x / B
    gp[idx, batch.actions] = g_p / B
    return loss, _backward(params, cache, gp, gx)


# --------------------------------------------------------------------------- optimiser

@dataclass
class OptimizerState:
    """Adam moments, stored flat in the parameter layout."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, params: NetworkParams) -> "OptimizerState":
        return cls(np.zeros_like(params.flat), np.zeros_like(params.flat), 0)


def global_norm(grads) -> float:
    if isinstance(grads, np.ndarray):
        return math.sqrt(float(grads @ grads))
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_by_global_norm(grads, clip_norm: float):
    norm = global_norm(grads)
    if norm <= clip_norm or norm == 0.0:
        return grads
    scale = clip_norm / norm
    if isinstance(grads, np.ndarray):
        return grads * scale
    return {k: g * scale for k, g in grads.items()}


def _adam_update(opt: OptimizerState, flat: np.ndarray, grads: np.ndarray, config: TrainerConfig) -> None:
    """In-place clipped Adam update of ``flat`` and ``opt``."""
    g = clip_by_global_norm(grads, config.clip_norm)
    b1, b2 = config.adam_beta1, config.adam_beta2
    opt.step += 1
    t = opt.step
    lr_t = config.learning_rate * math.sqrt(1.0 - b2 ** t) / (1.0 - b1 ** t)
    opt.m *= b1
    opt.m += (1.0 - b1) * g
    opt.v *= b2
    opt.v += (1.0 - b2) * (g * g)
    flat -= lr_t * opt.m / (np.sqrt(opt.v) + config.adam_eps)


def optimizer_step(opt: OptimizerState, params: NetworkParams, grads,
                   config: TrainerConfig) -> tuple[OptimizerState, NetworkParams]:
    """Global-norm clipping followed by a bias-corrected Adam update; inputs are not modified."""
    g = grads if isinstance(grads, np.ndarray) else flatten(grads)
    new_opt = OptimizerState(opt.m.copy(), opt.v.copy(), opt.step)
    new_params = params.copy()
    _adam_update(new_opt, new_params.flat, g, config)
    return new_opt, new_params


# --------------------------------------------------------------------------- replay and acting

class ReplayBuffer:
    """Fixed-capacity circular transition store with uniform sampling (with replacement)."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.states = np.zeros(capacity, dtype=np.int64)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros(capacity, dtype=np.int64)
        self.terminals = np.zeros(capacity, dtype=bool)
        self.cursor = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def push(self, transition) -> "ReplayBuffer":
        s, a, r, s2, d = transition
        i = self.cursor
        self.states[i], self.actions[i], self.rewards[i], self.next_states[i], self.terminals[i] = s, a, r, s2, d
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        return self

    def transition(self, i: int):
        return (int(self.states[i]), int(self.actions[i]), float(self.rewards[i]), int(self.next_states[i]),
                bool(self.terminals[i]))

    def sample(self, k: int, rng: np.random.Generator) -> Batch:
        if self.size < k:
            raise ValueError(f"cannot sample {k} transitions from a buffer holding {self.size}")
        idx = rng.integers(0, self.size, size=k)
        return Batch(self.states[idx], self.actions[idx], self.rewards[idx], self.next_states[idx],
                     self.terminals[idx])


def replay_push(buf: ReplayBuffer, transition) -> ReplayBuffer:
    return buf.push(transition)


def replay_sample(buf: ReplayBuffer, k: int, rng: np.random.Generator) -> Batch:
    return buf.sample(k, rng)


def epsilon_at(step: int, config: TrainerConfig) -> float:
    frac = min(max(step, 0) / config.epsilon_decay_steps, 1.0)
    return config.epsilon_start + frac * (config.epsilon_min - config.epsilon_start)


def act_epsilon_greedy(params: NetworkParams, s: int, step: int, config: TrainerConfig,
                       rng: np.random.Generator, phi: Homeomorphism | None = None) -> int:
    if rng.random() < epsilon_at(step, config):
        return int(rng.integers(params.n_actions))
    return greedy_action(forward(params, s), phi or config.phi)


# --------------------------------------------------------------------------- environment and loop

class EpisodicEnv:
    """Episodes over a :class:`FiniteMdp`, ending on a terminal state or a step cap."""

    def __init__(self, mdp: FiniteMdp, start_state: int = 0, max_episode_steps: int = 500):
        if mdp.terminal[start_state]:
            raise ValueError("start state must be non-terminal")
        self.mdp = mdp
        self.start_state = start_state
        self.max_episode_steps = max_episode_steps
        self.state = start_state
        self.t = 0

    @property
    def n_states(self) -> int:
        return self.mdp.n_states

    @property
    def n_actions(self) -> int:
        return self.mdp.n_actions

    def reset(self) -> int:
        self.state = self.start_state
        self.t = 0
        return self.state

    def step(self, a: int, rng: np.random.Generator) -> tuple[float, int, bool, bool]:
        """Returns ``(reward, next_state, terminal, truncated)``."""
        r, s2, terminal = sample_transition(self.mdp, self.state, a, rng)
        self.state = s2
        self.t += 1
        return r, s2, terminal, (not terminal and self.t >= self.max_episode_steps)


@dataclass
class LearningRecord:
    rows: list[dict] = field(default_factory=list)
    alpha_trace: list[tuple[int, float]] = field(default_factory=list)
    loss_trace: list[tuple[int, float]] = field(default_factory=list)
    visited: np.ndarray | None = None
    params: NetworkParams | None = None
    diverged: bool = False
    diagnostics: dict = field(default_factory=dict)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=RECORD_COLUMNS, lineterminator="\n")
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def train(env: EpisodicEnv, config: TrainerConfig, *, raise_on_divergence: bool = False) -> LearningRecord:
    """Run the single-actor C2D loop and return the learning record.

    One CSV row is emitted per finished episode with its undiscounted return.  ``mean_loss`` averages the
    updates made since the previous row (empty before learning starts), and
    the support columns give the min/max predicted atom seen while acting.
    """
    rng = np.random.default_rng(config.seed)
    phi = config.phi
    params = init_params(env.n_states, env.n_actions, config.n_atoms, rng, hidden=config.hidden,
                         embed=config.embed, alpha0=config.alpha0, c=config.c)
    record = LearningRecord(visited=np.zeros((env.n_states, env.n_actions), dtype=bool))
    if config.total_steps == 0:
        record.params = params
        return record
    target = params.copy()
    opt = OptimizerState.zeros(params)
    buf = ReplayBuffer(config.buffer_size)
    s = env.reset()
    episode, ep_return = 0, 0.0
    losses: list[float] = []
    smin, smax = math.inf, -math.inf
    for step in range(config.total_steps):
        p, x = forward(params, s)
        smin, smax = min(smin, float(x.min())), max(smax, float(x.max()))
        eps = epsilon_at(step, config)
        if rng.random() < eps:
            a = int(rng.integers(env.n_actions))
        else:
            a = greedy_action((p, x), phi)
        record.visited[s, a] = True
        r, s2, terminal, truncated = env.step(a, rng)
        buf.push((s, a, r, s2, terminal))
        ep_return += r
        if step >= config.min_history and len(buf) >= config.batch_size and step % config.train_frequency == 0:
            batch = buf.sample(config.batch_size, rng)
            try:
                loss, grads = loss_and_grad(params, batch, target, phi, config.gamma)
            except TrainingError as err:
                record.diverged = True
                record.diagnostics = {"step": step, "error": str(err), "alpha": params.alpha}
                record.params = params
                log.error("training diverged at step %d: %s", step, err)
                if raise_on_divergence:
                    raise TrainingError(str(err), step, record.diagnostics) from err
                return record
            _adam_update(opt, params.flat, flatten(grads), config)
            losses.append(loss)
        if step % config.target_period == 0:
            target = params.copy()
        if step % config.log_interval == 0:
            record.alpha_trace.append((step, params.alpha))
        if terminal or truncated:
            record.rows.append({
                "step": step + 1, "episode": episode, "return": ep_return,
                "mean_loss": float(np.mean(losses)) if losses else "",
                "epsilon": eps, "alpha": params.alpha, "support_min": smin, "support_max": smax,
            })
            if losses:
                record.loss_trace.append((step + 1, float(np.mean(losses))))
            losses = []
            episode += 1
            ep_return = 0.0
            smin, smax = math.inf, -math.inf
            s = env.reset()
        else:
            s = s2
    record.params = params
    return record


# --------------------------------------------------------------------------- checkpoints

def save_checkpoint(params: NetworkParams, path) -> None:
    doc = {
        "schema": CHECKPOINT_SCHEMA,
        "n_states": params.n_states, "n_actions": params.n_actions, "n_atoms": params.n_atoms, "c": params.c,
        "params": {k: {"shape": list(v.shape), "values": v.ravel().tolist()} for k, v in params.arrays.items()},
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> NetworkParams:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema") != CHECKPOINT_SCHEMA:
        raise ValueError(f"unsupported checkpoint schema {doc.get('schema')!r}")
    arrays = {k: np.array(v["values"], dtype=float).reshape(v["shape"]) for k, v in doc["params"].items()}
    if set(arrays) != set(PARAM_NAMES):
        raise ValueError("checkpoint parameter set does not match the network")
    return NetworkParams(arrays, doc["n_states"], doc["n_actions"], doc["n_atoms"], float(doc["c"]))

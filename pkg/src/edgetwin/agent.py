"""Constrained deep Q-learning for cache replacement.

Two fully-connected ReLU value heads are trained side by side: a reward
head estimating discounted future cache hits and a cost head estimating
discounted future penalties. Action selection is epsilon-greedy over the
*feasible* set: actions whose cost estimate plus the discounted auxiliary
margin stays within the cost budget. With the default budget of infinity
the gate is vacuous and the agent reduces to a plain DQN.

Both heads are plain numpy with explicit backpropagation and SGD, so the
whole training trajectory is a deterministic function of (config, seed)
and gradients can be audited against finite differences.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from .errors import BufferUnderfullError, TrainingDivergenceError
from .netmodel import Action, CmdpState


@dataclass(frozen=True)
class AgentConfig:
    gamma: float = 0.95
    learning_rate: float = 0.1
    batch_size: int = 64
    replay_capacity: int = 20000
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_steps: int = 5000
    target_sync_period: int = 200
    hidden: tuple[int, ...] = (128, 64)
    aux_cost: float = 0.0          # per-step Lyapunov margin added to the cost head
    cost_budget: float = math.inf  # feasibility bound on the Lyapunov value
    train_period: int = 1          # decisions between SGD steps
    train_repeats: int = 1         # SGD steps (fresh batches) per training event

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must be in [0, 1)")
        if self.batch_size > self.replay_capacity:
            raise ValueError("batch_size must not exceed replay_capacity")
        if self.aux_cost < 0:
            raise ValueError("aux_cost must be >= 0")
        if self.eps_decay_steps < 1:
            raise ValueError("eps_decay_steps must be >= 1")
        if self.train_period < 1:
            raise ValueError("train_period must be >= 1")
        if self.train_repeats < 1:
            raise ValueError("train_repeats must be >= 1")


class Mlp:
    """Fully-connected ReLU network with a linear output layer."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator):
        self.sizes = list(sizes)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
            self.biases.append(rng.uniform(-bound, bound, fan_out))

    def forward(self, x: np.ndarray) -> np.ndarray:
        a = x
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            a = np.maximum(a @ w + b, 0.0)
        return a @ self.weights[-1] + self.biases[-1]

    def _forward_cached(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        acts = [x]
        a = x
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            a = np.maximum(a @ w + b, 0.0)
            acts.append(a)
        out = a @ self.weights[-1] + self.biases[-1]
        return out, acts

    def loss_and_grads(self, x: np.ndarray, actions: np.ndarray,
                       targets: np.ndarray) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
        """Mean squared Bellman error on the taken actions, with gradients
        for every weight and bias."""
        out, acts = self._forward_cached(x)
        batch = x.shape[0]
        picked = out[np.arange(batch), actions]
        err = picked - targets
        loss = float(np.mean(err * err))
        dout = np.zeros_like(out)
        dout[np.arange(batch), actions] = 2.0 * err / batch
        gw: list[np.ndarray] = [np.zeros(0)] * len(self.weights)
        gb: list[np.ndarray] = [np.zeros(0)] * len(self.biases)
        delta = dout
        for layer in range(len(self.weights) - 1, -1, -1):
            gw[layer] = acts[layer].T @ delta
            gb[layer] = delta.sum(axis=0)
            if layer > 0:
                delta = (delta @ self.weights[layer].T) * (acts[layer] > 0)
        return loss, gw, gb

    def sgd_step(self, gw: Sequence[np.ndarray], gb: Sequence[np.ndarray],
                 lr: float) -> None:
        for i in range(len(self.weights)):
            self.weights[i] -= lr * gw[i]
            self.biases[i] -= lr * gb[i]

    def copy_from(self, other: "Mlp") -> None:
        self.weights = [w.copy() for w in other.weights]
        self.biases = [b.copy() for b in other.biases]

    def get_flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)

    def set_flat(self, flat: np.ndarray) -> None:
        pos = 0
        for i in range(len(self.weights)):
            wn = self.weights[i].size
            self.weights[i] = flat[pos:pos + wn].reshape(self.weights[i].shape).copy()
            pos += wn
            bn = self.biases[i].size
            self.biases[i] = flat[pos:pos + bn].copy()
            pos += bn
        if pos != flat.size:
            raise ValueError("flat vector size mismatch")


class StateEncoder:
    """Deterministic fixed-length encoding of decision states.

    Base layout: [BS one-hot | recency scaled to [0,1] | log-scaled
    frequency]. The extended layout appends [client one-hot | load vector].
    """

    def __init__(self, n_bs: int, n_clients: int, t_scale: int,
                 f_scale: int, extended: bool):
        self.n_bs = n_bs
        self.n_clients = n_clients
        self.t_scale = max(int(t_scale), 1)
        self.f_scale = max(int(f_scale), 2)
        self.extended = extended
        self.width = n_bs + 2 + (n_clients + n_bs if extended else 0)

    def encode(self, s: CmdpState) -> np.ndarray:
        v = np.zeros(self.width)
        v[s.n] = 1.0
        v[self.n_bs] = (s.t_n + 1) / (self.t_scale + 1)
        v[self.n_bs + 1] = math.log1p(max(s.f_n, 0)) / math.log1p(self.f_scale)
        if self.extended:
            if s.j is None or s.loads is None:
                raise ValueError("extended encoder needs an extended state")
            v[self.n_bs + 2 + s.j] = 1.0
            v[self.n_bs + 2 + self.n_clients:] = s.loads
        return v


class ReplayBuffer:
    """Fixed-capacity ring buffer with uniform seeded sampling."""

    def __init__(self, capacity: int, state_dim: int, rng: np.random.Generator):
        self.capacity = capacity
        self.states = np.zeros((capacity, state_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.penalties = np.zeros(capacity)
        self.next_states = np.zeros((capacity, state_dim))
        self.terminals = np.zeros(capacity, dtype=bool)
        self.size = 0
        self._pos = 0
        self._rng = rng

    def store(self, s: np.ndarray, a: int, r: float, w: float,
              s_next: np.ndarray | None, terminal: bool) -> None:
        i = self._pos
        self.states[i] = s
        self.actions[i] = a
        self.rewards[i] = r
        self.penalties[i] = w
        self.next_states[i] = 0.0 if s_next is None else s_next
        self.terminals[i] = terminal
        self._pos = (self._pos + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int) -> dict[str, np.ndarray]:
        if self.size < batch_size:
            raise BufferUnderfullError(
                f"buffer holds {self.size} < batch {batch_size}")
        idx = self._rng.integers(0, self.size, size=batch_size)
        return {
            "states": self.states[idx],
            "actions": self.actions[idx],
            "rewards": self.rewards[idx],
            "penalties": self.penalties[idx],
            "next_states": self.next_states[idx],
            "terminals": self.terminals[idx],
        }


@dataclass
class CumulativeReturns:
    """Discounted evaluation-time accumulators."""

    reward_return: float
    cost_return: float


def discounted_returns(log: Sequence[tuple[float, float]],
                       gamma: float) -> CumulativeReturns:
    """Discounted sums of (reward, penalty) pairs along a trajectory."""
    r_sum = 0.0
    w_sum = 0.0
    g = 1.0
    for r, w in log:
        r_sum += g * r
        w_sum += g * w
        g *= gamma
    return CumulativeReturns(reward_return=r_sum, cost_return=w_sum)


CHECKPOINT_VERSION = 1


class DqnAgent:
    """Reward/cost Q-heads with target copies, replay, and a feasibility
    gate on the cost head."""

    def __init__(self, config: AgentConfig, state_dim: int, n_actions: int,
                 seed: int = 0):
        self.config = config
        self.state_dim = state_dim
        self.n_actions = n_actions
        ss = np.random.SeedSequence([int(seed), 0xA9E7])
        init_rng, replay_rng = [np.random.default_rng(s) for s in ss.spawn(2)]
        sizes = [state_dim, *config.hidden, n_actions]
        self.q_reward = Mlp(sizes, init_rng)
        self.q_cost = Mlp(sizes, init_rng)
        self.q_reward_target = Mlp(sizes, init_rng)
        self.q_cost_target = Mlp(sizes, init_rng)
        self.q_reward_target.copy_from(self.q_reward)
        self.q_cost_target.copy_from(self.q_cost)
        self.replay = ReplayBuffer(config.replay_capacity, state_dim, replay_rng)
        self.decision_steps = 0
        self.train_steps = 0

    # -- inference ----------------------------------------------------------

    def _check_finite(self, values: np.ndarray, what: str) -> np.ndarray:
        if not np.all(np.isfinite(values)):
            bad = int(np.sum(~np.isfinite(values)))
            raise TrainingDivergenceError(
                f"non-finite {what}: {bad}/{values.size} entries, "
                f"train_steps={self.train_steps}")
        return values

    def q_values(self, s_enc: np.ndarray) -> np.ndarray:
        out = self.q_reward.forward(s_enc[None, :])[0]
        return self._check_finite(out, "reward head output")

    def cost_values(self, s_enc: np.ndarray) -> np.ndarray:
        out = self.q_cost.forward(s_enc[None, :])[0]
        return self._check_finite(out, "cost head output")

    def _margin(self) -> float:
        # constant per-step margin accumulated over the discounted horizon
        return self.config.aux_cost / (1.0 - self.config.gamma)

    def lyapunov_value(self, s_enc: np.ndarray, a: int,
                       aux_cost: float | None = None) -> float:
        mu = self.config.aux_cost if aux_cost is None else aux_cost
        if mu < 0:
            raise ValueError("aux_cost must be >= 0")
        return float(self.cost_values(s_enc)[a]) + mu / (1.0 - self.config.gamma)

    def feasible_actions(self, s_enc: np.ndarray,
                         cost_budget: float | None = None) -> np.ndarray:
        """Indices whose Lyapunov value stays within the budget; never empty
        (falls back to the single lowest-cost action)."""
        budget = self.config.cost_budget if cost_budget is None else cost_budget
        vals = self.cost_values(s_enc) + self._margin()
        feasible = np.flatnonzero(vals <= budget)
        if feasible.size == 0:
            return np.array([int(np.argmin(vals))])
        return feasible

    def epsilon(self) -> float:
        c = self.config
        frac = min(self.decision_steps / c.eps_decay_steps, 1.0)
        return c.eps_start + (c.eps_end - c.eps_start) * frac

    def select_action(self, s_enc: np.ndarray, rng: np.random.Generator,
                      valid_actions: np.ndarray | None = None) -> Action:
        """Epsilon-greedy over the feasible set; greedy ties break to the
        lowest action index.

        valid_actions optionally narrows exploration and the greedy argmax
        to the actions executable at this decision (the experiment loop
        passes the coverage-valid set); the cost-feasibility gate applies
        either way."""
        feasible = self.feasible_actions(s_enc)
        if valid_actions is not None:
            narrowed = np.intersect1d(feasible, valid_actions)
            if narrowed.size > 0:
                feasible = narrowed
        eps = self.epsilon()
        self.decision_steps += 1
        if rng.random() < eps:
            return Action(value=int(rng.choice(feasible)))
        q = self.q_values(s_enc)
        masked = np.full(self.n_actions, -np.inf)
        masked[feasible] = q[feasible]
        return Action(value=int(np.argmax(masked)))

    # -- training -----------------------------------------------------------

    def store_transition(self, s_enc: np.ndarray, a: int, r: float, w: float,
                         s_next: np.ndarray | None, terminal: bool) -> None:
        self.replay.store(s_enc, a, r, w, s_next, terminal)

    def _feasible_mask(self, cost_out: np.ndarray) -> np.ndarray:
        vals = cost_out + self._margin()
        mask = vals <= self.config.cost_budget
        empty = ~mask.any(axis=1)
        if empty.any():
            fallback = np.argmin(vals[empty], axis=1)
            mask[np.flatnonzero(empty), fallback] = True
        return mask

    def train_step(self, batch: dict[str, np.ndarray] | None = None
                   ) -> tuple[float, float]:
        """One SGD step per head on a sampled (or given) batch; returns the
        two losses."""
        cfg = self.config
        if batch is None:
            batch = self.replay.sample(cfg.batch_size)
        s = batch["states"]
        a = batch["actions"]
        r = batch["rewards"]
        w = batch["penalties"]
        s2 = batch["next_states"]
        terminal = batch["terminals"]

        q_r_next = self.q_reward_target.forward(s2)
        q_w_next = self.q_cost_target.forward(s2)
        mask = self._feasible_mask(self.q_cost.forward(s2))
        masked_next = np.where(mask, q_r_next, -np.inf)
        best_next = masked_next.max(axis=1)
        greedy_next = masked_next.argmax(axis=1)
        target_r = np.where(terminal, r, r + cfg.gamma * best_next)
        cost_next = q_w_next[np.arange(len(greedy_next)), greedy_next]
        target_w = np.where(terminal, w, w + cfg.gamma * cost_next)

        loss_r, gw_r, gb_r = self.q_reward.loss_and_grads(s, a, target_r)
        loss_w, gw_w, gb_w = self.q_cost.loss_and_grads(s, a, target_w)
        if not (math.isfinite(loss_r) and math.isfinite(loss_w)):
            raise TrainingDivergenceError(
                f"non-finite loss at train step {self.train_steps}: "
                f"reward={loss_r}, cost={loss_w}")
        self.q_reward.sgd_step(gw_r, gb_r, cfg.learning_rate)
        self.q_cost.sgd_step(gw_w, gb_w, cfg.learning_rate)
        self.train_steps += 1
        if self.train_steps % cfg.target_sync_period == 0:
            self.sync_target()
        return loss_r, loss_w

    def sync_target(self) -> None:
        self.q_reward_target.copy_from(self.q_reward)
        self.q_cost_target.copy_from(self.q_cost)

    # -- persistence ---------------------------------------------------------

    def save(self, path: str) -> None:
        """Checkpoint: config echo, all four networks, replay RNG state, and
        schedule positions; round-trips bit-exactly."""
        arrays: dict[str, np.ndarray] = {}
        for name, net in (("qr", self.q_reward), ("qc", self.q_cost),
                          ("qrt", self.q_reward_target), ("qct", self.q_cost_target)):
            for i, (wm, bv) in enumerate(zip(net.weights, net.biases)):
                arrays[f"{name}_w{i}"] = wm
                arrays[f"{name}_b{i}"] = bv
        cfg = asdict(self.config)
        cfg["hidden"] = list(cfg["hidden"])
        meta = {
            "format_version": CHECKPOINT_VERSION,
            "config": cfg,
            "state_dim": self.state_dim,
            "n_actions": self.n_actions,
            "decision_steps": self.decision_steps,
            "train_steps": self.train_steps,
            "replay_rng": self.replay._rng.bit_generator.state,
        }
        np.savez(path if path.endswith(".npz") else path + ".npz",
                 meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
                 **arrays)

    @staticmethod
    def load(path: str) -> "DqnAgent":
        with np.load(path if path.endswith(".npz") else path + ".npz") as data:
            meta = json.loads(bytes(data["meta"]).decode())
            if meta["format_version"] != CHECKPOINT_VERSION:
                raise ValueError(
                    f"unsupported agent checkpoint version {meta['format_version']}")
            cfg_d = dict(meta["config"])
            cfg_d["hidden"] = tuple(cfg_d["hidden"])
            if cfg_d.get("cost_budget") is None:
                cfg_d["cost_budget"] = math.inf
            agent = DqnAgent(AgentConfig(**cfg_d), meta["state_dim"],
                             meta["n_actions"], seed=0)
            for name, net in (("qr", agent.q_reward), ("qc", agent.q_cost),
                              ("qrt", agent.q_reward_target),
                              ("qct", agent.q_cost_target)):
                for i in range(len(net.weights)):
                    net.weights[i] = data[f"{name}_w{i}"].copy()
                    net.biases[i] = data[f"{name}_b{i}"].copy()
            agent.decision_steps = int(meta["decision_steps"])
            agent.train_steps = int(meta["train_steps"])
            agent.replay._rng.bit_generator.state = meta["replay_rng"]
            return agent

"""Reliability intervention modules wrapped around the agent-environment loop.

Three independently switchable interventions:

* state: the decision state is extended with the requesting client index
  and the normalized per-BS load vector, so the policy can see load;
* action: a replacement targeting an overloaded BS is muted by chance and
  replaced by a backup choice - the least-recently-used slot on the
  least-loaded BS covering the requesting client;
* reward: the training reward is reduced by the average excess of each BS
  load over the network minimum, steering the policy toward balance.

All interventions are strictly additive: with every module disabled the
wrapped loop is step-for-step identical to the bare loop.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .netmodel import Action, CacheNetwork, CmdpState


@dataclass(frozen=True)
class ReliabilityConfig:
    enable_state: bool = False
    enable_action: bool = False
    enable_reward: bool = False
    overload_threshold: float = 0.2   # load spread at which a BS counts as overloaded
    mute_prob: float = 1.0            # chance an overloaded-target action is muted
    balance_weight: float = 1.0       # scale of the load-spread reward penalty

    def __post_init__(self) -> None:
        if not 0.0 < self.overload_threshold < 1.0:
            raise ValueError("overload_threshold must be in (0, 1)")
        if not 0.0 <= self.mute_prob <= 1.0:
            raise ValueError("mute_prob must be in [0, 1]")
        if self.balance_weight < 0:
            raise ValueError("balance_weight must be >= 0")


@dataclass
class MutationRecord:
    step: int
    original_action: int
    final_action: int
    mutated: bool
    target_load: float
    min_load: float


@dataclass
class InterventionLog:
    """Cumulative mutation count plus per-decision records."""

    records: list[MutationRecord] = field(default_factory=list)

    @property
    def mutation_count(self) -> int:
        return sum(1 for r in self.records if r.mutated)

    def export_csv(self, path: str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "original_action", "final_action",
                             "mutated", "target_load", "min_load"])
            for r in self.records:
                writer.writerow([r.step, r.original_action, r.final_action,
                                 int(r.mutated), f"{r.target_load:.6f}",
                                 f"{r.min_load:.6f}"])


def extend_state(base: CmdpState, client: int,
                 loads: Sequence[float]) -> CmdpState:
    """Attach the requesting client and normalized load vector to a state."""
    return replace(base, j=client, loads=tuple(float(x) for x in loads))


def is_overloaded(loads: Sequence[float], n: int, threshold: float) -> bool:
    """True when BS n's load exceeds the network minimum by at least the
    threshold (boundary inclusive)."""
    arr = np.asarray(loads, dtype=np.float64)
    if not 0 <= n < arr.shape[0]:
        raise ValueError(f"BS index {n} outside [0, {arr.shape[0]})")
    return bool(arr[n] - arr.min() >= threshold)


def backup_action(env: CacheNetwork, client: int) -> Action:
    """Least-recently-used slot on the least-loaded covering BS (ties break
    to the lowest BS index, then the lowest slot index)."""
    cov = sorted(env.config.coverage[client])
    best_bs = cov[0]
    best_load = env.tracker.normalized_load(best_bs)
    for b in cov[1:]:
        load = env.tracker.normalized_load(b)
        if load < best_load:
            best_bs, best_load = b, load
    unit = env.units[best_bs]
    empty = unit.first_empty()
    if empty is not None:
        return Action.for_slot(best_bs, empty, env.config.cap)
    slot = min(range(unit.cap),
               key=lambda i: (unit.slots[i].cached_at, i))  # type: ignore[union-attr]
    return Action.for_slot(best_bs, slot, env.config.cap)


def intervene_action(a: Action, env: CacheNetwork, client: int,
                     cfg: ReliabilityConfig, rng: np.random.Generator,
                     log: InterventionLog | None = None,
                     step: int = 0) -> tuple[Action, bool]:
    """Mute a replacement aimed at an overloaded BS, substituting the backup
    choice. Skip actions always pass through."""
    loads = env.tracker.load_vector()
    target = a.target(env.config.cap)
    mutated = False
    final = a
    if target is not None and is_overloaded(loads, target[0], cfg.overload_threshold):
        if cfg.mute_prob > 0 and rng.random() < cfg.mute_prob:
            final = backup_action(env, client)
            mutated = final.value != a.value
    if log is not None:
        tgt_load = float(loads[target[0]]) if target is not None else 0.0
        log.records.append(MutationRecord(
            step=step, original_action=a.value, final_action=final.value,
            mutated=mutated, target_load=tgt_load,
            min_load=float(loads.min()) if loads.size else 0.0))
    return final, mutated


def shape_reward(r: float, loads: Sequence[float], balance_weight: float,
                 n_bs: int) -> float:
    """Reward minus the absolute average excess load over the minimum;
    never exceeds the raw reward."""
    arr = np.asarray(loads, dtype=np.float64)
    penalty = abs(balance_weight / n_bs * float(np.sum(arr - arr.min())))
    return r - penalty

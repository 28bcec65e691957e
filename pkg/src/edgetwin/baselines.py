"""Classical cache-replacement policies used as comparison points.

Each policy sees only the serving BS's cache view and the missed request,
always replaces (no admission control), and never targets another BS.
Ties break to the lowest slot index.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

from .errors import ContractError
from .netmodel import Action, CacheNetwork, CacheUnit, DecisionContext


class PolicyKind(str, Enum):
    RANDOM = "random"
    LRU = "lru"
    LFU = "lfu"
    MFU = "mfu"
    BASIC_DQN = "basic_dqn"
    REC = "rec"          # DQN with the load-aware extended state
    D_REC = "d_rec"      # REC plus digital-twin pretraining (modules optional)

    @property
    def is_learned(self) -> bool:
        return self in (PolicyKind.BASIC_DQN, PolicyKind.REC, PolicyKind.D_REC)


CLASSICAL = (PolicyKind.RANDOM, PolicyKind.LRU, PolicyKind.LFU, PolicyKind.MFU)


def decide(policy: PolicyKind, unit: CacheUnit, serving_bs: int, cap: int,
           rng: np.random.Generator,
           global_counts: np.ndarray | None = None) -> Action:
    """Pick the victim slot on the serving BS for a missed request.

    random: uniform slot; lru: oldest recency; lfu: lowest hit count;
    mfu: highest hit count. With global_counts given, lfu/mfu rank slots by
    catalogue-wide request counts instead of in-cache hit counts.
    """
    if not unit.full:
        raise ContractError("replacement decision on a non-full cache")
    if policy == PolicyKind.RANDOM:
        slot = int(rng.integers(0, cap))
    elif policy == PolicyKind.LRU:
        slot = min(range(cap),
                   key=lambda i: (unit.slots[i].cached_at, i))  # type: ignore[union-attr]
    elif policy in (PolicyKind.LFU, PolicyKind.MFU):
        if global_counts is not None:
            def freq(i: int) -> int:
                return int(global_counts[unit.slots[i].content])  # type: ignore[union-attr]
        else:
            def freq(i: int) -> int:
                return unit.slots[i].freq  # type: ignore[union-attr]
        if policy == PolicyKind.LFU:
            slot = min(range(cap), key=lambda i: (freq(i), i))
        else:
            slot = min(range(cap), key=lambda i: (-freq(i), i))
    else:
        raise ContractError(f"{policy.value} is not a classical policy")
    return Action.for_slot(serving_bs, slot, cap)


def decide_for_context(policy: PolicyKind, env: CacheNetwork,
                       ctx: DecisionContext, rng: np.random.Generator,
                       global_lfu: bool = False) -> Action:
    counts = env.content_counts if global_lfu else None
    return decide(policy, env.units[ctx.serving_bs], ctx.serving_bs,
                  env.config.cap, rng, global_counts=counts)

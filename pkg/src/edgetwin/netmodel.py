"""Physical network model and decision-process environment.

A network of N base stations (BSs), each with a fixed-capacity cache of
symmetric slots, serves overlapping sets of clients. Requests flow through
the environment one discrete slot at a time:

* a request is served by a covering BS that already caches the content
  (the least-loaded one when several do); otherwise it is routed to the
  least-loaded covering BS and counts as a miss;
* a miss at a BS with free slots stores the content automatically;
* a miss at a full BS is a decision point: a replacement action chooses a
  slot anywhere on a covering BS (or skips), and the chosen BS performs the
  fetch, so replacement decisions shift serving load between stations.

Load accounting ticks exactly one BS per request: the BS that served it.
The per-step reward is the number of cache hits accumulated between one
accepted replacement and the next decision, and the penalty is a smooth
decreasing function of that reward.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, ContractError
from .workload import RequestEvent


@dataclass(frozen=True)
class NetworkConfig:
    """Static topology: stations, capacities, client coverage."""

    n_bs: int
    cap: int
    clients_per_bs: int
    coverage: tuple[tuple[int, ...], ...]  # per-client covering BS indices
    bs_positions: tuple[tuple[float, float], ...]
    backhaul_capacity: tuple[float, ...]
    load_window: int = 1000
    freq_window: int = 5000   # requests over which content frequency is counted

    def __post_init__(self) -> None:
        if self.n_bs < 1:
            raise ConfigError("n_bs must be >= 1")
        if self.cap < 1:
            raise ConfigError("cap must be >= 1")
        if len(self.bs_positions) != self.n_bs:
            raise ConfigError("bs_positions length must equal n_bs")
        if len(self.backhaul_capacity) != self.n_bs:
            raise ConfigError("backhaul_capacity length must equal n_bs")
        for j, cov in enumerate(self.coverage):
            if len(cov) < 1:
                raise ConfigError(f"client {j} has no covering BS")
            if len(cov) > 2:
                raise ConfigError(f"client {j} covered by more than two BSs")
            for b in cov:
                if not 0 <= b < self.n_bs:
                    raise ConfigError(f"client {j} references invalid BS {b}")

    @property
    def n_clients(self) -> int:
        return len(self.coverage)

    @property
    def n_actions(self) -> int:
        """Action values 0..cap*n_bs inclusive."""
        return self.cap * self.n_bs + 1

    def client_set(self, n: int) -> frozenset[int]:
        return frozenset(j for j, cov in enumerate(self.coverage) if n in cov)


def build_topology(n_bs: int, cap: int, clients_per_bs: int,
                   kind: str = "paired", overlap_fraction: float = 0.5,
                   spacing: float = 100.0,
                   backhaul: Sequence[float] | float = 100.0,
                   load_window: int = 1000,
                   freq_window: int = 5000) -> NetworkConfig:
    """Construct a standard topology.

    kind="paired": BSs on a line; client j's home BS is j // clients_per_bs
    and a deterministic overlap_fraction of each BS's clients are also
    covered by the next BS (wrapping).

    kind="umbrella": BS 0 additionally covers every other BS's clients
    (a macro cell over small cells); BS 0's own clients see only BS 0.
    This is the deliberately skewed coverage used in load-balance studies.
    """
    n_clients = n_bs * clients_per_bs
    coverage: list[tuple[int, ...]] = []
    for j in range(n_clients):
        home = j // clients_per_bs
        local = j % clients_per_bs
        if kind == "paired":
            if n_bs > 1 and local < int(round(overlap_fraction * clients_per_bs)):
                coverage.append((home, (home + 1) % n_bs))
            else:
                coverage.append((home,))
        elif kind == "umbrella":
            if home == 0 or n_bs == 1:
                coverage.append((0,))
            else:
                coverage.append((home, 0))
        else:
            raise ConfigError(f"unknown topology kind {kind!r}")
    positions = tuple((spacing * i, 0.0) for i in range(n_bs))
    if kind == "umbrella":
        positions = ((spacing * (n_bs - 1) / 2.0, spacing),) + positions[1:]
    if isinstance(backhaul, (int, float)):
        bh = tuple(float(backhaul) for _ in range(n_bs))
    else:
        bh = tuple(float(x) for x in backhaul)
    return NetworkConfig(n_bs=n_bs, cap=cap, clients_per_bs=clients_per_bs,
                         coverage=tuple(coverage), bs_positions=positions,
                         backhaul_capacity=bh, load_window=load_window,
                         freq_window=freq_window)


@dataclass
class Slot:
    content: int
    cached_at: int   # last time the slot's content was stored or hit
    freq: int        # hits since the content entered the cache (starts at 1)


class CacheUnit:
    """Fixed array of symmetric cache slots belonging to one BS."""

    def __init__(self, cap: int):
        self.cap = cap
        self.slots: list[Slot | None] = [None] * cap
        self._index: dict[int, int] = {}  # content -> slot

    def __contains__(self, content: int) -> bool:
        return content in self._index

    def slot_of(self, content: int) -> int | None:
        return self._index.get(content)

    def first_empty(self) -> int | None:
        for i, s in enumerate(self.slots):
            if s is None:
                return i
        return None

    @property
    def full(self) -> bool:
        return len(self._index) == self.cap

    def lookup(self, content: int, t: int) -> bool:
        """Hit test; a hit bumps the slot's frequency and recency, a miss
        leaves the unit untouched."""
        i = self._index.get(content)
        if i is None:
            return False
        slot = self.slots[i]
        assert slot is not None
        slot.freq += 1
        slot.cached_at = t
        return True

    def store(self, slot_index: int, content: int, t: int) -> None:
        """Place content in a slot, evicting whatever it held."""
        if not 0 <= slot_index < self.cap:
            raise ValueError(f"slot {slot_index} outside [0, {self.cap})")
        old = self.slots[slot_index]
        if old is not None:
            del self._index[old.content]
        existing = self._index.get(content)
        if existing is not None and existing != slot_index:
            # same content may not occupy two slots of one unit
            self.slots[existing] = None
            del self._index[content]
        self.slots[slot_index] = Slot(content=content, cached_at=t, freq=1)
        self._index[content] = slot_index

    def occupancy(self) -> int:
        return len(self._index)


class LoadTracker:
    """Sliding window of serving-BS indices with per-BS tallies."""

    def __init__(self, n_bs: int, window: int):
        self.n_bs = n_bs
        self.window = window
        self._buf: deque[int] = deque()
        self.counts = np.zeros(n_bs, dtype=np.int64)

    def record(self, n: int) -> None:
        self._buf.append(n)
        self.counts[n] += 1
        if len(self._buf) > self.window:
            old = self._buf.popleft()
            self.counts[old] -= 1

    def reassign_last(self, n: int) -> None:
        """Move the most recent tick to a different BS (used when a
        replacement action redirects the fetch)."""
        if not self._buf:
            raise ContractError("reassign_last on empty window")
        old = self._buf.pop()
        self.counts[old] -= 1
        self._buf.append(n)
        self.counts[n] += 1

    @property
    def occupancy(self) -> int:
        return len(self._buf)

    def normalized_load(self, n: int) -> float:
        if not 0 <= n < self.n_bs:
            raise ValueError(f"BS index {n} outside [0, {self.n_bs})")
        if not self._buf:
            return 0.0
        return float(self.counts[n]) / len(self._buf)

    def load_vector(self) -> np.ndarray:
        if not self._buf:
            return np.zeros(self.n_bs)
        return self.counts / len(self._buf)

    def state_dict(self) -> dict:
        return {"window": list(self._buf)}

    def load_state(self, d: dict) -> None:
        self._buf = deque(int(x) for x in d["window"])
        self.counts = np.zeros(self.n_bs, dtype=np.int64)
        for x in self._buf:
            self.counts[x] += 1


@dataclass(frozen=True)
class Action:
    """Replacement decision: 0 skips, v >= 1 addresses slot (v-1) % cap of
    BS (v-1) // cap."""

    value: int

    def target(self, cap: int) -> tuple[int, int] | None:
        """(bs, slot) addressed by this action, or None for skip."""
        if self.value == 0:
            return None
        v = self.value - 1
        return v // cap, v % cap

    @staticmethod
    def for_slot(bs: int, slot: int, cap: int) -> "Action":
        return Action(value=bs * cap + slot + 1)


@dataclass(frozen=True)
class CmdpState:
    """Observation at a decision point.

    Base fields: serving BS index, recency and frequency of the candidate
    content (recency is -1 when the content is not cached on the serving BS,
    in which case the frequency is its catalogue-wide request count). The
    extended form adds the requesting client index and the normalized
    per-BS load vector.
    """

    n: int
    t_n: int
    f_n: int
    j: int | None = None
    loads: tuple[float, ...] | None = None

    @property
    def extended(self) -> bool:
        return self.j is not None


@dataclass(frozen=True)
class DecisionContext:
    """Pending decision: the missed request and where it was routed."""

    state: CmdpState
    client: int
    content: int
    serving_bs: int
    time: int


@dataclass(frozen=True)
class StepOutcome:
    reward: float
    penalty: float
    hit: bool             # True when any hits accrued during the step interval
    next_state: CmdpState | None
    terminal: bool
    hits_delta: int
    requests_delta: int
    mutated: bool = False


SNAPSHOT_VERSION = 1


class CacheNetwork:
    """Seedable cache-replacement environment over a request stream.

    One instance owns all mutable simulation state; instances are
    independent and must not be shared across threads.
    """

    def __init__(self, config: NetworkConfig, catalogue_size: int,
                 reward_scale: float = 1.0, penalty_sharpness: float = 1.0):
        self.config = config
        self.catalogue_size = catalogue_size
        self.reward_scale = float(reward_scale)
        self.penalty_sharpness = float(penalty_sharpness)
        self.units = [CacheUnit(config.cap) for _ in range(config.n_bs)]
        self.tracker = LoadTracker(config.n_bs, config.load_window)
        self.requests = 0
        self.hits = 0
        self.hits_by_bs = np.zeros(config.n_bs, dtype=np.int64)
        self.autofills = 0
        self.policy_errors = 0
        self.content_counts = np.zeros(catalogue_size, dtype=np.int64)
        # sliding-window counts back the frequency field of decision states,
        # keeping it stationary under a fixed workload
        self._freq_buf: deque[int] = deque()
        self.window_counts = np.zeros(catalogue_size, dtype=np.int64)
        self.pending: DecisionContext | None = None
        # per-BS request history for twin training (recent serving record)
        self.bs_history: list[deque[int]] = [deque(maxlen=config.load_window)
                                             for _ in range(config.n_bs)]

    # -- routing -----------------------------------------------------------

    def _min_load_bs(self, candidates: Sequence[int]) -> int:
        best = candidates[0]
        best_load = self.tracker.normalized_load(best)
        for b in candidates[1:]:
            load = self.tracker.normalized_load(b)
            if load < best_load:
                best, best_load = b, load
        return best

    def route_request(self, ev: RequestEvent) -> int:
        """Pick the covering BS with the lowest normalized load (ties to the
        lowest index) and record it in the load tracker."""
        cov = self.config.coverage[ev.client]
        if not cov:
            raise ConfigError(f"client {ev.client} has no covering BS")
        n = self._min_load_bs(sorted(cov))
        self.tracker.record(n)
        return n

    def hit_rate(self) -> float | None:
        """Fraction of processed requests served from cache; None before the
        first request."""
        if self.requests == 0:
            return None
        return self.hits / self.requests

    def normalized_load(self, n: int) -> float:
        return self.tracker.normalized_load(n)

    # -- request processing ------------------------------------------------

    def _serve(self, ev: RequestEvent) -> DecisionContext | None:
        """Process one request; returns a DecisionContext on a replacement
        decision, else None."""
        self.requests += 1
        self.content_counts[ev.content] += 1
        self._freq_buf.append(ev.content)
        self.window_counts[ev.content] += 1
        if len(self._freq_buf) > self.config.freq_window:
            old = self._freq_buf.popleft()
            self.window_counts[old] -= 1
        cov = sorted(self.config.coverage[ev.client])
        holders = [b for b in cov if ev.content in self.units[b]]
        if holders:
            b = self._min_load_bs(holders)
            self.units[b].lookup(ev.content, ev.time)
            self.hits += 1
            self.hits_by_bs[b] += 1
            self.tracker.record(b)
            self.bs_history[b].append(ev.content)
            return None
        b = self._min_load_bs(cov)
        self.tracker.record(b)
        self.bs_history[b].append(ev.content)
        unit = self.units[b]
        empty = unit.first_empty()
        if empty is not None:
            unit.store(empty, ev.content, ev.time)
            self.autofills += 1
            return None
        state = CmdpState(n=b, t_n=-1, f_n=int(self.window_counts[ev.content]))
        return DecisionContext(state=state, client=ev.client,
                               content=ev.content, serving_bs=b, time=ev.time)

    def advance(self, stream: Iterator[RequestEvent]) -> CmdpState | None:
        """Consume requests until the next decision point; returns its state,
        or None when the stream is exhausted."""
        for ev in stream:
            ctx = self._serve(ev)
            if ctx is not None:
                self.pending = ctx
                return ctx.state
        self.pending = None
        return None

    def apply_action(self, a: Action) -> tuple[bool, int]:
        """Resolve the pending decision. Returns (accepted, handling BS).
        Invalid cross-BS targets count as policy errors and degrade to skip,
        leaving the routed BS as the handler."""
        ctx = self.pending
        if ctx is None:
            raise ContractError("apply_action without a pending decision")
        if not 0 <= a.value <= self.config.cap * self.config.n_bs:
            raise ValueError(f"action {a.value} outside range")
        target = a.target(self.config.cap)
        if target is None:
            self.pending = None
            return False, ctx.serving_bs
        bs, slot = target
        if bs not in self.config.coverage[ctx.client]:
            self.policy_errors += 1
            self.pending = None
            return False, ctx.serving_bs
        self.units[bs].store(slot, ctx.content, ctx.time)
        if bs != ctx.serving_bs:
            # the addressed BS performs the fetch and serves the client
            self.tracker.reassign_last(bs)
            self.bs_history[ctx.serving_bs].pop()
            self.bs_history[bs].append(ctx.content)
        self.pending = None
        return True, bs

    def step(self, a: Action, stream: Iterator[RequestEvent]) -> StepOutcome:
        """Apply an action, advance to the next decision point, and return
        the reward accrued in between.

        The reward counts cache hits at the station the decision touched
        (the action's target, or the routed station for a skip), since that
        is the only cache the action can influence."""
        _, bs = self.apply_action(a)
        hits0 = int(self.hits_by_bs[bs])
        reqs0 = self.requests
        next_state = self.advance(stream)
        delta = int(self.hits_by_bs[bs]) - hits0
        r = self.reward_scale * delta
        w = 1.0 / (r ** self.penalty_sharpness + 1.0)
        return StepOutcome(reward=r, penalty=w, hit=delta > 0,
                           next_state=next_state, terminal=next_state is None,
                           hits_delta=delta, requests_delta=self.requests - reqs0)

    # -- snapshot ----------------------------------------------------------

    def snapshot(self) -> dict:
        """Serializable view of all mutable state (schema in README)."""
        return {
            "version": SNAPSHOT_VERSION,
            "requests": self.requests,
            "hits": self.hits,
            "hits_by_bs": self.hits_by_bs.tolist(),
            "autofills": self.autofills,
            "policy_errors": self.policy_errors,
            "content_counts": self.content_counts.tolist(),
            "freq_buf": list(self._freq_buf),
            "tracker": self.tracker.state_dict(),
            "units": [
                [None if s is None else [s.content, s.cached_at, s.freq]
                 for s in u.slots]
                for u in self.units
            ],
            "bs_history": [list(h) for h in self.bs_history],
            "pending": None if self.pending is None else {
                "client": self.pending.client,
                "content": self.pending.content,
                "serving_bs": self.pending.serving_bs,
                "time": self.pending.time,
                "state": [self.pending.state.n, self.pending.state.t_n,
                          self.pending.state.f_n],
            },
        }

    def restore(self, snap: dict) -> None:
        if snap.get("version") != SNAPSHOT_VERSION:
            raise ConfigError(f"unsupported snapshot version {snap.get('version')}")
        self.requests = int(snap["requests"])
        self.hits = int(snap["hits"])
        self.hits_by_bs = np.asarray(snap["hits_by_bs"], dtype=np.int64)
        self.autofills = int(snap["autofills"])
        self.policy_errors = int(snap["policy_errors"])
        self.content_counts = np.asarray(snap["content_counts"], dtype=np.int64)
        self._freq_buf = deque(int(x) for x in snap["freq_buf"])
        self.window_counts = np.zeros(self.catalogue_size, dtype=np.int64)
        for c in self._freq_buf:
            self.window_counts[c] += 1
        self.tracker.load_state(snap["tracker"])
        for unit, rows in zip(self.units, snap["units"]):
            unit.slots = [None if r is None else Slot(int(r[0]), int(r[1]), int(r[2]))
                          for r in rows]
            unit._index = {s.content: i for i, s in enumerate(unit.slots)
                           if s is not None}
        self.bs_history = [deque((int(x) for x in h),
                                 maxlen=self.config.load_window)
                           for h in snap["bs_history"]]
        p = snap.get("pending")
        if p is None:
            self.pending = None
        else:
            st = CmdpState(n=int(p["state"][0]), t_n=int(p["state"][1]),
                           f_n=int(p["state"][2]))
            self.pending = DecisionContext(state=st, client=int(p["client"]),
                                           content=int(p["content"]),
                                           serving_bs=int(p["serving_bs"]),
                                           time=int(p["time"]))

    def save_snapshot(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.snapshot(), fh, separators=(",", ":"))

    def load_snapshot(self, path: str) -> None:
        with open(path, "r", encoding="utf-8") as fh:
            self.restore(json.load(fh))

"""Synthetic request-stream generation and trace ingestion.

Contents are identified by integer ids in [0, catalogue_size). Synthetic
workloads draw a popularity *rank* from a configured distribution and map it
to a content id through a fixed, seed-derived permutation, so that popular
ranks are decoupled from numeric ids. Real traces are replayed in file order
with first-seen key-to-id assignment.
"""

from __future__ import annotations

import csv
import gzip
import io
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import TraceFormatError

WORKLOAD_KINDS = ("zipf", "normal", "uniform", "poisson")

# Draws are produced in blocks to keep per-event cost low.
_BLOCK = 4096


@dataclass(frozen=True)
class RequestEvent:
    """One client request for one content at a discrete time slot."""

    time: int
    client: int
    content: int
    op: str = "read"


@dataclass(frozen=True)
class WorkloadModel:
    """Parameterized popularity model over ranks 1..catalogue_size.

    kind: one of zipf | normal | uniform | poisson.
    params: zipf -> {"p": shape > 0}; normal -> {"mean", "stddev"} over the
    rank axis; poisson -> {"rate": lam > 0}; uniform -> {}.
    The seed fixes the rank-to-content permutation.
    """

    kind: str
    catalogue_size: int
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in WORKLOAD_KINDS:
            raise ValueError(f"unknown workload kind {self.kind!r}")
        if self.catalogue_size < 1:
            raise ValueError("catalogue_size must be >= 1")
        if self.kind == "zipf" and self.params.get("p", 0.8) <= 0:
            raise ValueError("zipf shape p must be > 0")
        if self.kind == "poisson" and self.params.get("rate", 1.0) <= 0:
            raise ValueError("poisson rate must be > 0")
        if self.kind == "normal" and self.params.get("stddev", 1.0) <= 0:
            raise ValueError("normal stddev must be > 0")


def zipf_pmf(k: int, p: float, n_c: int) -> float:
    """Probability that the requested rank equals k under a Zipf law.

    Returns (1/k^p) / sum_{n=1..n_c} (1/n^p).
    """
    if p <= 0:
        raise ValueError(f"zipf shape must be > 0, got {p}")
    if not 1 <= k <= n_c:
        raise ValueError(f"rank {k} outside [1, {n_c}]")
    ranks = np.arange(1, n_c + 1, dtype=np.float64)
    return float(k ** (-float(p)) / np.sum(ranks ** (-float(p))))


def rank_pmf(model: WorkloadModel) -> np.ndarray:
    """Full probability vector over ranks 1..catalogue_size for a model."""
    n = model.catalogue_size
    ranks = np.arange(1, n + 1, dtype=np.float64)
    if model.kind == "zipf":
        p = float(model.params.get("p", 0.8))
        if p <= 0:
            raise ValueError("zipf shape p must be > 0")
        w = ranks ** (-p)
    elif model.kind == "uniform":
        w = np.ones(n)
    elif model.kind == "normal":
        mean = float(model.params.get("mean", (n + 1) / 2.0))
        std = float(model.params.get("stddev", max(n / 6.0, 1.0)))
        # Probability mass of a rank = density at the rank's integer point;
        # clamping in the sampler folds the tails onto the boundary ranks,
        # so the pmf here integrates the tails into ranks 1 and n.
        z = (ranks - mean) / std
        w = np.exp(-0.5 * z * z)
        lo_tail = _normal_cdf((0.5 - mean) / std)
        hi_tail = 1.0 - _normal_cdf((n + 0.5 - mean) / std)
        w = w / np.sum(w) * (1.0 - lo_tail - hi_tail)
        w[0] += lo_tail
        w[-1] += hi_tail
    elif model.kind == "poisson":
        lam = float(model.params.get("rate", 10.0))
        # rank = 1 + Poisson(lam), mass above rank n folded onto rank n
        ks = ranks - 1
        logw = ks * np.log(lam) - lam - _log_factorial(ks)
        w = np.exp(logw)
        w[-1] += max(0.0, 1.0 - float(np.sum(w)))
    else:  # pragma: no cover - guarded in WorkloadModel
        raise ValueError(model.kind)
    total = float(np.sum(w))
    return w / total


def _normal_cdf(z: float) -> float:
    from math import erf, sqrt

    return 0.5 * (1.0 + erf(z / sqrt(2.0)))


def _log_factorial(ks: np.ndarray) -> np.ndarray:
    # table of log(k!) up to the catalogue size; exact enough at this scale
    if len(ks) == 0:
        return np.zeros(0)
    m = int(np.max(ks))
    table = np.concatenate([[0.0], np.cumsum(np.log(np.arange(1, m + 1)))])
    return table[ks.astype(np.int64)]


def rank_permutation(model: WorkloadModel) -> np.ndarray:
    """Fixed rank->content permutation derived from the model seed.

    Index r-1 holds the content id assigned to rank r.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(model.seed), 0x5EED]))
    return rng.permutation(model.catalogue_size)


def content_pmf(model: WorkloadModel) -> np.ndarray:
    """Probability vector over content ids (rank pmf pushed through the permutation)."""
    pmf = rank_pmf(model)
    perm = rank_permutation(model)
    out = np.zeros(model.catalogue_size)
    out[perm] = pmf
    return out


class RequestSampler:
    """Deterministic request stream for a workload model.

    Draws are a pure function of (model, seed, draw index): two samplers built
    from the same model and rng seed yield byte-identical streams.
    """

    def __init__(self, model: WorkloadModel, n_clients: int, rng: np.random.Generator):
        if n_clients < 1:
            raise ValueError("n_clients must be >= 1")
        self.model = model
        self.n_clients = n_clients
        self._rng = rng
        self._pmf = rank_pmf(model)
        self._perm = rank_permutation(model)
        self._buf_ranks: np.ndarray | None = None
        self._buf_clients: np.ndarray | None = None
        self._pos = 0
        self._t = 0

    def _refill(self) -> None:
        m = self.model
        n = m.catalogue_size
        if m.kind == "zipf" or m.kind == "uniform":
            ranks = self._rng.choice(n, size=_BLOCK, p=self._pmf) + 1
        elif m.kind == "normal":
            mean = float(m.params.get("mean", (n + 1) / 2.0))
            std = float(m.params.get("stddev", max(n / 6.0, 1.0)))
            raw = np.rint(self._rng.normal(mean, std, size=_BLOCK))
            ranks = np.clip(raw, 1, n).astype(np.int64)
        elif m.kind == "poisson":
            lam = float(m.params.get("rate", 10.0))
            ranks = np.clip(1 + self._rng.poisson(lam, size=_BLOCK), 1, n)
        else:  # pragma: no cover
            raise ValueError(m.kind)
        self._buf_ranks = np.asarray(ranks, dtype=np.int64)
        self._buf_clients = self._rng.integers(0, self.n_clients, size=_BLOCK)
        self._pos = 0

    def sample(self) -> RequestEvent:
        if self._buf_ranks is None or self._pos >= _BLOCK:
            self._refill()
        assert self._buf_ranks is not None and self._buf_clients is not None
        rank = int(self._buf_ranks[self._pos])
        client = int(self._buf_clients[self._pos])
        self._pos += 1
        ev = RequestEvent(time=self._t, client=client, content=int(self._perm[rank - 1]))
        self._t += 1
        return ev

    def take(self, n: int) -> list[RequestEvent]:
        return [self.sample() for _ in range(n)]

    def __iter__(self) -> Iterator[RequestEvent]:
        while True:
            yield self.sample()


def sample_request(model: WorkloadModel, t: int, rng: np.random.Generator,
                   n_clients: int = 1) -> RequestEvent:
    """Draw a single event at time t. Prefer RequestSampler for streams."""
    pmf = rank_pmf(model)
    perm = rank_permutation(model)
    rank = int(rng.choice(model.catalogue_size, p=pmf)) + 1
    client = int(rng.integers(0, n_clients))
    return RequestEvent(time=t, client=client, content=int(perm[rank - 1]))


def empirical_distribution(events: Iterable[RequestEvent], n_c: int) -> np.ndarray:
    """Normalized per-content request counts; uniform when events is empty."""
    if n_c < 1:
        raise ValueError("n_c must be >= 1")
    counts = np.zeros(n_c)
    total = 0
    for ev in events:
        counts[ev.content] += 1
        total += 1
    if total == 0:
        return np.full(n_c, 1.0 / n_c)
    return counts / total


@dataclass
class TraceStats:
    """Per-replay bookkeeping for a trace file."""

    rows: int = 0
    events: int = 0
    parse_errors: list[tuple[int, str]] = field(default_factory=list)
    dropped_overflow: int = 0
    bytes_by_op: dict = field(default_factory=dict)


_OP_MAP = {"get": "read", "set": "write", "delete": "write"}


def load_trace(path: str, catalogue_cap: int, n_clients: int = 1,
               stats: TraceStats | None = None) -> Iterator[RequestEvent]:
    """Replay a cache trace CSV as a request stream.

    Expected UTF-8 CSV with header ``timestamp,key,op,size``; gzip input is
    accepted for paths ending in ``.csv.gz``. Events are yielded strictly in
    file order with event time equal to the running event index (wall-clock
    timestamps are validated but not otherwise used by the slot-based model).
    Unseen keys get fresh content ids; once ``catalogue_cap`` distinct keys
    exist, rows with new keys are dropped and counted. Malformed rows are
    recorded with their line number and skipped; an unreadable file or header
    raises TraceFormatError.
    """
    if catalogue_cap < 1:
        raise ValueError("catalogue_cap must be >= 1")
    st = stats if stats is not None else TraceStats()
    try:
        if str(path).endswith(".csv.gz"):
            fh = io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8")
        else:
            fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise TraceFormatError(f"cannot open trace {path}: {exc}") from exc

    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except (StopIteration, csv.Error, OSError) as exc:
            raise TraceFormatError(f"trace {path} has no readable header") from exc
        expected = ["timestamp", "key", "op", "size"]
        if [h.strip().lower() for h in header] != expected:
            raise TraceFormatError(
                f"trace {path} header {header!r} != {expected!r}")

        key_ids: dict[str, int] = {}
        t = 0
        for lineno, row in enumerate(reader, start=2):
            st.rows += 1
            try:
                if len(row) != 4:
                    raise ValueError(f"expected 4 fields, got {len(row)}")
                _ts = int(row[0])
                key = row[1]
                op = row[2].strip().lower()
                if op not in _OP_MAP:
                    raise ValueError(f"unknown op {row[2]!r}")
                size = int(row[3])
            except ValueError as exc:
                st.parse_errors.append((lineno, str(exc)))
                continue
            if key not in key_ids:
                if len(key_ids) >= catalogue_cap:
                    st.dropped_overflow += 1
                    continue
                key_ids[key] = len(key_ids)
            st.bytes_by_op[op] = st.bytes_by_op.get(op, 0) + size
            st.events += 1
            client = zlib.crc32(key.encode("utf-8")) % n_clients
            yield RequestEvent(time=t, client=client,
                               content=key_ids[key], op=_OP_MAP[op])
            t += 1

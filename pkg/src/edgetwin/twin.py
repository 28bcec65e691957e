"""Network digital-twin subsystem.

Base stations are clustered by an affinity graph built from four pairwise
attributes (proximity, backhaul similarity, coverage overlap, request-mix
similarity). Clustering removes the highest-betweenness edges of the
affinity graph until the requested number of connected components remains
(the Girvan-Newman scheme). Each BS trains a local content-popularity
forecast model; cluster models are dimension-wise means of their members
(FedAvg) and the global model is the mean over cluster models. The global
model is initialized synchronously and later refreshed asynchronously,
gated by a mean-squared-divergence threshold. Trained twins double as
request generators for agent pre-training.
"""

from __future__ import annotations

import heapq
import threading
import warnings
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import AggregationError
from .workload import RequestEvent

MIN_DISTANCE = 1e-6
_REL_TIE_TOL = 1e-9


@dataclass(frozen=True)
class BsDescriptor:
    """Attributes of one BS that enter the affinity computation."""

    position: tuple[float, float]
    backhaul: float
    clients: frozenset[int]
    request_dist: np.ndarray | None = None


@dataclass(frozen=True)
class AffinityConfig:
    """Weights for (proximity, backhaul, coverage-overlap, request-mix)."""

    w_distance: float = 0.25
    w_backhaul: float = 0.25
    w_overlap: float = 0.25
    w_requests: float = 0.25
    normalize: bool = True

    def __post_init__(self) -> None:
        ws = (self.w_distance, self.w_backhaul, self.w_overlap, self.w_requests)
        if any(w < 0 for w in ws):
            raise ValueError("affinity weights must be non-negative")
        if all(w == 0 for w in ws):
            raise ValueError("at least one affinity weight must be positive")


def _distance(a: BsDescriptor, b: BsDescriptor) -> float:
    g = float(np.hypot(a.position[0] - b.position[0],
                       a.position[1] - b.position[1]))
    if g <= 0:
        warnings.warn("coincident BS positions; clamping distance",
                      stacklevel=3)
        g = MIN_DISTANCE
    return g


def _backhaul_similarity(a: BsDescriptor, b: BsDescriptor) -> float:
    hi = max(a.backhaul, b.backhaul)
    lo = min(a.backhaul, b.backhaul)
    if hi <= 0:
        return 1.0
    return lo / hi


def _coverage_overlap(a: BsDescriptor, b: BsDescriptor) -> float:
    union = a.clients | b.clients
    if not union:
        return 1.0
    return len(a.clients & b.clients) / len(union)


def _request_similarity(a: BsDescriptor, b: BsDescriptor) -> float:
    if a.request_dist is None or b.request_dist is None:
        return 1.0
    p = np.asarray(a.request_dist, dtype=np.float64)
    q = np.asarray(b.request_dist, dtype=np.float64)
    if p.shape != q.shape:
        raise AggregationError("request distributions differ in length")
    return 1.0 - 0.5 * float(np.sum(np.abs(p - q)))


def attribute_terms(a: BsDescriptor, b: BsDescriptor) -> tuple[float, float, float, float]:
    """(distance, backhaul similarity, coverage overlap, request similarity)."""
    return (_distance(a, b), _backhaul_similarity(a, b),
            _coverage_overlap(a, b), _request_similarity(a, b))


def attribute_affinity(a: BsDescriptor, b: BsDescriptor,
                       cfg: AffinityConfig) -> float:
    """Pairwise affinity: w_g / distance + w_k * k + w_b * overlap + w_t * tau."""
    g, k, beta, tau = attribute_terms(a, b)
    return (cfg.w_distance / g + cfg.w_backhaul * k
            + cfg.w_overlap * beta + cfg.w_requests * tau)


def affinity_matrix(descriptors: Sequence[BsDescriptor],
                    cfg: AffinityConfig) -> np.ndarray:
    """Symmetric non-negative affinity matrix with zero diagonal.

    With cfg.normalize, each of the four per-pair terms (with distance
    entering as proximity 1/g) is min-max scaled across all pairs before the
    weighted sum, so no attribute dominates by raw units alone. A term that
    is constant across pairs scales to zero.
    """
    n = len(descriptors)
    phi = np.zeros((n, n))
    if n < 2:
        return phi
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    terms = np.zeros((len(pairs), 4))
    for idx, (i, j) in enumerate(pairs):
        g, k, beta, tau = attribute_terms(descriptors[i], descriptors[j])
        terms[idx] = (1.0 / g, k, beta, tau)
    if cfg.normalize:
        lo = terms.min(axis=0)
        hi = terms.max(axis=0)
        span = np.where(hi > lo, hi - lo, 1.0)
        terms = np.where(hi > lo, (terms - lo) / span, 0.0)
    weights = np.array([cfg.w_distance, cfg.w_backhaul,
                        cfg.w_overlap, cfg.w_requests])
    vals = terms @ weights
    for idx, (i, j) in enumerate(pairs):
        phi[i, j] = phi[j, i] = vals[idx]
    return phi


# -- graph clustering --------------------------------------------------------

Edge = tuple[int, int]


def _edges_from_phi(phi: np.ndarray) -> dict[Edge, float]:
    """Edges (i<j) with positive affinity; edge length is 1/affinity."""
    n = phi.shape[0]
    edges: dict[Edge, float] = {}
    for i in range(n):
        for j in range(i + 1, n):
            if phi[i, j] > 0:
                edges[(i, j)] = 1.0 / float(phi[i, j])
    return edges


def edge_betweenness(n: int, edges: Mapping[Edge, float]) -> dict[Edge, float]:
    """Shortest-path edge betweenness on a weighted undirected graph.

    For every unordered node pair, each edge accumulates the fraction of
    shortest paths between the pair that traverse it. Disconnected graphs
    are handled per component (unreachable pairs contribute nothing).
    """
    adj: list[list[tuple[int, float]]] = [[] for _ in range(n)]
    for (u, v), w in edges.items():
        if w <= 0:
            raise ValueError("edge lengths must be positive")
        adj[u].append((v, w))
        adj[v].append((u, w))
    bt = {e: 0.0 for e in edges}
    for s in range(n):
        dist = np.full(n, np.inf)
        sigma = np.zeros(n, dtype=np.int64)
        preds: list[list[int]] = [[] for _ in range(n)]
        done = np.zeros(n, dtype=bool)
        dist[s] = 0.0
        sigma[s] = 1
        heap: list[tuple[float, int]] = [(0.0, s)]
        order: list[int] = []
        while heap:
            d, u = heapq.heappop(heap)
            if done[u]:
                continue
            done[u] = True
            order.append(u)
            for v, w in adj[u]:
                if done[v]:
                    continue
                nd = d + w
                tol = _REL_TIE_TOL * max(1.0, abs(dist[v]) if np.isfinite(dist[v]) else 0.0)
                if nd < dist[v] - tol:
                    dist[v] = nd
                    sigma[v] = sigma[u]
                    preds[v] = [u]
                    heapq.heappush(heap, (nd, v))
                elif abs(nd - dist[v]) <= tol:
                    sigma[v] += sigma[u]
                    preds[v].append(u)
        delta = np.zeros(n)
        for u in reversed(order):
            for p in preds[u]:
                c = (sigma[p] / sigma[u]) * (1.0 + delta[u])
                key = (p, u) if p < u else (u, p)
                bt[key] += c
                delta[p] += c
    # every unordered pair was counted from both endpoints
    return {e: v / 2.0 for e, v in bt.items()}


def _components(n: int, edges: Iterable[Edge]) -> list[int]:
    parent = list(range(n))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for u, v in edges:
        ru, rv = find(u), find(v)
        if ru != rv:
            parent[max(ru, rv)] = min(ru, rv)
    roots: dict[int, int] = {}
    labels = []
    for x in range(n):
        r = find(x)
        if r not in roots:
            roots[r] = len(roots)
        labels.append(roots[r])
    return labels


def dcs_cluster(phi: np.ndarray, n_clusters: int) -> list[int]:
    """Partition BSs into exactly n_clusters groups.

    Iteratively removes the edge with the highest betweenness (ties broken
    by lexicographic edge index) from the affinity graph until the requested
    number of connected components exists. Deterministic for a given matrix.
    """
    n = phi.shape[0]
    if not 1 <= n_clusters <= n:
        raise ValueError(f"cluster count {n_clusters} outside [1, {n}]")
    edges = _edges_from_phi(phi)
    labels = _components(n, edges)
    if max(labels) + 1 > n_clusters:
        raise ValueError(
            f"affinity graph already has {max(labels) + 1} components; "
            f"cannot merge down to {n_clusters}")
    while max(labels) + 1 < n_clusters:
        bt = edge_betweenness(n, edges)
        top = max(bt.values())
        tol = _REL_TIE_TOL * max(1.0, abs(top))
        candidates = [e for e, v in bt.items() if v >= top - tol]
        del edges[min(candidates)]
        labels = _components(n, edges)
    return labels


# -- twin models -------------------------------------------------------------

@dataclass(frozen=True)
class TwinModel:
    """Content-popularity forecast model: logits over the catalogue."""

    logits: np.ndarray
    version: int = 0

    def pmf(self) -> np.ndarray:
        z = self.logits - float(np.max(self.logits))
        e = np.exp(z)
        return e / float(np.sum(e))

    @staticmethod
    def fresh(catalogue_size: int) -> "TwinModel":
        return TwinModel(logits=np.zeros(catalogue_size), version=0)


@dataclass(frozen=True)
class TwinSyncConfig:
    """Update gating and local-training hyperparameters."""

    sync_threshold: float = 0.01
    learning_rate: float = 0.1
    batch_size: int = 64

    def __post_init__(self) -> None:
        if self.sync_threshold <= 0:
            raise ValueError("sync_threshold must be > 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def divergence(a: TwinModel, b: TwinModel) -> float:
    """Mean squared difference between two parameter vectors."""
    if a.logits.shape != b.logits.shape:
        raise AggregationError(
            f"model lengths differ: {a.logits.shape} vs {b.logits.shape}")
    d = a.logits - b.logits
    return float(np.mean(d * d))


def train_local_twin(history: Sequence[RequestEvent] | Sequence[int],
                     prev: TwinModel, cfg: TwinSyncConfig) -> TwinModel:
    """One pass of mini-batch cross-entropy updates toward the history's
    empirical content distribution.

    The gradient of the cross-entropy between a batch's empirical
    distribution and the model pmf with respect to the logits is
    (pmf - batch distribution), so the fixed point reproduces the history.
    """
    if len(history) == 0:
        raise ValueError("history must be non-empty")
    ids = np.array([ev.content if isinstance(ev, RequestEvent) else int(ev)
                    for ev in history], dtype=np.int64)
    n_c = prev.logits.shape[0]
    logits = prev.logits.copy()
    for start in range(0, len(ids), cfg.batch_size):
        batch = ids[start:start + cfg.batch_size]
        q = np.bincount(batch, minlength=n_c) / len(batch)
        z = logits - np.max(logits)
        e = np.exp(z)
        p = e / np.sum(e)
        logits -= cfg.learning_rate * (p - q)
    return TwinModel(logits=logits, version=prev.version + 1)


def cluster_models(local_models: Sequence[TwinModel],
                   cluster_of: Sequence[int]) -> dict[int, TwinModel]:
    """Dimension-wise mean of member parameters per cluster."""
    if len(local_models) != len(cluster_of):
        raise AggregationError("one cluster label required per local model")
    shapes = {m.logits.shape for m in local_models}
    if len(shapes) > 1:
        raise AggregationError(f"mixed model lengths: {shapes}")
    groups: dict[int, list[TwinModel]] = {}
    for m, c in zip(local_models, cluster_of):
        groups.setdefault(int(c), []).append(m)
    out = {}
    for c, members in sorted(groups.items()):
        stacked = np.stack([m.logits for m in members])
        out[c] = TwinModel(logits=stacked.mean(axis=0),
                           version=max(m.version for m in members))
    return out


def v_twinning(local_models: Sequence[TwinModel], cluster_of: Sequence[int],
               size_weighted: bool = False) -> tuple[dict[int, TwinModel], TwinModel]:
    """Synchronous initialization: cluster means, then their mean as the
    global model (clusters weighted equally unless size_weighted)."""
    per_cluster = cluster_models(local_models, cluster_of)
    mats = np.stack([m.logits for m in per_cluster.values()])
    if size_weighted:
        sizes = np.array([list(cluster_of).count(c) for c in per_cluster],
                         dtype=np.float64)
        glob = (mats * sizes[:, None]).sum(axis=0) / sizes.sum()
    else:
        glob = mats.mean(axis=0)
    version = max(m.version for m in per_cluster.values())
    return per_cluster, TwinModel(logits=glob, version=version)


def h_twinning(local_models: Sequence[TwinModel], cluster_of: Sequence[int],
               current_global: TwinModel, sync_threshold: float,
               arrival_order: Sequence[int] | None = None) -> TwinModel:
    """Asynchronous refresh: each arriving cluster aggregate is compared to
    the global model, and when the mean-squared divergence exceeds the
    threshold the global model is replaced by the mean of the current
    cluster aggregates. Clusters are processed strictly in arrival order."""
    per_cluster = cluster_models(local_models, cluster_of)
    order = list(arrival_order) if arrival_order is not None else sorted(per_cluster)
    glob = current_global
    all_mean = np.stack([m.logits for m in per_cluster.values()]).mean(axis=0)
    for c in order:
        if c not in per_cluster:
            raise AggregationError(f"arrival order names unknown cluster {c}")
        eps = divergence(per_cluster[c], glob)
        if eps > sync_threshold:
            glob = TwinModel(logits=all_mean.copy(), version=glob.version + 1)
    return glob


class GlobalTwinHub:
    """Serialized aggregation point for concurrent cluster submissions.

    Submissions are applied one at a time in arrival order; readers always
    observe a complete global model, never a partial update.
    """

    def __init__(self, initial: TwinModel, sync_threshold: float):
        self._lock = threading.Lock()
        self._global = initial
        self._threshold = sync_threshold
        self._cluster: dict[int, TwinModel] = {}

    def submit(self, cluster_id: int, model: TwinModel) -> bool:
        """Record a cluster aggregate; returns True when the global model
        was refreshed."""
        with self._lock:
            self._cluster[int(cluster_id)] = model
            eps = divergence(model, self._global)
            if eps > self._threshold:
                mats = np.stack([m.logits for _, m in sorted(self._cluster.items())])
                self._global = TwinModel(logits=mats.mean(axis=0),
                                         version=self._global.version + 1)
                return True
            return False

    @property
    def global_model(self) -> TwinModel:
        with self._lock:
            return self._global


def forecast_requests(twin: TwinModel, horizon: int,
                      rng: np.random.Generator, n_clients: int = 1,
                      start_time: int = 0) -> list[RequestEvent]:
    """Sample a synthetic request stream from the twin's distribution."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    pmf = twin.pmf()
    contents = rng.choice(len(pmf), size=horizon, p=pmf)
    clients = rng.integers(0, n_clients, size=horizon)
    return [RequestEvent(time=start_time + i, client=int(clients[i]),
                         content=int(contents[i]))
            for i in range(horizon)]


TWIN_CHECKPOINT_VERSION = 1


def save_twin(path: str, twin: TwinModel, created_step: int = 0) -> None:
    """Versioned checkpoint: header (catalogue size, version, step) plus the
    parameter payload; round-trips bit-exactly."""
    np.savez(path if path.endswith(".npz") else path + ".npz",
             format_version=np.int64(TWIN_CHECKPOINT_VERSION),
             catalogue_size=np.int64(twin.logits.shape[0]),
             model_version=np.int64(twin.version),
             created_step=np.int64(created_step),
             logits=twin.logits)


def load_twin(path: str) -> tuple[TwinModel, int]:
    """Returns (model, created_step)."""
    with np.load(path if path.endswith(".npz") else path + ".npz") as data:
        if int(data["format_version"]) != TWIN_CHECKPOINT_VERSION:
            raise ValueError(
                f"unsupported twin checkpoint version {int(data['format_version'])}")
        twin = TwinModel(logits=data["logits"].copy(),
                         version=int(data["model_version"]))
        return twin, int(data["created_step"])

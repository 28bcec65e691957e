"""Experiment orchestration: run loops, twin lifecycle, metrics, comparison.

A run proceeds in up to three phases. For twin-assisted policies the local
popularity twins are first trained on a history prefix, the stations are
clustered, and the cluster/global models initialized; the agent is then
pre-trained on synthetic requests sampled from the global twin; finally the
main pass runs on the target workload with periodic re-clustering and
threshold-gated global-twin refreshes. Classical policies skip straight to
the main pass.

All randomness is derived from one seed via named SeedSequence children,
so identical (config, seed) pairs reproduce byte-identical metrics files.
Policies compared under the same seed observe the identical request
sequence.
"""

from __future__ import annotations

import csv
import dataclasses
import os
from dataclasses import dataclass, replace
from typing import Iterator, Sequence

import numpy as np

from .agent import DqnAgent, StateEncoder
from .baselines import CLASSICAL, PolicyKind, decide_for_context
from .config import ExperimentConfig, dump_config
from .errors import TrainingDivergenceError
from .netmodel import Action, CacheNetwork, LoadTracker, NetworkConfig
from .reliability import (InterventionLog, ReliabilityConfig, extend_state,
                          intervene_action, shape_reward)
from .twin import (BsDescriptor, TwinModel, affinity_matrix, dcs_cluster,
                   forecast_requests, h_twinning, save_twin, train_local_twin,
                   v_twinning)
from .workload import (RequestEvent, RequestSampler, WorkloadModel,
                       empirical_distribution, load_trace)

_SEED_TAG = 0xED6E


@dataclass(frozen=True)
class MetricsRecord:
    """One evaluation-window snapshot (cumulative rates, window means)."""

    step: int
    hit_rate: float
    loads: tuple[float, ...]
    mutations: int
    reward_mean: float
    shaped_reward_mean: float


@dataclass
class SeedResult:
    seed: int
    records: list[MetricsRecord]
    final_hit_rate: float
    final_loads: tuple[float, ...]
    mutations: int
    policy_errors: int
    decisions: int
    requests: int
    hits: int


def effective_reliability(policy: PolicyKind,
                          rel: ReliabilityConfig) -> ReliabilityConfig:
    """Policy kind fixes which modules may be active: classical policies and
    the plain DQN run bare; rec/d_rec always carry the state module."""
    if policy in CLASSICAL or policy == PolicyKind.BASIC_DQN:
        return replace(rel, enable_state=False, enable_action=False,
                       enable_reward=False)
    return replace(rel, enable_state=True)


def bs_descriptors(network: NetworkConfig,
                   histories: Sequence[Sequence[int]],
                   catalogue_size: int) -> list[BsDescriptor]:
    """Affinity inputs: geometry and backhaul from the topology, request
    mixes from per-BS serving histories."""
    descriptors = []
    for n in range(network.n_bs):
        dist = empirical_distribution(
            [RequestEvent(time=0, client=0, content=c) for c in histories[n]],
            catalogue_size)
        descriptors.append(BsDescriptor(
            position=network.bs_positions[n],
            backhaul=network.backhaul_capacity[n],
            clients=network.client_set(n),
            request_dist=dist))
    return descriptors


def route_history(events: Sequence[RequestEvent],
                  network: NetworkConfig) -> list[list[int]]:
    """Assign past events to stations by least-loaded covering BS, without
    touching any cache state."""
    tracker = LoadTracker(network.n_bs, network.load_window)
    hist: list[list[int]] = [[] for _ in range(network.n_bs)]
    for ev in events:
        cov = sorted(network.coverage[ev.client])
        best = cov[0]
        best_load = tracker.normalized_load(best)
        for b in cov[1:]:
            load = tracker.normalized_load(b)
            if load < best_load:
                best, best_load = b, load
        tracker.record(best)
        hist[best].append(ev.content)
    return hist


def _bounded(sampler: RequestSampler, n: int) -> Iterator[RequestEvent]:
    for _ in range(n):
        yield sampler.sample()


class Runner:
    """Single-seed executor for one policy."""

    def __init__(self, cfg: ExperimentConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        self.policy = cfg.policy
        self.rel = effective_reliability(cfg.policy, cfg.reliability)
        ss = np.random.SeedSequence([int(seed), _SEED_TAG])
        (self.rng_main, self.rng_prefix, self.rng_forecast,
         self.rng_select, self.rng_mutate) = map(np.random.default_rng, ss.spawn(5))
        self.encoder = StateEncoder(
            n_bs=cfg.network.n_bs, n_clients=cfg.network.n_clients,
            t_scale=cfg.run.request_budget, f_scale=cfg.network.freq_window,
            extended=self.rel.enable_state)
        self.agent: DqnAgent | None = None
        if cfg.policy.is_learned:
            self.agent = DqnAgent(cfg.agent, self.encoder.width,
                                  cfg.network.n_actions, seed=seed)
        self.log = InterventionLog()
        self.local_twins = [TwinModel.fresh(cfg.catalogue_size)
                            for _ in range(cfg.network.n_bs)]
        self.global_twin = TwinModel.fresh(cfg.catalogue_size)
        self.clusters: list[int] = [0] * cfg.network.n_bs
        self.decisions = 0
        self.records: list[MetricsRecord] = []

    # -- twin lifecycle ------------------------------------------------------

    def bootstrap_twins(self, events: Sequence[RequestEvent]) -> None:
        cfg = self.cfg
        histories = route_history(events, cfg.network)
        for n in range(cfg.network.n_bs):
            if histories[n]:
                self.local_twins[n] = train_local_twin(
                    histories[n], self.local_twins[n], cfg.twin.sync)
        phi = affinity_matrix(
            bs_descriptors(cfg.network, histories, cfg.catalogue_size),
            cfg.twin.affinity)
        self.clusters = self._cluster_or_keep(phi)
        _, self.global_twin = v_twinning(self.local_twins, self.clusters,
                                         size_weighted=cfg.twin.size_weighted)

    def _cluster_or_keep(self, phi: np.ndarray) -> list[int]:
        try:
            return dcs_cluster(phi, self.cfg.twin.clusters)
        except ValueError:
            # affinity graph too fragmented for the requested count
            return self.clusters

    def refresh_twins(self, env: CacheNetwork) -> None:
        cfg = self.cfg
        histories = [list(h) for h in env.bs_history]
        for n in range(cfg.network.n_bs):
            if histories[n]:
                self.local_twins[n] = train_local_twin(
                    histories[n], self.local_twins[n], cfg.twin.sync)
        phi = affinity_matrix(
            bs_descriptors(cfg.network, histories, cfg.catalogue_size),
            cfg.twin.affinity)
        self.clusters = self._cluster_or_keep(phi)
        self.global_twin = h_twinning(self.local_twins, self.clusters,
                                      self.global_twin,
                                      cfg.twin.sync.sync_threshold)

    # -- main loop -----------------------------------------------------------

    def _valid_actions(self, env: CacheNetwork, client: int) -> np.ndarray:
        """Candidate actions offered to the agent at a decision: skip, plus
        one replacement slot per covering BS (the first empty slot, or the
        least-recently-used one). Narrowing the choice to the natural victim
        keeps the learning problem at admit/placement granularity while the
        environment still accepts the full action range."""
        cap = env.config.cap
        out = [0]
        for b in sorted(env.config.coverage[client]):
            unit = env.units[b]
            slot = unit.first_empty()
            if slot is None:
                slot = min(range(cap),
                           key=lambda i: (unit.slots[i].cached_at, i))  # type: ignore[union-attr]
            out.append(b * cap + slot + 1)
        return np.asarray(out)

    def _policy_action(self, env: CacheNetwork, enc: np.ndarray) -> Action:
        assert env.pending is not None
        if self.agent is not None:
            valid = self._valid_actions(env, env.pending.client)
            return self.agent.select_action(enc, self.rng_select,
                                            valid_actions=valid)
        return decide_for_context(self.policy, env, env.pending,
                                  self.rng_select, global_lfu=self.cfg.global_lfu)

    def _encoded_state(self, env: CacheNetwork):
        assert env.pending is not None
        state = env.pending.state
        if self.rel.enable_state:
            state = extend_state(state, env.pending.client,
                                 env.tracker.load_vector())
        return state, self.encoder.encode(state)

    def run_phase(self, env: CacheNetwork, stream: Iterator[RequestEvent],
                  train: bool, collect: bool, twin_updates: bool) -> None:
        cfg = self.cfg
        window_rewards: list[float] = []
        window_shaped: list[float] = []
        next_twin_refresh = cfg.twin.recluster_period
        if env.advance(stream) is None:
            return
        _, enc = self._encoded_state(env)
        while env.pending is not None:
            proposed = self._policy_action(env, enc)
            final = proposed
            if self.rel.enable_action:
                final, _ = intervene_action(
                    proposed, env, env.pending.client, self.rel,
                    self.rng_mutate, log=self.log if collect else None,
                    step=self.decisions)
            out = env.step(final, stream)
            shaped = out.reward
            if self.rel.enable_reward:
                shaped = shape_reward(out.reward, env.tracker.load_vector(),
                                      self.rel.balance_weight, cfg.network.n_bs)
            enc_next = None
            if out.next_state is not None:
                _, enc_next = self._encoded_state(env)
            if self.agent is not None and train:
                self.agent.store_transition(enc, final.value, shaped,
                                            out.penalty, enc_next, out.terminal)
                if (self.agent.replay.size >= cfg.agent.batch_size
                        and self.decisions % cfg.agent.train_period == 0):
                    for _ in range(cfg.agent.train_repeats):
                        self.agent.train_step()
            if collect:
                self.decisions += 1
                window_rewards.append(out.reward)
                window_shaped.append(shaped)
                if self.decisions % cfg.run.eval_window == 0:
                    self._record(env, window_rewards, window_shaped)
                    window_rewards = []
                    window_shaped = []
            else:
                self.decisions += 1
            if twin_updates and env.requests >= next_twin_refresh:
                self.refresh_twins(env)
                next_twin_refresh += cfg.twin.recluster_period
            enc = enc_next
        if collect and window_rewards:
            self._record(env, window_rewards, window_shaped)

    def _record(self, env: CacheNetwork, rewards: list[float],
                shaped: list[float]) -> None:
        hr = env.hit_rate()
        self.records.append(MetricsRecord(
            step=self.decisions,
            hit_rate=0.0 if hr is None else hr,
            loads=tuple(float(x) for x in env.tracker.load_vector()),
            mutations=self.log.mutation_count,
            reward_mean=float(np.mean(rewards)) if rewards else 0.0,
            shaped_reward_mean=float(np.mean(shaped)) if shaped else 0.0))

    def run(self) -> tuple[SeedResult, CacheNetwork]:
        cfg = self.cfg
        uses_twin = self.policy == PolicyKind.D_REC

        if uses_twin and cfg.workload is not None:
            model = replace(cfg.workload, seed=self.seed)
            prefix_sampler = RequestSampler(model, cfg.network.n_clients,
                                            self.rng_prefix)
            prefix = prefix_sampler.take(cfg.twin.history_prefix)
            self.bootstrap_twins(prefix)
            if cfg.twin.pretrain_requests > 0 and self.agent is not None:
                synth = forecast_requests(self.global_twin,
                                          cfg.twin.pretrain_requests,
                                          self.rng_forecast,
                                          n_clients=cfg.network.n_clients)
                pre_env = CacheNetwork(cfg.network, cfg.catalogue_size,
                                       cfg.run.reward_scale,
                                       cfg.run.penalty_sharpness)
                self.run_phase(pre_env, iter(synth), train=True,
                               collect=False, twin_updates=False)

        env = CacheNetwork(cfg.network, cfg.catalogue_size,
                           cfg.run.reward_scale, cfg.run.penalty_sharpness)
        self.decisions = 0
        self.log = InterventionLog()
        if cfg.workload is not None:
            model = replace(cfg.workload, seed=self.seed)
            sampler = RequestSampler(model, cfg.network.n_clients, self.rng_main)
            stream: Iterator[RequestEvent] = _bounded(sampler, cfg.run.request_budget)
        else:
            assert cfg.trace_path is not None
            stream = load_trace(cfg.trace_path, cfg.trace_catalogue_cap,
                                n_clients=cfg.network.n_clients)
        self.run_phase(env, stream, train=True, collect=True,
                       twin_updates=uses_twin)

        hr = env.hit_rate()
        result = SeedResult(
            seed=self.seed, records=self.records,
            final_hit_rate=0.0 if hr is None else hr,
            final_loads=tuple(float(x) for x in env.tracker.load_vector()),
            mutations=self.log.mutation_count,
            policy_errors=env.policy_errors,
            decisions=self.decisions, requests=env.requests, hits=env.hits)
        return result, env


# -- metrics emission ---------------------------------------------------------


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def metrics_header(n_bs: int) -> list[str]:
    return (["step", "hit_rate"] + [f"load_{i}" for i in range(n_bs)]
            + ["mutations", "reward_mean", "shaped_reward_mean"])


def emit_metrics(records: Sequence[MetricsRecord], path: str, n_bs: int) -> None:
    """Write one seed's records; emitting the same records twice produces
    identical bytes."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(metrics_header(n_bs))
        for r in records:
            writer.writerow([r.step, _fmt(r.hit_rate),
                             *[_fmt(x) for x in r.loads], r.mutations,
                             _fmt(r.reward_mean), _fmt(r.shaped_reward_mean)])


def summarize(results: Sequence[SeedResult]) -> dict[str, float]:
    hit = np.array([r.final_hit_rate for r in results])
    spread = np.array([max(r.final_loads) - min(r.final_loads) for r in results])
    max_load = np.array([max(r.final_loads) for r in results])
    min_load = np.array([min(r.final_loads) for r in results])
    muts = np.array([r.mutations for r in results], dtype=np.float64)
    return {
        "seeds": float(len(results)),
        "hit_rate_mean": float(hit.mean()),
        "hit_rate_std": float(hit.std()),
        "max_load_mean": float(max_load.mean()),
        "min_load_mean": float(min_load.mean()),
        "load_spread_mean": float(spread.mean()),
        "mutations_mean": float(muts.mean()),
    }


def emit_summary(summary: dict[str, float], path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(summary.keys()))
        writer.writerow([_fmt(v) for v in summary.values()])


def run_experiment(cfg: ExperimentConfig,
                   out_dir: str | None = None) -> list[SeedResult]:
    """Execute all seeds for one policy; write per-seed metrics CSVs, a
    summary CSV, a config echo, and checkpoints under out_dir."""
    out = out_dir if out_dir is not None else cfg.run.out_dir
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.toml"), "w", encoding="utf-8") as fh:
        fh.write(dump_config(cfg.raw))
    results = []
    for seed in cfg.run.seeds:
        runner = Runner(cfg, seed)
        try:
            result, env = runner.run()
        except TrainingDivergenceError:
            if runner.agent is not None:
                runner.agent.save(os.path.join(out, f"abort_seed{seed}.npz"))
            raise
        emit_metrics(result.records,
                     os.path.join(out, f"seed_{seed}.csv"), cfg.network.n_bs)
        if runner.agent is not None:
            runner.agent.save(os.path.join(out, f"agent_seed{seed}.npz"))
        if cfg.policy == PolicyKind.D_REC:
            save_twin(os.path.join(out, f"twin_seed{seed}.npz"),
                      runner.global_twin, created_step=result.requests)
        if runner.log.records:
            runner.log.export_csv(os.path.join(out, f"mutations_seed{seed}.csv"))
        results.append(result)
    emit_summary(summarize(results), os.path.join(out, "summary.csv"))
    return results


def compare_policies(cfg: ExperimentConfig, kinds: Sequence[PolicyKind],
                     out_dir: str | None = None) -> list[dict]:
    """Run several policies on identical request streams; returns and writes
    a ranking table."""
    out = out_dir if out_dir is not None else cfg.run.out_dir
    os.makedirs(out, exist_ok=True)
    rows = []
    for kind in kinds:
        raw_echo = {**cfg.raw, "policy": {**cfg.raw.get("policy", {}),
                                          "kind": kind.value}}
        sub_cfg = dataclasses.replace(cfg, policy=kind, raw=raw_echo)
        sub = os.path.join(out, kind.value)
        results = run_experiment(sub_cfg, out_dir=sub)
        summary = summarize(results)
        row = {"policy": kind.value}
        row.update(summary)
        rows.append(row)
    path = os.path.join(out, "compare.csv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        header = list(rows[0].keys())
        writer.writerow(header)
        for row in rows:
            writer.writerow([row[k] if k == "policy" else _fmt(row[k])
                             for k in header])
    return rows

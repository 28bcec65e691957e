"""Experiment configuration: TOML parsing, validation, overrides.

The full schema with defaults ships as ``defaults.toml`` next to this
module. A user config only needs the keys it changes; parsing merges it
over the defaults. Parse -> serialize -> parse is a fixed point.
"""

from __future__ import annotations

import copy
import importlib.resources
from dataclasses import dataclass, field
from typing import Any

import toml

from .agent import AgentConfig
from .baselines import PolicyKind
from .errors import ConfigError
from .netmodel import NetworkConfig, build_topology
from .reliability import ReliabilityConfig
from .twin import AffinityConfig, TwinSyncConfig
from .workload import WORKLOAD_KINDS, WorkloadModel


def default_dict() -> dict:
    text = importlib.resources.files("edgetwin").joinpath("defaults.toml").read_text()
    return toml.loads(text)


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{here}: expected a table")
            out[key] = _merge(base[key], value, here)
        else:
            out[key] = value
    return out


def load_config_dict(path: str | None = None,
                     overrides: list[str] | None = None) -> dict:
    """Defaults merged with an optional user file and key=value overrides."""
    cfg = default_dict()
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                user = toml.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except toml.TomlDecodeError as exc:
            raise ConfigError(f"config {path} is not valid TOML: {exc}") from exc
        cfg = _merge(cfg, user)
    for item in overrides or []:
        cfg = apply_override(cfg, item)
    return cfg


def apply_override(cfg: dict, item: str) -> dict:
    """Apply one dotted-path override like policy.agent.gamma=0.9."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    try:
        value = toml.loads(f"x = {raw.strip()}")["x"]
    except toml.TomlDecodeError:
        value = raw.strip()
    node: Any = cfg
    for p in parts[:-1]:
        if not isinstance(node, dict) or p not in node:
            raise ConfigError(f"unknown config key: {key.strip()}")
        node = node[p]
    leaf = parts[-1]
    if not isinstance(node, dict) or leaf not in node:
        raise ConfigError(f"unknown config key: {key.strip()}")
    if isinstance(node[leaf], dict):
        raise ConfigError(f"{key.strip()} is a table, not a value")
    node[leaf] = value
    return cfg


def dump_config(cfg: dict) -> str:
    return toml.dumps(cfg)


@dataclass(frozen=True)
class TwinRunConfig:
    clusters: int
    affinity: AffinityConfig
    sync: TwinSyncConfig
    recluster_period: int
    history_prefix: int
    pretrain_requests: int
    size_weighted: bool


@dataclass(frozen=True)
class RunConfig:
    request_budget: int
    eval_window: int
    seeds: tuple[int, ...]
    out_dir: str
    reward_scale: float
    penalty_sharpness: float


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated, typed view of one experiment."""

    network: NetworkConfig
    workload: WorkloadModel | None      # None when replaying a trace
    trace_path: str | None
    trace_catalogue_cap: int
    catalogue_size: int
    policy: PolicyKind
    global_lfu: bool
    agent: AgentConfig
    reliability: ReliabilityConfig
    twin: TwinRunConfig
    run: RunConfig
    raw: dict = field(repr=False, default_factory=dict)


def _require(cond: bool, path: str, msg: str) -> None:
    if not cond:
        raise ConfigError(f"{path}: {msg}")


def validate_config(cfg: dict) -> ExperimentConfig:
    """Build the typed config, raising ConfigError with field paths."""
    net = cfg["network"]
    try:
        network = build_topology(
            n_bs=int(net["n_bs"]), cap=int(net["cap"]),
            clients_per_bs=int(net["clients_per_bs"]),
            kind=str(net["topology"]),
            overlap_fraction=float(net["overlap_fraction"]),
            spacing=float(net["spacing"]), backhaul=net["backhaul"],
            load_window=int(net["load_window"]),
            freq_window=int(net["freq_window"]))
    except (ConfigError, ValueError, TypeError) as exc:
        raise ConfigError(f"network: {exc}") from exc

    wl = cfg["workload"]
    kind = str(wl["kind"])
    trace_path: str | None = None
    workload: WorkloadModel | None = None
    trace_cap = int(wl["trace_catalogue_cap"]) or 10 * network.cap
    if kind == "trace":
        trace_path = str(wl["trace_path"])
        _require(bool(trace_path), "workload.trace_path",
                 "required when kind = 'trace'")
        catalogue_size = trace_cap
    else:
        _require(kind in WORKLOAD_KINDS, "workload.kind",
                 f"must be one of {WORKLOAD_KINDS + ('trace',)}")
        params: dict[str, float] = {}
        if kind == "zipf":
            params["p"] = float(wl["zipf_p"])
        elif kind == "normal":
            params["mean"] = float(wl["normal_mean"])
            params["stddev"] = float(wl["normal_stddev"])
        elif kind == "poisson":
            params["rate"] = float(wl["poisson_rate"])
        catalogue_size = int(wl["catalogue_size"])
        try:
            # model seed is filled per run seed; 0 here only validates params
            workload = WorkloadModel(kind=kind, catalogue_size=catalogue_size,
                                     params=params, seed=0)
        except ValueError as exc:
            raise ConfigError(f"workload: {exc}") from exc

    pol = cfg["policy"]
    try:
        policy = PolicyKind(str(pol["kind"]))
    except ValueError as exc:
        raise ConfigError(
            f"policy.kind: {pol['kind']!r} is not a known policy") from exc
    ag = pol["agent"]
    try:
        agent = AgentConfig(
            gamma=float(ag["gamma"]), learning_rate=float(ag["learning_rate"]),
            batch_size=int(ag["batch_size"]),
            replay_capacity=int(ag["replay_capacity"]),
            eps_start=float(ag["eps_start"]), eps_end=float(ag["eps_end"]),
            eps_decay_steps=int(ag["eps_decay_steps"]),
            target_sync_period=int(ag["target_sync_period"]),
            hidden=tuple(int(h) for h in ag["hidden"]),
            aux_cost=float(ag["aux_cost"]),
            cost_budget=float(ag["cost_budget"]),
            train_period=int(ag["train_period"]),
            train_repeats=int(ag["train_repeats"]))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"policy.agent: {exc}") from exc

    rel = cfg["reliability"]
    try:
        reliability = ReliabilityConfig(
            enable_state=bool(rel["enable_state"]),
            enable_action=bool(rel["enable_action"]),
            enable_reward=bool(rel["enable_reward"]),
            overload_threshold=float(rel["overload_threshold"]),
            mute_prob=float(rel["mute_prob"]),
            balance_weight=float(rel["balance_weight"]))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"reliability: {exc}") from exc

    tw = cfg["twin"]
    try:
        twin = TwinRunConfig(
            clusters=int(tw["clusters"]),
            affinity=AffinityConfig(
                w_distance=float(tw["w_distance"]),
                w_backhaul=float(tw["w_backhaul"]),
                w_overlap=float(tw["w_overlap"]),
                w_requests=float(tw["w_requests"]),
                normalize=bool(tw["normalize"])),
            sync=TwinSyncConfig(
                sync_threshold=float(tw["sync_threshold"]),
                learning_rate=float(tw["learning_rate"]),
                batch_size=int(tw["batch_size"])),
            recluster_period=int(tw["recluster_period"]),
            history_prefix=int(tw["history_prefix"]),
            pretrain_requests=int(tw["pretrain_requests"]),
            size_weighted=bool(tw["size_weighted"]))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"twin: {exc}") from exc
    _require(1 <= twin.clusters <= network.n_bs, "twin.clusters",
             f"must be in [1, {network.n_bs}]")

    rn = cfg["run"]
    seeds = tuple(int(s) for s in rn["seeds"])
    _require(len(seeds) >= 1, "run.seeds", "seed list must be non-empty")
    try:
        run = RunConfig(request_budget=int(rn["request_budget"]),
                        eval_window=int(rn["eval_window"]),
                        seeds=seeds, out_dir=str(rn["out_dir"]),
                        reward_scale=float(rn["reward_scale"]),
                        penalty_sharpness=float(rn["penalty_sharpness"]))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"run: {exc}") from exc
    _require(run.request_budget >= 1, "run.request_budget", "must be >= 1")
    _require(run.eval_window >= 1, "run.eval_window", "must be >= 1")

    return ExperimentConfig(
        network=network, workload=workload, trace_path=trace_path,
        trace_catalogue_cap=trace_cap, catalogue_size=catalogue_size,
        policy=policy, global_lfu=bool(pol["global_lfu"]), agent=agent,
        reliability=reliability, twin=twin, run=run, raw=cfg)


def load_config(path: str | None = None,
                overrides: list[str] | None = None) -> ExperimentConfig:
    return validate_config(load_config_dict(path, overrides))

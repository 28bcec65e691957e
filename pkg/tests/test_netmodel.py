import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgetwin.errors import ConfigError, ContractError
from edgetwin.netmodel import (Action, CacheNetwork, CacheUnit, LoadTracker,
                               NetworkConfig, build_topology)
from edgetwin.workload import RequestEvent


def tiny_net(n_bs=2, cap=2, clients_per_bs=1, coverage=None, window=100):
    if coverage is None:
        coverage = tuple((i,) for i in range(n_bs * clients_per_bs))
    return NetworkConfig(
        n_bs=n_bs, cap=cap, clients_per_bs=clients_per_bs,
        coverage=tuple(tuple(c) for c in coverage),
        bs_positions=tuple((100.0 * i, 0.0) for i in range(n_bs)),
        backhaul_capacity=tuple(100.0 for _ in range(n_bs)),
        load_window=window)


def ev(t, client, content):
    return RequestEvent(time=t, client=client, content=content)


class TestActionEncoding:
    def test_skip(self):
        assert Action(0).target(cap=150) is None

    def test_value_one_is_bs0_slot0(self):
        # 5 BSs x 150 slots
        assert Action(1).target(cap=150) == (0, 0)

    def test_general_decode(self):
        cap = 150
        assert Action(cap).target(cap) == (0, cap - 1)
        assert Action(cap + 1).target(cap) == (1, 0)
        assert Action(5 * cap).target(cap) == (4, cap - 1)

    def test_roundtrip(self):
        for bs in range(3):
            for slot in range(4):
                a = Action.for_slot(bs, slot, cap=4)
                assert a.target(4) == (bs, slot)


class TestCacheUnit:
    def test_lookup_hit_bumps_counters(self):
        u = CacheUnit(2)
        u.store(0, content=7, t=1)
        assert u.lookup(7, t=5)
        assert u.slots[0].freq == 2
        assert u.slots[0].cached_at == 5

    def test_lookup_miss_leaves_unit_unchanged(self):
        u = CacheUnit(2)
        u.store(0, content=7, t=1)
        before = [(s.content, s.cached_at, s.freq) if s else None
                  for s in u.slots]
        assert not u.lookup(8, t=5)
        after = [(s.content, s.cached_at, s.freq) if s else None
                 for s in u.slots]
        assert before == after

    def test_empty_unit_misses(self):
        assert not CacheUnit(3).lookup(0, t=0)

    def test_store_evicts_and_resets(self):
        u = CacheUnit(2)
        u.store(0, 1, t=0)
        u.store(0, 2, t=3)
        assert 1 not in u
        assert u.slots[0].content == 2
        assert u.slots[0].freq == 1

    def test_no_duplicate_content(self):
        u = CacheUnit(3)
        u.store(0, 5, t=0)
        u.store(2, 5, t=1)
        assert sum(1 for s in u.slots if s and s.content == 5) == 1


class TestLoadTracker:
    def test_count_ratio(self):
        tr = LoadTracker(3, window=10)
        for n in [0, 0, 1, 2]:
            tr.record(n)
        assert tr.normalized_load(0) == 0.5

    def test_empty_window_is_zero(self):
        assert LoadTracker(3, 10).normalized_load(1) == 0.0

    def test_balanced_window(self):
        tr = LoadTracker(5, window=100)
        for i in range(100):
            tr.record(i % 5)
        assert tr.load_vector().tolist() == [0.2] * 5

    def test_window_slides(self):
        tr = LoadTracker(2, window=2)
        tr.record(0)
        tr.record(0)
        tr.record(1)
        assert tr.normalized_load(0) == 0.5
        assert tr.occupancy == 2

    def test_invalid_index(self):
        with pytest.raises(ValueError):
            LoadTracker(2, 10).normalized_load(2)

    @given(st.lists(st.integers(0, 3), min_size=1, max_size=300))
    @settings(max_examples=50, deadline=None)
    def test_loads_sum_to_one(self, seq):
        tr = LoadTracker(4, window=64)
        for n in seq:
            tr.record(n)
        assert tr.load_vector().sum() == pytest.approx(1.0, abs=1e-9)


class TestRouting:
    def test_min_load_rule(self):
        cfg = tiny_net(n_bs=2, cap=2, coverage=((0, 1), (0, 1)))
        env = CacheNetwork(cfg, catalogue_size=10)
        # preload loads: BS0 3 ticks, BS1 1 tick -> 0.75 vs 0.25
        for n in [0, 0, 0, 1]:
            env.tracker.record(n)
        assert env.route_request(ev(0, 0, 1)) == 1

    def test_single_coverage(self):
        cfg = tiny_net(n_bs=3, cap=2, clients_per_bs=1,
                       coverage=((0,), (1,), (2,)))
        env = CacheNetwork(cfg, catalogue_size=10)
        assert env.route_request(ev(0, 2, 1)) == 2

    def test_tie_breaks_to_lowest_index(self):
        cfg = tiny_net(n_bs=2, cap=2, coverage=((0, 1), (0, 1)))
        env = CacheNetwork(cfg, catalogue_size=10)
        for n in [0, 1]:
            env.tracker.record(n)
        assert env.route_request(ev(0, 0, 1)) == 0

    def test_uncovered_client_impossible_by_construction(self):
        with pytest.raises(ConfigError):
            tiny_net(coverage=((), (1,)))


class TestAutoFillAndActions:
    def test_autofill_on_empty_slot(self):
        cfg = tiny_net(n_bs=1, cap=2, coverage=((0,),))
        env = CacheNetwork(cfg, catalogue_size=10)
        state = env.advance(iter([ev(0, 0, 3)]))
        assert state is None  # auto-filled, no decision
        assert 3 in env.units[0]
        assert env.autofills == 1

    def test_decision_on_full_cache_and_apply(self):
        cfg = tiny_net(n_bs=1, cap=1, coverage=((0,),))
        env = CacheNetwork(cfg, catalogue_size=10)
        state = env.advance(iter([ev(0, 0, 1), ev(1, 0, 2)]))
        assert state is not None
        assert env.pending.content == 2
        accepted, bs = env.apply_action(Action(1))
        assert accepted and bs == 0
        assert 2 in env.units[0]
        assert 1 not in env.units[0]

    def test_skip_leaves_state_unchanged(self):
        cfg = tiny_net(n_bs=1, cap=1, coverage=((0,),))
        env = CacheNetwork(cfg, catalogue_size=10)
        env.advance(iter([ev(0, 0, 1), ev(1, 0, 2)]))
        accepted, bs = env.apply_action(Action(0))
        assert not accepted and bs == 0
        assert 1 in env.units[0]

    def test_cross_bs_target_outside_coverage_is_policy_error(self):
        cfg = tiny_net(n_bs=2, cap=1, coverage=((0,), (1,)))
        env = CacheNetwork(cfg, catalogue_size=10)
        env.advance(iter([ev(0, 0, 1), ev(1, 0, 2)]))
        # action addressing BS1 slot0 while client 0 is covered by BS0 only
        accepted, bs = env.apply_action(Action.for_slot(1, 0, cap=1))
        assert not accepted and bs == 0
        assert env.policy_errors == 1
        assert 1 in env.units[0]  # untouched

    def test_cross_bs_target_in_coverage_redirects_load(self):
        cfg = tiny_net(n_bs=2, cap=1, coverage=((0, 1), (0, 1)))
        env = CacheNetwork(cfg, catalogue_size=10)
        env.advance(iter([ev(0, 0, 1), ev(1, 0, 2), ev(2, 0, 3)]))
        assert env.pending is not None
        routed = env.pending.serving_bs
        other = 1 - routed
        missed = env.pending.content
        before = env.tracker.counts[other]
        env.apply_action(Action.for_slot(other, 0, cap=1))
        assert env.units[other].slots[0].content == missed
        assert env.tracker.counts[other] == before + 1

    def test_action_out_of_range(self):
        cfg = tiny_net(n_bs=1, cap=1, coverage=((0,),))
        env = CacheNetwork(cfg, catalogue_size=10)
        env.advance(iter([ev(0, 0, 1), ev(1, 0, 2)]))
        with pytest.raises(ValueError):
            env.apply_action(Action(99))

    def test_apply_without_pending(self):
        cfg = tiny_net(n_bs=1, cap=1, coverage=((0,),))
        env = CacheNetwork(cfg, catalogue_size=10)
        with pytest.raises(ContractError):
            env.apply_action(Action(0))


class TestStepRewards:
    def _env_one_bs(self, cap=1):
        cfg = tiny_net(n_bs=1, cap=cap, coverage=((0,),))
        return CacheNetwork(cfg, catalogue_size=10)

    def test_three_hits_reward_and_penalty(self):
        env = self._env_one_bs()
        # fill (content 0), then miss (content 1) -> decision
        env.advance(iter([ev(0, 0, 0), ev(1, 0, 1)]))
        # accept content 1; it then hits three times before the next miss
        stream = iter([ev(2, 0, 1), ev(3, 0, 1), ev(4, 0, 1), ev(5, 0, 2)])
        out = env.step(Action(1), stream)
        assert out.reward == 3.0
        assert out.penalty == pytest.approx(0.25)
        assert out.hit
        assert not out.terminal

    def test_zero_hits(self):
        env = self._env_one_bs()
        env.advance(iter([ev(0, 0, 0), ev(1, 0, 1)]))
        out = env.step(Action(1), iter([ev(2, 0, 2)]))
        assert out.reward == 0.0
        assert out.penalty == 1.0
        assert not out.hit

    def test_reward_scale_and_sharpness(self):
        cfg = tiny_net(n_bs=1, cap=1, coverage=((0,),))
        env = CacheNetwork(cfg, catalogue_size=10,
                           reward_scale=2.0, penalty_sharpness=2.0)
        env.advance(iter([ev(0, 0, 0), ev(1, 0, 1)]))
        stream = iter([ev(2, 0, 1), ev(3, 0, 1), ev(4, 0, 1), ev(5, 0, 2)])
        out = env.step(Action(1), stream)
        assert out.reward == 6.0
        assert out.penalty == pytest.approx(1.0 / 37.0)

    def test_stream_exhaustion_is_terminal(self):
        env = self._env_one_bs()
        env.advance(iter([ev(0, 0, 0), ev(1, 0, 1)]))
        out = env.step(Action(1), iter([]))
        assert out.terminal
        assert out.next_state is None

    def test_decision_state_fields(self):
        env = self._env_one_bs()
        env.advance(iter([ev(0, 0, 0), ev(1, 0, 0), ev(2, 0, 1)]))
        st_ = env.pending.state
        assert st_.n == 0
        assert st_.t_n == -1          # missed content is not cached here
        assert st_.f_n == 1           # first request for content 1
        assert env.content_counts[0] == 2


class TestHitRate:
    def test_ratio(self):
        cfg = tiny_net(n_bs=1, cap=1, coverage=((0,),))
        env = CacheNetwork(cfg, catalogue_size=4)
        env.hits = 80
        env.requests = 100
        assert env.hit_rate() == 0.8

    def test_undefined_before_requests(self):
        cfg = tiny_net(n_bs=1, cap=1, coverage=((0,),))
        assert CacheNetwork(cfg, catalogue_size=4).hit_rate() is None

    def test_cache_larger_than_catalogue_converges_to_one(self):
        cfg = tiny_net(n_bs=1, cap=8, coverage=((0,),))
        env = CacheNetwork(cfg, catalogue_size=4)
        rng = np.random.default_rng(0)
        stream = (ev(t, 0, int(rng.integers(0, 4))) for t in range(2000))
        assert env.advance(stream) is None  # never a decision: all fits
        # every content is eventually cached; only first-touch misses remain
        assert env.hit_rate() > 1 - 8 / 2000 - 0.01
        assert env.hits + env.autofills == env.requests


class TestInvariants:
    @given(data=st.data())
    @settings(max_examples=40, deadline=None)
    def test_no_duplicates_and_slot_conservation(self, data):
        cfg = tiny_net(n_bs=2, cap=3, clients_per_bs=1,
                       coverage=((0, 1), (0, 1)))
        env = CacheNetwork(cfg, catalogue_size=6)
        n_events = data.draw(st.integers(5, 60))
        seq = data.draw(st.lists(
            st.tuples(st.integers(0, 1), st.integers(0, 5)),
            min_size=n_events, max_size=n_events))
        stream = iter([ev(t, c, d) for t, (c, d) in enumerate(seq)])
        state = env.advance(stream)
        while state is not None:
            a = data.draw(st.integers(0, cfg.cap * cfg.n_bs))
            out = env.step(Action(a), stream)
            for unit in env.units:
                contents = [s.content for s in unit.slots if s is not None]
                assert len(contents) == len(set(contents))
                assert len(contents) <= cfg.cap
            state = out.next_state

    def test_determinism_same_config_seed_actions(self):
        cfg = tiny_net(n_bs=2, cap=2, clients_per_bs=2,
                       coverage=((0, 1), (0,), (1,), (0, 1)))

        def run():
            env = CacheNetwork(cfg, catalogue_size=8)
            rng = np.random.default_rng(3)
            events = [ev(t, int(rng.integers(0, 4)), int(rng.integers(0, 8)))
                      for t in range(300)]
            stream = iter(events)
            outcomes = []
            state = env.advance(stream)
            arng = np.random.default_rng(5)
            while state is not None:
                a = int(arng.integers(0, cfg.cap * cfg.n_bs + 1))
                out = env.step(Action(a), stream)
                outcomes.append((a, out.reward, out.penalty, out.hits_delta))
                state = out.next_state
            return outcomes, env.hits, env.requests

        assert run() == run()


class TestSnapshot:
    def test_roundtrip_preserves_trajectory(self, tmp_path):
        cfg = tiny_net(n_bs=2, cap=2, clients_per_bs=2,
                       coverage=((0, 1), (0,), (1,), (0, 1)))
        rng = np.random.default_rng(1)
        events = [ev(t, int(rng.integers(0, 4)), int(rng.integers(0, 8)))
                  for t in range(200)]

        env = CacheNetwork(cfg, catalogue_size=8)
        stream = iter(events)
        env.advance(stream)
        for _ in range(5):
            if env.pending is None:
                break
            env.step(Action(1), stream)
        remaining = list(stream)

        path = tmp_path / "snap.json"
        env.save_snapshot(str(path))
        clone = CacheNetwork(cfg, catalogue_size=8)
        clone.load_snapshot(str(path))

        def finish(e, evs):
            s = iter(evs)
            if e.pending is None:
                e.advance(s)
            outs = []
            while e.pending is not None:
                outs.append(e.step(Action(2), s).reward)
            return outs, e.hits, e.requests

        assert finish(env, list(remaining)) == finish(clone, list(remaining))

    def test_snapshot_version_check(self):
        cfg = tiny_net(n_bs=1, cap=1, coverage=((0,),))
        env = CacheNetwork(cfg, catalogue_size=2)
        snap = env.snapshot()
        snap["version"] = 99
        with pytest.raises(ConfigError):
            env.restore(snap)


class TestTopologyBuilders:
    def test_paired_shapes(self):
        cfg = build_topology(5, 150, 8, kind="paired", overlap_fraction=0.5)
        assert cfg.n_clients == 40
        assert cfg.n_actions == 751
        double = [c for c in cfg.coverage if len(c) == 2]
        assert len(double) == 20

    def test_umbrella_covers_everyone(self):
        cfg = build_topology(5, 20, 8, kind="umbrella")
        for j, cov in enumerate(cfg.coverage):
            if j < 8:
                assert cov == (0,)
            else:
                assert 0 in cov and len(cov) == 2

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            build_topology(2, 2, 2, kind="hexagon")

from __future__ import annotations

import pytest

from rdd import (
    BlockWindow,
    DenoiserOutput,
    EventKind,
    Method,
    Mode,
    Prediction,
    Runaway,
    ScheduleConfig,
    TokenBuffer,
    UsageError,
    budget_policy,
    decode,
    nfe_bound,
    step,
)
from rdd.cache import disabled_handle
from rdd.denoise import TrapSpec, scripted_trap
from rdd.engine import DecodeConfig
from rdd.remask import remask_stream
from rdd.scenarios import (
    build_denoiser,
    canonical_trap,
    cycle_corpus,
    find_recovery_seed,
    first_remask_hits,
    make_bigram_scenario,
)
from rdd.types import DecodingState

from .oracle_trap import simulate_trap
from .util import make_cfg, trace_dicts

MASK = 24


def synthetic_state(confs: dict[int, float], window: BlockWindow, prompt_len: int,
                    total: int, budget: int, cfg: DecodeConfig) -> tuple[DecodingState, DenoiserOutput]:
    buf = TokenBuffer.fresh([0] * prompt_len, total, MASK)
    for i in range(prompt_len, total):
        if window.start <= i < window.end and i in confs:
            continue
        if i < window.end:
            buf.commit(i, 1, 0.9)
    state = DecodingState(
        buffer=buf, window=window, cache=disabled_handle(),
        budget=budget, mode=Mode.NORMAL, frontier=prompt_len,
    )
    out = DenoiserOutput(
        predictions={i: Prediction(token=2, confidence=c) for i, c in confs.items()},
        eval_id=1,
    )
    return state, out


class TestStep:
    def test_stagnant_window_with_budget_rolls_back(self):
        cfg = make_cfg(Method.RDD, 160, budget=1)
        confs = {i: 0.6 for i in range(65, 96)}  # m=31, all sub-threshold
        state, out = synthetic_state(confs, BlockWindow(64, 96, 32), 32, 160, 1, cfg)
        state, events = step(state, out, cfg, rng=remask_stream(0))
        kinds = [e.kind for e in events]
        assert kinds == [EventKind.STAGNATE, EventKind.ROLLBACK, EventKind.REMASK]
        assert state.window == BlockWindow(32, 96, 32)  # grew by one block
        assert state.budget == 0
        assert state.mode is Mode.RECOVERY

    def test_stagnant_window_without_budget_forces_argmax(self):
        cfg = make_cfg(Method.RDD, 160, budget=1)
        confs = {i: 0.6 for i in range(65, 96)}
        confs[77] = 0.61  # strict argmax
        state, out = synthetic_state(confs, BlockWindow(64, 96, 32), 32, 160, 0, cfg)
        state, events = step(state, out, cfg, rng=remask_stream(0))
        kinds = [e.kind for e in events]
        assert kinds == [EventKind.STAGNATE, EventKind.FORCE]
        assert events[-1].positions == [77]
        assert events[-1].confidences == [0.61]
        assert state.buffer.tokens[77] == 2

    def test_partial_decode_commits_exactly_the_clearing_positions(self):
        # tau = 1 - 0.4/4 = 0.9 with three masks
        cfg = make_cfg(Method.RDD, 96, f=0.4, budget=1, block_len=32)
        confs = {40: 0.99, 41: 0.98, 42: 0.30}
        buf = TokenBuffer.fresh([0] * 32, 96, MASK)
        for i in range(32, 64):
            if i not in confs:
                buf.commit(i, 1, 0.95)
        state = DecodingState(buffer=buf, window=BlockWindow(32, 64, 32),
                              cache=disabled_handle(), budget=1, mode=Mode.NORMAL, frontier=32)
        out = DenoiserOutput(
            predictions={i: Prediction(token=3, confidence=c) for i, c in confs.items()}, eval_id=1
        )
        state, events = step(state, out, cfg, rng=remask_stream(0))
        assert [e.kind for e in events] == [EventKind.DECODE]
        assert events[0].positions == [40, 41]
        assert events[0].tau == pytest.approx(0.9, abs=1e-12)
        assert state.buffer.is_masked(42)

    def test_completed_window_is_a_usage_error(self):
        cfg = make_cfg(Method.RDD, 96)
        buf = TokenBuffer.fresh([0] * 32, 96, MASK)
        for i in range(32, 64):
            buf.commit(i, 1, 0.9)
        state = DecodingState(buffer=buf, window=BlockWindow(32, 64, 32),
                              cache=disabled_handle(), budget=1, mode=Mode.NORMAL, frontier=64)
        out = DenoiserOutput(predictions={}, eval_id=1)
        with pytest.raises(UsageError):
            step(state, out, cfg, rng=remask_stream(0))

    def test_rollback_at_prompt_boundary_forces_instead(self):
        cfg = make_cfg(Method.RDD, 96, budget=1)
        confs = {i: 0.3 for i in range(33, 64)}
        state, out = synthetic_state(confs, BlockWindow(32, 64, 32), 32, 96, 1, cfg)
        state, events = step(state, out, cfg, rng=remask_stream(0))
        assert [e.kind for e in events] == [EventKind.STAGNATE, EventKind.FORCE]


class TestBudgetPolicy:
    def state_at(self, window, budget, mode, frontier):
        buf = TokenBuffer.fresh([0] * 32, 160, MASK)
        return DecodingState(buffer=buf, window=window, cache=disabled_handle(),
                             budget=budget, mode=mode, frontier=frontier)

    def test_reset_when_merged_window_commits_past_frontier(self):
        cfg = make_cfg(Method.RDD, 160, budget=2)
        st = self.state_at(BlockWindow(32, 96, 32), 0, Mode.RECOVERY, 96)
        st = budget_policy(st, cfg)
        assert st.budget == 2
        assert st.mode is Mode.NORMAL
        assert st.frontier == 96

    def test_zero_budget_policy_is_identity_on_budget(self):
        cfg = make_cfg(Method.BLOCK, 160, budget=0)
        st = self.state_at(BlockWindow(32, 64, 32), 0, Mode.NORMAL, 64)
        st = budget_policy(st, cfg)
        assert st.budget == 0


class TestDecodeBigram:
    def test_unambiguous_corpus_every_method_is_exact(self):
        corpus = cycle_corpus(vocab_size=6)
        sc = make_bigram_scenario(corpus, seed=0, prompt_len=32, gen_len=224)
        results = {}
        for method in (Method.VANILLA, Method.BLOCK, Method.RDD):
            den = build_denoiser(sc)
            res = decode(den, sc.prompt, make_cfg(method, sc.total_len, seed=sc.seed))
            assert res.buffer.continuation() == sc.ground_truth
            assert res.metrics.nfe_f == 0
            results[method] = res
        assert results[Method.RDD].metrics.nfe == results[Method.BLOCK].metrics.nfe

    def test_vanilla_commits_one_token_per_evaluation(self):
        corpus = cycle_corpus(vocab_size=6)
        sc = make_bigram_scenario(corpus, seed=1, prompt_len=32, gen_len=64)
        den = build_denoiser(sc)
        res = decode(den, sc.prompt, make_cfg(Method.VANILLA, sc.total_len))
        assert res.metrics.nfe == 64
        decodes = [e for e in res.trace if e.kind is EventKind.DECODE]
        assert all(len(e.positions) == 1 for e in decodes)

    def test_reduction_rdd_zero_budget_equals_block(self, affine_model):
        corpus, model = affine_model
        for seed in range(25):
            sc = make_bigram_scenario(corpus, seed=seed, model=model)
            r_rdd = decode(model, sc.prompt, make_cfg(Method.RDD, sc.total_len, budget=0, seed=seed))
            r_blk = decode(model, sc.prompt, make_cfg(Method.BLOCK, sc.total_len, seed=seed))
            assert r_rdd.tokens == r_blk.tokens
            assert trace_dicts(r_rdd) == trace_dicts(r_blk)


class TestDecodeTrap:
    def test_block_keeps_decoy_and_forces(self, canonical):
        spec = TrapSpec.from_dict(canonical.model["spec"])
        den = scripted_trap(spec)
        res = decode(den, canonical.prompt, make_cfg(Method.BLOCK, canonical.total_len, seed=canonical.seed))
        kinds = res.event_kinds()
        assert kinds.count(EventKind.FORCE) > 0
        trap = spec.traps[0]
        assert res.buffer.tokens[trap.position] == trap.decoy
        assert res.buffer.continuation() != canonical.ground_truth

    def test_rdd_recovers_exactly_with_one_rollback(self, canonical):
        spec = TrapSpec.from_dict(canonical.model["spec"])
        den = scripted_trap(spec)
        res = decode(den, canonical.prompt, make_cfg(Method.RDD, canonical.total_len, seed=canonical.seed))
        kinds = res.event_kinds()
        assert kinds.count(EventKind.ROLLBACK) == 1
        assert kinds.count(EventKind.FORCE) == 0
        remask_events = [e for e in res.trace if e.kind is EventKind.REMASK]
        assert remask_events[0].positions == [spec.traps[0].position]
        assert res.buffer.continuation() == canonical.ground_truth

    def test_engine_matches_independent_simulator(self, canonical):
        spec = TrapSpec.from_dict(canonical.model["spec"])
        for method, budget in ((Method.BLOCK, 0), (Method.RDD, 1)):
            den = scripted_trap(spec)
            res = decode(den, canonical.prompt, make_cfg(method, canonical.total_len, seed=canonical.seed))
            oracle = simulate_trap(spec, budget=budget, f=0.9, seed=canonical.seed)
            assert [k.value for k in res.event_kinds()] == oracle["kinds"]
            assert res.tokens == oracle["tokens"]
            assert res.metrics.nfe == oracle["nfe"]
            assert res.metrics.nfe_f == oracle["nfe_f"]

    def test_same_chain_double_rollback_does_not_reset_budget(self):
        # find a seed whose first re-mask draw misses the decoy, so the
        # merged window stagnates again and spends the second budget unit
        base = canonical_trap()
        spec = TrapSpec.from_dict(base.model["spec"])
        seed = next(
            s for s in range(200)
            if spec.traps[0].position not in first_remask_hits(spec, s, 1.0)
        )
        den = scripted_trap(spec)
        res = decode(den, base.prompt, make_cfg(Method.RDD_STAR, base.total_len,
                                                f=0.9, f_r=0.9, budget=2, seed=seed))
        kinds = [k.value for k in res.event_kinds()]
        first = kinds.index("ROLLBACK")
        second = kinds.index("ROLLBACK", first + 1)
        assert "BLOCK_DONE" not in kinds[first:second]
        oracle = simulate_trap(spec, budget=2, f=0.9, seed=seed)
        assert kinds == oracle["kinds"]
        assert res.tokens == oracle["tokens"]

    def test_rollback_budget_zero_forces_at_trap(self, canonical):
        spec = TrapSpec.from_dict(canonical.model["spec"])
        den = scripted_trap(spec)
        res = decode(den, canonical.prompt, make_cfg(Method.RDD, canonical.total_len,
                                                     budget=0, seed=canonical.seed))
        assert res.metrics.rollback_count == 0
        assert res.metrics.nfe_f > 0


class TestTraceInvariants:
    @pytest.fixture()
    def traces(self, canonical, cycle_model):
        out = []
        spec = TrapSpec.from_dict(canonical.model["spec"])
        out.append(decode(scripted_trap(spec), canonical.prompt,
                          make_cfg(Method.RDD, canonical.total_len, seed=canonical.seed)))
        corpus, model = cycle_model
        sc = make_bigram_scenario(corpus, seed=3, model=model)
        out.append(decode(model, sc.prompt, make_cfg(Method.RDD_STAR, sc.total_len,
                                                     f=2.25, f_r=0.9, budget=1, seed=3)))
        return out

    def test_window_start_decreases_only_at_rollbacks(self, traces):
        for res in traces:
            prev = None
            for ev in res.trace:
                if prev is not None and ev.window.start < prev.window.start:
                    assert prev.kind is EventKind.ROLLBACK
                assert (
                    prev is None
                    or prev.kind is not EventKind.ROLLBACK
                    or ev.window.start == prev.window.start - prev.window.block_len
                )
                prev = ev

    def test_commit_ledger_balances(self, traces):
        for res in traces:
            committed = sum(
                len(e.positions) for e in res.trace
                if e.kind in (EventKind.DECODE, EventKind.FORCE)
            )
            remasked = sum(len(e.positions) for e in res.trace if e.kind is EventKind.REMASK)
            gen = len(res.buffer) - res.buffer.prompt_len
            assert committed == gen + remasked

    def test_rollback_free_trace_commits_each_position_once(self, affine_model):
        corpus, model = affine_model
        sc = make_bigram_scenario(corpus, seed=7, model=model)
        res = decode(model, sc.prompt, make_cfg(Method.BLOCK, sc.total_len, seed=7))
        committed = sum(
            len(e.positions) for e in res.trace
            if e.kind in (EventKind.DECODE, EventKind.FORCE)
        )
        assert committed == sc.total_len - len(sc.prompt)

    def test_decode_confidences_clear_tau(self, traces):
        for res in traces:
            for ev in res.trace:
                if ev.kind is EventKind.DECODE:
                    assert ev.positions
                    assert all(c >= ev.tau for c in ev.confidences)
                elif ev.kind is EventKind.FORCE:
                    assert len(ev.positions) == 1

    def test_no_force_while_budget_and_room_remain(self, traces):
        # every FORCE must follow either budget exhaustion or a window at the
        # prompt boundary; reconstruct budget from the event stream
        for res in traces:
            budget = None
            for ev in res.trace:
                if budget is None:
                    budget = 1  # both fixtures use R = 1
                if ev.kind is EventKind.ROLLBACK:
                    budget -= 1
                elif ev.kind is EventKind.BLOCK_DONE:
                    budget = 1
                elif ev.kind is EventKind.FORCE:
                    at_origin = ev.window.start - ev.window.block_len < res.buffer.prompt_len
                    assert budget == 0 or at_origin

    def test_final_buffer_has_no_masks(self, traces):
        for res in traces:
            assert all(not res.buffer.is_masked(i) for i in range(len(res.buffer)))

    def test_nfe_counts_denoiser_evaluations(self, canonical):
        spec = TrapSpec.from_dict(canonical.model["spec"])
        den = scripted_trap(spec)
        res = decode(den, canonical.prompt,
                     make_cfg(Method.RDD, canonical.total_len, seed=canonical.seed))
        assert res.metrics.nfe == den.eval_count
        # one evaluation per DECODE or STAGNATE event
        evals = sum(
            1 for e in res.trace if e.kind in (EventKind.DECODE, EventKind.STAGNATE)
        )
        assert evals == res.metrics.nfe

    def test_nfe_within_termination_bound(self, traces, canonical):
        for res in traces:
            cfg = make_cfg(Method.RDD, len(res.buffer))
            assert res.metrics.nfe <= nfe_bound(cfg, res.buffer.prompt_len)


class TestDeterminism:
    def test_repeat_decode_is_identical(self, canonical, cycle_model):
        spec = TrapSpec.from_dict(canonical.model["spec"])
        a = decode(scripted_trap(spec), canonical.prompt,
                   make_cfg(Method.RDD, canonical.total_len, seed=canonical.seed))
        b = decode(scripted_trap(spec), canonical.prompt,
                   make_cfg(Method.RDD, canonical.total_len, seed=canonical.seed))
        assert a.tokens == b.tokens
        assert trace_dicts(a) == trace_dicts(b)

    def test_different_seed_changes_remask_draw(self):
        base = canonical_trap()
        spec = TrapSpec.from_dict(base.model["spec"])
        hit = find_recovery_seed(spec)
        miss = next(
            s for s in range(200)
            if spec.traps[0].position not in first_remask_hits(spec, s, 1.0)
        )
        ra = decode(scripted_trap(spec), base.prompt, make_cfg(Method.RDD, base.total_len, seed=hit))
        rb = decode(scripted_trap(spec), base.prompt, make_cfg(Method.RDD, base.total_len, seed=miss))
        assert ra.tokens != rb.tokens or trace_dicts(ra) != trace_dicts(rb)


class TestConfigValidation:
    def test_block_with_budget_rejected(self):
        with pytest.raises(UsageError):
            DecodeConfig(schedule=ScheduleConfig(rollback_budget=1), block_len=32,
                         total_len=256, method=Method.BLOCK)

    def test_rdd_with_dual_scale_rejected(self):
        with pytest.raises(UsageError):
            DecodeConfig(schedule=ScheduleConfig(f=2.0, f_r=1.0), block_len=32,
                         total_len=256, method=Method.RDD)

    def test_rdd_star_allows_dual_scale(self):
        DecodeConfig(schedule=ScheduleConfig(f=2.25, f_r=0.9), block_len=32,
                     total_len=256, method=Method.RDD_STAR)

    def test_block_len_must_divide_generation(self, canonical):
        den = build_denoiser(canonical)
        cfg = make_cfg(Method.RDD, canonical.total_len - 1)
        with pytest.raises(UsageError):
            decode(den, canonical.prompt, cfg)

    def test_bad_remask_mode_rejected(self):
        with pytest.raises(UsageError):
            make_cfg(Method.RDD, 256, remask_mode="sometimes")

    def test_step_cap_triggers_runaway(self, canonical):
        den = build_denoiser(canonical)
        cfg = make_cfg(Method.BLOCK, canonical.total_len, seed=canonical.seed, step_cap=2)
        with pytest.raises(Runaway):
            decode(den, canonical.prompt, cfg)

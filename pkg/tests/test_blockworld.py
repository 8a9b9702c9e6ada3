import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from topoflow import blockworld as bw
from topoflow.blockworld import (
    APPROACH, GRASP, LIFT, MOVE, PLACE, RELEASE, PUSH, NOOP,
    Action, TaskSpecError, WorldState,
)
from topoflow.fusion import local_rule_check
from topoflow.numcore import Rng
from topoflow.topomask import build_mask

# independently hand-derived from the machine rules: which token type may
# directly follow which (rows: predecessor, order approach..noop)
EXPECTED_LEGAL = np.array(
    [
        [1, 1, 0, 1, 1, 0, 1, 1],  # approach
        [0, 0, 1, 0, 0, 1, 0, 1],  # grasp
        [1, 0, 0, 1, 1, 0, 0, 1],  # lift
        [1, 1, 0, 1, 1, 0, 1, 1],  # move
        [0, 0, 1, 0, 0, 1, 0, 1],  # place
        [1, 1, 0, 1, 0, 0, 1, 1],  # release
        [1, 1, 0, 1, 0, 0, 1, 1],  # push
        [1, 1, 1, 1, 1, 1, 1, 1],  # noop
    ],
    dtype=float,
)


def two_block_state():
    return WorldState(
        positions=np.array([[0.3, 0.3], [0.7, 0.6]]),
        gripper=np.array([0.1, 0.1]),
    )


class TestCodec:
    def test_levels_are_uniform(self):
        assert np.allclose(np.diff(bw.TYPE_LEVELS), 0.25)
        assert bw.TYPE_LEVELS[0] == pytest.approx(-0.875)
        assert bw.TYPE_LEVELS[-1] == pytest.approx(0.875)

    @pytest.mark.parametrize("t", range(bw.N_TYPES))
    def test_round_trip(self, t):
        assert bw.nearest_type(bw.type_level(t)) == t

    def test_tie_breaks_to_lower_id(self):
        assert bw.nearest_type(-0.75) == 0  # midpoint of types 0 and 1
        assert bw.nearest_type(0.75) == 6

    def test_out_of_range_clips(self):
        assert bw.nearest_type(-3.0) == 0
        assert bw.nearest_type(3.0) == bw.NOOP

    @given(x=st.floats(min_value=-1.0, max_value=1.0))
    @settings(max_examples=100, deadline=None)
    def test_nearest_is_nearest(self, x):
        chosen = bw.nearest_type(x)
        dists = np.abs(x - bw.TYPE_LEVELS)
        assert dists[chosen] <= dists.min() + 1e-12

    def test_encode_pads_with_noop(self):
        actions = [Action(APPROACH, [0.5, 0.5, 0.0]), Action(GRASP)]
        tokens = bw.encode_actions(actions, 5)
        assert tokens.shape == (5, 4)
        assert (tokens[2:, 0] == bw.type_level(NOOP)).all()
        assert tokens[0, 1] == 0.5

    def test_encode_overflow_rejected(self):
        with pytest.raises(ValueError, match="horizon"):
            bw.encode_actions([Action(NOOP)] * 3, 2)

    def test_decode_unconstrained_round_trip(self):
        actions = [
            Action(APPROACH, [0.3, 0.9, 0.0]),
            Action(GRASP),
            Action(LIFT),
            Action(MOVE, [-0.1, 0.2, 0.0]),
        ]
        tokens = bw.encode_actions(actions, 6)
        decoded, labels = bw.decode_actions(tokens)
        assert [a.type_id for a in decoded[:4]] == [APPROACH, GRASP, LIFT, MOVE]
        assert labels[4] == NOOP
        np.testing.assert_allclose(decoded[3].params[:2], [-0.1, 0.2])

    def test_decode_respects_mask(self):
        # a lift level right after approach is forbidden; grasp and move tie
        # at distance 0.25 and the lower id wins
        tokens = np.zeros((2, 4))
        tokens[0, 0] = bw.type_level(APPROACH)
        tokens[1, 0] = bw.type_level(LIFT)
        _, labels = bw.decode_actions(tokens, mask=EXPECTED_LEGAL)
        assert labels[0] == APPROACH
        assert labels[1] == GRASP
        _, free_labels = bw.decode_actions(tokens)
        assert free_labels[1] == LIFT

    def test_decode_clamps_params(self):
        tokens = np.zeros((1, 4))
        tokens[0, 0] = bw.type_level(MOVE)
        tokens[0, 1:] = [0.9, -0.9, 5.0]
        decoded, _ = bw.decode_actions(tokens)
        np.testing.assert_allclose(decoded[0].params, [0.25, -0.25, 0.0])

    def test_decode_types_matches_scalar(self):
        rng = np.random.default_rng(0)
        params = rng.uniform(-1, 1, size=(50, 4))
        vec = bw.decode_types(params)
        scalar = [bw.nearest_type(x) for x in params[:, 0]]
        assert vec.tolist() == scalar


class TestAbstractMachine:
    def test_legal_pairs_match_hand_table(self):
        np.testing.assert_array_equal(bw.enumerate_legal_pairs(), EXPECTED_LEGAL)

    def test_noop_follows_everything(self):
        legal = bw.enumerate_legal_pairs()
        assert (legal[:, NOOP] == 1.0).all()

    def test_continuations_refine_pair_table(self):
        legal = bw.enumerate_legal_pairs()
        cont = bw.enumerate_continuations()
        for a in range(bw.N_TYPES):
            for b in range(bw.N_TYPES):
                if legal[a, b] == 0.0:
                    continue
                for c in range(bw.N_TYPES):
                    if cont[c, a, b] == 1.0:
                        assert legal[b, c] == 1.0

    def test_every_pair_has_a_continuation(self):
        cont = bw.enumerate_continuations()
        assert (cont.sum(axis=0) >= 1.0).all()
        assert (cont[NOOP] == 1.0).all()

    def test_pick_pair_continuations(self):
        cont = bw.enumerate_continuations()
        after_pick = {c for c in range(bw.N_TYPES) if cont[c, APPROACH, GRASP] == 1.0}
        assert after_pick == {LIFT, RELEASE, NOOP}


class TestOracle:
    def test_clean_pick_and_place(self):
        s = two_block_state()
        seq = [
            Action(APPROACH, [0.7, 0.6, 0.0]),
            Action(GRASP),
            Action(LIFT),
            Action(MOVE, [-0.25, -0.2, 0.0]),
            Action(PLACE, [0.31, 0.31, 0.0]),
            Action(RELEASE),
        ]
        for a in seq:
            s, reason = bw.oracle_step(s, a)
            assert reason is None, reason
        np.testing.assert_allclose(s.positions[1], [0.31, 0.31])
        assert s.held is None
        assert s.steps == 6

    @pytest.mark.parametrize(
        "setup,action,reason",
        [
            ([], Action(LIFT), "lift-without-grasp"),
            ([], Action(GRASP), "grasp-nothing-near"),
            ([], Action(RELEASE), "release-without-hold"),
            ([], Action(PLACE, [0.5, 0.5, 0.0]), "place-without-hold"),
            (
                [Action(APPROACH, [0.3, 0.3, 0.0]), Action(GRASP)],
                Action(GRASP),
                "grasp-while-holding",
            ),
            (
                [Action(APPROACH, [0.3, 0.3, 0.0]), Action(GRASP)],
                Action(APPROACH, [0.5, 0.5, 0.0]),
                "drag-held-object",
            ),
            (
                [Action(APPROACH, [0.3, 0.3, 0.0]), Action(GRASP)],
                Action(MOVE, [0.1, 0.0, 0.0]),
                "drag-held-object",
            ),
            (
                [Action(APPROACH, [0.3, 0.3, 0.0]), Action(GRASP)],
                Action(PLACE, [0.5, 0.5, 0.0]),
                "place-without-lift",
            ),
            (
                [Action(APPROACH, [0.3, 0.3, 0.0]), Action(GRASP), Action(LIFT)],
                Action(LIFT),
                "lift-while-lifted",
            ),
            (
                [Action(APPROACH, [0.3, 0.3, 0.0]), Action(GRASP), Action(LIFT)],
                Action(RELEASE),
                "release-while-lifted",
            ),
            (
                [Action(APPROACH, [0.3, 0.3, 0.0]), Action(GRASP)],
                Action(PUSH, [0.1, 0.0, 0.0]),
                "push-while-holding",
            ),
            ([], Action(PUSH, [0.1, 0.0, 0.0]), "push-nothing-near"),
        ],
    )
    def test_violation_reasons(self, setup, action, reason):
        s = two_block_state()
        for a in setup:
            s, r = bw.oracle_step(s, a)
            assert r is None
        before = s.copy()
        after, r = bw.oracle_step(s, action)
        assert r == reason
        np.testing.assert_array_equal(after.positions, before.positions)
        assert after.held == before.held and after.steps == before.steps

    def test_place_out_of_bounds(self):
        s = two_block_state()
        for a in (Action(APPROACH, [0.3, 0.3, 0.0]), Action(GRASP), Action(LIFT)):
            s, _ = bw.oracle_step(s, a)
        raw = Action.__new__(Action)
        object.__setattr__(raw, "type_id", PLACE)
        p = np.array([1.4, 0.5, 0.0])
        p.flags.writeable = False
        object.__setattr__(raw, "params", p)
        _, reason = bw.oracle_step(s, raw)
        assert reason == "place-out-of-bounds"

    def test_move_clips_at_desk_edge(self):
        s = two_block_state()
        s, _ = bw.oracle_step(s, Action(MOVE, [-0.25, -0.25, 0.0]))
        np.testing.assert_allclose(s.gripper, [0.0, 0.0])

    def test_push_carries_gripper_along(self):
        s = two_block_state()
        s, r = bw.oracle_step(s, Action(APPROACH, [0.3, 0.3, 0.0]))
        s, r = bw.oracle_step(s, Action(PUSH, [0.2, 0.0, 0.0]))
        assert r is None
        np.testing.assert_allclose(s.positions[0], [0.5, 0.3])
        np.testing.assert_allclose(s.gripper, s.positions[0])

    def test_carry_while_lifted(self):
        s = two_block_state()
        for a in (
            Action(APPROACH, [0.3, 0.3, 0.0]),
            Action(GRASP),
            Action(LIFT),
            Action(APPROACH, [0.8, 0.8, 0.0]),
        ):
            s, r = bw.oracle_step(s, a)
            assert r is None
        np.testing.assert_allclose(s.positions[0], [0.8, 0.8])

    def test_legal_walks_stay_inside_pair_table(self):
        rng = Rng(99)
        legal = bw.enumerate_legal_pairs()
        s = two_block_state()
        prev = None
        for _ in range(300):
            t = rng.integer(bw.N_TYPES)
            params = np.array([rng.uniform() * 2 - 1 for _ in range(3)])
            nxt, reason = bw.oracle_step(s, Action(t, bw.clamp_params(t, params)))
            if reason is not None:
                continue
            if prev is not None:
                assert legal[prev, t] == 1.0, (bw.TOKEN_TYPES[prev], bw.TOKEN_TYPES[t])
            prev = t
            s = nxt


class TestFusionBridge:
    def test_mask_zero_pattern_is_the_illegal_set(self):
        fs = bw.build_fusion_system(horizon=6)
        mask = build_mask(fs)
        np.testing.assert_array_equal(mask.values, EXPECTED_LEGAL)
        np.testing.assert_array_equal(mask.hard_zeros, EXPECTED_LEGAL == 0.0)

    def test_local_rules_after_pick(self):
        fs = bw.build_fusion_system(horizon=6)
        cont = local_rule_check(fs, APPROACH, GRASP)
        assert cont == {LIFT, RELEASE, NOOP}
        assert GRASP not in cont

    def test_type_channel_basis_orthonormal(self):
        basis = bw.type_channel_basis(5, 4)
        assert basis.shape == (5, 20)
        np.testing.assert_allclose(basis @ basis.T, np.eye(5), atol=1e-15)

    def test_projector_registered(self):
        fs = bw.build_fusion_system(horizon=7)
        proj = fs.projector_for(0)
        assert proj.dim == 7 * bw.D_ACTION
        assert proj.rank == 7


class TestTasks:
    def test_bundled_tasks_load(self):
        assert bw.list_tasks() == ["clear-table", "sort-3", "stack-2"]
        task = bw.load_task("stack-2")
        assert task.horizon == 20
        assert task.kind == "stack"
        assert len(task.stages) == 4
        assert task.objects.shape == (2, 2)

    def test_unknown_task_lists_available(self):
        with pytest.raises(TaskSpecError, match="stack-2"):
            bw.load_task("tower-9")

    def test_sample_start_jitter_bounded(self):
        task = bw.load_task("sort-3")
        rng = Rng(5)
        s = task.sample_start(rng)
        assert np.abs(s.positions - task.objects).max() <= 0.05 + 1e-12
        assert s.held is None and not s.lifted

    def test_parse_errors_carry_line_numbers(self):
        good = (
            "name t\ntask_id 0\nkind stack\nhorizon 5\n"
            "[objects]\n0.5 0.5\n[stages]\nhold 0\n"
        )
        bw.parse_task_text(good)  # sanity
        with pytest.raises(TaskSpecError, match="line 5"):
            bw.parse_task_text(good.replace("[objects]", "[things]"))
        with pytest.raises(TaskSpecError, match="line 8"):
            bw.parse_task_text(good.replace("hold 0", "juggle 0"))
        with pytest.raises(TaskSpecError, match="line 8"):
            bw.parse_task_text(good.replace("hold 0", "hold 0 7"))
        with pytest.raises(TaskSpecError, match="missing"):
            bw.parse_task_text(good.replace("task_id 0\n", ""))
        with pytest.raises(TaskSpecError, match="missing object"):
            bw.parse_task_text(good.replace("hold 0", "hold 3"))

    def test_progress_walk_is_ordered(self):
        task = bw.load_task("stack-2")
        start = task.sample_start(Rng(1))
        # the empty-gripper final stage is true at the start but must not
        # count before the earlier stages are reached
        assert task.progress_of_trace([start]) == 0.0


class TestDemos:
    @pytest.mark.parametrize("name", ["stack-2", "sort-3", "clear-table"])
    def test_scripted_demo_is_clean_and_complete(self, name):
        task = bw.load_task(name)
        for seed in (0, 1, 2):
            rng = Rng(seed)
            start = task.sample_start(rng)
            actions = bw.script_demo(task, start, rng)
            result = bw.replay(task, start, actions)
            assert result.violations == []
            assert result.progress == 1.0
            assert len(actions) <= task.horizon

    def test_demo_transitions_all_legal(self):
        task = bw.load_task("sort-3")
        eps = bw.gen_episodes(task, 4, seed=11)
        for ep in eps:
            assert bw.transition_violations(ep.labels, EXPECTED_LEGAL) == 0

    def test_gen_episodes_deterministic(self):
        task = bw.load_task("stack-2")
        a = bw.gen_episodes(task, 3, seed=7)
        b = bw.gen_episodes(task, 3, seed=7)
        c = bw.gen_episodes(task, 3, seed=8)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.tokens, y.tokens)
            np.testing.assert_array_equal(x.start.positions, y.start.positions)
        assert any(
            not np.array_equal(x.tokens, y.tokens) for x, y in zip(a, c)
        )

    def test_episode_shape_and_labels(self):
        task = bw.load_task("stack-2")
        ep = bw.gen_episodes(task, 1, seed=3)[0]
        assert ep.tokens.shape == (20, 4)
        assert ep.labels.shape == (20,)
        np.testing.assert_array_equal(ep.labels, bw.decode_types(ep.tokens))
        assert ep.labels[-1] == NOOP
        assert ep.observation.grid.shape == (8, 8)
        assert ep.observation.grid.sum() == pytest.approx(2.5)  # 2 blocks + gripper


class TestMetrics:
    def make_demo(self):
        task = bw.load_task("stack-2")
        rng = Rng(21)
        start = task.sample_start(rng)
        return task, start, bw.script_demo(task, start, rng)

    def test_clean_demo_scores(self):
        task, start, actions = self.make_demo()
        assert bw.atp(task, start, actions) == 1.0
        assert bw.violation_rate(task, start, actions) == 0.0
        assert bw.d_phys(task, start, actions) == 0.0

    def test_corrupted_demo_scores(self):
        task, start, actions = self.make_demo()
        bad = list(actions)
        bad[1] = Action(LIFT)  # was the grasp
        assert bw.violation_rate(task, start, bad) > 0.0
        assert bw.atp(task, start, bad) < 1.0
        assert bw.d_phys(task, start, bad) >= 1.0

    def test_d_phys_ignores_legal_suffix(self):
        task, start, actions = self.make_demo()
        bad = list(actions)
        bad[1] = Action(LIFT)
        base = bw.d_phys(task, start, bad)
        assert bw.d_phys(task, start, bad + [Action(NOOP)] * 3) == base

    def test_transition_violation_count(self):
        labels = [APPROACH, LIFT, RELEASE, NOOP]
        # approach->lift and lift->release are both forbidden
        assert bw.transition_violations(labels, EXPECTED_LEGAL) == 2

    def test_invariant_profile(self):
        task, start, actions = self.make_demo()
        prof = bw.invariant_profile(task, start, actions)
        assert prof["object_count_conserved"]
        assert prof["progress_monotone"]
        assert prof["violations"] == 0
        held = prof["held_profile"]
        assert held[0] == 0 and held[-1] == 0 and 1 in held
        assert prof["progress_profile"][-1] == 1.0


class TestSerialization:
    def test_round_trip(self, tmp_path):
        task = bw.load_task("sort-3")
        eps = bw.gen_episodes(task, 3, seed=13)
        path = tmp_path / "episodes.jsonl"
        bw.write_episodes(path, eps)
        back = bw.read_episodes(path)
        assert len(back) == 3
        for a, b in zip(eps, back):
            np.testing.assert_array_equal(a.tokens, b.tokens)
            np.testing.assert_array_equal(a.labels, b.labels)
            np.testing.assert_array_equal(a.start.positions, b.start.positions)
            assert a.task_name == b.task_name

    def test_rewrite_is_byte_identical(self, tmp_path):
        task = bw.load_task("stack-2")
        eps = bw.gen_episodes(task, 2, seed=5)
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        bw.write_episodes(p1, eps)
        bw.write_episodes(p2, bw.gen_episodes(task, 2, seed=5))
        assert bw.file_digest(p1) == bw.file_digest(p2)

    def test_schema_version_checked(self):
        with pytest.raises(ValueError, match="schema"):
            bw.episode_from_dict({"schema_version": 99})

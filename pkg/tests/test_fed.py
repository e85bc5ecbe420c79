import numpy as np
import pytest

from byzfed.attacks import ones_attack
from byzfed.errors import ConfigInvalid, NodeComputeError, OutOfRange
from byzfed.fed import (
    FederationConfig,
    byzantine_set_schedule,
    minibatch_index,
    node_rng,
    run_round,
    spread_byzantine_ids,
)


class TestConfig:
    def test_defaults(self):
        cfg = FederationConfig(6)
        assert cfg.minibatches == 6 and cfg.batch_size == 1 and cfg.good_ids == list(range(6))

    def test_batches(self):
        cfg = FederationConfig(18, frozenset({0, 9}), 6)
        assert cfg.batch_size == 3
        assert cfg.batch_of(10) == 3
        assert cfg.batch_members(2) == [6, 7, 8]
        assert cfg.num_byzantine == 2

    @pytest.mark.parametrize("kw", [
        dict(num_nodes=0),
        dict(num_nodes=4, byzantine_ids={4}),
        dict(num_nodes=6, minibatches=4),
        dict(num_nodes=4, byzantine_ids={0, 1}),
    ])
    def test_invalid(self, kw):
        with pytest.raises(ConfigInvalid):
            FederationConfig(**kw)

    def test_with_byzantine(self):
        cfg = FederationConfig(6, minibatches=3, seed=4).with_byzantine({1})
        assert cfg.byzantine_ids == {1} and cfg.minibatches == 3 and cfg.seed == 4

    def test_spread_ids(self):
        assert spread_byzantine_ids(18, 4) == {0, 4, 9, 13}
        assert spread_byzantine_ids(5, 0) == frozenset()
        # consecutive batches of 3 are hit first
        cfg = FederationConfig(18, spread_byzantine_ids(18, 4), 6)
        assert len({cfg.batch_of(i) for i in cfg.byzantine_ids}) == 4


class TestMinibatchIndex:
    def test_values(self):
        assert minibatch_index(1, 1, 3) == 1
        assert minibatch_index(2, 1, 3) == 4
        assert minibatch_index(6, 3, 3, num_batches=6) == 18

    @pytest.mark.parametrize("args", [(0, 1, 3), (1, 0, 3), (1, 4, 3), (1, 1, 0)])
    def test_out_of_range(self, args):
        with pytest.raises(OutOfRange):
            minibatch_index(*args)

    def test_batch_beyond_count(self):
        with pytest.raises(OutOfRange):
            minibatch_index(7, 1, 3, num_batches=6)


class TestRunRound:
    def test_all_honest(self):
        out = run_round(FederationConfig(3), lambda i: float(i))
        assert [p.content for p in out] == [0.0, 1.0, 2.0]
        assert not any(p.byzantine for p in out)

    def test_copy_first_honest(self):
        cfg = FederationConfig(5, frozenset({1, 3}))
        out = run_round(cfg, lambda i: 10.0 * i, lambda v: v.honest_payloads[min(v.honest_payloads)])
        assert [p.content for p in out] == [0.0, 0.0, 20.0, 0.0, 40.0]
        assert [p.byzantine for p in out] == [False, True, False, True, False]

    def test_ones_substitution(self):
        cfg = FederationConfig(3, frozenset({2}))
        honest = lambda i: np.full((4, 2), float(i))  # noqa: E731
        out = run_round(cfg, honest, lambda v: ones_attack(4, 2, 7.0))
        np.testing.assert_array_equal(out[2].content, -7.0 * np.ones((4, 2)))
        np.testing.assert_array_equal(out[0].content, honest(0))
        np.testing.assert_array_equal(out[1].content, honest(1))

    def test_adversary_sees_exactly_honest_payloads(self):
        cfg = FederationConfig(7, frozenset({2, 5}))
        seen = {}

        def adversary(view):
            seen.update(view.honest_payloads)
            seen["round"] = view.round_index
            seen["state"] = dict(view.state)
            return {i: view.honest_compute(i) * -1 for i in view.byzantine_ids}

        out = run_round(cfg, lambda i: float(i + 1), adversary, round_index=3, state={"U": 1})
        assert set(k for k in seen if isinstance(k, int)) == {0, 1, 3, 4, 6}
        assert seen["round"] == 3 and seen["state"] == {"U": 1}
        assert out[2].content == -3.0 and out[5].content == -6.0

    def test_missing_dict_payload(self):
        cfg = FederationConfig(5, frozenset({1, 2}))
        with pytest.raises(ValueError):
            run_round(cfg, lambda i: 0.0, lambda v: {1: 0.0})

    def test_no_adversary_byzantine_honest(self):
        cfg = FederationConfig(3, frozenset({1}))
        assert [p.content for p in run_round(cfg, lambda i: i)] == [0, 1, 2]

    def test_failure_tagged(self):
        def bad(i):
            if i == 2:
                raise ZeroDivisionError("boom")
            return 0

        with pytest.raises(NodeComputeError) as exc:
            run_round(FederationConfig(4), bad)
        assert exc.value.node_id == 2

    def test_override_byzantine_set(self):
        out = run_round(FederationConfig(4), lambda i: 1.0, lambda v: -1.0, byzantine_ids={3})
        assert [p.content for p in out] == [1.0, 1.0, 1.0, -1.0]

    def test_deterministic_transcript(self):
        cfg = FederationConfig(6, frozenset({4}), seed=11)
        compute = lambda i: node_rng(cfg.seed, i, 1).standard_normal(3)  # noqa: E731
        a = run_round(cfg, compute, lambda v: np.zeros(3))
        b = run_round(cfg, compute, lambda v: np.zeros(3))
        for pa, pb in zip(a, b):
            assert pa.content.tobytes() == pb.content.tobytes()


class TestSchedule:
    def test_fixed(self):
        cfg = FederationConfig(9, frozenset({1, 5}))
        assert byzantine_set_schedule(cfg, "fixed", 7) == cfg.byzantine_ids

    def test_per_round_size_and_replay(self):
        cfg = FederationConfig(9, frozenset({1, 5}), seed=3)
        a = [byzantine_set_schedule(cfg, "per-round", t) for t in range(5)]
        b = [byzantine_set_schedule(cfg, "per-round", t) for t in range(5)]
        assert a == b
        assert all(len(s) == 2 for s in a)
        assert len(set(a)) > 1

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            byzantine_set_schedule(FederationConfig(3), "sometimes", 0)


def test_node_rng_independent_of_order():
    a = node_rng(1, 2, 3).standard_normal()
    node_rng(1, 0, 0).standard_normal(100)
    assert node_rng(1, 2, 3).standard_normal() == a
    assert node_rng(1, 3, 3).standard_normal() != a

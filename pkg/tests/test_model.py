import numpy as np
import pytest

from conftest import SMALL, TOY
from meshspec.backbone import DecodeSession, forward_backbone
from meshspec.model import (
    ModelConfig,
    SplitKind,
    deserialize,
    init_random,
    point_cloud_condition,
    random_condition,
    serialize,
    split_schedule,
)


class TestInit:
    def test_same_seed_identical_bytes(self):
        a = serialize(init_random(SMALL, 5))
        b = serialize(init_random(SMALL, 5))
        assert a == b

    def test_different_seeds_differ(self):
        a = init_random(SMALL, 1)
        b = init_random(SMALL, 2)
        assert not np.array_equal(a.params["embed"], b.params["embed"])

    def test_fan_in_scaling_bound(self):
        model = init_random(SMALL, 3)
        for name, arr in model.params.items():
            bound = 1.0 / np.sqrt(arr.shape[0])
            assert np.max(np.abs(arr)) <= bound, name

    def test_invalid_configs_rejected(self):
        with pytest.raises(ValueError):
            ModelConfig(draft_face=8).validate()
        with pytest.raises(ValueError):
            ModelConfig(draft_point=4).validate()
        with pytest.raises(ValueError):
            ModelConfig(model_dim=30, heads=4).validate()
        with pytest.raises(ValueError):
            ModelConfig(layers_point=0).validate()


class TestSerialization:
    def test_roundtrip_bit_exact(self, tmp_path, small_model):
        path = tmp_path / "m.mfls"
        serialize(small_model, path)
        back = deserialize(path)
        assert back.config == small_model.config
        for name, arr in small_model.params.items():
            assert np.array_equal(back.params[name], arr), name

    def test_bad_magic(self):
        with pytest.raises(ValueError, match="magic"):
            deserialize(b"XXXX" + b"\0" * 64)

    def test_version_mismatch(self, small_model):
        data = bytearray(serialize(small_model))
        data[4:8] = (99).to_bytes(4, "little")
        with pytest.raises(ValueError, match="version"):
            deserialize(bytes(data))

    def test_truncated(self, small_model):
        data = serialize(small_model)
        with pytest.raises(ValueError, match="truncated"):
            deserialize(data[: len(data) // 2])

    def test_config_text_roundtrip(self):
        cfg = ModelConfig(gamma=0.5, draft_face=18)
        assert ModelConfig.from_text(cfg.to_text()) == cfg


class TestSplitSchedule:
    def test_position_zero_all_levels(self):
        assert split_schedule(0) == {SplitKind.FACE, SplitKind.POINT, SplitKind.COORD}

    def test_position_three(self):
        assert split_schedule(3) == {SplitKind.POINT, SplitKind.COORD}

    def test_position_five(self):
        assert split_schedule(5) == {SplitKind.COORD}

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            split_schedule(-1)


class TestForward:
    def _tokens(self, n, seed=0):
        rng = np.random.default_rng(seed)
        return [SMALL.bins] + rng.integers(0, SMALL.bins, size=n).tolist()

    def test_distributions_sum_to_one(self, small_model, small_condition):
        session = DecodeSession(small_model, small_condition)
        res = forward_backbone(small_model, session, self._tokens(12))
        for r in res:
            assert abs(r.probs.sum() - 1.0) <= 1e-12
            assert np.all(r.probs >= 0)

    def test_incremental_equals_batch(self, small_model, small_condition):
        toks = self._tokens(14)
        batch = DecodeSession(small_model, small_condition)
        batch_res = forward_backbone(small_model, batch, toks)
        stepwise = DecodeSession(small_model, small_condition)
        for i, t in enumerate(toks):
            r = stepwise.process_token(t)
            assert np.max(np.abs(r.probs - batch_res[i].probs)) <= 1e-10
            assert np.array_equal(r.probs, batch_res[i].probs)

    def test_causality_future_perturbation(self, small_model, small_condition):
        toks = self._tokens(11)
        a = DecodeSession(small_model, small_condition)
        res_a = forward_backbone(small_model, a, toks)
        toks_b = list(toks)
        toks_b[8] = (toks_b[8] + 1) % SMALL.bins
        b = DecodeSession(small_model, small_condition)
        res_b = forward_backbone(small_model, b, toks_b)
        for i in range(8):
            assert np.array_equal(res_a[i].probs, res_b[i].probs)
        assert not np.array_equal(res_a[8].probs, res_b[8].probs)

    def test_level_cache_bookkeeping(self, small_model, small_condition):
        session = DecodeSession(small_model, small_condition)
        session.process_token(SMALL.bins)  # BOS
        rng = np.random.default_rng(1)
        for n in range(1, 30):
            session.process_token(int(rng.integers(0, SMALL.bins)))
            assert session.n_point == n // 3
            assert session.n_face == n // 9
            assert session.hf_cache["point"].n == n // 3
            for i, kv in enumerate(session.kv["face"]):
                assert kv.n == n // 9

    def test_label_logits_emitted_at_point_boundaries(self, small_model, small_condition):
        session = DecodeSession(small_model, small_condition)
        res = forward_backbone(small_model, session, self._tokens(10))
        boundary = [r for r in res if r.point_label_logits is not None]
        assert [r.stream_index for r in boundary] == [3, 6, 9]
        assert all(r.point_label_logits.shape == (3,) for r in boundary)

    def test_rollback_then_replay_is_identity(self, small_model, small_condition):
        toks = self._tokens(20, seed=4)
        session = DecodeSession(small_model, small_condition)
        res = forward_backbone(small_model, session, toks)
        session.rollback(payload_len=9)
        replay = forward_backbone(small_model, session, toks[10:])
        for orig, again in zip(res[10:], replay):
            assert np.array_equal(orig.probs, again.probs)

    def test_empty_slice_rejected(self, small_model, small_condition):
        session = DecodeSession(small_model, small_condition)
        with pytest.raises(ValueError):
            forward_backbone(small_model, session, [])

    def test_condition_shape_checked(self, small_model):
        with pytest.raises(ValueError):
            DecodeSession(small_model, np.zeros((2, 2)))


class TestCondition:
    def test_point_cloud_condition_shape_and_determinism(self, small_model):
        rng = np.random.default_rng(0)
        pts = rng.random((50, 3))
        a = point_cloud_condition(small_model, pts)
        b = point_cloud_condition(small_model, pts)
        assert a.shape == (SMALL.condition_len, SMALL.model_dim)
        assert np.array_equal(a, b)

    def test_empty_cloud_rejected(self, small_model):
        with pytest.raises(ValueError):
            point_cloud_condition(small_model, np.zeros((0, 3)))

    def test_random_condition_seeded(self):
        assert np.array_equal(random_condition(TOY, 3), random_condition(TOY, 3))
        assert not np.array_equal(random_condition(TOY, 3), random_condition(TOY, 4))

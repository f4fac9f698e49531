"""Architecture checks: shape contracts, head behavior, init determinism,
state loading, and an end-to-end sampled finite-difference gradient check."""

from __future__ import annotations

import numpy as np
import pytest

import wavetag.diffops as F
from wavetag.diffops import Tensor
from wavetag.model import (
    ConfigError,
    ModelConfig,
    WaveTagModel,
    conv_out_len,
    plan_shapes,
    toy_config,
)


@pytest.fixture(scope="module")
def micro_model():
    """Smallest legal model: every channel width floored at 4."""
    cfg = toy_config(n_classes=3, clip_len=512, width_scale=0.01, attention_hidden=8)
    return WaveTagModel(cfg, seed=123)


class TestShapePlan:
    def test_full_scale_frontend_contract(self):
        plan = plan_shapes(ModelConfig(n_classes=527))
        assert plan.frontend == (128, 1, 2500)

    def test_full_scale_backend_stages(self):
        plan = plan_shapes(ModelConfig(n_classes=527))
        assert plan.stages[1] == (512, 16, 313)
        assert plan.stages[2] == (1024, 8, 157)
        assert plan.stages[3] == (2048, 4, 79)

    def test_toy_spec_example(self):
        plan = plan_shapes(toy_config(n_classes=8, clip_len=16_000, width_scale=0.25))
        assert plan.frontend == (32, 1, 250)

    def test_conv_out_len_floor_formula(self):
        assert conv_out_len(2500, 7, 2, 3) == 1250
        assert conv_out_len(10, 3, 1, 0) == 8
        assert conv_out_len(10, 3, 3, 0) == 3

    def test_indivisible_clip_len_rejected(self):
        with pytest.raises(ConfigError):
            toy_config(n_classes=8, clip_len=16_001)

    def test_config_dict_round_trip(self):
        cfg = toy_config(n_classes=5, clip_len=4096, width_scale=0.3, attention_hidden=32)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestForwardContracts:
    def test_frontend_output_matches_plan(self, micro_model):
        x = np.zeros((2, 1, 512), dtype=np.float32)
        fe = micro_model.frontend_forward(micro_model._as_input(x), train=False)
        assert fe.data.shape == (2,) + plan_shapes(micro_model.cfg).frontend

    def test_fused_is_mean_of_levels(self, micro_model, rng):
        x = rng.standard_normal((2, 1, 512)).astype(np.float32)
        preds = micro_model.forward(x, train=False)
        want = (preds.p2.data + preds.p3.data + preds.p4.data) / 3.0
        np.testing.assert_allclose(preds.fused.data, want, rtol=1e-6)

    def test_probabilities_in_unit_interval(self, micro_model, rng):
        x = rng.standard_normal((3, 1, 512)).astype(np.float32)
        probs = micro_model.predict_proba(x)
        assert probs.shape == (3, 3)
        assert np.all(probs > 0) and np.all(probs < 1)

    def test_zero_input_eval_finite(self, micro_model):
        probs = micro_model.predict_proba(np.zeros((1, 1, 512), dtype=np.float32))
        assert np.all(np.isfinite(probs))

    def test_accepts_2d_input(self, micro_model, rng):
        x = rng.standard_normal((2, 512)).astype(np.float32)
        probs2 = micro_model.predict_proba(x)
        probs3 = micro_model.predict_proba(x[:, None, :])
        np.testing.assert_array_equal(probs2, probs3)

    def test_wrong_length_raises(self, micro_model):
        with pytest.raises(F.ShapeError):
            micro_model.predict_proba(np.zeros((1, 1, 400), dtype=np.float32))

    def test_eval_keeps_buffers_frozen(self, micro_model, rng):
        before = {k: v.copy() for k, v in micro_model.buffers.items()}
        micro_model.predict_proba(rng.standard_normal((2, 1, 512)).astype(np.float32))
        for k, v in micro_model.buffers.items():
            np.testing.assert_array_equal(v, before[k], err_msg=k)

    def test_train_updates_running_stats(self, rng):
        cfg = toy_config(n_classes=3, clip_len=512, width_scale=0.01, attention_hidden=8)
        model = WaveTagModel(cfg, seed=5)
        key = next(k for k in model.buffers if k.endswith("running_mean"))
        before = model.buffers[key].copy()
        model.forward(rng.standard_normal((4, 1, 512)).astype(np.float32), train=True)
        assert not np.array_equal(model.buffers[key], before)


class TestAttentionHeads:
    def test_single_frame_attention_equals_value_branch(self):
        # With T'=1 the softmax weight is 1, so the attention module output
        # must equal the value branch v_1 exactly.
        from wavetag.model import _AttentionHead, _Store

        store = _Store(np.random.default_rng(0), np.float32)
        head = _AttentionHead(store, "h", dim=6, hidden=8, n_classes=4)
        frames = Tensor(np.random.default_rng(1).standard_normal((2, 1, 6)).astype(np.float32))
        with F.no_grad():
            att = head._attend(frames, head.att1_value, head.att1_score, 4)
            v = F.sigmoid(head.att1_value(F.reshape(frames, (2, 6))))
        np.testing.assert_allclose(att.data, v.data, rtol=1e-6)

    def test_head_output_is_probability_vector(self, rng):
        from wavetag.model import _AttentionHead, _Store

        store = _Store(np.random.default_rng(2), np.float32)
        head = _AttentionHead(store, "h", dim=6, hidden=8, n_classes=4)
        stage_map = Tensor(rng.standard_normal((2, 6, 3, 5)).astype(np.float32))
        with F.no_grad():
            out = head(stage_map)
        assert out.data.shape == (2, 4)
        assert np.all((out.data > 0) & (out.data < 1))

    def test_time_permutation_invariance(self, micro_model, rng):
        # Attention pools over time: permuting the stage-map time axis
        # cannot change any head output.
        x = rng.standard_normal((2, 1, 512)).astype(np.float32)
        with F.no_grad():
            fe = micro_model.frontend_forward(micro_model._as_input(x), train=False)
            taps = micro_model.backend_forward(F.transpose_c1t_to_1ct(fe), train=False)
        perm = rng.permutation(taps[2].data.shape[3])
        head = micro_model.heads[2]
        with F.no_grad():
            base = head(taps[2]).data
            shuffled = head(Tensor(taps[2].data[:, :, :, perm])).data
        np.testing.assert_allclose(shuffled, base, rtol=1e-4, atol=1e-6)

    def test_constant_time_frames_match_uniform_attention(self, rng):
        from wavetag.model import _AttentionHead, _Store

        store = _Store(np.random.default_rng(3), np.float32)
        head = _AttentionHead(store, "h", dim=5, hidden=8, n_classes=3)
        frame = rng.standard_normal((2, 5, 1, 1)).astype(np.float32)
        tiled = Tensor(np.repeat(frame, 7, axis=3))
        single = Tensor(frame)
        with F.no_grad():
            np.testing.assert_allclose(head(tiled).data, head(single).data, rtol=1e-5, atol=1e-6)


class TestInitAndState:
    def test_same_seed_bit_identical(self):
        cfg = toy_config(n_classes=3, clip_len=512, width_scale=0.01, attention_hidden=8)
        a = WaveTagModel(cfg, seed=7)
        b = WaveTagModel(cfg, seed=7)
        for (ka, va), (kb, vb) in zip(a.named_tensors(), b.named_tensors()):
            assert ka == kb
            np.testing.assert_array_equal(va, vb, err_msg=ka)

    def test_different_seed_differs(self):
        cfg = toy_config(n_classes=3, clip_len=512, width_scale=0.01, attention_hidden=8)
        a = WaveTagModel(cfg, seed=7)
        b = WaveTagModel(cfg, seed=8)
        assert any(
            not np.array_equal(va, vb)
            for (_, va), (_, vb) in zip(a.named_tensors(), b.named_tensors())
        )

    def test_load_state_round_trip(self, micro_model, rng):
        cfg = micro_model.cfg
        other = WaveTagModel(cfg, seed=999)
        other.load_state(dict(micro_model.named_tensors()))
        x = rng.standard_normal((2, 1, 512)).astype(np.float32)
        np.testing.assert_array_equal(other.predict_proba(x), micro_model.predict_proba(x))

    def test_load_state_missing_key(self, micro_model):
        state = dict(micro_model.named_tensors())
        state.pop(next(iter(state)))
        fresh = WaveTagModel(micro_model.cfg, seed=0)
        with pytest.raises(KeyError):
            fresh.load_state(state)

    def test_load_state_extra_key(self, micro_model):
        state = dict(micro_model.named_tensors())
        state["bogus.weight"] = np.zeros(3, dtype=np.float32)
        fresh = WaveTagModel(micro_model.cfg, seed=0)
        with pytest.raises(KeyError, match="bogus"):
            fresh.load_state(state)

    def test_load_state_shape_mismatch(self, micro_model):
        state = dict(micro_model.named_tensors())
        first = next(iter(state))
        state[first] = np.zeros((1, 2, 3), dtype=np.float32)
        fresh = WaveTagModel(micro_model.cfg, seed=0)
        with pytest.raises(ValueError, match=first.split(".")[0]):
            fresh.load_state(state)

    def test_every_parameter_reached_by_loss(self, micro_model, rng):
        x = rng.standard_normal((2, 1, 512)).astype(np.float32)
        y = (rng.uniform(size=(2, 3)) < 0.5).astype(np.float32)
        preds = micro_model.forward(x, train=True)
        from wavetag.training import multi_level_loss

        micro_model.zero_grads()
        multi_level_loss(preds, y).backward()
        missing = [k for k, p in micro_model.params.items() if p.grad is None]
        assert missing == []


class TestEndToEndGradient:
    def test_sampled_finite_differences(self):
        """Whole-network gradient check in float64 on sampled coordinates."""
        with F.using_dtype(np.float64):
            cfg = toy_config(n_classes=3, clip_len=512, width_scale=0.01, attention_hidden=8)
            model = WaveTagModel(cfg, seed=21)
            assert all(p.data.dtype == np.float64 for p in model.params.values())
            rng = np.random.default_rng(2)
            x = rng.standard_normal((2, 1, 512))
            y = (rng.uniform(size=(2, 3)) < 0.5).astype(np.float64)

            def loss_value() -> float:
                from wavetag.training import multi_level_loss

                preds = model.forward(x, train=True)
                return float(multi_level_loss(preds, y).data)

            from wavetag.training import multi_level_loss

            preds = model.forward(x, train=True)
            loss = multi_level_loss(preds, y)
            model.zero_grads()
            loss.backward()

            names = sorted(model.params)
            picked = rng.choice(len(names), size=20, replace=False)
            # The optimal FD step varies per coordinate: high-curvature
            # coordinates need small h (truncation ~ h^2) while near-zero
            # gradients need large h (cancellation noise ~ 1/h), and a step
            # can land across a ReLU kink. A correct analytic gradient
            # matches FD at some h in the sweep; a wrong one fails at every
            # h. The 1e-5 floor judges tiny coordinates by absolute error.
            h_sweep = (1e-3, 3e-4, 1e-4)
            worst = 0.0
            for idx in picked:
                name = names[int(idx)]
                p = model.params[name]
                flat = p.data.reshape(-1)
                coord = int(rng.integers(flat.size))
                orig = flat[coord]
                analytic = p.grad.reshape(-1)[coord]
                best = np.inf
                for h in h_sweep:
                    flat[coord] = orig + h
                    f_plus = loss_value()
                    flat[coord] = orig - h
                    f_minus = loss_value()
                    flat[coord] = orig
                    numeric = (f_plus - f_minus) / (2 * h)
                    denom = max(abs(numeric), abs(analytic), 1e-5)
                    best = min(best, abs(numeric - analytic) / denom)
                worst = max(worst, best)
            assert worst < 1e-3, f"worst sampled rel error {worst:.2e}"

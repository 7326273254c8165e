import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from sddtta import network as net
from sddtta import tta
from sddtta.augment import AugmentationSpec
from sddtta.errors import ConfigError, ContractError
from sddtta.network import Prediction
from sddtta.synthdata import Sample


def zero_checkpoint(size=32):
    p = net.build_architecture(size, size, seed=0)
    for k in p.params:
        p.params[k][:] = 0
    return p


def biased_checkpoint(bias, size=32):
    """Zero net with a classification bias: cls_prob = sigmoid(bias) always."""
    p = zero_checkpoint(size)
    p.params["cls_fc.b"][:] = bias
    return p


def fake_prediction(seg_value, cls_value, h=4, w=4):
    seg = np.full((h, w), seg_value, dtype=np.float32)
    return Prediction(seg, cls_value, seg.copy(), cls_value)


class TestGate:
    def test_indifferent_sample_rejected(self):
        sup = zero_checkpoint()
        img = np.random.default_rng(0).random((1, 32, 32)).astype(np.float32)
        d = tta.gate(sup, img, p_th=0.6)
        assert d.confidence == 0.5
        assert not d.accepted

    def test_confident_positive_accepted(self):
        sup = biased_checkpoint(3.0)  # q ~ 0.953
        img = np.zeros((1, 32, 32), dtype=np.float32)
        d = tta.gate(sup, img, p_th=0.6)
        assert d.cls_prob > 0.9
        assert d.confidence == d.cls_prob
        assert d.accepted

    def test_confident_negative_also_accepted(self):
        sup = biased_checkpoint(-3.0)  # q ~ 0.047
        img = np.zeros((1, 32, 32), dtype=np.float32)
        d = tta.gate(sup, img, p_th=0.6)
        assert d.cls_prob < 0.1
        assert d.confidence == pytest.approx(1.0 - d.cls_prob)
        assert d.accepted


class TestFusionWeight:
    def test_endpoints_exact(self):
        assert tta.supervisor_fusion_weight(1.0) == 0.0
        assert tta.supervisor_fusion_weight(0.5) == 1.0

    @given(conf=st.floats(0.5, 1.0))
    @settings(max_examples=50)
    def test_range_and_monotonicity(self, conf):
        w = tta.supervisor_fusion_weight(conf)
        assert 0.0 <= w <= 1.0


class TestFuseViews:
    def decision(self, conf=0.9, seg=0.5, cls=0.5):
        return tta.GateDecision(conf, True, cls, fake_prediction(seg, cls))

    def test_hand_evaluated_fusion(self):
        # two kept views with seg probs 0.2 / 0.6 -> ensemble 0.4;
        # w_sup 0.8 against model 0.9 -> 0.8*0.4 + 0.2*0.9 = 0.50
        views = [
            (AugmentationSpec("identity"), fake_prediction(0.2, 0.9)),
            (AugmentationSpec("identity"), fake_prediction(0.6, 0.9)),
        ]
        pseudo = tta.fuse_views(
            self.decision(), views, fake_prediction(0.9, 0.9), p_th=0.6, weight_fn=lambda c: 0.8
        )
        assert pseudo.n_kept_augs == 2
        np.testing.assert_allclose(pseudo.seg_target, 0.5, atol=1e-7)

    def test_all_identity_equal_params_returns_shared_prediction(self):
        shared = fake_prediction(0.37, 0.81)
        views = [(AugmentationSpec("identity"), fake_prediction(0.37, 0.81)) for _ in range(3)]
        for w in (0.0, 0.3, 0.7, 1.0):
            pseudo = tta.fuse_views(
                self.decision(cls=0.81, seg=0.37), views, shared, p_th=0.6, weight_fn=lambda c, w=w: w
            )
            np.testing.assert_array_equal(pseudo.seg_target, shared.seg_prob)
            assert pseudo.cls_target == shared.cls_prob

    def test_full_confidence_uses_model_prediction(self):
        views = [(AugmentationSpec("identity"), fake_prediction(0.2, 0.9))]
        model_pred = fake_prediction(0.77, 0.66)
        pseudo = tta.fuse_views(self.decision(conf=1.0), views, model_pred, p_th=0.6)
        assert pseudo.w_sup == 0.0
        np.testing.assert_array_equal(pseudo.seg_target, model_pred.seg_prob)
        assert pseudo.cls_target == model_pred.cls_prob

    def test_single_identity_full_weight_returns_supervisor(self):
        sup_view = fake_prediction(0.31, 0.88)
        views = [(AugmentationSpec("identity"), sup_view)]
        pseudo = tta.fuse_views(
            self.decision(conf=0.5, seg=0.11, cls=0.5), views, fake_prediction(0.9, 0.1), p_th=0.6
        )
        # confidence 0.5 -> w_sup = 1 -> exactly the view's prediction
        assert pseudo.w_sup == 1.0
        np.testing.assert_array_equal(pseudo.seg_target, sup_view.seg_prob)
        assert pseudo.cls_target == sup_view.cls_prob

    def test_unconfident_views_dropped_fallback_to_original(self):
        dec = self.decision(seg=0.42, cls=0.93)
        views = [(AugmentationSpec("identity"), fake_prediction(0.9, 0.55))]  # conf 0.55 <= 0.6
        pseudo = tta.fuse_views(dec, views, fake_prediction(0.1, 0.1), p_th=0.6, weight_fn=lambda c: 1.0)
        assert pseudo.n_kept_augs == 0
        np.testing.assert_array_equal(pseudo.seg_target, dec.prediction.seg_prob)

    def test_rejected_decision_is_contract_error(self):
        dec = tta.GateDecision(0.5, False, 0.5, fake_prediction(0.5, 0.5))
        with pytest.raises(ContractError):
            tta.fuse_views(dec, [], fake_prediction(0.5, 0.5), p_th=0.6)

    def test_targets_stay_in_unit_interval(self):
        views = [
            (AugmentationSpec("hflip"), fake_prediction(0.99, 0.95)),
            (AugmentationSpec("identity"), fake_prediction(0.01, 0.97)),
        ]
        pseudo = tta.fuse_views(self.decision(conf=0.7), views, fake_prediction(1.0, 0.0), p_th=0.6)
        assert np.all((pseudo.seg_target >= 0) & (pseudo.seg_target <= 1))
        assert 0.0 <= pseudo.cls_target <= 1.0
        assert 0.0 <= pseudo.w_sup <= 1.0


class TestLosses:
    def test_class_loss_at_half(self):
        assert tta.loss_class(0.5, 0.5).item() == pytest.approx(math.log(2), abs=1e-9)

    def test_class_loss_perfect_match_goes_to_zero(self):
        assert tta.loss_class(1.0 - 1e-9, 1.0).item() == pytest.approx(0.0, abs=1e-5)

    def test_class_loss_clamped_worst_case(self):
        assert tta.loss_class(1e-7, 1.0).item() == pytest.approx(-math.log(1e-7), rel=1e-6)

    def test_seg_loss_self_divergence_zero(self):
        x = np.random.default_rng(0).uniform(0.01, 0.99, (8, 8))
        assert abs(tta.loss_seg(x, x).item()) <= 1e-9

    def test_seg_loss_single_pixel_closed_form(self):
        val = tta.loss_seg(np.array([[0.5]]), np.array([[1.0]])).item()
        assert val == pytest.approx(math.log(2), abs=1e-5)

    def test_seg_loss_matches_loop_oracle(self):
        rng = np.random.default_rng(5)
        p = rng.uniform(0.05, 0.95, (4, 4))
        x = rng.uniform(0.05, 0.95, (4, 4))
        got = tta.loss_seg(p, x).item()
        acc = 0.0
        for i in range(4):
            for j in range(4):
                xi, pi = x[i, j], p[i, j]
                acc += xi * math.log(xi / pi) + (1 - xi) * math.log((1 - xi) / (1 - pi))
        assert got == pytest.approx(acc / 16, abs=1e-7)

    def test_seg_loss_one_sided_form(self):
        rng = np.random.default_rng(6)
        p = rng.uniform(0.1, 0.9, (3, 3))
        x = rng.uniform(0.1, 0.9, (3, 3))
        got = tta.loss_seg(p, x, form="one_sided").item()
        want = np.mean(x * (np.log(x) - np.log(p)))
        assert got == pytest.approx(float(want), abs=1e-9)

    def test_seg_loss_shape_mismatch(self):
        with pytest.raises(ContractError):
            tta.loss_seg(np.zeros((2, 2)), np.zeros((3, 3)))

    @given(
        arrays=st.tuples(
            hnp.arrays(np.float64, (5, 5), elements=st.floats(0.0, 1.0)),
            hnp.arrays(np.float64, (5, 5), elements=st.floats(0.0, 1.0)),
        )
    )
    @settings(max_examples=60, deadline=None)
    def test_seg_loss_nonnegative(self, arrays):
        p, x = arrays
        assert tta.loss_seg(p, x).item() >= -1e-12


class TestSchedule:
    def test_endpoints(self):
        s = tta.LossSchedule(0, 100)
        assert s.lambda_class == 1.0
        s.t = 100
        assert s.lambda_class == 0.0

    def test_quarter_point_total(self):
        s = tta.LossSchedule(25, 100)
        assert s.lambda_class == 0.75
        lc = tta.loss_class(0.5, 0.5) * 0 + 2.0  # scalar node 2.0
        ls = tta.loss_class(0.5, 0.5) * 0 + 4.0
        assert tta.total_loss(lc, ls, s).item() == pytest.approx(2.5)

    def test_strictly_decreasing_then_clamped(self):
        values = [tta.LossSchedule(t, 10, lambda_min=0.0).lambda_class for t in range(12)]
        assert all(a > b for a, b in zip(values[:10], values[1:11]))
        assert values[10] == 0.0 and values[11] == 0.0

    def test_lambda_min_floor(self):
        s = tta.LossSchedule(95, 100, lambda_min=0.2)
        assert s.lambda_class == 0.2


def make_state(checkpoint, n, cfg=None, toggles=tta.Toggles()):
    cfg = cfg or tta.AdaptConfig()
    model = checkpoint.copy()
    return tta.AdaptState(
        model=model,
        adam=tta.AdamState(model),
        schedule=tta.LossSchedule(0, n, cfg.lambda_min),
        cfg=cfg,
        toggles=toggles,
    )


class TestAdaptStep:
    def test_rejected_leaves_params_bit_identical(self):
        ckpt = zero_checkpoint()  # q = 0.5 everywhere -> always rejected
        state = make_state(ckpt, 10)
        img = np.random.default_rng(1).random((1, 32, 32)).astype(np.float32)
        pred, report = tta.adapt_step(state, ckpt.copy(), img)
        assert not report.accepted
        assert state.model.byte_equal(ckpt)
        assert state.adam.step == 0
        assert state.schedule.t == 1

    def test_lr_zero_keeps_prediction_moments_advance(self, small_checkpoint, small_stream):
        cfg = tta.AdaptConfig(lr=0.0)
        state = make_state(small_checkpoint, 10, cfg, tta.Toggles(supervisor_gate=False))
        img = small_stream[0].image
        before = net.forward(state.model, img)
        pred, report = tta.adapt_step(state, small_checkpoint.copy(), img)
        assert report.accepted
        assert state.adam.step == 1
        assert any(np.abs(m).sum() > 0 for m in state.adam.m.values())
        assert pred.cls_prob == before.cls_prob
        assert pred.seg_prob.tobytes() == before.seg_prob.tobytes()
        assert state.model.byte_equal(small_checkpoint)

    def test_single_step_descent_rate(self, small_checkpoint, small_stream):
        """Post-update loss on the same pseudo-label drops in >=90% of trials."""
        wins = trials = 0
        rng = np.random.default_rng(9)
        for trial in range(100):
            sample = small_stream[trial % len(small_stream)]
            cfg = tta.AdaptConfig(seed=int(rng.integers(1 << 30)))
            state = make_state(small_checkpoint, 10, cfg, tta.Toggles(supervisor_gate=False))
            pre_pred = net.forward(state.model, sample.image)
            _, report = tta.adapt_step(state, small_checkpoint.copy(), sample.image)
            assert report.accepted
            pseudo = report.pseudo
            lam = report.lambda_class
            post_pred = net.forward(state.model, sample.image)

            def total(pred):
                lc = tta.loss_class(pred.cls_prob, pseudo.cls_target).item()
                ls = tta.loss_seg(pred.seg_prob, pseudo.seg_target).item()
                return lam * lc + (1 - lam) * ls

            trials += 1
            if total(post_pred) <= total(pre_pred):
                wins += 1
        assert trials == 100
        assert wins >= 90, f"descent in only {wins}/100 trials"


class TestRunStream:
    def test_empty_stream_rejected(self, small_checkpoint):
        with pytest.raises(ConfigError):
            tta.run_stream(small_checkpoint, [], tta.AdaptConfig())

    def test_supervisor_frozen_through_run(self, small_checkpoint, small_stream):
        result = tta.run_stream(small_checkpoint, small_stream, tta.AdaptConfig(seed=3))
        assert result.supervisor.byte_equal(small_checkpoint)
        assert result.n_adapted + result.n_rejected + result.n_poisoned == len(small_stream)

    def test_all_rejected_stream_leaves_model_at_theta0(self):
        ckpt = zero_checkpoint()  # confidence always exactly 0.5
        stream = [
            Sample(f"s{i}", np.random.default_rng(i).random((1, 32, 32)).astype(np.float32), None, None, "d", None)
            for i in range(8)
        ]
        result = tta.run_stream(ckpt, stream, tta.AdaptConfig())
        assert result.model.byte_equal(ckpt)
        assert result.n_adapted == 0
        frozen = [net.forward(ckpt, s.image).cls_prob for s in stream]
        assert [p.cls_prob for p in result.predictions] == frozen

    def test_pure_self_training_has_exactly_zero_gradient(self, small_checkpoint, small_stream):
        # soft self-targets make the update a no-op: the all-off ablation
        # row reproduces the frozen model bit for bit
        result = tta.run_stream(
            small_checkpoint, small_stream, tta.AdaptConfig(), tta.Toggles(False, False, False)
        )
        assert result.model.byte_equal(small_checkpoint)

    def test_t_advances_on_every_sample(self, small_checkpoint, small_stream):
        result = tta.run_stream(small_checkpoint, small_stream, tta.AdaptConfig(seed=1))
        assert [r.t for r in result.reports] == list(range(len(small_stream)))

    def test_dyn_loss_off_fixes_lambda(self, small_checkpoint, small_stream):
        result = tta.run_stream(
            small_checkpoint, small_stream, tta.AdaptConfig(seed=1), tta.Toggles(dyn_loss=False)
        )
        assert all(r.lambda_class == 0.5 for r in result.reports)

    def test_gate_off_accepts_everything(self, small_checkpoint, small_stream):
        result = tta.run_stream(
            small_checkpoint, small_stream, tta.AdaptConfig(seed=1), tta.Toggles(supervisor_gate=False)
        )
        assert result.n_adapted == len(small_stream)

    def test_bit_reproducible(self, small_checkpoint, small_stream):
        a = tta.run_stream(small_checkpoint, small_stream, tta.AdaptConfig(seed=5))
        b = tta.run_stream(small_checkpoint, small_stream, tta.AdaptConfig(seed=5))
        assert a.model.byte_equal(b.model)
        assert [r.to_record() for r in a.reports] == [r.to_record() for r in b.reports]

    def test_adapted_run_changes_model(self, small_checkpoint, small_stream):
        result = tta.run_stream(small_checkpoint, small_stream, tta.AdaptConfig(seed=2))
        if result.n_adapted > 0:
            assert not result.model.byte_equal(small_checkpoint)

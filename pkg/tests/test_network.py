import numpy as np
import pytest
from scipy import signal

from sddtta import autodiff as ad
from sddtta import network as net
from sddtta.errors import ConfigError, ContractError


def straight_line_forward(params, image):
    """Independent reimplementation of the forward math on top of scipy.

    Returns (seg_logit (h,w), cls_logit). Shares no code with the package's
    tensor engine.
    """
    p = {k: v.astype(np.float64) for k, v in params.params.items()}

    def conv(stack, w, b):
        out = []
        for co in range(w.shape[0]):
            acc = np.zeros_like(stack[0])
            for ci in range(w.shape[1]):
                acc += signal.correlate2d(stack[ci], w[co, ci], mode="same")
            out.append(acc + b[co])
        return np.stack(out)

    def pool2(stack):
        c, h, w = stack.shape
        return stack.reshape(c, h // 2, 2, w // 2, 2).max(axis=(2, 4))

    h = image[0].astype(np.float64)[None]
    for blk in ("seg1", "seg2", "seg3"):
        h = np.maximum(conv(h, p[f"{blk}a.w"], p[f"{blk}a.b"]), 0)
        h = np.maximum(conv(h, p[f"{blk}b.w"], p[f"{blk}b.b"]), 0)
        h = pool2(h)
    seg_logit = conv(h, p["seg_head.w"], p["seg_head.b"])[0]
    cat = np.concatenate([h, seg_logit[None]], axis=0)
    c = np.maximum(conv(cat, p["cls_conv.w"], p["cls_conv.b"]), 0)
    feats = np.concatenate(
        [
            c.max(axis=(1, 2)),
            c.mean(axis=(1, 2)),
            [seg_logit.max()],
            [seg_logit.mean()],
        ]
    )
    cls_logit = float(feats @ p["cls_fc.w"][0] + p["cls_fc.b"][0])
    return seg_logit, cls_logit


class TestBuildArchitecture:
    def test_same_seed_bit_identical(self):
        a = net.build_architecture(64, 64, seed=5)
        b = net.build_architecture(64, 64, seed=5)
        assert a.byte_equal(b)

    def test_different_seeds_differ(self):
        a = net.build_architecture(64, 64, seed=1)
        b = net.build_architecture(64, 64, seed=2)
        assert not a.byte_equal(b)

    def test_seg_head_resolution(self):
        p = net.build_architecture(64, 64, seed=0)
        img = np.zeros((1, 64, 64), dtype=np.float32)
        assert net.forward(p, img).seg_prob.shape == (8, 8)

    def test_non_divisible_dims_rejected(self):
        with pytest.raises(ConfigError):
            net.build_architecture(60, 64, seed=0)

    def test_biases_zero_weights_bounded(self):
        p = net.build_architecture(64, 64, seed=3)
        for name, arr in p.params.items():
            if name.endswith(".b"):
                assert np.all(arr == 0)
            else:
                fan_in = int(np.prod(arr.shape[1:]))
                assert np.abs(arr).max() <= np.sqrt(1.0 / fan_in)

    def test_fingerprint_depends_on_input_size(self):
        assert (
            net.architecture_fingerprint(64, 64) != net.architecture_fingerprint(128, 128)
        )


class TestForward:
    def test_zero_weights_give_half(self):
        p = net.build_architecture(64, 64, seed=0)
        for k in p.params:
            p.params[k][:] = 0
        img = np.random.default_rng(0).random((1, 64, 64)).astype(np.float32)
        pred = net.forward(p, img)
        assert np.all(pred.seg_prob == 0.5)
        assert pred.cls_prob == 0.5

    def test_forward_deterministic(self):
        p = net.build_architecture(64, 64, seed=1)
        img = np.random.default_rng(2).random((1, 64, 64)).astype(np.float32)
        a, b = net.forward(p, img), net.forward(p, img)
        assert a.seg_prob.tobytes() == b.seg_prob.tobytes()
        assert a.cls_prob == b.cls_prob

    def test_output_ranges(self):
        p = net.build_architecture(64, 64, seed=4)
        img = np.random.default_rng(5).random((1, 64, 64)).astype(np.float32)
        pred = net.forward(p, img)
        assert np.all((pred.seg_prob >= 0) & (pred.seg_prob <= 1))
        assert 0.0 <= pred.cls_prob <= 1.0
        np.testing.assert_allclose(
            pred.seg_prob, 1.0 / (1.0 + np.exp(-pred.seg_logit)), atol=1e-6
        )

    def test_matches_straight_line_oracle(self):
        p = net.build_architecture(32, 32, seed=7)
        img = np.random.default_rng(8).random((1, 32, 32)).astype(np.float32)
        pred = net.forward(p, img)
        seg_ref, cls_ref = straight_line_forward(p, img)
        assert abs(pred.cls_logit - cls_ref) <= 1e-5
        np.testing.assert_allclose(pred.seg_logit, seg_ref, atol=1e-5)

    def test_wrong_image_dims_rejected(self):
        p = net.build_architecture(64, 64, seed=0)
        with pytest.raises(ContractError, match="fingerprint"):
            net.forward(p, np.zeros((1, 32, 32), dtype=np.float32))


class TestComposedGradient:
    def test_finite_differences_sampled(self):
        """FD spot-check of the full two-stage loss on a 16x16 input (64-bit).

        The exhaustive sweep over every parameter runs in the gradcheck
        module; here a seeded sample of coordinates per tensor keeps the
        unit suite fast. Uses the kink-free evaluation point so central
        differences are a valid oracle.
        """
        from sddtta.gradcheck import make_smooth_check_point

        params, image = make_smooth_check_point(16, 16, seed=7)
        img = image[None]
        seg_target = np.random.default_rng(44).uniform(0.2, 0.8, (1, 1, 2, 2))
        cls_target = 0.7

        def loss_nodes(seg_prob, cls_prob):
            eps = 1e-7
            q = ad.clip(cls_prob, eps, 1 - eps)
            lc = ad.sum_all(ad.log(q) * (-cls_target) + ad.log(1.0 - q) * (cls_target - 1.0))
            pm = ad.clip(seg_prob, eps, 1 - eps)
            ls = ad.mean_all(
                ad.log(pm) * (-seg_target) + ad.log(1.0 - pm) * (seg_target - 1.0)
            )
            return lc * 0.5 + ls * 0.5

        def loss_value():
            seg_prob, cls_prob, _, _ = net.forward_batch(params, img[None])
            return loss_nodes(seg_prob, cls_prob).item()

        tape = ad.Tape()
        seg_prob, cls_prob, _, _ = net.forward_batch(params, img[None], tape)
        grads = ad.backward(tape, loss_nodes(seg_prob, cls_prob))

        h = 1e-4
        rng = np.random.default_rng(45)
        worst = 0.0
        for name, arr in params.params.items():
            flat = arr.reshape(-1)
            k = min(12, flat.size)
            for i in rng.choice(flat.size, size=k, replace=False):
                orig = flat[i]
                flat[i] = orig + h
                fp = loss_value()
                flat[i] = orig - h
                fm = loss_value()
                flat[i] = orig
                numeric = (fp - fm) / (2 * h)
                analytic = grads[name].reshape(-1)[i]
                rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1.0)
                worst = max(worst, rel)
        assert worst <= 1e-6, f"max rel err {worst:.3e}"

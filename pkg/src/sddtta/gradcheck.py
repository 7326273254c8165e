"""Finite-difference verification of the reverse-mode gradients.

Central differences are only a valid derivative oracle where the loss is
smooth across the whole perturbation window. A fresh random net violates
that: with thousands of ReLU pre-activations and pooling windows, some
always sit within h of a kink, and the difference quotient then measures
a chord across it. The composed-network check therefore runs at a
constructed evaluation point -- strictly positive weights scaled for O(1)
activations and a ramp image -- where every ReLU is on and every pooling
gap is wide. A margin audit asserts this before the sweep. Branch
behaviour (ReLU off, clamps, tie routing) is covered by the per-layer
checks, which use generic points kept away from their kinks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import network
from .errors import NumericError

DEFAULT_STEP = 1e-4
DEFAULT_TOL = 1e-6
# minimum distance of any activation from a kink, in units of the FD step.
# Pool gaps get a lower floor: a perturbation of size h moves the
# *difference* of two same-channel values far less than an absolute
# pre-activation (bias shifts cancel in the gap entirely).
MARGIN_FACTORS = {"relu": 20.0, "pool_gap": 10.0, "sigmoid_clamp": 20.0, "prob_clip": 20.0}


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return float((np.abs(analytic - numeric) / denom).max())


def make_smooth_check_point(input_h: int = 16, input_w: int = 16, seed: int = 7):
    """Parameters and image giving a kink-free neighbourhood for FD.

    All conv/linear weights positive, each layer rescaled so its mean
    pre-activation is ~0.6, small positive biases; the image is a ramp.
    Positive weights on positive inputs keep every ReLU strictly on, and
    the ramp keeps pooling windows free of ties.
    """
    rng = np.random.default_rng(seed)
    params = network.build_architecture(input_h, input_w, seed)
    p = params.params
    ramp = np.linspace(0.0, 1.0, input_h * input_w).reshape(input_h, input_w)
    # 2x2 tile with four distinct offsets keeps pooling windows tie-free
    tile = np.array([[0.00, 0.09], [0.03, 0.06]])
    pattern = np.tile(tile, (input_h // 2, input_w // 2))
    image = (0.2 + 0.5 * ramp + pattern).astype(np.float64)

    x = image[None, None]
    conv_layers = [
        "seg1a", "seg1b", None, "seg2a", "seg2b", None, "seg3a", "seg3b", None,
    ]
    for layer in conv_layers:
        if layer is None:
            x = _pool2(x)
            continue
        x = _positive_conv(rng, p, f"{layer}.w", f"{layer}.b", x, relu=True)
    seg_logit = _positive_conv(rng, p, "seg_head.w", "seg_head.b", x, relu=False, target=0.8)
    cat = np.concatenate([x, seg_logit], axis=1)
    c = _positive_conv(rng, p, "cls_conv.w", "cls_conv.b", cat, relu=True)
    feats = np.concatenate(
        [
            c.max(axis=(2, 3)),
            c.mean(axis=(2, 3)),
            seg_logit.max(axis=(2, 3)),
            seg_logit.mean(axis=(2, 3)),
        ],
        axis=1,
    )
    w = rng.uniform(0.2, 1.0, size=p["cls_fc.w"].shape)
    w *= 0.8 / float(np.abs(feats @ w[0]).mean())
    p["cls_fc.w"] = w
    p["cls_fc.b"] = np.full_like(p["cls_fc.b"], 0.05, dtype=np.float64)
    return params.astype(np.float64), image


def _positive_conv(rng, p, wname, bname, x, relu, target=0.6):
    w = rng.uniform(0.2, 1.0, size=p[wname].shape)
    raw = ad.conv2d(ad.Tensor(x), ad.Tensor(w), ad.Tensor(np.zeros(w.shape[0])), "same").data
    w *= target / float(raw.mean())
    b = rng.uniform(0.03, 0.09, size=p[bname].shape)
    p[wname] = w
    p[bname] = b
    out = raw * (target / raw.mean()) + b[None, :, None, None]
    return np.maximum(out, 0) if relu else out


def _pool2(x):
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).max(axis=(3, 5))


def audit_margins(params: network.ModelParams, image: np.ndarray, step: float = DEFAULT_STEP) -> dict:
    """Smallest distance from any kink along the forward pass.

    Returns per-kind margins; FD at step h is trustworthy when they all
    exceed MARGIN_FACTOR * h.
    """
    p = {k: ad.Tensor(v) for k, v in params.params.items()}
    x = ad.Tensor(image[None, None].astype(params.dtype))
    margins = {"relu": np.inf, "pool_gap": np.inf, "sigmoid_clamp": np.inf, "prob_clip": np.inf}

    def track_relu(t):
        margins["relu"] = min(margins["relu"], float(np.abs(t.data).min()))
        return ad.relu(t)

    def track_pool(t):
        n, c, h, w = t.data.shape
        win = t.data.reshape(n, c, h // 2, 2, w // 2, 2)
        win = win.transpose(0, 1, 2, 4, 3, 5).reshape(-1, 4)
        top2 = np.sort(win, axis=1)[:, -2:]
        margins["pool_gap"] = min(margins["pool_gap"], float((top2[:, 1] - top2[:, 0]).min()))
        return ad.maxpool2(t)

    def track_gmax(t):
        flat = t.data.reshape(t.data.shape[0], t.data.shape[1], -1)
        top2 = np.sort(flat, axis=-1)[..., -2:]
        margins["pool_gap"] = min(margins["pool_gap"], float((top2[..., 1] - top2[..., 0]).min()))
        return ad.global_max_pool(t)

    h = x
    for blk in ("seg1", "seg2", "seg3"):
        h = track_relu(ad.conv2d(h, p[f"{blk}a.w"], p[f"{blk}a.b"], "same"))
        h = track_relu(ad.conv2d(h, p[f"{blk}b.w"], p[f"{blk}b.b"], "same"))
        h = track_pool(h)
    seg_logit = ad.conv2d(h, p["seg_head.w"], p["seg_head.b"], "same")
    c = track_relu(ad.conv2d(ad.concat_channels([h, seg_logit]), p["cls_conv.w"], p["cls_conv.b"], "same"))
    feats = ad.concat_channels(
        [track_gmax(c), ad.global_avg_pool(c), track_gmax(seg_logit), ad.global_avg_pool(seg_logit)]
    )
    cls_logit = ad.linear(feats, p["cls_fc.w"], p["cls_fc.b"])
    logits = np.concatenate([seg_logit.data.reshape(-1), cls_logit.data.reshape(-1)])
    margins["sigmoid_clamp"] = float((ad.SIGMOID_CLAMP - np.abs(logits)).min())
    probs = 1.0 / (1.0 + np.exp(-logits))
    margins["prob_clip"] = float(min(probs.min() - 1e-7, 1 - 1e-7 - probs.max()))
    return margins


def _check_loss(params: network.ModelParams, image: np.ndarray, lam: float = 0.5):
    seg_target = 0.35 + 0.3 * np.linspace(0, 1, (params.input_h // 8) * (params.input_w // 8))
    seg_target = seg_target.reshape(1, 1, params.input_h // 8, params.input_w // 8)
    cls_target = 0.7

    def build(tape):
        seg_prob, cls_prob, _, _ = network.forward_batch(params, image[None, None], tape)
        eps = 1e-7
        q = ad.clip(cls_prob, eps, 1 - eps)
        lc = ad.sum_all(ad.log(q) * (-cls_target) + ad.log(1.0 - q) * (cls_target - 1.0))
        pm = ad.clip(seg_prob, eps, 1 - eps)
        ls = ad.mean_all(ad.log(pm) * (-seg_target) + ad.log(1.0 - pm) * (seg_target - 1.0))
        return lc * lam + ls * (1.0 - lam)

    return build


@dataclass
class GradcheckReport:
    max_rel_err: float
    per_param: dict[str, float]
    margins: dict[str, float]
    layer_max_rel_err: float
    layer_errors: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= DEFAULT_TOL and self.layer_max_rel_err <= DEFAULT_TOL


def composed_gradcheck(step: float = DEFAULT_STEP, seed: int = 7) -> tuple[float, dict, dict]:
    """Sweep every parameter of the two-stage loss with central differences."""
    params, image = make_smooth_check_point(seed=seed)
    margins = audit_margins(params, image, step)
    bad = {k: v for k, v in margins.items() if v < MARGIN_FACTORS[k] * step}
    if bad:
        raise NumericError(f"evaluation point too close to kinks for FD: {bad}")

    build = _check_loss(params, image)
    tape = ad.Tape()
    grads = ad.backward(tape, build(tape))

    per_param: dict[str, float] = {}
    for name, arr in params.params.items():
        flat = arr.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = build(None).item()
            flat[i] = orig - step
            fm = build(None).item()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2 * step)
        per_param[name] = relative_error(grads[name].reshape(-1), numeric)
    return max(per_param.values()), per_param, margins


def layer_gradchecks(step: float = DEFAULT_STEP, seed: int = 77) -> dict[str, float]:
    """Each op in isolation at a generic point kept away from its kinks."""
    rng = np.random.default_rng(seed)
    results: dict[str, float] = {}

    def check(name, build_loss, arrays):
        tape = ad.Tape()
        leaves = [tape.leaf(a, name=f"p{i}") for i, a in enumerate(arrays)]
        grads = ad.backward(tape, build_loss(leaves))
        worst = 0.0
        for i, a in enumerate(arrays):
            flat = a.reshape(-1)
            numeric = np.zeros_like(flat)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + step
                tp = ad.Tape()
                fp = build_loss([tp.leaf(arr) for arr in arrays]).item()
                flat[j] = orig - step
                tm = ad.Tape()
                fm = build_loss([tm.leaf(arr) for arr in arrays]).item()
                flat[j] = orig
                numeric[j] = (fp - fm) / (2 * step)
            worst = max(worst, relative_error(grads[f"p{i}"].reshape(-1), numeric))
        results[name] = worst

    r_conv = rng.standard_normal((2, 3, 4, 5))
    check(
        "conv2d_same",
        lambda l: ad.sum_all(ad.conv2d(l[0], l[1], l[2], "same") * r_conv),
        [rng.standard_normal((2, 2, 4, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)],
    )
    r_valid = rng.standard_normal((1, 2, 3, 2))
    check(
        "conv2d_valid",
        lambda l: ad.sum_all(ad.conv2d(l[0], l[1], l[2], "valid") * r_valid),
        [rng.standard_normal((1, 2, 5, 4)), rng.standard_normal((2, 2, 3, 3)), rng.standard_normal(2)],
    )
    r_lin = rng.standard_normal((3, 2))
    check(
        "linear",
        lambda l: ad.sum_all(ad.linear(l[0], l[1], l[2]) * r_lin),
        [rng.standard_normal((3, 4)), rng.standard_normal((2, 4)), rng.standard_normal(2)],
    )
    x = rng.standard_normal((4, 6))
    x = np.where(np.abs(x) < 0.05, x + 0.2, x)
    check("relu", lambda l: ad.sum_all(ad.relu(l[0])), [x])
    r_sig = rng.standard_normal((3, 5))
    check("sigmoid", lambda l: ad.sum_all(ad.sigmoid(l[0]) * r_sig), [rng.standard_normal((3, 5)) * 2])
    r_ls = rng.standard_normal((4, 6))
    check("log_softmax", lambda l: ad.sum_all(ad.log_softmax(l[0]) * r_ls), [rng.standard_normal((4, 6))])
    check(
        "maxpool2",
        lambda l: ad.sum_all(ad.maxpool2(l[0])),
        [rng.permutation(64).reshape(1, 4, 4, 4) * 0.137],
    )
    r_pool = rng.standard_normal((1, 4))
    check(
        "global_max_pool",
        lambda l: ad.sum_all(ad.global_max_pool(l[0]) * r_pool),
        [rng.permutation(36).reshape(1, 4, 3, 3) * 0.211],
    )
    check(
        "global_avg_pool",
        lambda l: ad.sum_all(ad.global_avg_pool(l[0]) * r_pool),
        [rng.standard_normal((1, 4, 3, 3))],
    )
    r_cat = rng.standard_normal((2, 3, 3, 3))
    check(
        "concat_channels",
        lambda l: ad.sum_all(ad.concat_channels(l) * r_cat),
        [rng.standard_normal((2, 2, 3, 3)), rng.standard_normal((2, 1, 3, 3))],
    )
    check(
        "log_clip",
        lambda l: ad.mean_all(ad.log(ad.clip(l[0], 1e-7, 1 - 1e-7))),
        [rng.uniform(0.1, 0.9, (4, 4))],
    )
    return results


def run_gradcheck(step: float = DEFAULT_STEP, seed: int = 7) -> GradcheckReport:
    layer_errors = layer_gradchecks(step)
    composed_max, per_param, margins = composed_gradcheck(step, seed)
    return GradcheckReport(
        max_rel_err=composed_max,
        per_param=per_param,
        margins=margins,
        layer_max_rel_err=max(layer_errors.values()),
        layer_errors=layer_errors,
    )

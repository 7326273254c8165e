"""The two-stage segmentation-then-classification defect network.

Stage one produces a 1-channel segmentation logit map at 1/8 input
resolution (three conv-conv-pool blocks, 8/16/32 channels, then a 1x1
conv). Stage two classifies the whole image from the concatenation of
the final feature volume and the segmentation logit map: a 3x3 conv to
8 channels, then global max/avg pools of those channels plus global
max/avg of the segmentation logits (18 features) into a linear unit.
Gradients flow freely between the stages.

Input is a single grayscale channel with values in [0,1].
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError

ARCH_VERSION = "sddnet-v1"

# (name, shape) in storage order; fan_in drives the init bound
_LAYERS = [
    ("seg1a.w", (8, 1, 3, 3)),
    ("seg1a.b", (8,)),
    ("seg1b.w", (8, 8, 3, 3)),
    ("seg1b.b", (8,)),
    ("seg2a.w", (16, 8, 3, 3)),
    ("seg2a.b", (16,)),
    ("seg2b.w", (16, 16, 3, 3)),
    ("seg2b.b", (16,)),
    ("seg3a.w", (32, 16, 3, 3)),
    ("seg3a.b", (32,)),
    ("seg3b.w", (32, 32, 3, 3)),
    ("seg3b.b", (32,)),
    ("seg_head.w", (1, 32, 1, 1)),
    ("seg_head.b", (1,)),
    ("cls_conv.w", (8, 33, 3, 3)),
    ("cls_conv.b", (8,)),
    ("cls_fc.w", (1, 18)),
    ("cls_fc.b", (1,)),
]


def architecture_fingerprint(input_h: int, input_w: int) -> str:
    text = f"{ARCH_VERSION}|in={input_h}x{input_w}|" + ";".join(
        f"{name}:{','.join(map(str, shape))}" for name, shape in _LAYERS
    )
    return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class ModelParams:
    """Ordered, named parameter set of the two-stage net."""

    input_h: int
    input_w: int
    params: dict[str, np.ndarray]
    seed: int | None = None
    provenance: dict = field(default_factory=dict)

    @property
    def fingerprint(self) -> str:
        return architecture_fingerprint(self.input_h, self.input_w)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.input_h,
            self.input_w,
            {k: v.copy() for k, v in self.params.items()},
            self.seed,
            dict(self.provenance),
        )

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            self.input_h,
            self.input_w,
            {k: v.astype(dtype) for k, v in self.params.items()},
            self.seed,
            dict(self.provenance),
        )

    def byte_equal(self, other: "ModelParams") -> bool:
        if self.fingerprint != other.fingerprint or list(self.params) != list(other.params):
            return False
        return all(self.params[k].tobytes() == other.params[k].tobytes() for k in self.params)


@dataclass
class Prediction:
    """Per-image output: segmentation probability map plus defect probability."""

    seg_prob: np.ndarray  # (h, w) = (H/8, W/8), entries in [0,1]
    cls_prob: float
    seg_logit: np.ndarray
    cls_logit: float


@dataclass
class TapedForward:
    """Forward pass with its recording tape and the probability nodes the losses need."""

    prediction: Prediction
    tape: ad.Tape
    seg_prob_node: ad.Tensor  # (N,1,h,w)
    cls_prob_node: ad.Tensor  # (N,1)


def build_architecture(input_h: int, input_w: int, seed: int, dtype=np.float32) -> ModelParams:
    """Fan-in-scaled uniform init (bound sqrt(1/fan_in)), zero biases, seeded."""
    if input_h % 8 or input_w % 8:
        raise ConfigError(f"input dims ({input_h},{input_w}) must be divisible by 8")
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in _LAYERS:
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(1.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return ModelParams(input_h, input_w, params, seed=seed)


def _net(p, x):
    """Shared graph builder; p maps names to Tensors, x is (N,1,H,W)."""
    h = x
    for blk in ("seg1", "seg2", "seg3"):
        h = ad.relu(ad.conv2d(h, p[f"{blk}a.w"], p[f"{blk}a.b"], "same"))
        h = ad.relu(ad.conv2d(h, p[f"{blk}b.w"], p[f"{blk}b.b"], "same"))
        h = ad.maxpool2(h)
    seg_logit = ad.conv2d(h, p["seg_head.w"], p["seg_head.b"], "same")
    c = ad.relu(ad.conv2d(ad.concat_channels([h, seg_logit]), p["cls_conv.w"], p["cls_conv.b"], "same"))
    feats = ad.concat_channels(
        [
            ad.global_max_pool(c),
            ad.global_avg_pool(c),
            ad.global_max_pool(seg_logit),
            ad.global_avg_pool(seg_logit),
        ]
    )
    cls_logit = ad.linear(feats, p["cls_fc.w"], p["cls_fc.b"])
    return seg_logit, cls_logit


def forward_batch(params: ModelParams, images: np.ndarray, tape: ad.Tape | None = None):
    """Forward a (N,1,H,W) batch; returns (seg_prob, cls_prob) Tensors.

    With a tape, parameters are registered as named leaves so `backward`
    yields one gradient per parameter.
    """
    if images.ndim != 4 or images.shape[1] != 1:
        raise ContractError(f"expected (N,1,H,W) batch, got {images.shape}")
    if images.shape[2] != params.input_h or images.shape[3] != params.input_w:
        raise ContractError(
            f"image dims {images.shape[2:]} do not match architecture "
            f"({params.input_h},{params.input_w}), fingerprint {params.fingerprint}"
        )
    if images.dtype != params.dtype:
        images = images.astype(params.dtype)
    if tape is None:
        p = {k: ad.Tensor(v) for k, v in params.params.items()}
    else:
        p = {k: tape.leaf(v, name=k) for k, v in params.params.items()}
    seg_logit, cls_logit = _net(p, ad.Tensor(images))
    return ad.sigmoid(seg_logit), ad.sigmoid(cls_logit), seg_logit, cls_logit


def forward(params: ModelParams, image: np.ndarray, record_tape: bool = False):
    """Run one (1,H,W) image through the net.

    Returns a Prediction, or a TapedForward when record_tape is set.
    """
    if image.ndim != 3 or image.shape[0] != 1:
        raise ContractError(f"expected (1,H,W) image, got {image.shape}")
    tape = ad.Tape() if record_tape else None
    seg_prob, cls_prob, seg_logit, cls_logit = forward_batch(params, image[None], tape)
    pred = Prediction(
        seg_prob=seg_prob.data[0, 0].copy(),
        cls_prob=float(cls_prob.data[0, 0]),
        seg_logit=seg_logit.data[0, 0].copy(),
        cls_logit=float(cls_logit.data[0, 0]),
    )
    if not record_tape:
        return pred
    return TapedForward(pred, tape, seg_prob, cls_prob)

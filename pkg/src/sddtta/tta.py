"""Online test-time adaptation of the defect detector.

Per stream sample: a frozen supervisor (the source-pretrained weights,
never updated) scores the image; samples it is not confident about are
passed through without touching the model. For confident samples a
pseudo-label is fused from (a) the supervisor's predictions on several
augmented views, inverse-warped back to image coordinates and averaged
over the views that were themselves confident, and (b) the adapted
model's own prediction on the original image. The fusion weight leans on
the supervisor more when confidence is low. The model then takes one
Adam step on a classification/segmentation loss whose balance shifts
from classification toward segmentation as the stream progresses.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .augment import AugmentationSpec, apply as apply_aug, inverse_warp_seg, sample_augs
from .errors import ConfigError, ContractError
from .network import ModelParams, Prediction, forward
from .synthdata import Sample

PROB_EPS = 1e-7


@dataclass
class AdaptConfig:
    p_th: float = 0.6
    n_aug: int = 4
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    horizon_n: int | None = None  # defaults to the stream length
    lambda_min: float = 0.0
    seed: int = 0
    seg_loss_form: str = "bernoulli_kl"  # or "one_sided"

    def __post_init__(self):
        if not 0.5 <= self.p_th < 1.0:
            raise ConfigError(f"p_th must be in [0.5,1), got {self.p_th}")
        if self.n_aug < 1:
            raise ConfigError(f"n_aug must be >= 1, got {self.n_aug}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.horizon_n is not None and self.horizon_n < 1:
            raise ConfigError(f"horizon_n must be >= 1, got {self.horizon_n}")
        if not 0.0 <= self.lambda_min <= 1.0:
            raise ConfigError(f"lambda_min must be in [0,1], got {self.lambda_min}")
        if self.seg_loss_form not in ("bernoulli_kl", "one_sided"):
            raise ConfigError(f"unknown seg_loss_form {self.seg_loss_form!r}")


@dataclass(frozen=True)
class Toggles:
    """Component switches for ablations; all on in normal operation."""

    supervisor_gate: bool = True
    aug_mean: bool = True
    dyn_loss: bool = True


@dataclass
class GateDecision:
    confidence: float
    accepted: bool
    cls_prob: float
    prediction: Prediction  # full supervisor output, reused by the fusion


@dataclass
class PseudoLabel:
    seg_target: np.ndarray  # (h,w) in [0,1]
    cls_target: float
    w_sup: float
    n_kept_augs: int


@dataclass
class LossSchedule:
    t: int
    horizon_n: int
    lambda_min: float = 0.0

    def __post_init__(self):
        if self.horizon_n < 1:
            raise ConfigError(f"horizon_n must be >= 1, got {self.horizon_n}")

    @property
    def lambda_class(self) -> float:
        return max(self.lambda_min, 1.0 - self.t / self.horizon_n)

    def advance(self):
        self.t += 1


class AdamState:
    """First/second moment tensors plus the step counter; lives stream-long."""

    def __init__(self, params: ModelParams):
        self.m = {k: np.zeros_like(v) for k, v in params.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.params.items()}
        self.step = 0

    def update(self, params: ModelParams, grads: dict[str, np.ndarray], cfg: AdaptConfig):
        self.step += 1
        bc1 = 1.0 - cfg.beta1**self.step
        bc2 = 1.0 - cfg.beta2**self.step
        for name, g in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * (g * g)
            denom = np.sqrt(v / bc2) + cfg.eps
            params.params[name] -= cfg.lr * (m / bc1) / denom


def supervisor_fusion_weight(confidence: float) -> float:
    """Default fusion weight: 1 - (2p - 1); confidence 0.5 -> 1, 1.0 -> 0."""
    return 1.0 - (2.0 * confidence - 1.0)


def gate(supervisor: ModelParams, image: np.ndarray, p_th: float) -> GateDecision:
    """Score reliability with the frozen supervisor; accept iff above p_th."""
    pred = forward(supervisor, image)
    q = pred.cls_prob
    confidence = max(q, 1.0 - q)
    return GateDecision(confidence, confidence > p_th, q, pred)


def _convex(sup_part, model_part, w: float):
    """w * sup_part + (1-w) * model_part, exact at the endpoints and when
    both sides are equal."""
    if w == 0.0:
        return model_part if np.isscalar(model_part) else model_part.copy()
    if w == 1.0:
        return sup_part if np.isscalar(sup_part) else sup_part.copy()
    return model_part + w * (sup_part - model_part)


def fuse_views(
    decision: GateDecision,
    views: list[tuple[AugmentationSpec, Prediction]],
    model_pred: Prediction,
    p_th: float,
    weight_fn: Callable[[float], float] = supervisor_fusion_weight,
) -> PseudoLabel:
    """Combine supervisor views with the model's own prediction.

    Views are scored like the gate; only confident ones vote. Their
    segmentation maps are inverse-warped to original coordinates and
    averaged per pixel over valid votes; pixels no view covered fall back
    to the supervisor's prediction on the original image, as does
    everything when no view survives.
    """
    if not decision.accepted:
        raise ContractError("pseudo-label fusion requires a gate-accepted sample")
    h, w = decision.prediction.seg_prob.shape
    seg_sum = np.zeros((h, w), dtype=np.float64)
    seg_count = np.zeros((h, w), dtype=np.float64)
    kept_cls: list[float] = []
    for spec, pred in views:
        q = pred.cls_prob
        if max(q, 1.0 - q) <= p_th:
            continue
        warped, valid = inverse_warp_seg(spec, pred.seg_prob)
        seg_sum += np.where(valid, warped, 0.0)
        seg_count += valid
        kept_cls.append(q)

    if kept_cls:
        fallback = decision.prediction.seg_prob
        seg_e = np.where(seg_count > 0, seg_sum / np.maximum(seg_count, 1.0), fallback)
        seg_e = seg_e.astype(decision.prediction.seg_prob.dtype)
        cls_e = float(sum(kept_cls) / len(kept_cls))
    else:
        seg_e = decision.prediction.seg_prob.copy()
        cls_e = decision.prediction.cls_prob

    w_sup = min(1.0, max(0.0, weight_fn(decision.confidence)))
    seg_target = _convex(seg_e, model_pred.seg_prob, w_sup)
    cls_target = float(_convex(cls_e, model_pred.cls_prob, w_sup))
    return PseudoLabel(seg_target, cls_target, w_sup, len(kept_cls))


def augmented_mean_prediction(
    supervisor: ModelParams,
    model: ModelParams,
    image: np.ndarray,
    decision: GateDecision,
    augs: list[AugmentationSpec],
    p_th: float,
    weight_fn: Callable[[float], float] = supervisor_fusion_weight,
    model_pred: Prediction | None = None,
) -> PseudoLabel:
    """Supervisor forwards on each augmented view, fused with the model."""
    views = [(spec, forward(supervisor, apply_aug(spec, image))) for spec in augs]
    if model_pred is None:
        model_pred = forward(model, image)
    return fuse_views(decision, views, model_pred, p_th, weight_fn)


def loss_class(cls_prob, target: float) -> ad.Tensor:
    """Binary soft cross-entropy against the pseudo class target."""
    if not isinstance(cls_prob, ad.Tensor):
        cls_prob = ad.Tensor(np.asarray(cls_prob, dtype=np.float64))
    q = ad.clip(cls_prob, PROB_EPS, 1.0 - PROB_EPS)
    x = float(target)
    return ad.sum_all(ad.log(q) * (-x) + ad.log(1.0 - q) * (x - 1.0))


def loss_seg(seg_prob, target: np.ndarray, form: str = "bernoulli_kl") -> ad.Tensor:
    """Per-pixel Bernoulli KL(target || prediction), averaged over pixels.

    The full form is a true divergence: zero iff the maps agree (within
    the probability clamp). "one_sided" keeps only the positive-class
    terms, x*log(x/p), averaged over pixels.
    """
    if not isinstance(seg_prob, ad.Tensor):
        seg_prob = ad.Tensor(np.asarray(seg_prob, dtype=np.float64))
    x = np.clip(np.asarray(target, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    if x.size != seg_prob.data.size:
        raise ContractError(f"seg map shape {seg_prob.data.shape} vs target {x.shape}")
    x = x.reshape(seg_prob.data.shape).astype(seg_prob.data.dtype)
    p = ad.clip(seg_prob, PROB_EPS, 1.0 - PROB_EPS)
    if form == "one_sided":
        ce = ad.mean_all(ad.log(p) * (-x))
        const = float(np.mean(x * np.log(x)))
    else:
        ce = ad.mean_all(ad.log(p) * (-x) + ad.log(1.0 - p) * (x - 1.0))
        const = float(np.mean(x * np.log(x) + (1.0 - x) * np.log(1.0 - x)))
    return ce + const


def total_loss(lc: ad.Tensor, ls: ad.Tensor, schedule: LossSchedule) -> ad.Tensor:
    lam = schedule.lambda_class
    return lc * lam + ls * (1.0 - lam)


@dataclass
class StepReport:
    id: str
    t: int
    confidence: float
    accepted: bool
    cls_prob: float
    lambda_class: float
    w_sup: float | None = None
    n_kept_augs: int | None = None
    loss_class: float | None = None
    loss_seg: float | None = None
    loss_total: float | None = None
    poisoned: bool = False
    pseudo: PseudoLabel | None = None  # in-memory only, not serialized

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "t": self.t,
            "confidence": self.confidence,
            "accepted": self.accepted,
            "cls_prob": self.cls_prob,
            "lambda_class": self.lambda_class,
            "w_sup": self.w_sup,
            "n_kept_augs": self.n_kept_augs,
            "loss_class": self.loss_class,
            "loss_seg": self.loss_seg,
            "loss_total": self.loss_total,
            "poisoned": self.poisoned,
        }


@dataclass
class AdaptState:
    model: ModelParams
    adam: AdamState
    schedule: LossSchedule
    cfg: AdaptConfig
    toggles: Toggles = field(default_factory=Toggles)
    weight_fn: Callable[[float], float] = supervisor_fusion_weight


def _aug_seed(base_seed: int, t: int) -> int:
    return (base_seed * 1_000_003 + t) & 0x7FFF_FFFF_FFFF_FFFF


def adapt_step(state: AdaptState, supervisor: ModelParams, image: np.ndarray, sample_id: str = ""):
    """One stream step; mutates state, returns (prediction y_t, StepReport).

    Rejected samples leave the parameters bit-identical. A non-finite
    loss or gradient aborts the step before any mutation and counts as
    rejected (poisoned). Accepted samples emit the post-update forward.
    """
    cfg, toggles, schedule = state.cfg, state.toggles, state.schedule
    t = schedule.t
    lam = schedule.lambda_class if toggles.dyn_loss else 0.5

    decision = gate(supervisor, image, cfg.p_th)
    accepted = decision.accepted or not toggles.supervisor_gate
    if not accepted:
        pred = forward(state.model, image)
        report = StepReport(sample_id, t, decision.confidence, False, pred.cls_prob, lam)
        schedule.advance()
        return pred, report

    taped = forward(state.model, image, record_tape=True)
    if toggles.aug_mean:
        augs = sample_augs(cfg.n_aug, _aug_seed(cfg.seed, t))
        pseudo = augmented_mean_prediction(
            supervisor,
            state.model,
            image,
            GateDecision(decision.confidence, True, decision.cls_prob, decision.prediction),
            augs,
            cfg.p_th,
            state.weight_fn,
            model_pred=taped.prediction,
        )
    else:
        # pure self-training: the model's own prediction is the target
        pseudo = PseudoLabel(
            taped.prediction.seg_prob.copy(), taped.prediction.cls_prob, 0.0, 0
        )

    lc = loss_class(taped.cls_prob_node, pseudo.cls_target)
    ls = loss_seg(taped.seg_prob_node, pseudo.seg_target[None, None], cfg.seg_loss_form)
    total = lc * lam + ls * (1.0 - lam)
    lc_val, ls_val, total_val = lc.item(), ls.item(), total.item()

    grads = ad.backward(taped.tape, total)
    finite = np.isfinite(total_val) and all(np.isfinite(g).all() for g in grads.values())
    if not finite:
        # poisoned sample: no mutation happened yet, so "rollback" is a no-op
        pred = taped.prediction
        report = StepReport(
            sample_id, t, decision.confidence, False, pred.cls_prob, lam, poisoned=True
        )
        schedule.advance()
        return pred, report

    state.adam.update(state.model, grads, cfg)
    pred = forward(state.model, image)
    report = StepReport(
        sample_id,
        t,
        decision.confidence,
        True,
        pred.cls_prob,
        lam,
        w_sup=pseudo.w_sup,
        n_kept_augs=pseudo.n_kept_augs,
        loss_class=lc_val,
        loss_seg=ls_val,
        loss_total=total_val,
        pseudo=pseudo,
    )
    schedule.advance()
    return pred, report


@dataclass
class RunResult:
    predictions: list[Prediction]
    reports: list[StepReport]
    model: ModelParams
    supervisor: ModelParams
    n_adapted: int
    n_rejected: int
    n_poisoned: int


def run_stream(
    checkpoint: ModelParams,
    stream: list[Sample],
    cfg: AdaptConfig,
    toggles: Toggles = Toggles(),
    weight_fn: Callable[[float], float] = supervisor_fusion_weight,
) -> RunResult:
    """Adapt over an ordered sample stream.

    Model and supervisor both start from `checkpoint`; the supervisor is
    never updated. The time index t advances on every arriving sample,
    accepted or not. Ground-truth fields of the samples are never read.
    """
    if not stream:
        raise ConfigError("stream is empty")
    model = checkpoint.copy()
    supervisor = checkpoint.copy()
    horizon = cfg.horizon_n if cfg.horizon_n is not None else len(stream)
    state = AdaptState(
        model=model,
        adam=AdamState(model),
        schedule=LossSchedule(0, horizon, cfg.lambda_min),
        cfg=cfg,
        toggles=toggles,
        weight_fn=weight_fn,
    )
    predictions, reports = [], []
    for sample in stream:
        pred, report = adapt_step(state, supervisor, sample.image, sample.id)
        predictions.append(pred)
        reports.append(report)
    return RunResult(
        predictions=predictions,
        reports=reports,
        model=model,
        supervisor=supervisor,
        n_adapted=sum(r.accepted for r in reports),
        n_rejected=sum((not r.accepted) and not r.poisoned for r in reports),
        n_poisoned=sum(r.poisoned for r in reports),
    )

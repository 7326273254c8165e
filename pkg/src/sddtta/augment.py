"""Seeded image augmentations with exact inverse warps.

Spatial kinds (hflip, affine) carry an exact inverse so segmentation
predictions made on an augmented view can be mapped back to original
image coordinates before averaging. Color jitter leaves geometry alone.

hflip and identity use direct array indexing, so their round trips are
bit-exact. Affine warps sample bilinearly with zero padding outside the
source; a validity mask marks target pixels whose sample position fell
outside, so fusion can exclude them instead of averaging in padding.

Parameter ranges are chosen to be label-preserving at 64x64: rotation
within +-10 degrees, translation within 5% per axis, scale in [0.9,1.1],
brightness within +-0.2, contrast in [0.8,1.2].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

KINDS = ("identity", "hflip", "affine", "color_jitter")
_SAMPLED_KINDS = ("hflip", "affine", "color_jitter")

RANGES = {
    "rot_deg": (-10.0, 10.0),
    "translate_x": (-0.05, 0.05),
    "translate_y": (-0.05, 0.05),
    "scale": (0.9, 1.1),
    "brightness": (-0.2, 0.2),
    "contrast": (0.8, 1.2),
}


@dataclass(frozen=True)
class AugmentationSpec:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown augmentation kind {self.kind!r}")
        for name, value in self.params.items():
            lo, hi = RANGES[name]
            if not lo <= value <= hi:
                raise ConfigError(f"{self.kind} parameter {name}={value} outside [{lo},{hi}]")
        if self.kind == "affine":
            s = self.params["scale"]
            if s * s < 1e-6:
                raise ConfigError("affine spec not invertible")

    @property
    def is_spatial(self) -> bool:
        return self.kind in ("hflip", "affine")


def sample_augs(count: int, seed: int) -> list[AugmentationSpec]:
    """Draw `count` specs, each kind uniform over hflip/affine/color_jitter."""
    if count < 1:
        raise ConfigError(f"augmentation count must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    specs = []
    for _ in range(count):
        kind = _SAMPLED_KINDS[rng.integers(len(_SAMPLED_KINDS))]
        if kind == "affine":
            params = {
                "rot_deg": float(rng.uniform(*RANGES["rot_deg"])),
                "translate_x": float(rng.uniform(*RANGES["translate_x"])),
                "translate_y": float(rng.uniform(*RANGES["translate_y"])),
                "scale": float(rng.uniform(*RANGES["scale"])),
            }
        elif kind == "color_jitter":
            params = {
                "brightness": float(rng.uniform(*RANGES["brightness"])),
                "contrast": float(rng.uniform(*RANGES["contrast"])),
            }
        else:
            params = {}
        specs.append(AugmentationSpec(kind, params, seed))
    return specs


def _affine_matrix(spec: AugmentationSpec):
    """Forward map of image coordinates: p' = A (p - c) + c + t, p = (y, x)."""
    theta = np.deg2rad(spec.params["rot_deg"])
    s = spec.params["scale"]
    a = s * np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    return a


def _bilinear_sample(map2d: np.ndarray, ys: np.ndarray, xs: np.ndarray):
    """Sample at fractional (ys, xs) with zero padding; also return validity."""
    h, w = map2d.shape
    valid = (ys >= 0) & (ys <= h - 1) & (xs >= 0) & (xs <= w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = (ys - y0).astype(map2d.dtype)
    fx = (xs - x0).astype(map2d.dtype)

    def fetch(yy, xx):
        inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        vals = map2d[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
        return np.where(inside, vals, 0.0).astype(map2d.dtype)

    out = (
        fetch(y0, x0) * (1 - fy) * (1 - fx)
        + fetch(y0, x0 + 1) * (1 - fy) * fx
        + fetch(y0 + 1, x0) * fy * (1 - fx)
        + fetch(y0 + 1, x0 + 1) * fy * fx
    )
    return out, valid


def _warp_plane(plane: np.ndarray, source_from_target, scale_div: float):
    """Resample `plane` so out(q) = plane(source_from_target(q)).

    source_from_target works in image coordinates; scale_div maps plane
    coordinates to image coordinates (8 for seg-resolution maps, 1 for
    full images), sharing one geometry between the two resolutions.
    Plane pixel i covers image pixels [s*i, s*i+s-1], center s*i+(s-1)/2.
    """
    h, w = plane.shape
    off = (scale_div - 1.0) / 2.0
    qy, qx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    iy = qy * scale_div + off
    ix = qx * scale_div + off
    sy, sx = source_from_target(iy, ix)
    return _bilinear_sample(plane, (sy - off) / scale_div, (sx - off) / scale_div)


def _forward_xform(spec, shape_hw):
    a = _affine_matrix(spec)
    h, w = shape_hw
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ty = spec.params["translate_y"] * h
    tx = spec.params["translate_x"] * w

    def fwd(y, x):
        yy = a[0, 0] * (y - cy) + a[0, 1] * (x - cx) + cy + ty
        xx = a[1, 0] * (y - cy) + a[1, 1] * (x - cx) + cx + tx
        return yy, xx

    inv = np.linalg.inv(a)

    def bwd(y, x):
        yy = inv[0, 0] * (y - cy - ty) + inv[0, 1] * (x - cx - tx)
        xx = inv[1, 0] * (y - cy - ty) + inv[1, 1] * (x - cx - tx)
        return yy + cy, xx + cx

    return fwd, bwd


def apply(spec: AugmentationSpec, image: np.ndarray) -> np.ndarray:
    """Augment a (1,H,W) image in [0,1]; output is clamped back to [0,1]."""
    plane = image[0]
    if spec.kind == "identity":
        return image.copy()
    if spec.kind == "hflip":
        return image[:, :, ::-1].copy()
    if spec.kind == "color_jitter":
        out = (plane - 0.5) * spec.params["contrast"] + 0.5 + spec.params["brightness"]
        return np.clip(out, 0.0, 1.0).astype(image.dtype)[None]
    fwd, bwd = _forward_xform(spec, plane.shape)
    out, _ = _warp_plane(plane, bwd, 1.0)
    return np.clip(out, 0.0, 1.0).astype(image.dtype)[None]


def warp_seg(spec: AugmentationSpec, seg: np.ndarray) -> np.ndarray:
    """Warp an original-coordinates seg map into augmented coordinates."""
    if spec.kind in ("identity", "color_jitter"):
        return seg.copy()
    if spec.kind == "hflip":
        return seg[:, ::-1].copy()
    h, w = seg.shape
    fwd, bwd = _forward_xform(spec, (h * 8, w * 8))
    out, _ = _warp_plane(seg, bwd, 8.0)
    return out.astype(seg.dtype)


def inverse_warp_seg(spec: AugmentationSpec, seg: np.ndarray):
    """Map a seg prediction on the augmented view back to original coordinates.

    Returns (map, validity); invalid pixels had no pre-image inside the
    augmented view and must be excluded from fusion averaging.
    """
    if spec.kind in ("identity", "color_jitter"):
        return seg.copy(), np.ones(seg.shape, dtype=bool)
    if spec.kind == "hflip":
        return seg[:, ::-1].copy(), np.ones(seg.shape, dtype=bool)
    h, w = seg.shape
    fwd, bwd = _forward_xform(spec, (h * 8, w * 8))
    out, valid = _warp_plane(seg, fwd, 8.0)
    return out.astype(seg.dtype), valid

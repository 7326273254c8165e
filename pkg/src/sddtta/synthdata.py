"""Procedural texture domains with synthetic surface defects.

Provides seeded source/target splits exhibiting both shift types the
adaptation loop must survive: unseen textures and unseen defect classes.
Defects are intensity perturbations composited onto the texture with a
small blur on the alpha; the binary mask stays tight to the defect
support and the core contrast against the local texture is at least
0.15 by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigError

TEXTURE_KINDS = ("stripes", "checker", "smooth_noise", "gradient")
DEFECT_CLASSES = ("ellipse_blob", "scratch_line", "gaussian_dent", "speckle_cluster")


@dataclass(frozen=True)
class Texture:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in TEXTURE_KINDS:
            raise ConfigError(f"unknown texture kind {self.kind!r}")


@dataclass(frozen=True)
class DomainSpec:
    name: str
    texture: Texture
    defect_classes: tuple[str, ...]
    defect_rate: float
    noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.defect_rate < 1.0:
            raise ConfigError(f"defect_rate must be in (0,1), got {self.defect_rate}")
        if self.defect_rate > 0 and not self.defect_classes:
            raise ConfigError(f"domain {self.name!r} has positive defect_rate but no defect classes")
        for cls in self.defect_classes:
            if cls not in DEFECT_CLASSES:
                raise ConfigError(f"unknown defect class {cls!r}")


@dataclass
class Sample:
    id: str
    image: np.ndarray  # (1,H,W) float32 in [0,1]
    mask: np.ndarray | None  # (H,W) uint8 in {0,1}
    label: int | None
    domain: str
    defect_class: str | None


def _texture_plane(texture: Texture, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    kind, p = texture.kind, texture.params
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    if kind == "stripes":
        theta = math.radians(p.get("angle", 30.0))
        freq = p.get("frequency", 6.0)
        phase = rng.uniform(0, 2 * math.pi)
        u = xx * math.cos(theta) + yy * math.sin(theta)
        plane = 0.5 + 0.22 * np.sin(2 * math.pi * freq * u / max(h, w) + phase)
    elif kind == "checker":
        cell = int(p.get("cell", 8))
        oy, ox = rng.integers(cell), rng.integers(cell)
        parity = (((yy + oy) // cell) + ((xx + ox) // cell)) % 2
        plane = np.where(parity > 0, 0.62, 0.38)
    elif kind == "smooth_noise":
        scale = p.get("scale", 3.0)
        g = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=scale)
        g = (g - g.mean()) / max(g.std(), 1e-9)
        plane = 0.5 + 0.13 * g
    else:  # gradient
        theta = math.radians(p.get("direction", 0.0))
        u = xx * math.cos(theta) + yy * math.sin(theta)
        u = (u - u.min()) / max(u.max() - u.min(), 1e-9)
        plane = 0.3 + 0.4 * u + rng.uniform(-0.03, 0.03)
    return np.clip(plane, 0.0, 1.0)


def _defect_shape(cls: str, h: int, w: int, rng: np.random.Generator):
    """Binary support of one defect, placed inside a safety margin."""
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    margin = max(6, h // 8)
    cy = rng.uniform(margin, h - margin)
    cx = rng.uniform(margin, w - margin)
    if cls == "ellipse_blob":
        ry, rx = rng.uniform(3, 7), rng.uniform(3, 7)
        theta = rng.uniform(0, math.pi)
        dy, dx = yy - cy, xx - cx
        u = dy * math.cos(theta) + dx * math.sin(theta)
        v = -dy * math.sin(theta) + dx * math.cos(theta)
        return (u / ry) ** 2 + (v / rx) ** 2 <= 1.0
    if cls == "scratch_line":
        length = rng.uniform(10, 22)
        theta = rng.uniform(0, math.pi)
        half = 0.5 * length * np.array([math.sin(theta), math.cos(theta)])
        a = np.array([cy, cx]) - half
        b = np.array([cy, cx]) + half
        ab = b - a
        t = np.clip(((yy - a[0]) * ab[0] + (xx - a[1]) * ab[1]) / (ab @ ab), 0, 1)
        d2 = (yy - (a[0] + t * ab[0])) ** 2 + (xx - (a[1] + t * ab[1])) ** 2
        width = rng.uniform(1.0, 1.8)
        return d2 <= width**2
    if cls == "gaussian_dent":
        sigma = rng.uniform(2.5, 4.5)
        g = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        return g >= 0.5
    # speckle_cluster: several dots scattered around the center
    mask = np.zeros((h, w), dtype=bool)
    for _ in range(int(rng.integers(5, 10))):
        py = np.clip(cy + rng.normal(0, 4.0), 1, h - 2)
        px = np.clip(cx + rng.normal(0, 4.0), 1, w - 2)
        r = rng.uniform(1.0, 1.9)
        mask |= (yy - py) ** 2 + (xx - px) ** 2 <= r**2
    return mask


def _composite_defect(plane: np.ndarray, shape: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Shift the texture under a blurred alpha; core contrast equals delta."""
    alpha = ndimage.gaussian_filter(shape.astype(np.float64), sigma=0.7)
    peak = alpha.max()
    if peak > 0:
        alpha = alpha / peak
    local_mean = float(plane[shape].mean())
    delta = rng.uniform(0.3, 0.45)
    sign = -1.0 if local_mean > 0.5 else 1.0
    return plane + sign * delta * alpha


def clean_texture(spec: DomainSpec, index: int, h: int, w: int) -> np.ndarray:
    """Defect-free texture of sample `index`, on its own seeded stream."""
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, index, 1)))
    return _texture_plane(spec.texture, h, w, rng)


def generate_dataset(spec: DomainSpec, n: int, h: int, w: int) -> list[Sample]:
    """Generate n seeded samples; ceil(n * defect_rate) of them positive."""
    if n < 1:
        raise ConfigError(f"dataset size must be >= 1, got {n}")
    if h % 8 or w % 8:
        raise ConfigError(f"image dims ({h},{w}) must be divisible by 8")
    n_pos = math.ceil(n * spec.defect_rate)
    order_rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 0xD07)))
    positive_flags = np.zeros(n, dtype=bool)
    positive_flags[:n_pos] = True
    order_rng.shuffle(positive_flags)

    samples = []
    for i in range(n):
        plane = clean_texture(spec, i, h, w)
        if positive_flags[i]:
            rng_defect = np.random.default_rng(np.random.SeedSequence((spec.seed, i, 2)))
            cls = spec.defect_classes[int(rng_defect.integers(len(spec.defect_classes)))]
            shape = _defect_shape(cls, h, w, rng_defect)
            plane = _composite_defect(plane, shape, rng_defect)
            mask = shape.astype(np.uint8)
            label = 1
        else:
            cls = None
            mask = np.zeros((h, w), dtype=np.uint8)
            label = 0
        if spec.noise_sigma > 0:
            rng_noise = np.random.default_rng(np.random.SeedSequence((spec.seed, i, 3)))
            plane = plane + rng_noise.normal(0, spec.noise_sigma, size=plane.shape)
        image = np.clip(plane, 0.0, 1.0).astype(np.float32)[None]
        samples.append(Sample(f"{spec.name}-{i:04d}", image, mask, label, spec.name, cls))
    return samples


@dataclass
class ShiftBenchmark:
    source: list[DomainSpec]
    target_spec: DomainSpec
    target_stream: list[Sample]
    n_source_per_domain: int
    image_hw: tuple[int, int]


def make_shift_benchmark(
    seed: int,
    n_source: int = 200,
    n_target: int = 300,
    h: int = 64,
    w: int = 64,
) -> ShiftBenchmark:
    """Two source domains plus a shifted target stream.

    The target texture family (smooth_noise) appears in no source domain
    and the stream also carries an unseen defect class (speckle_cluster),
    so every (texture, defect-class) pair in the stream is absent from
    the source specs.
    """
    source = [
        DomainSpec(
            "src-stripes",
            Texture("stripes", {"angle": 30.0, "frequency": 6.0}),
            ("ellipse_blob", "scratch_line"),
            defect_rate=0.35,
            noise_sigma=0.02,
            seed=seed * 31 + 1,
        ),
        DomainSpec(
            "src-checker",
            Texture("checker", {"cell": 8}),
            ("ellipse_blob", "gaussian_dent"),
            defect_rate=0.35,
            noise_sigma=0.02,
            seed=seed * 31 + 2,
        ),
    ]
    target_spec = DomainSpec(
        "tgt-noise",
        Texture("smooth_noise", {"scale": 3.0}),
        ("ellipse_blob", "scratch_line", "speckle_cluster"),
        defect_rate=0.3,
        noise_sigma=0.03,
        seed=seed * 31 + 3,
    )
    stream = generate_dataset(target_spec, n_target, h, w)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5F1E)))
    order = shuffle_rng.permutation(len(stream))
    stream = [stream[i] for i in order]
    return ShiftBenchmark(source, target_spec, stream, n_source, (h, w))


def generate_source_datasets(bench: ShiftBenchmark) -> list[Sample]:
    """All source-domain samples, concatenated in domain order."""
    h, w = bench.image_hw
    samples = []
    for spec in bench.source:
        samples.extend(generate_dataset(spec, bench.n_source_per_domain, h, w))
    return samples

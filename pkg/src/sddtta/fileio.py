"""File formats and persistence.

- Images: binary PGM ("P5"), 8-bit, maxval 255; masks use {0,255}.
- Dataset manifest: JSON-lines records {"id","image","mask","label","class",
  "domain"} with paths relative to the manifest; mask/label null for
  unlabeled streams.
- Checkpoints: magic "SDDCKPT1", a 32-bit little-endian header length, a
  JSON header (fingerprint, input dims, ordered name/shape list, seed,
  provenance), then raw float32 little-endian parameter data in header
  order. Round trips are bit-exact.
- Config files: flat "key = value" lines; '#' starts a comment.

All writes go through a temp file in the target directory followed by an
atomic rename.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import ArchitectureMismatch, FormatError
from .network import ModelParams, architecture_fingerprint
from .synthdata import Sample

CHECKPOINT_MAGIC = b"SDDCKPT1"


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode())


# ---------------------------------------------------------------------------
# PGM


def write_pgm(path, plane: np.ndarray):
    """Write a 2-d array as 8-bit binary PGM; floats in [0,1] are scaled."""
    if plane.ndim != 2:
        raise FormatError(f"PGM wants a 2-d array, got shape {plane.shape}")
    if plane.dtype == np.uint8:
        data = plane
    else:
        data = np.round(np.clip(plane, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = plane.shape
    atomic_write_bytes(path, b"P5\n%d %d\n255\n" % (w, h) + data.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit binary PGM into a uint8 (H,W) array."""
    raw = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        if pos >= len(raw):
            raise FormatError(f"{path}: truncated PGM header")
        ch = raw[pos : pos + 1]
        if ch == b"#":
            pos = raw.find(b"\n", pos)
            if pos < 0:
                raise FormatError(f"{path}: unterminated comment")
            continue
        if ch.isspace():
            pos += 1
            continue
        end = pos
        while end < len(raw) and not raw[end : end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {fields[0]!r})")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace after maxval
    pixels = raw[pos : pos + w * h]
    if len(pixels) != w * h:
        raise FormatError(f"{path}: expected {w * h} pixel bytes, found {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)


def image_from_pgm(path) -> np.ndarray:
    """Load a PGM as a (1,H,W) float32 image in [0,1]."""
    return (read_pgm(path).astype(np.float32) / 255.0)[None]


# ---------------------------------------------------------------------------
# dataset directories


def write_dataset(samples: list[Sample], out_dir) -> Path:
    """Write images/, masks/ and manifest.jsonl; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        image_rel = f"images/{s.id}.pgm"
        write_pgm(out_dir / image_rel, s.image[0])
        mask_rel = None
        if s.mask is not None:
            mask_rel = f"masks/{s.id}.pgm"
            write_pgm(out_dir / mask_rel, (s.mask * 255).astype(np.uint8))
        record = {
            "id": s.id,
            "image": image_rel,
            "mask": mask_rel,
            "label": s.label,
            "class": s.defect_class,
            "domain": s.domain,
        }
        lines.append(json.dumps(record))
    manifest = out_dir / "manifest.jsonl"
    atomic_write_text(manifest, "\n".join(lines) + "\n")
    return manifest


def load_manifest(manifest_path) -> list[Sample]:
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    samples = []
    for lineno, line in enumerate(manifest_path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise FormatError(f"{manifest_path}:{lineno}: bad manifest record: {e}") from None
        for key in ("id", "image"):
            if key not in rec:
                raise FormatError(f"{manifest_path}:{lineno}: missing field {key!r}")
        image = image_from_pgm(base / rec["image"])
        mask = None
        if rec.get("mask"):
            mask = (read_pgm(base / rec["mask"]) > 127).astype(np.uint8)
        label = rec.get("label")
        samples.append(
            Sample(
                id=rec["id"],
                image=image,
                mask=mask,
                label=None if label is None else int(label),
                domain=rec.get("domain", ""),
                defect_class=rec.get("class"),
            )
        )
    return samples


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: ModelParams, path):
    """Serialize float32 ModelParams; round trips are bit-exact."""
    if params.dtype != np.float32:
        raise FormatError(f"checkpoint format stores float32, params are {params.dtype}")
    header = {
        "fingerprint": params.fingerprint,
        "input_h": params.input_h,
        "input_w": params.input_w,
        "seed": params.seed,
        "provenance": params.provenance,
        "params": [{"name": k, "shape": list(v.shape)} for k, v in params.params.items()],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", len(header_bytes))
    blob += header_bytes
    for v in params.params.values():
        blob += np.ascontiguousarray(v, dtype="<f4").tobytes()
    atomic_write_bytes(path, bytes(blob))


def load_checkpoint(path, expected_fingerprint: str | None = None) -> ModelParams:
    raw = Path(path).read_bytes()
    if len(raw) < len(CHECKPOINT_MAGIC) + 4 or not raw.startswith(CHECKPOINT_MAGIC):
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    (header_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    if off + header_len > len(raw):
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[off : off + header_len].decode())
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise FormatError(f"{path}: corrupt header: {e}") from None
    off += header_len
    input_h, input_w = header["input_h"], header["input_w"]
    want = architecture_fingerprint(input_h, input_w)
    if header["fingerprint"] != want:
        raise ArchitectureMismatch(
            f"{path}: fingerprint {header['fingerprint']} does not match "
            f"architecture {want} for {input_h}x{input_w} input"
        )
    params: dict[str, np.ndarray] = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        end = off + 4 * count
        if end > len(raw):
            raise FormatError(f"{path}: truncated parameter data at {entry['name']!r}")
        params[entry["name"]] = np.frombuffer(raw[off:end], dtype="<f4").reshape(shape).copy()
        off = end
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes after parameter data")
    loaded = ModelParams(input_h, input_w, params, header.get("seed"), header.get("provenance", {}))
    if expected_fingerprint is not None and loaded.fingerprint != expected_fingerprint:
        raise ArchitectureMismatch(
            f"{path}: checkpoint fingerprint {loaded.fingerprint} does not match "
            f"expected {expected_fingerprint}"
        )
    return loaded


# ---------------------------------------------------------------------------
# flat config files


def parse_config_file(path) -> dict[str, str]:
    """Flat "key = value" document; returns raw string values."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise FormatError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        values[key.strip()] = value.strip()
    return values


def format_config(values: dict) -> str:
    lines = []
    for key, value in values.items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"

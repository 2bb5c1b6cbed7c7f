"""Synthetic segmentation data and the on-disk dataset format.

The generator emulates the difficulty profile of small medical datasets:
strongly varying region sizes and shapes, low foreground/background
contrast, blurred boundaries, and sensor noise. Masks are the crisp
pre-blur regions. Datasets live in a directory of paired files: images as
raw little-endian float grids behind a small "MCAF" header, masks as 8-bit
binary PGM (P5).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DataError, GenerationError, ShapeError
from .tensor import Tensor, tensor

__all__ = [
    "SegSample",
    "synth_generate",
    "save_dataset",
    "load_dataset",
    "write_mcaf",
    "read_mcaf",
    "write_pgm",
    "read_pgm",
]

MCAF_MAGIC = b"MCAF"


@dataclass
class SegSample:
    """One image/mask pair; image values in [0,1], mask holds class labels."""

    image: Tensor  # (in_ch, H, W)
    mask: np.ndarray  # (H, W) integer labels

    def __post_init__(self):
        if self.image.shape[1:] != self.mask.shape:
            raise ShapeError(f"image {self.image.shape} vs mask {self.mask.shape}")


def _blob_mask(rng: np.random.Generator, h: int, w: int,
               r_lo: float, r_hi: float, margin_ok: bool = True):
    """Random wobbly ellipse; returns (bool mask, center, mean radius)."""
    scale = min(h, w)
    ra = rng.uniform(r_lo, r_hi) * scale
    rb = rng.uniform(r_lo, r_hi) * scale
    theta = rng.uniform(0.0, np.pi)
    cy = rng.uniform(0.1 * h, 0.9 * h)
    cx = rng.uniform(0.1 * w, 0.9 * w)
    wobble_amp = rng.uniform(0.0, 0.25)
    wobble_freq = rng.integers(2, 6)
    wobble_phase = rng.uniform(0.0, 2 * np.pi)

    yy, xx = np.mgrid[0:h, 0:w]
    dy = yy - cy
    dx = xx - cx
    ct, st = np.cos(theta), np.sin(theta)
    u = (ct * dx + st * dy) / ra
    v = (-st * dx + ct * dy) / rb
    rad = np.hypot(u, v)
    ang = np.arctan2(v, u)
    boundary = 1.0 + wobble_amp * np.sin(wobble_freq * ang + wobble_phase)
    return rad <= boundary, (cy, cx), 0.5 * (ra + rb)


def _render_image(rng, region_intensity, h, w):
    """Per-region intensities -> blurred, noisy grayscale image in [0,1]."""
    sigma = rng.uniform(0.5, 2.5)
    img = gaussian_filter(region_intensity, sigma=sigma)
    img = img + rng.normal(0.0, 0.05, size=(h, w))
    return np.clip(img, 0.0, 1.0)


def synth_generate(seed: int, count: int, h: int, w: int,
                   task: str = "binary_lesion", num_labels: int = 3,
                   max_tries: int = 200) -> list[SegSample]:
    """Deterministically generate ``count`` samples of the given task.

    binary_lesion: 1-3 wobbly ellipses, radii 4-40% of min(H,W), contrast
    in [0.05, 0.4], Gaussian-blurred edges, additive noise. multi_organ:
    ``num_labels`` non-overlapping regions with distinct labels over
    background 0. Raises GenerationError (naming the seed) when placement
    cannot be satisfied within ``max_tries`` attempts.
    """
    if h % 32 or w % 32:
        raise DataError(f"sample extents must be divisible by 32, got {h}x{w}")
    if task not in ("binary_lesion", "multi_organ"):
        raise DataError(f"unknown task {task!r}")
    if task == "multi_organ" and not 1 <= num_labels <= 8:
        raise DataError(f"multi_organ supports 1..8 labels, got {num_labels}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    samples = []
    for _ in range(count):
        if task == "binary_lesion":
            samples.append(_gen_binary(rng, h, w))
        else:
            samples.append(_gen_organs(rng, h, w, num_labels, max_tries, seed))
    return samples


def _gen_binary(rng, h, w) -> SegSample:
    mask = np.zeros((h, w), dtype=bool)
    for _ in range(int(rng.integers(1, 4))):
        blob, _, _ = _blob_mask(rng, h, w, 0.04, 0.40)
        mask |= blob
    if not mask.any():  # wobble can pinch a tiny blob to nothing; retry once
        blob, _, _ = _blob_mask(rng, h, w, 0.15, 0.40)
        mask |= blob
    mask[0, 0] = False  # keep at least one background pixel
    background = rng.uniform(0.2, 0.7)
    contrast = rng.uniform(0.05, 0.4) * (1 if rng.uniform() < 0.5 else -1)
    intensity = np.full((h, w), background)
    intensity[mask] = np.clip(background + contrast, 0.0, 1.0)
    img = _render_image(rng, intensity, h, w)
    return SegSample(image=tensor(img[None]), mask=mask.astype(np.int64))


def _gen_organs(rng, h, w, k, max_tries, seed) -> SegSample:
    mask = np.zeros((h, w), dtype=np.int64)
    centers: list[tuple[float, float, float]] = []
    background = rng.uniform(0.2, 0.6)
    intensity = np.full((h, w), background)
    for label in range(1, k + 1):
        placed = False
        for _ in range(max_tries):
            blob, (cy, cx), rad = _blob_mask(rng, h, w, 0.08, 0.22)
            if not blob.any():
                continue
            clear = all(np.hypot(cy - py, cx - px) > 1.15 * (rad + pr)
                        for py, px, pr in centers)
            if clear and not (mask[blob] != 0).any():
                mask[blob] = label
                centers.append((cy, cx, rad))
                level = np.clip(background + rng.uniform(0.08, 0.4)
                                * (1 if label % 2 else -1), 0.0, 1.0)
                intensity[blob] = level
                placed = True
                break
        if not placed:
            raise GenerationError(
                f"could not place region {label}/{k} on a {h}x{w} grid "
                f"after {max_tries} tries (seed {seed})")
    mask[0, 0] = 0
    img = _render_image(rng, intensity, h, w)
    return SegSample(image=tensor(img[None]), mask=mask)


# ---------------------------------------------------------------------------
# file formats


def write_mcaf(path: str | Path, array: np.ndarray) -> None:
    """Raw float grid: magic, u32 rank, u32 dims, little-endian f32 payload."""
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    with open(path, "wb") as fh:
        fh.write(MCAF_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_mcaf(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != MCAF_MAGIC:
        raise DataError(f"{path}: not an MCAF file")
    rank = struct.unpack_from("<I", raw, 4)[0]
    header = 8 + 4 * rank
    if rank < 1 or rank > 8 or len(raw) < header:
        raise DataError(f"{path}: bad MCAF rank {rank}")
    dims = struct.unpack_from(f"<{rank}I", raw, 8)
    expected = header + 4 * int(np.prod(dims))
    if len(raw) != expected:
        raise DataError(f"{path}: payload size mismatch ({len(raw)} vs {expected})")
    return np.frombuffer(raw, dtype="<f4", offset=header).reshape(dims).copy()


def write_pgm(path: str | Path, labels: np.ndarray) -> None:
    """8-bit binary PGM (P5); values must fit in a byte."""
    arr = np.asarray(labels)
    if arr.ndim != 2:
        raise DataError(f"PGM needs a 2-D grid, got shape {arr.shape}")
    if arr.min() < 0 or arr.max() > 255:
        raise DataError("PGM values must lie in [0, 255]")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(arr.astype(np.uint8).tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise DataError(f"{path}: not a binary PGM")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval > 255:
        raise DataError(f"{path}: 16-bit PGM not supported")
    data = np.frombuffer(raw, dtype=np.uint8, offset=pos, count=h * w)
    if data.size != h * w:
        raise DataError(f"{path}: truncated PGM payload")
    return data.reshape(h, w).astype(np.int64)


def save_dataset(samples: list[SegSample], out_dir: str | Path) -> None:
    """Write samples as sample_00000.mcaf / sample_00000.pgm pairs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        write_mcaf(out / f"sample_{i:05d}.mcaf", s.image.data)
        write_pgm(out / f"sample_{i:05d}.pgm", s.mask)


def load_dataset(in_dir: str | Path) -> list[SegSample]:
    root = Path(in_dir)
    images = sorted(root.glob("*.mcaf"))
    if not images:
        raise DataError(f"no .mcaf images found in {root}")
    samples = []
    for img_path in images:
        mask_path = img_path.with_suffix(".pgm")
        if not mask_path.exists():
            raise DataError(f"missing mask for {img_path.name}")
        img = read_mcaf(img_path)
        if img.ndim == 2:
            img = img[None]
        samples.append(SegSample(image=tensor(img), mask=read_pgm(mask_path)))
    return samples

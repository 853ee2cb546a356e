"""Synthetic scenes with exact segmentation, degradations, patches and augmentation."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .masks import (MaskStack, canonical_labels, downsample_labels, load_masks, masks_from_labels,
                    oracle_segment, save_masks, SPTM_VERSION)
from .seeding import derive_seed
from .tensor import SPTT_VERSION, load_tensor, save_tensor

LEVELS = 8  # must match the oracle segmenter's quantization
SHAPE_KINDS = ("rect", "ellipse", "stripe")
AUG_OPS = ("hflip", "rot90", "rot180", "rot270")
DATASET_FORMAT_VERSION = 1


@dataclass
class Scene:
    hq: np.ndarray  # float32 [3, H, W] in [0, 1]
    labels: np.ndarray  # int32 [H, W]
    seed: int


@dataclass
class DatasetPair:
    lq: np.ndarray
    gt: np.ndarray
    masks: MaskStack | None
    degradation: dict = field(default_factory=dict)


def _shape_mask(kind: str, rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    if kind == "rect":
        hh, ww = rng.uniform(0.15, 0.5) * h, rng.uniform(0.15, 0.5) * w
        y0, x0 = rng.uniform(0, h - hh), rng.uniform(0, w - ww)
        return (yy >= y0) & (yy < y0 + hh) & (xx >= x0) & (xx < x0 + ww)
    if kind == "ellipse":
        ry, rx = rng.uniform(0.1, 0.3) * h, rng.uniform(0.1, 0.3) * w
        cy, cx = rng.uniform(ry, h - ry), rng.uniform(rx, w - rx)
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    if kind == "stripe":
        theta = rng.uniform(0, np.pi)
        half_len = rng.uniform(0.2, 0.45) * min(h, w)
        half_wid = rng.uniform(0.04, 0.1) * min(h, w)
        cy, cx = rng.uniform(0.25, 0.75) * h, rng.uniform(0.25, 0.75) * w
        along = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
        across = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
        return (np.abs(along) <= half_len) & (np.abs(across) <= half_wid)
    raise ValueError(f"unknown shape kind {kind!r}")


def _all_regions_connected(labels: np.ndarray) -> bool:
    for lab in np.unique(labels):
        _, n = ndimage.label(labels == lab)
        if n != 1:
            return False
    return True


def make_scene(seed: int, h: int = 64, w: int = 64, k_shapes: int = 6, max_tries: int = 30) -> Scene:
    """Gradient background plus up to ``k_shapes`` flat-coloured shapes.

    Every colour sits well inside one quantization bin and no two regions share
    a bin, so the oracle segmenter recovers the label map exactly. Shapes that
    would split an existing region (or vanish) are redrawn.
    """
    if h < 16 or w < 16:
        raise ValueError("scene must be at least 16x16")
    rng = np.random.default_rng(seed)
    palette = rng.choice(LEVELS ** 3, size=k_shapes + 1, replace=False)
    colors = np.stack([(palette // LEVELS ** 2) % LEVELS, (palette // LEVELS) % LEVELS, palette % LEVELS], 1)
    colors = (colors + 0.5) / LEVELS

    yy, xx = np.mgrid[0:h, 0:w]
    slopes = rng.uniform(-0.03, 0.03, size=(3, 2))
    img = np.empty((3, h, w))
    for c in range(3):
        img[c] = colors[0, c] + slopes[c, 0] * (yy / (h - 1) - 0.5) + slopes[c, 1] * (xx / (w - 1) - 0.5)
    labels = np.zeros((h, w), dtype=np.int32)
    for s in range(1, k_shapes + 1):
        for _ in range(max_tries):
            m = _shape_mask(SHAPE_KINDS[rng.integers(len(SHAPE_KINDS))], rng, h, w)
            if not m.any():
                continue
            cand = np.where(m, s, labels)
            if _all_regions_connected(cand):
                labels = cand
                img[:, m] = colors[s][:, None]
                break
    return Scene(img.astype(np.float32), canonical_labels(labels), seed)


def _cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(x)
    return np.where(x <= 1, (a + 2) * x ** 3 - (a + 3) * x ** 2 + 1,
                    np.where(x < 2, a * x ** 3 - 5 * a * x ** 2 + 8 * a * x - 4 * a, 0.0))


def resize_matrix(n_in: int, n_out: int, step: float) -> np.ndarray:
    """Row d holds the 4 Keys taps around src = (d + 0.5) * step - 0.5, edge-clamped."""
    mat = np.zeros((n_out, n_in))
    for d in range(n_out):
        src = (d + 0.5) * step - 0.5
        base = int(np.floor(src))
        for t in range(base - 1, base + 3):
            mat[d, min(max(t, 0), n_in - 1)] += _cubic(src - t)
    return mat


def bicubic_resize(img: np.ndarray, r: int, direction: str = "down") -> np.ndarray:
    """Separable Keys (a=-0.5) resize of a [C, H, W] image by an integer factor."""
    img = np.asarray(img)
    if r == 1:
        return img.copy()
    if r not in (2, 3, 4):
        raise ValueError(f"scale must be 1..4, got {r}")
    _, h, w = img.shape
    if direction == "down":
        if h % r or w % r:
            raise ValueError(f"{h}x{w} not divisible by {r}")
        mh, mw = resize_matrix(h, h // r, r), resize_matrix(w, w // r, r)
    elif direction == "up":
        mh, mw = resize_matrix(h, h * r, 1 / r), resize_matrix(w, w * r, 1 / r)
    else:
        raise ValueError(f"direction must be 'down' or 'up', got {direction!r}")
    out = np.einsum("yh,chw,xw->cyx", mh, img.astype(np.float64), mw)
    return out.astype(img.dtype)


def add_gaussian_noise(img: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    """Add N(0, (sigma/255)^2) noise in [0, 1] space; no clipping."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    img = np.asarray(img)
    if sigma == 0:
        return img.copy()
    noise = np.random.default_rng(seed).standard_normal(img.shape) * (sigma / 255.0)
    return (img + noise).astype(img.dtype)


def make_pair(scene: Scene, task: str, r: int = 1, sigma: float = 0.0, noise_seed: int = 0,
              grid: int = 8, nc: int | None = None) -> DatasetPair:
    """Degrade a scene. Masks come from the oracle segmenter applied to the clean
    image and are resampled to the LQ grid."""
    labels = oracle_segment(scene.hq, LEVELS)
    if task == "sr":
        lq = bicubic_resize(scene.hq, r, "down")
        lq_labels = downsample_labels(labels, r)
        deg = {"task": "sr", "r": r, "sigma": 0}
    elif task == "denoise":
        lq = add_gaussian_noise(scene.hq, sigma, noise_seed)
        lq_labels = labels
        deg = {"task": "denoise", "r": 1, "sigma": sigma}
    else:
        raise ValueError(f"unknown task {task!r}")
    return DatasetPair(lq, scene.hq.copy(), masks_from_labels(lq_labels, grid, nc), deg)


def remask(pairs: Sequence[DatasetPair], grid: int, nc: int) -> list[DatasetPair]:
    """Recompute every pair's masks at another granularity (same pipeline as ``make_pair``)."""
    out = []
    for p in pairs:
        labels = downsample_labels(oracle_segment(p.gt, LEVELS), p.degradation.get("r", 1))
        out.append(DatasetPair(p.lq, p.gt, masks_from_labels(labels, grid, nc), dict(p.degradation)))
    return out


def crop_pair(pair: DatasetPair, y: int, x: int, size: int) -> DatasetPair:
    r = pair.degradation.get("r", 1)
    h, w = pair.lq.shape[1:]
    if size > h or size > w:
        raise ValueError(f"patch {size} larger than LQ {h}x{w}")
    if not (0 <= y <= h - size and 0 <= x <= w - size):
        raise ValueError(f"offset ({y},{x}) out of range")
    masks = None
    if pair.masks is not None:
        masks = MaskStack(pair.masks.masks[:, y:y + size, x:x + size], pair.masks.count_before_normalization)
    return DatasetPair(pair.lq[:, y:y + size, x:x + size].copy(),
                       pair.gt[:, r * y:r * (y + size), r * x:r * (x + size)].copy(),
                       masks, dict(pair.degradation))


def sample_patch(pair: DatasetPair, size: int, seed: int) -> DatasetPair:
    """Aligned random crop: size x size LQ patch, (r*size)^2 GT patch, masks cropped like LQ."""
    h, w = pair.lq.shape[1:]
    if size > h or size > w:
        raise ValueError(f"patch {size} larger than LQ {h}x{w}")
    rng = np.random.default_rng(seed)
    return crop_pair(pair, int(rng.integers(h - size + 1)), int(rng.integers(w - size + 1)), size)


def _apply(arr: np.ndarray, op: str) -> np.ndarray:
    if op == "hflip":
        return np.ascontiguousarray(arr[..., ::-1])
    k = {"rot90": 1, "rot180": 2, "rot270": 3}.get(op)
    if k is None:
        raise ValueError(f"unknown augmentation {op!r}")
    if arr.shape[-1] != arr.shape[-2]:
        raise ValueError("rotations need square patches")
    return np.ascontiguousarray(np.rot90(arr, k, axes=(-2, -1)))


def augment(pair: DatasetPair, op: str) -> DatasetPair:
    """Apply one geometric transform to LQ, GT and every mask channel."""
    masks = None
    if pair.masks is not None:
        masks = MaskStack(_apply(pair.masks.masks, op), pair.masks.count_before_normalization)
    return DatasetPair(_apply(pair.lq, op), _apply(pair.gt, op), masks, dict(pair.degradation))


def random_augment(pair: DatasetPair, rng: np.random.Generator) -> DatasetPair:
    """Random horizontal flip followed by a random multiple-of-90 rotation."""
    if rng.integers(2):
        pair = augment(pair, "hflip")
    k = int(rng.integers(4))
    if k:
        pair = augment(pair, AUG_OPS[k])
    return pair


@dataclass
class DataConfig:
    task: str = "sr"
    r: int = 2
    sigma: float = 0.0
    n: int = 20
    size: tuple[int, int] = (64, 64)
    seed: int = 0
    grid: int = 8
    nc: int = 64
    k_shapes: int = 6

    def __post_init__(self):
        self.size = tuple(self.size)
        if self.task == "sr":
            if self.r not in (2, 3, 4):
                raise ValueError(f"sr needs r in (2, 3, 4), got {self.r}")
            if self.sigma:
                raise ValueError("sr datasets take no sigma")
            if self.size[0] % self.r or self.size[1] % self.r:
                raise ValueError(f"size {self.size} not divisible by r={self.r}")
        elif self.task == "denoise":
            if self.r != 1:
                raise ValueError("denoise datasets take no r")
            if self.sigma <= 0:
                raise ValueError("denoise needs sigma > 0")
        else:
            raise ValueError(f"unknown task {self.task!r}")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if min(self.size) < 16:
            raise ValueError("size must be at least 16x16")


def generate_pairs(cfg: DataConfig, start: int = 0) -> list[DatasetPair]:
    pairs = []
    for i in range(start, start + cfg.n):
        scene = make_scene(derive_seed(cfg.seed, "scene", i), *cfg.size, k_shapes=cfg.k_shapes)
        pairs.append(make_pair(scene, cfg.task, cfg.r, cfg.sigma, derive_seed(cfg.seed, "noise", i),
                               cfg.grid, cfg.nc))
    return pairs


def write_dataset(out: os.PathLike | str, cfg: DataConfig, pairs: Sequence[DatasetPair]) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for i, p in enumerate(pairs):
        stem = out / f"scene_{i:05d}"
        save_tensor(f"{stem}.hq.sptt", p.gt)
        save_tensor(f"{stem}.lq.sptt", p.lq)
        if p.masks is not None:
            save_masks(p.masks, f"{stem}.masks.sptm")
    manifest = {
        "config": {**cfg.__dict__, "size": list(cfg.size)},
        "seeds": [derive_seed(cfg.seed, "scene", i) for i in range(cfg.n)],
        "noise_seeds": [derive_seed(cfg.seed, "noise", i) for i in range(cfg.n)],
        "format_versions": {"dataset": DATASET_FORMAT_VERSION, "sptt": SPTT_VERSION, "sptm": SPTM_VERSION},
        "n": len(pairs),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def read_manifest(path: os.PathLike | str) -> dict:
    return json.loads((Path(path) / "manifest.json").read_text())


def load_dataset(path: os.PathLike | str, require_masks: bool = False) -> list[DatasetPair]:
    path = Path(path)
    manifest = read_manifest(path)
    cfg = manifest["config"]
    deg = {"task": cfg["task"], "r": cfg["r"] if cfg["task"] == "sr" else 1, "sigma": cfg["sigma"]}
    pairs = []
    for i in range(manifest["n"]):
        stem = path / f"scene_{i:05d}"
        mpath = Path(f"{stem}.masks.sptm")
        if not mpath.exists() and require_masks:
            raise FileNotFoundError(f"dataset {path} has no masks for scene {i}")
        masks = load_masks(mpath) if mpath.exists() else None
        pairs.append(DatasetPair(load_tensor(f"{stem}.lq.sptt").data, load_tensor(f"{stem}.hq.sptt").data,
                                 masks, dict(deg)))
    return pairs


def write_ppm(path, img: np.ndarray) -> None:
    """Write a [3, H, W] float image in [0, 1] as 8-bit binary PPM."""
    q = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    _, h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(q.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    pos += 1
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: only 8-bit P6 PPM is supported")
    w, h = int(tokens[1]), int(tokens[2])
    arr = np.frombuffer(raw[pos:pos + 3 * w * h], dtype=np.uint8).reshape(h, w, 3)
    return (arr.transpose(2, 0, 1).astype(np.float32) / 255.0)

"""Segmentation-mask priors: grid prompting, count normalization, the oracle
segmenter, the prior encoder and the mask file format."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .layers import ConvParams, f_block
from .tensor import Tensor

SPTM_MAGIC = b"SPTM"
SPTM_VERSION = 1

# prompt grid size -> mask channel count
GRANULARITY = {8: 64, 16: 128, 24: 256}
GRANULARITY_NAMES = {8: "Coarse", 16: "Medium", 24: "Fine"}


@dataclass
class MaskStack:
    masks: np.ndarray  # uint8 [N_c, H, W], values in {0, 1}
    count_before_normalization: int

    def __post_init__(self):
        self.masks = np.asarray(self.masks)
        if self.masks.ndim != 3:
            raise ValueError(f"mask stack must be [N_c,H,W], got {self.masks.shape}")
        if not np.isin(self.masks, (0, 1)).all():
            raise ValueError("mask values must be exactly 0 or 1")
        self.masks = self.masks.astype(np.uint8)

    @property
    def nc(self) -> int:
        return self.masks.shape[0]

    @property
    def hw(self) -> tuple[int, int]:
        return self.masks.shape[1], self.masks.shape[2]

    def to_tensor(self, dtype=np.float32) -> Tensor:
        return Tensor(self.masks[None], dtype=dtype)


def stack_masks(stacks: Sequence[MaskStack], dtype=np.float32) -> Tensor:
    return Tensor(np.stack([s.masks for s in stacks]), dtype=dtype)


def canonical_labels(labels: np.ndarray) -> np.ndarray:
    """Renumber region ids 0..K-1 by first appearance in row-major order."""
    uniq, first, inverse = np.unique(labels.reshape(-1), return_index=True, return_inverse=True)
    rank = np.empty(len(uniq), dtype=np.int32)
    rank[np.argsort(first)] = np.arange(len(uniq), dtype=np.int32)
    return rank[inverse].reshape(labels.shape)


def grid_points(h: int, w: int, g: int) -> list[tuple[int, int]]:
    return [(int((i + 0.5) * h / g), int((j + 0.5) * w / g)) for i in range(g) for j in range(g)]


def grid_prompt_masks(labels: np.ndarray, g: int = 8) -> list[np.ndarray]:
    """One binary mask per region hit by a g x g point grid, deduplicated, in scan order."""
    if g < 1:
        raise ValueError("grid size must be >= 1")
    h, w = labels.shape
    seen: set[int] = set()
    out = []
    for y, x in grid_points(h, w, g):
        region = int(labels[y, x])
        if region in seen:
            continue
        seen.add(region)
        out.append((labels == region).astype(np.uint8))
    return out


def normalize_mask_count(masks: Sequence[np.ndarray], nc: int, hw: tuple[int, int] | None = None) -> MaskStack:
    """Zero-pad or truncate (keeping emission order) to exactly ``nc`` channels."""
    if nc < 1:
        raise ValueError("nc must be >= 1")
    masks = list(masks)
    if not masks and hw is None:
        raise ValueError("need hw to build an empty mask stack")
    h, w = masks[0].shape if masks else hw
    out = np.zeros((nc, h, w), dtype=np.uint8)
    for i, m in enumerate(masks[:nc]):
        out[i] = m
    return MaskStack(out, len(masks))


def oracle_segment(img: np.ndarray, levels: int = 8) -> np.ndarray:
    """Label map of 4-connected regions of constant quantized colour.

    ``img`` is [C, H, W] in [0, 1]; each channel is quantized to ``levels`` bins.
    """
    img = np.asarray(img)
    q = np.clip(np.floor(img * levels), 0, levels - 1).astype(np.int64)
    code = np.zeros(img.shape[1:], dtype=np.int64)
    for ch in q:
        code = code * levels + ch
    labels = np.zeros(code.shape, dtype=np.int64)
    nxt = 0
    for u in np.unique(code):
        comp, n = ndimage.label(code == u)  # default structure is 4-connected
        sel = comp > 0
        labels[sel] = comp[sel] - 1 + nxt
        nxt += n
    return canonical_labels(labels)


def masks_from_labels(labels: np.ndarray, grid: int = 8, nc: int | None = None) -> MaskStack:
    nc = GRANULARITY.get(grid, 64) if nc is None else nc
    return normalize_mask_count(grid_prompt_masks(labels, grid), nc, labels.shape)


def downsample_labels(labels: np.ndarray, r: int) -> np.ndarray:
    """Nearest sampling of an HQ label map onto the LQ grid (pixel-centre aligned)."""
    if r == 1:
        return labels.copy()
    off = r // 2
    return np.ascontiguousarray(labels[off::r, off::r])


def prior_encode(lq: Tensor, masks: Tensor, first: ConvParams, second: ConvParams) -> Tensor:
    """Prior representation f([I_LQ, M]) of width ``second.c_out``."""
    if lq.shape[0] != masks.shape[0] or lq.shape[2:] != masks.shape[2:]:
        raise ValueError(f"prior_encode: image {lq.shape} and masks {masks.shape} disagree")
    return f_block([lq, masks], first, second)


def save_masks(stack: MaskStack, path) -> None:
    nc, h, w = stack.masks.shape
    with open(path, "wb") as fh:
        fh.write(SPTM_MAGIC + struct.pack("<IIII", SPTM_VERSION, nc, h, w))
        fh.write(stack.masks.astype(np.uint8).tobytes())


def load_masks(path) -> MaskStack:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != SPTM_MAGIC:
        raise ValueError(f"{path}: not a mask file")
    if len(raw) < 20:
        raise ValueError(f"{path}: truncated header")
    version, nc, h, w = struct.unpack("<IIII", raw[4:20])
    if version != SPTM_VERSION:
        raise ValueError(f"{path}: unsupported mask format version {version}")
    payload = raw[20:]
    if len(payload) != nc * h * w:
        raise ValueError(f"{path}: payload has {len(payload)} bytes, header says {nc}x{h}x{w}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(nc, h, w)
    if arr.max(initial=0) > 1:
        raise ValueError(f"{path}: mask values must be 0 or 1")
    return MaskStack(arr.copy(), nc)

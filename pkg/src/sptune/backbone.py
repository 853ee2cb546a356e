"""A small generic restoration network: Enc -> N1 residual blocks -> task head.

Each building block is a stand-in (``F + f_block(F)``) for the much heavier
blocks of real restoration networks; the adapter only needs blocks that keep
the feature shape.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .layers import ParamSet, apply_conv, conv_params, f_block, fblock_params, init_params, pixel_shuffle
from .tensor import Tensor, add

Hook = Callable[[int, Tensor], Tensor]


@dataclass
class BackboneConfig:
    task: str = "sr"
    r: int = 2
    C: int = 16
    N1: int = 3
    C_in: int = 3
    C_out: int = 3
    k: int = 3

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.task not in ("sr", "denoise"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.r not in (1, 2, 3, 4):
            raise ValueError(f"r must be in 1..4, got {self.r}")
        if self.task == "denoise" and self.r != 1:
            raise ValueError("denoise requires r=1")
        if self.N1 < 1 or self.C < 1:
            raise ValueError("N1 and C must be >= 1")
        if self.task == "denoise" and self.C_in != self.C_out:
            raise ValueError("denoise residual needs C_in == C_out")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "BackboneConfig":
        return cls(**d)


def backbone_specs(cfg: BackboneConfig, prefix: str = "backbone") -> dict[str, tuple[int, int, int]]:
    C, k = cfg.C, cfg.k
    spec = {f"{prefix}.enc": (cfg.C_in, C, k)}
    for i in range(1, cfg.N1 + 1):
        spec[f"{prefix}.block{i}.conv1"] = (C, C, k)
        spec[f"{prefix}.block{i}.conv2"] = (C, C, k)
    if cfg.task == "sr":
        spec[f"{prefix}.rec.pre"] = (C, C * cfg.r * cfg.r, k)
        spec[f"{prefix}.rec.post"] = (C, cfg.C_out, k)
    else:
        spec[f"{prefix}.rec.out"] = (C, cfg.C_out, k)
    return spec


class Backbone:
    def __init__(self, cfg: BackboneConfig, params: ParamSet, prefix: str = "backbone"):
        self.cfg = cfg
        self.params = params
        self.prefix = prefix

    @classmethod
    def init(cls, cfg: BackboneConfig, seed: int, dtype=np.float32, prefix: str = "backbone") -> "Backbone":
        return cls(cfg, init_params(backbone_specs(cfg, prefix), seed, dtype), prefix)

    def _conv(self, name: str):
        return conv_params(self.params, f"{self.prefix}.{name}")

    def enc(self, x: Tensor) -> Tensor:
        if x.data.ndim != 4 or x.shape[1] != self.cfg.C_in:
            raise ValueError(f"expected [N,{self.cfg.C_in},H,W] input, got {x.shape}")
        return apply_conv(x, self._conv("enc"))

    def building_block(self, i: int, F: Tensor) -> Tensor:
        if F.shape[1] != self.cfg.C:
            raise ValueError(f"block {i}: expected {self.cfg.C} channels, got {F.shape[1]}")
        return add(F, f_block(F, *fblock_params(self.params, f"{self.prefix}.block{i}")))

    def rec(self, F: Tensor, x: Tensor) -> Tensor:
        if self.cfg.task == "sr":
            up = pixel_shuffle(apply_conv(F, self._conv("rec.pre")), self.cfg.r)
            return apply_conv(up, self._conv("rec.post"))
        return add(apply_conv(F, self._conv("rec.out")), x)

    def forward(self, x: Tensor, hooks: Mapping[int, Hook] | Sequence[Hook | None] | None = None) -> Tensor:
        """Run the network; ``hooks[i]`` (1-based) may replace the output of block i."""
        hook_map = _normalize_hooks(hooks, self.cfg.N1)
        F = self.enc(x)
        for i in range(1, self.cfg.N1 + 1):
            F = self.building_block(i, F)
            hook = hook_map.get(i)
            if hook is not None:
                new = hook(i, F)
                if new.shape != F.shape:
                    raise ValueError(f"hook at block {i} returned {new.shape}, expected {F.shape}")
                F = new
        return self.rec(F, x)

    __call__ = forward


def _normalize_hooks(hooks, n1: int) -> dict[int, Hook]:
    if hooks is None:
        return {}
    if isinstance(hooks, Mapping):
        out = dict(hooks)
    else:
        hooks = list(hooks)
        if len(hooks) > n1:
            raise ValueError(f"{len(hooks)} hooks for {n1} blocks")
        out = {i + 1: h for i, h in enumerate(hooks) if h is not None}
    for i in out:
        if not 1 <= i <= n1:
            raise ValueError(f"hook position {i} outside 1..{n1}")
    return out

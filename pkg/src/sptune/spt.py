"""Prior-tuning adapter units and their installation into a frozen backbone.

Per installed block i, with masks M and prior P_i:

    F'        = f_enh([F_i, M])
    q         = f_prior(P_i)
    P_{i+1}   = q + P_i
    F_spt     = f_feat(F') * q + F'
    F_i_new   = F_i + alpha * F_spt

``q`` is computed once and feeds both the prior chain and the correlation.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping

from .backbone import Backbone
from .layers import ParamSet, conv_specs_fblock, f_block, fblock_params, init_params
from .masks import GRANULARITY, prior_encode
from .tensor import Tensor, add, mul, scalar_scale

VARIANTS = ("full", "spt-f", "spt-p", "spt-cat")


@dataclass
class SptConfig:
    variant: str = "full"
    alpha: float = 1.0
    positions: tuple[int, ...] | None = None  # None = after every block
    nc: int = 64
    grid: int = 8
    width: int | None = None  # hidden width inside the f-blocks; None = backbone C
    zero_init: bool = True  # zero the last conv of the branch feeding F_spt, so tuning starts at the backbone

    def __post_init__(self):
        if self.positions is not None:
            self.positions = tuple(sorted(int(p) for p in self.positions))
            if len(set(self.positions)) != len(self.positions):
                raise ValueError(f"duplicate positions {self.positions}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown SPT variant {self.variant!r}")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.nc < 1 or self.grid < 1:
            raise ValueError("nc and grid must be >= 1")

    def resolved_positions(self, n1: int) -> tuple[int, ...]:
        if self.positions is None:
            return tuple(range(1, n1 + 1))
        if not self.positions:
            raise ValueError("SPT positions must be non-empty")
        pos = self.positions
        bad = [p for p in pos if not 1 <= p <= n1]
        if bad:
            raise ValueError(f"positions {bad} outside 1..{n1}")
        return pos

    def to_dict(self) -> dict:
        d = asdict(self)
        d["positions"] = None if self.positions is None else list(self.positions)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "SptConfig":
        d = dict(d)
        if d.get("positions") is not None:
            d["positions"] = tuple(d["positions"])
        if "nc" not in d and "grid" in d:
            d["nc"] = GRANULARITY.get(d["grid"], 64)
        return cls(**d)


def uses_prior(variant: str) -> bool:
    return variant != "spt-p"


def unit_specs(variant: str, C: int, nc: int, width: int, name: str) -> dict[str, tuple[int, int, int]]:
    if variant == "full":
        enh_in = C + nc
    elif variant == "spt-f":
        enh_in = nc
    elif variant == "spt-p":
        enh_in = C + nc
    elif variant == "spt-cat":
        return conv_specs_fblock(f"{name}.cat", nc + 2 * C, width, C)
    else:
        raise ValueError(f"unknown SPT variant {variant!r}")
    spec = conv_specs_fblock(f"{name}.enh", enh_in, width, C)
    spec.update(conv_specs_fblock(f"{name}.feat", C, width, C))
    if variant != "spt-p":
        spec.update(conv_specs_fblock(f"{name}.prior", C, width, C))
    return spec


def spt_specs(cfg: SptConfig, C: int, C_in: int, n1: int, prefix: str = "spt") -> dict[str, tuple[int, int, int]]:
    width = cfg.width or C
    spec = {}
    if uses_prior(cfg.variant):
        spec.update(conv_specs_fblock(f"{prefix}.prior_enc", C_in + cfg.nc, width, C))
    for i in cfg.resolved_positions(n1):
        spec.update(unit_specs(cfg.variant, C, cfg.nc, width, f"{prefix}.unit{i}"))
    return spec


class SptUnit:
    def __init__(self, variant: str, params: ParamSet, name: str):
        if variant not in VARIANTS:
            raise ValueError(f"unknown SPT variant {variant!r}")
        self.variant = variant
        self.name = name
        self.params = params

    def _f(self, branch: str, x: Tensor | list[Tensor]) -> Tensor:
        return f_block(x, *fblock_params(self.params, f"{self.name}.{branch}"))

    def __call__(self, F: Tensor, prior: Tensor | None, masks: Tensor) -> tuple[Tensor, Tensor | None]:
        return variant_forward(self, F, prior, masks)


def _check_spatial(F: Tensor, prior: Tensor | None, masks: Tensor) -> None:
    ref = (F.shape[0],) + F.shape[2:]
    for t in (prior, masks):
        if t is not None and (t.shape[0],) + t.shape[2:] != ref:
            raise ValueError(f"SPT: spatial mismatch {F.shape} / {t.shape}")


def spt_forward(unit: SptUnit, F: Tensor, prior: Tensor, masks: Tensor) -> tuple[Tensor, Tensor]:
    """The full unit; returns (F_spt, next prior)."""
    _check_spatial(F, prior, masks)
    enhanced = unit._f("enh", [F, masks])
    q = unit._f("prior", prior)
    out = add(mul(unit._f("feat", enhanced), q), enhanced)
    return out, add(q, prior)


def variant_forward(unit: SptUnit, F: Tensor, prior: Tensor | None, masks: Tensor) -> tuple[Tensor, Tensor | None]:
    variant = unit.variant
    if variant == "full":
        return spt_forward(unit, F, prior, masks)
    _check_spatial(F, prior, masks)
    if variant == "spt-f":
        enhanced = unit._f("enh", masks)
        q = unit._f("prior", prior)
        return add(mul(unit._f("feat", enhanced), q), enhanced), add(q, prior)
    if variant == "spt-p":
        enhanced = unit._f("enh", [F, masks])
        return add(unit._f("feat", enhanced), enhanced), prior
    if variant == "spt-cat":
        return unit._f("cat", [masks, F, prior]), prior
    raise ValueError(f"unknown SPT variant {variant!r}")


def inject(F: Tensor, F_spt: Tensor, alpha: float) -> Tensor:
    """F + alpha * F_spt."""
    if F.shape != F_spt.shape:
        raise ValueError(f"inject: shape mismatch {F.shape} vs {F_spt.shape}")
    return add(F, scalar_scale(F_spt, alpha))


class TunedModel:
    """A backbone with SPT units hooked after the configured building blocks."""

    def __init__(self, backbone: Backbone, cfg: SptConfig, params: ParamSet, prefix: str = "spt"):
        self.backbone = backbone
        self.cfg = cfg
        self.prefix = prefix
        self.positions = cfg.resolved_positions(backbone.cfg.N1)
        self.params = params
        self.units = {i: SptUnit(cfg.variant, params, f"{prefix}.unit{i}") for i in self.positions}

    def encode_prior(self, x: Tensor, masks: Tensor) -> Tensor | None:
        if not uses_prior(self.cfg.variant):
            return None
        return prior_encode(x, masks, *fblock_params(self.params, f"{self.prefix}.prior_enc"))

    def forward(self, x: Tensor, masks: Tensor) -> Tensor:
        if masks.shape[1] != self.cfg.nc:
            raise ValueError(f"model expects {self.cfg.nc} mask channels, got {masks.shape[1]}")
        state = {"prior": self.encode_prior(x, masks)}

        def hook(i: int, F: Tensor) -> Tensor:
            F_spt, state["prior"] = self.units[i](F, state["prior"], masks)
            return inject(F, F_spt, self.cfg.alpha)

        return self.backbone.forward(x, {i: hook for i in self.positions})

    __call__ = forward

    def spt_param_count(self) -> int:
        return self.params.count(prefix=f"{self.prefix}.")


def install(backbone: Backbone, cfg: SptConfig, seed: int = 0, spt_params: ParamSet | None = None,
            dtype=None, prefix: str = "spt") -> TunedModel:
    """Build (or attach existing) SPT parameters and return the combined model.

    Backbone parameters are shared, not copied; SPT parameters are trainable.
    """
    bcfg = backbone.cfg
    cfg.resolved_positions(bcfg.N1)
    if spt_params is None:
        dtype = dtype or next(iter(t for _, t in backbone.params.items())).dtype
        spt_params = init_params(spt_specs(cfg, bcfg.C, bcfg.C_in, bcfg.N1, prefix), seed, dtype)
        if cfg.zero_init:
            last = "cat" if cfg.variant == "spt-cat" else "enh"
            for i in cfg.resolved_positions(bcfg.N1):
                spt_params[f"{prefix}.unit{i}.{last}.conv2.weight"].data[...] = 0
    combined = ParamSet()
    for name, t in backbone.params.items():
        combined.add(name, t, backbone.params.is_trainable(name))
    for name, t in spt_params.items():
        combined.add(name, t, spt_params.is_trainable(name))
    bb = Backbone(bcfg, combined, backbone.prefix)
    return TunedModel(bb, cfg, combined, prefix)


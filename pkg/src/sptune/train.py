"""Adam, the step-halving schedule, backbone pretraining and frozen-backbone SPT tuning."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .backbone import Backbone, BackboneConfig
from .data import DatasetPair, random_augment, sample_patch
from .layers import ParamSet
from .masks import stack_masks
from .seeding import derive_seed, rng_for
from .spt import SptConfig, TunedModel, install
from .tensor import NonFiniteError, Tensor, backward, l1_loss, mse_loss, no_grad

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    batch: int = 4
    iters: int = 1000
    halve_every: int = 5000
    seed: int = 0
    patch: int | None = None  # None: 64 for SR, 128 for denoise
    loss: str = "l1"
    augment: bool = True
    log_every: int = 50
    patience: int = 0  # validation checks without improvement before stopping; 0 disables
    val_every: int = 250

    def __post_init__(self):
        if min(self.lr0, self.beta1, self.beta2, self.eps) <= 0 or self.beta1 >= 1 or self.beta2 >= 1:
            raise ValueError("rates must be positive and betas in (0, 1)")
        if self.batch < 1 or self.iters < 0 or self.halve_every < 1:
            raise ValueError("batch >= 1, iters >= 0 and halve_every >= 1 required")
        if self.loss not in ("l1", "l2"):
            raise ValueError(f"loss must be 'l1' or 'l2', got {self.loss!r}")

    def patch_for(self, task: str) -> int:
        if self.patch is not None:
            return self.patch
        return 64 if task == "sr" else 128

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        return cls(**d)


def lr_at(it: int, cfg: TrainConfig) -> float:
    return cfg.lr0 * 2.0 ** (-(it // cfg.halve_every))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(ps: ParamSet, st: AdamState, lr: float, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update of every trainable parameter, in place."""
    items = ps.trainable_items()
    for name, p in items:
        if p.grad is None:
            raise ValueError(f"no gradient for trainable parameter {name!r}")
    st.t += 1
    c1 = 1.0 - cfg.beta1 ** st.t
    c2 = 1.0 - cfg.beta2 ** st.t
    for name, p in items:
        g = p.grad
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p.data
        m = st.m.get(name)
        if m is None:
            m = st.m[name] = np.zeros_like(p.data)
            st.v[name] = np.zeros_like(p.data)
        v = st.v[name]
        m *= cfg.beta1
        m += (1 - cfg.beta1) * g
        v *= cfg.beta2
        with np.errstate(over="ignore"):
            v += (1 - cfg.beta2) * (g * g)
        with np.errstate(over="ignore", invalid="ignore"):
            step = lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if not (np.isfinite(step).all() and np.isfinite(v).all()):
            raise NonFiniteError(f"non-finite Adam update for {name!r}")
        p.data -= step


@dataclass
class Batch:
    lq: Tensor
    gt: np.ndarray
    masks: Tensor | None


def make_batch(pairs: Sequence[DatasetPair], cfg: TrainConfig, it: int, task: str, with_masks: bool,
               dtype=np.float32) -> Batch:
    """Deterministic batch for iteration ``it``: indices, crops and flips all derive from the seed."""
    size = cfg.patch_for(task)
    idx = rng_for(cfg.seed, "batch", it).integers(len(pairs), size=cfg.batch)
    picked = []
    for b, i in enumerate(idx):
        k = it * cfg.batch + b
        p = sample_patch(pairs[int(i)], size, derive_seed(cfg.seed, "patch", k))
        if cfg.augment:
            p = random_augment(p, rng_for(cfg.seed, "augment", k))
        picked.append(p)
    masks = None
    if with_masks:
        if any(p.masks is None for p in picked):
            raise ValueError("dataset has no masks")
        masks = stack_masks([p.masks for p in picked], dtype)
    return Batch(Tensor(np.stack([p.lq for p in picked]), dtype=dtype),
                 np.stack([p.gt for p in picked]).astype(dtype), masks)


def _loss_fn(name: str):
    return l1_loss if name == "l1" else mse_loss


@dataclass
class TrainResult:
    params: ParamSet
    log: list[tuple[int, float, float]]
    stopped_at: int


def train_loop(forward: Callable[[Tensor, Tensor | None], Tensor], params: ParamSet,
               pairs: Sequence[DatasetPair], cfg: TrainConfig, task: str, with_masks: bool,
               validate: Callable[[], float] | None = None) -> TrainResult:
    if not pairs:
        raise ValueError("empty dataset")
    loss_fn = _loss_fn(cfg.loss)
    state = AdamState()
    history: list[tuple[int, float, float]] = []
    best, best_snapshot, bad_checks = -np.inf, None, 0
    dtype = next(t for _, t in params.items()).dtype
    it = 0
    for it in range(cfg.iters):
        lr = lr_at(it, cfg)
        batch = make_batch(pairs, cfg, it, task, with_masks, dtype)
        params.zero_grad()
        try:
            loss = loss_fn(forward(batch.lq, batch.masks), batch.gt)
            backward(loss)
            adam_step(params, state, lr, cfg)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"non-finite values at iteration {it}: {exc}") from exc
        history.append((it, lr, loss.item()))
        if cfg.log_every and it % cfg.log_every == 0:
            log.info("iter %d lr %.3g loss %.6f", it, lr, loss.item())
        if validate is not None and cfg.patience and (it + 1) % cfg.val_every == 0:
            score = validate()
            if score > best:
                best, best_snapshot, bad_checks = score, params.snapshot(), 0
            else:
                bad_checks += 1
                if bad_checks >= cfg.patience:
                    break
    params.zero_grad()
    if best_snapshot is not None:
        for name, t in params.items():
            t.data[...] = best_snapshot[name]
    return TrainResult(params, history, it + 1 if cfg.iters else 0)


def pretrain(backbone: Backbone, pairs: Sequence[DatasetPair], cfg: TrainConfig,
             validate: Callable[[], float] | None = None) -> TrainResult:
    """Train every backbone parameter on the chosen pixel loss."""
    for name in backbone.params:
        backbone.params.set_trainable(name, True)
    return train_loop(lambda x, m: backbone.forward(x), backbone.params, pairs, cfg, backbone.cfg.task,
                      with_masks=False, validate=validate)


def spt_tune(backbone: Backbone, spt_cfg: SptConfig, pairs: Sequence[DatasetPair], cfg: TrainConfig,
             seed: int | None = None, validate: Callable[[TunedModel], float] | None = None
             ) -> tuple[TunedModel, TrainResult]:
    """Freeze the backbone, attach fresh SPT units and train only those."""
    if any(p.masks is None for p in pairs):
        raise ValueError("SPT tuning needs masks for every pair")
    for name in backbone.params:
        backbone.params.set_trainable(name, False)
    model = install(backbone, spt_cfg, seed=cfg.seed if seed is None else seed)
    nc = pairs[0].masks.nc
    if nc != spt_cfg.nc:
        raise ValueError(f"dataset masks have {nc} channels, config expects {spt_cfg.nc}")
    val = (lambda: validate(model)) if validate is not None else None
    result = train_loop(model.forward, model.params, pairs, cfg, backbone.cfg.task, with_masks=True, validate=val)
    return model, result


def write_log(path, history: Sequence[tuple[int, float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "lr", "loss"])
        for it, lr, loss in history:
            w.writerow([it, repr(lr), repr(loss)])


def save_checkpoint(path, params: ParamSet, backbone_cfg: BackboneConfig, spt_cfg: SptConfig | None = None,
                    extra: Mapping | None = None) -> None:
    meta = {"backbone": backbone_cfg.to_dict(), "spt": spt_cfg.to_dict() if spt_cfg else None}
    meta.update(extra or {})
    params.save(path, meta)


def load_checkpoint(path) -> Backbone | TunedModel:
    ps, meta = ParamSet.load(path)
    bcfg = BackboneConfig.from_dict(meta["backbone"])
    backbone_ps = ParamSet()
    spt_ps = ParamSet()
    for name, t in ps.items():
        (spt_ps if name.startswith("spt.") else backbone_ps).add(name, t, ps.is_trainable(name))
    bb = Backbone(bcfg, backbone_ps)
    if not meta.get("spt"):
        return bb
    return install(bb, SptConfig.from_dict(meta["spt"]), spt_params=spt_ps)


def predict(model: Backbone | TunedModel, pair: DatasetPair, dtype=None) -> np.ndarray:
    """Restore one full image; returns [C, H', W']."""
    if dtype is None:
        dtype = next(t for _, t in model.params.items()).dtype
    x = Tensor(pair.lq[None], dtype=dtype)
    with no_grad():
        if isinstance(model, TunedModel):
            if pair.masks is None:
                raise ValueError("model has SPT units but the pair has no masks")
            return model.forward(x, stack_masks([pair.masks], dtype)).data[0]
        return model.forward(x).data[0]

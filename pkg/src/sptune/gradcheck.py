"""64-bit finite-difference self-test of every differentiable component."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import layers, masks, spt, tensor
from .backbone import Backbone, BackboneConfig
from .tensor import Tensor

TOLERANCE = 1e-4
# Inputs are redrawn until every ReLU pre-activation is at least this far from
# the kink; otherwise a +-h probe can straddle it and the difference quotient
# measures the wrong one-sided slope.
KINK_MARGIN = 1e-4


@dataclass
class CheckResult:
    component: str
    max_rel_err: float
    n_values: int
    seconds: float

    @property
    def ok(self) -> bool:
        return self.max_rel_err <= TOLERANCE


def _rand(rng, shape, requires_grad=True, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, dtype=np.float64, requires_grad=requires_grad)


def _probe(rng, shape):
    return rng.standard_normal(shape)


def _params(ps) -> list[Tensor]:
    return [t for _, t in ps.items()]


def _nonzero_biases(ps, rng) -> None:
    for name, t in ps.items():
        if name.endswith(".bias"):
            t.data[...] = rng.uniform(-0.2, 0.2, t.shape)


def _cases(seed: int) -> list[tuple[str, Callable[[], tuple[Callable, Tensor, list[Tensor]]]]]:
    rng = np.random.default_rng(seed)
    cases = []

    def add(name):
        def deco(fn):
            cases.append((name, fn))
            return fn
        return deco

    for k in (1, 3, 5):
        @add(f"conv2d k={k}")
        def _conv(k=k):
            x, w, b = _rand(rng, [2, 3, 6, 5]), _rand(rng, [2, 3, k, k]), _rand(rng, [2])
            g = _probe(rng, (2, 2, 6, 5))
            return (lambda t: tensor.weighted_sum(layers.conv2d(t, w, b), g)), x, [w, b]

    @add("conv2d (concatenated parts)")
    def _parts():
        a = _rand(rng, [1, 2, 5, 5])
        m = Tensor((rng.random((1, 3, 5, 5)) > 0.6).astype(float), dtype=np.float64)
        w, b = _rand(rng, [2, 5, 3, 3]), _rand(rng, [2])
        g = _probe(rng, (1, 2, 5, 5))
        return (lambda t: tensor.weighted_sum(layers.conv2d_parts([t, m], w, b), g)), a, [w, b]

    @add("relu(conv2d)")
    def _relu():
        x, w, b = _rand(rng, [1, 2, 6, 6]), _rand(rng, [3, 2, 3, 3]), _rand(rng, [3])
        g = _probe(rng, (1, 3, 6, 6))
        return (lambda t: tensor.weighted_sum(layers.relu(layers.conv2d(t, w, b)), g)), x, [w, b]

    @add("pixel_shuffle")
    def _shuffle():
        x = _rand(rng, [2, 8, 3, 2])
        g = _probe(rng, (2, 2, 6, 4))
        return (lambda t: tensor.weighted_sum(layers.pixel_shuffle(t, 2), g)), x, []

    @add("f_block")
    def _fblock():
        ps = layers.init_params(layers.conv_specs_fblock("f", 3, 4, 2), 1, np.float64)
        _nonzero_biases(ps, rng)
        c1, c2 = layers.fblock_params(ps, "f")
        x = _rand(rng, [1, 3, 5, 5])
        g = _probe(rng, (1, 2, 5, 5))
        return (lambda t: tensor.weighted_sum(layers.f_block(t, c1, c2), g)), x, _params(ps)

    @add("elementwise, scale, concat, slice")
    def _elementwise():
        a, b = _rand(rng, [1, 2, 3, 3]), _rand(rng, [1, 3, 3, 3])
        g = _probe(rng, (1, 2, 3, 3))

        def f(t):
            cat = tensor.concat_channels([t, b])
            prod = tensor.mul(tensor.slice_channels(cat, 0, 2), tensor.slice_channels(cat, 3, 5))
            return tensor.weighted_sum(tensor.add(prod, tensor.scalar_scale(tensor.sub(t, prod), 0.3)), g)
        return f, a, [b]

    @add("l1 loss")
    def _l1():
        x = _rand(rng, [2, 3, 4])
        target = x.data + np.where(rng.random(x.shape) > 0.5, 1, -1) * rng.uniform(0.1, 1.0, x.shape)
        return (lambda t: tensor.l1_loss(t, target)), x, []

    @add("prior_encode")
    def _prior():
        ps = layers.init_params(layers.conv_specs_fblock("p", 3 + 4, 4, 4), 2, np.float64)
        _nonzero_biases(ps, rng)
        c1, c2 = layers.fblock_params(ps, "p")
        m = Tensor((rng.random((1, 4, 5, 5)) > 0.7).astype(float), dtype=np.float64)
        x = _rand(rng, [1, 3, 5, 5])
        g = _probe(rng, (1, 4, 5, 5))
        return (lambda t: tensor.weighted_sum(masks.prior_encode(t, m, c1, c2), g)), x, _params(ps)

    for variant in spt.VARIANTS:
        @add(f"SPT unit ({variant})")
        def _unit(variant=variant):
            C, nc = 3, 2
            ps = layers.init_params(spt.unit_specs(variant, C, nc, C, "u"), 3, np.float64)
            _nonzero_biases(ps, rng)
            unit = spt.SptUnit(variant, ps, "u")
            P = _rand(rng, [1, C, 4, 4])
            m = Tensor((rng.random((1, nc, 4, 4)) > 0.6).astype(float), dtype=np.float64)
            F = _rand(rng, [1, C, 4, 4])
            g1, g2 = _probe(rng, (1, C, 4, 4)), _probe(rng, (1, C, 4, 4))

            def f(t):
                out, nxt = spt.variant_forward(unit, t, P, m)
                loss = tensor.weighted_sum(out, g1)
                if nxt is not P:  # include the prior-chain path
                    loss = tensor.add(loss, tensor.weighted_sum(nxt, g2))
                return loss
            return f, F, [P, *_params(ps)]

    @add("end-to-end TunedModel (N1=2, C=4, 8x8)")
    def _e2e():
        bb = Backbone.init(BackboneConfig(task="sr", r=2, C=4, N1=2), 4, np.float64)
        model = spt.install(bb, spt.SptConfig(nc=4, zero_init=False), seed=5)
        _nonzero_biases(model.params, rng)
        m = Tensor((rng.random((1, 4, 8, 8)) > 0.7).astype(float), dtype=np.float64)
        x = Tensor(rng.random((1, 3, 8, 8)), dtype=np.float64)
        g = _probe(rng, (1, 3, 16, 16))
        return (lambda t: tensor.weighted_sum(model(t, m), g)), x, _params(model.params)

    return cases


def kink_margin(f: Callable[[Tensor], Tensor], x: Tensor) -> float:
    """Smallest |pre-activation| over every ReLU evaluated by ``f(x)``."""
    inner = layers.relu
    seen = [np.inf]

    def spy(t):
        seen[0] = min(seen[0], float(np.abs(t.data).min()))
        return inner(t)

    layers.relu = spy
    try:
        with tensor.no_grad():
            f(x)
    finally:
        layers.relu = inner
    return seen[0]


def run_gradcheck(seed: int = 0, report: Callable[[CheckResult], None] | None = None,
                  max_redraws: int = 50, only: str | None = None) -> list[CheckResult]:
    """Check every component (or those whose name contains ``only``)."""
    results = []
    for name, build in _cases(seed):
        if only is not None and only not in name:
            continue
        t0 = time.perf_counter()
        for _ in range(max_redraws):
            f, x, wrt = build()
            if kink_margin(f, x) >= KINK_MARGIN:
                break
        else:
            raise RuntimeError(f"{name}: could not draw inputs away from ReLU kinks")
        err = tensor.grad_check(f, x, h=1e-5, wrt=wrt)
        res = CheckResult(name, err, x.size + sum(w.size for w in wrt), time.perf_counter() - t0)
        results.append(res)
        if report:
            report(res)
    return results

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import spt_unit_direct
from sptune.backbone import Backbone, BackboneConfig
from sptune.layers import init_params
from sptune.spt import (VARIANTS, SptConfig, SptUnit, inject, install, spt_forward, unit_specs, variant_forward)
from sptune.tensor import Tensor, backward, grad_check, weighted_sum
from sptune.train import AdamState, TrainConfig, adam_step


def rand(shape, seed, requires_grad=False):
    return Tensor(np.random.default_rng(seed).standard_normal(shape), requires_grad=requires_grad)


def binary(shape, seed):
    return Tensor((np.random.default_rng(seed).random(shape) > 0.7).astype(np.float64))


def make_unit(variant="full", C=4, nc=3, width=None, seed=0):
    ps = init_params(unit_specs(variant, C, nc, width or C, "u"), seed, np.float64)
    for name, t in ps.items():  # nonzero biases so every term of the unit is exercised
        if name.endswith("bias"):
            t.data[...] = np.random.default_rng(seed + len(name)).uniform(-0.2, 0.2, t.shape)
    return SptUnit(variant, ps, "u"), ps


def branch(ps, b):
    return tuple(ps[f"u.{b}.{c}.{k}"].data for c in ("conv1", "conv2") for k in ("weight", "bias"))


class TestSptForward:
    def test_shapes(self):
        unit, _ = make_unit()
        out, nxt = spt_forward(unit, rand([2, 4, 5, 5], 1), rand([2, 4, 5, 5], 2), binary([2, 3, 5, 5], 3))
        assert out.shape == nxt.shape == (2, 4, 5, 5)

    def test_matches_direct_oracle_20_cases(self):
        rng = np.random.default_rng(77)
        for case in range(20):
            C, nc = int(rng.integers(1, 5)), int(rng.integers(1, 5))
            h, w = int(rng.integers(2, 6)), int(rng.integers(2, 6))
            unit, ps = make_unit("full", C, nc, int(rng.integers(1, 5)), seed=case)
            F, P, M = rand([1, C, h, w], 3 * case), rand([1, C, h, w], 3 * case + 1), binary([1, nc, h, w], case)
            out, nxt = spt_forward(unit, F, P, M)
            p = {b: branch(ps, b) for b in ("enh", "feat", "prior")}
            ref_out, ref_next = spt_unit_direct(F.data, P.data, M.data, p)
            np.testing.assert_allclose(out.data, ref_out, atol=1e-6, rtol=0)
            np.testing.assert_allclose(nxt.data, ref_next, atol=1e-6, rtol=0)

    def test_zero_prior_branch_degenerates(self):
        unit, ps = make_unit()
        ps["u.prior.conv2.weight"].data[...] = 0
        ps["u.prior.conv2.bias"].data[...] = 0
        F, P, M = rand([1, 4, 5, 5], 1), rand([1, 4, 5, 5], 2), binary([1, 3, 5, 5], 3)
        out, nxt = spt_forward(unit, F, P, M)
        enhanced = unit._f("enh", [F, M])
        np.testing.assert_array_equal(out.data, enhanced.data)
        np.testing.assert_array_equal(nxt.data, P.data)

    def test_spatial_mismatch(self):
        unit, _ = make_unit()
        with pytest.raises(ValueError):
            spt_forward(unit, rand([1, 4, 5, 5], 1), rand([1, 4, 4, 5], 2), binary([1, 3, 5, 5], 3))

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            SptConfig(variant="spt-x")
        with pytest.raises(ValueError):
            unit_specs("spt-x", 4, 3, 4, "u")

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_gradcheck_all_variants(self, variant):
        unit, ps = make_unit(variant, C=3, nc=2, seed=4)
        F, P, M = rand([1, 3, 4, 4], 5, True), rand([1, 3, 4, 4], 6, True), binary([1, 2, 4, 4], 7)
        wa, wb = np.random.default_rng(8).standard_normal((2, 1, 3, 4, 4))

        def f(x):
            out, nxt = variant_forward(unit, x, P, M)
            return weighted_sum(out, wa) if nxt is P else weighted_sum(out, wa) + weighted_sum(nxt, wb)

        assert grad_check(f, F, wrt=[P, *[t for _, t in ps.items()]]) <= 1e-4


class TestVariants:
    def test_spt_p_ignores_prior(self):
        unit, _ = make_unit("spt-p")
        F, M = rand([1, 4, 5, 5], 1), binary([1, 3, 5, 5], 3)
        a, pa = variant_forward(unit, F, rand([1, 4, 5, 5], 2), M)
        b, _ = variant_forward(unit, F, rand([1, 4, 5, 5], 9), M)
        assert a.data.tobytes() == b.data.tobytes()

    def test_spt_p_passes_prior_through(self):
        unit, _ = make_unit("spt-p")
        P = rand([1, 4, 5, 5], 2)
        _, nxt = variant_forward(unit, rand([1, 4, 5, 5], 1), P, binary([1, 3, 5, 5], 3))
        assert nxt is P

    def test_spt_p_has_no_prior_encoder(self):
        bb = Backbone.init(BackboneConfig(C=4, N1=2), 0)
        model = install(bb, SptConfig(variant="spt-p", nc=3))
        assert not any(".prior" in n for n in model.params if n.startswith("spt."))

    def test_spt_cat_input_width(self):
        spec = unit_specs("spt-cat", 16, 64, 16, "u")
        assert spec["u.cat.conv1"][0] == 64 + 2 * 16
        assert set(spec) == {"u.cat.conv1", "u.cat.conv2"}

    def test_spt_cat_keeps_prior(self):
        unit, _ = make_unit("spt-cat")
        P = rand([1, 4, 5, 5], 2)
        out, nxt = variant_forward(unit, rand([1, 4, 5, 5], 1), P, binary([1, 3, 5, 5], 3))
        assert nxt is P and out.shape == (1, 4, 5, 5)

    def test_spt_f_ignores_features_in_enhancement(self):
        unit, _ = make_unit("spt-f")
        P, M = rand([1, 4, 5, 5], 2), binary([1, 3, 5, 5], 3)
        a, _ = variant_forward(unit, rand([1, 4, 5, 5], 1), P, M)
        b, _ = variant_forward(unit, rand([1, 4, 5, 5], 4), P, M)
        assert a.data.tobytes() == b.data.tobytes()


class TestInject:
    def test_alpha_zero_bitwise(self):
        F = rand([1, 4, 3, 3], 1)
        assert inject(F, rand([1, 4, 3, 3], 2), 0.0).data.tobytes() == F.data.tobytes()

    def test_zero_spt(self):
        F = rand([1, 4, 3, 3], 1)
        assert inject(F, Tensor(np.zeros((1, 4, 3, 3))), 1.5).data.tobytes() == F.data.tobytes()

    @pytest.mark.parametrize("alpha", [0.5, 1.0, 1.5, 2.0])
    def test_alpha_sweep(self, alpha):
        F, S = rand([2, 3], 1), rand([2, 3], 2)
        np.testing.assert_allclose(inject(F, S, alpha).data, F.data + alpha * S.data)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            inject(rand([1, 4, 3, 3], 1), rand([1, 3, 3, 3], 2), 1.0)

    def test_negative_alpha_rejected(self):
        with pytest.raises(ValueError):
            SptConfig(alpha=-0.1)


def tiny(n1=3, C=4, nc=3, **kw):
    bb = Backbone.init(BackboneConfig(C=C, N1=n1), seed=1, dtype=np.float64)
    return bb, install(bb, SptConfig(nc=nc, zero_init=False, **kw), seed=2)


class TestInstall:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_alpha_zero_end_to_end_bitwise(self, variant):
        bb, model = tiny(variant=variant, alpha=0.0)
        for s in range(3):
            x, m = rand([1, 3, 6, 6], s), binary([1, 3, 6, 6], s + 10)
            assert model(x, m).data.tobytes() == bb(x).data.tobytes()

    def test_zero_init_starts_at_backbone(self):
        bb = Backbone.init(BackboneConfig(C=4, N1=3), seed=1, dtype=np.float64)
        for variant in VARIANTS:
            model = install(bb, SptConfig(variant=variant, nc=3), seed=2)
            x, m = rand([1, 3, 6, 6], 0), binary([1, 3, 6, 6], 1)
            assert model(x, m).data.tobytes() == bb(x).data.tobytes()

    def test_positions_out_of_range(self):
        bb = Backbone.init(BackboneConfig(C=4, N1=3), 0)
        with pytest.raises(ValueError):
            install(bb, SptConfig(positions=(4,), nc=3))
        with pytest.raises(ValueError):
            install(bb, SptConfig(positions=(0,), nc=3))

    def test_empty_positions_rejected(self):
        bb = Backbone.init(BackboneConfig(C=4, N1=3), 0)
        with pytest.raises(ValueError):
            install(bb, SptConfig(positions=(), nc=3))

    def test_mask_channel_mismatch(self):
        _, model = tiny(nc=3)
        with pytest.raises(ValueError):
            model(rand([1, 3, 6, 6], 0), binary([1, 4, 6, 6], 1))

    def test_only_configured_positions_get_units(self):
        _, model = tiny(positions=(2,))
        units = {n.split(".")[1] for n in model.params if n.startswith("spt.unit")}
        assert units == {"unit2"}

    def test_backbone_tensors_shared(self):
        bb, model = tiny()
        assert model.params["backbone.enc.weight"] is bb.params["backbone.enc.weight"]

    def test_param_count(self):
        _, model = tiny(n1=2, C=4, nc=3)
        f = lambda ci, co: ci * 4 * 9 + 4 + 4 * co * 9 + co  # noqa: E731
        unit = f(4 + 3, 4) + f(4, 4) + f(4, 4)
        assert model.spt_param_count() == f(3 + 3, 4) + 2 * unit

    def test_prior_causality(self):
        _, model = tiny(n1=3)
        x, m = rand([1, 3, 6, 6], 0), binary([1, 3, 6, 6], 1)
        seen = {}

        def run(bump_at):
            state = {"prior": model.encode_prior(x, m)}
            outs = {}
            F = model.backbone.enc(x)
            for i in range(1, 4):
                F = model.backbone.building_block(i, F)
                if i == bump_at:
                    state["prior"] = Tensor(state["prior"].data + 0.1)
                F_spt, state["prior"] = model.units[i](F, state["prior"], m)
                outs[i] = F_spt.data
                F = inject(F, F_spt, 1.0)
            return outs

        base = run(None)
        seen = run(2)
        assert np.array_equal(base[1], seen[1])
        assert not np.array_equal(base[2], seen[2]) and not np.array_equal(base[3], seen[3])

    def test_gradient_partition(self):
        bb, model = tiny()
        model.params.set_trainable("backbone.*", False)
        x, m = rand([1, 3, 6, 6], 0), binary([1, 3, 6, 6], 1)
        backward(weighted_sum(model(x, m), np.ones((1, 3, 12, 12))))
        for name, t in model.params.items():
            if name.startswith("spt."):
                assert t.grad is not None and np.abs(t.grad).sum() > 0, name
            else:
                assert t.grad is None, name

    def test_frozen_backbone_bitwise_over_steps(self):
        bb, model = tiny()
        model.params.set_trainable("backbone.*", False)
        before = bb.params.snapshot()
        spt_before = {n: t.data.copy() for n, t in model.params.items() if n.startswith("spt.")}
        st_ = AdamState()
        for s in range(5):
            model.params.zero_grad()
            x, m = rand([1, 3, 6, 6], s), binary([1, 3, 6, 6], s)
            backward(weighted_sum(model(x, m), np.ones((1, 3, 12, 12))))
            adam_step(model.params, st_, 1e-3, TrainConfig())
        assert all(bb.params[n].data.tobytes() == v.tobytes() for n, v in before.items())
        assert all(model.params[n].data.tobytes() != v.tobytes() for n, v in spt_before.items())

    def test_end_to_end_gradcheck(self):
        bb, model = tiny(n1=2, C=4, nc=2)
        x, m = rand([1, 3, 8, 8], 0, True), binary([1, 2, 8, 8], 1)
        w = np.random.default_rng(2).standard_normal((1, 3, 16, 16))
        params = [t for n, t in model.params.items() if n.startswith("spt.")]
        assert grad_check(lambda t: weighted_sum(model(t, m), w), x, wrt=params) <= 1e-4


def test_config_roundtrip():
    cfg = SptConfig(variant="spt-cat", alpha=1.5, positions=(3, 1), nc=128, grid=16)
    assert cfg.positions == (1, 3)
    assert SptConfig.from_dict(cfg.to_dict()) == cfg


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000), st.sampled_from(VARIANTS))
def test_alpha_zero_property(seed, variant):
    bb, model = tiny(variant=variant, alpha=0.0)
    x, m = rand([1, 3, 5, 7], seed), binary([1, 3, 5, 7], seed + 1)
    assert model(x, m).data.tobytes() == bb(x).data.tobytes()

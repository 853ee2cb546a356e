import numpy as np
import pytest

from sptune.backbone import Backbone, BackboneConfig, backbone_specs
from sptune.tensor import Tensor, grad_check, weighted_sum


def image(shape, seed=0, dtype=np.float32):
    return Tensor(np.random.default_rng(seed).random(shape), dtype=dtype)


@pytest.mark.parametrize("r", [2, 3, 4])
def test_sr_output_shape(r):
    bb = Backbone.init(BackboneConfig(task="sr", r=r, C=8, N1=2), seed=0)
    assert bb(image([1, 3, 16, 16])).shape == (1, 3, 16 * r, 16 * r)


def test_denoise_output_shape():
    bb = Backbone.init(BackboneConfig(task="denoise", r=1, C=8, N1=2), seed=0)
    assert bb(image([2, 3, 20, 12])).shape == (2, 3, 20, 12)


def test_denoise_zero_head_is_identity():
    bb = Backbone.init(BackboneConfig(task="denoise", r=1, C=8, N1=2), seed=1)
    bb.params["backbone.rec.out.weight"].data[...] = 0
    x = image([1, 3, 9, 9], 3)
    assert bb(x).data.tobytes() == x.data.tobytes()


def test_wrong_input_channels():
    bb = Backbone.init(BackboneConfig(C=4, N1=1), seed=0)
    with pytest.raises(ValueError):
        bb(image([1, 1, 8, 8]))


@pytest.mark.parametrize("kwargs", [dict(task="deblur"), dict(task="denoise", r=2), dict(r=5), dict(N1=0)])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        BackboneConfig(**kwargs)


def test_config_roundtrip():
    cfg = BackboneConfig(task="denoise", r=1, C=12, N1=4)
    assert BackboneConfig.from_dict(cfg.to_dict()) == cfg


def test_identity_hooks_bitwise_neutral():
    bb = Backbone.init(BackboneConfig(C=8, N1=3), seed=2)
    x = image([1, 3, 8, 8], 4)
    plain = bb(x).data
    hooked = bb(x, {i: (lambda _, F: F) for i in (1, 2, 3)}).data
    assert plain.tobytes() == hooked.tobytes()


def test_hooks_called_once_in_order():
    bb = Backbone.init(BackboneConfig(C=4, N1=4), seed=0)
    calls = []
    bb(image([1, 3, 6, 6]), [lambda i, F: calls.append(i) or F] * 4)
    assert calls == [1, 2, 3, 4]


def test_partial_hooks():
    bb = Backbone.init(BackboneConfig(C=4, N1=3), seed=0)
    calls = []
    bb(image([1, 3, 6, 6]), {2: lambda i, F: calls.append(i) or F})
    assert calls == [2]


def test_hook_shape_checked():
    bb = Backbone.init(BackboneConfig(C=4, N1=2), seed=0)
    with pytest.raises(ValueError):
        bb(image([1, 3, 6, 6]), {1: lambda i, F: Tensor(np.zeros((1, 3, 6, 6)))})


def test_hook_position_range():
    bb = Backbone.init(BackboneConfig(C=4, N1=2), seed=0)
    with pytest.raises(ValueError):
        bb(image([1, 3, 6, 6]), {3: lambda i, F: F})


def test_param_names():
    spec = backbone_specs(BackboneConfig(task="sr", r=2, C=4, N1=2))
    assert list(spec) == ["backbone.enc", "backbone.block1.conv1", "backbone.block1.conv2", "backbone.block2.conv1",
                          "backbone.block2.conv2", "backbone.rec.pre", "backbone.rec.post"]
    assert spec["backbone.rec.pre"] == (4, 16, 3)


@pytest.mark.parametrize("task,r", [("sr", 2), ("denoise", 1)])
def test_end_to_end_gradcheck(task, r):
    bb = Backbone.init(BackboneConfig(task=task, r=r, C=3, N1=2), seed=5, dtype=np.float64)
    x = image([1, 3, 4, 4], 6, np.float64)
    out_shape = bb(x).shape
    w = np.random.default_rng(7).standard_normal(out_shape)
    params = [t for _, t in bb.params.items()]
    assert grad_check(lambda t: weighted_sum(bb(t), w), x, wrt=params) <= 1e-4

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drag import tensor as T
from drag.backbone import (
    BackboneConfig,
    backbone_classifier_head,
    backbone_forward,
    global_channel_mean,
    init_backbone,
    init_head,
)
from drag.errors import ContractError, DimensionError
from drag.tensor import Tensor


def make(config=None, seed=0):
    config = config or BackboneConfig()
    rng = np.random.default_rng(seed)
    params = init_backbone(config, rng)
    params.update(init_head(config, rng))
    return config, params


def test_default_shape():
    config, params = make()
    out = backbone_forward(np.random.default_rng(0).uniform(size=(1, 3, 32, 32)), params, config)
    assert out.shape == (1, 32, 8, 8)
    assert config.channels == 32 and config.side == 8


def test_zero_image_zero_bias_gives_zero_features():
    config, params = make()
    assert not backbone_forward(np.zeros((2, 3, 32, 32)), params, config).data.any()


def test_batch_independence():
    config, params = make()
    x = np.random.default_rng(1).uniform(size=(2, 3, 32, 32))
    both = backbone_forward(x, params, config).data
    for i in range(2):
        np.testing.assert_array_equal(both[i], backbone_forward(x[i : i + 1], params, config).data[0])


def test_wrong_input_shape():
    config, params = make()
    with pytest.raises(DimensionError):
        backbone_forward(np.zeros((1, 3, 16, 16)), params, config)
    with pytest.raises(DimensionError):
        backbone_forward(np.zeros((3, 32, 32)), params, config)


def test_config_validation():
    with pytest.raises(ContractError):
        BackboneConfig(stage_channels=(4, 8), downsample=(True,))


@settings(max_examples=25, deadline=None)
@given(
    st.integers(5, 20),
    st.lists(st.tuples(st.integers(1, 4), st.booleans()), min_size=1, max_size=3),
    st.sampled_from([1, 3]),
)
def test_output_shape_is_function_of_config(side, stages, k):
    config = BackboneConfig(
        input_size=side, stage_channels=tuple(c for c, _ in stages), downsample=tuple(d for _, d in stages), kernel_size=k
    )
    # oracle: conv output formula stage by stage
    s = side
    for _, down in stages:
        s = (s + 2 * (k // 2) - k) // (2 if down else 1) + 1
    _, params = make(config)
    out = backbone_forward(np.ones((1, 3, side, side)), params, config)
    assert out.shape == (1, stages[-1][0], s, s) == (1, config.channels, config.side, config.side)


def test_global_mean_single_channel_is_identity():
    F = np.random.default_rng(0).normal(size=(2, 1, 4, 4))
    np.testing.assert_array_equal(global_channel_mean(Tensor(F)).data, F)


def test_global_mean_cancels():
    m = np.random.default_rng(1).normal(size=(4, 4))
    F = np.stack([m, -m])[None]
    assert np.abs(global_channel_mean(Tensor(F)).data).max() == 0.0


def test_global_mean_loop_oracle():
    F = np.random.default_rng(2).normal(size=(2, 3, 4, 5))
    expected = np.zeros((2, 1, 4, 5))
    for b in range(2):
        for x in range(4):
            for y in range(5):
                expected[b, 0, x, y] = sum(F[b, c, x, y] for c in range(3)) / 3
    np.testing.assert_allclose(global_channel_mean(Tensor(F)).data, expected, atol=1e-15)


def test_zero_head_is_uniform():
    config, params = make()
    params["head.weight"].data[:] = 0
    F = backbone_forward(np.random.default_rng(0).uniform(size=(3, 3, 32, 32)), params, config)
    assert np.array_equal(backbone_classifier_head(F, params).data, np.full((3, 2), 0.5))


def test_head_rows_sum_to_one():
    config, params = make()
    F = backbone_forward(np.random.default_rng(0).uniform(size=(5, 3, 32, 32)), params, config)
    p = backbone_classifier_head(F, params).data
    assert np.all(np.abs(p.sum(axis=1) - 1) <= 1e-12)


def test_backbone_and_head_pass_grad_check():
    config = BackboneConfig(input_size=8, stage_channels=(3, 4), downsample=(True, False))
    _, params = make(config, seed=3)
    for k, v in params.items():
        if k.endswith("bias"):
            v.data = np.random.default_rng(4).normal(0, 0.1, v.shape)
    x = np.random.default_rng(5).uniform(size=(2, 3, 8, 8))

    def f():
        p = backbone_classifier_head(backbone_forward(x, params, config), params)
        return T.reduce_sum(T.log(p[:, 1]))

    assert T.grad_check(f, params) < 1e-4


def test_translation_moves_peak():
    # a single-stage identity-like filter: shifting the impulse by one stride unit
    # (2 input pixels) moves the channel peak by one output pixel
    config = BackboneConfig(input_channels=1, input_size=16, stage_channels=(1,), downsample=(True,))
    params = {
        "backbone.conv0.weight": Tensor(np.pad(np.ones((1, 1, 1, 1)), ((0, 0), (0, 0), (1, 1), (1, 1)))),
        "backbone.conv0.bias": Tensor(np.zeros(1)),
    }
    def peak(img):
        F = backbone_forward(img[None, None], params, config).data[0, 0]
        return np.unravel_index(np.argmax(F), F.shape)

    img = np.zeros((16, 16))
    img[6, 4] = 1.0
    moved = np.zeros((16, 16))
    moved[8, 6] = 1.0
    r0, c0 = peak(img)
    r1, c1 = peak(moved)
    assert (r1 - r0, c1 - c0) == (1, 1)

"""Architecture behaviour: blocks, fusion gating, shapes, initialization."""

import math

import numpy as np
import pytest

from petctseg.autograd import Tensor, gradcheck, tsum
from petctseg.errors import ConfigurationError, UsageError
from petctseg.losses import total_loss
from petctseg.model import (
    ModelConfig, channel_attention, encoder_forward, fuse_features,
    fusion_weights, init_weights, cast_params, model_forward, param_shapes,
    parameter_count, residual_block, spatial_attention_block,
)

TINY = ModelConfig(levels=2, base_channels=4, input_dims=(8, 8, 8))


def _rand_input(rng, dims=(8, 8, 8)):
    return Tensor(rng.normal(size=(1,) + dims).astype(np.float32))


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ConfigurationError):
        ModelConfig(levels=3, input_dims=(6, 8, 8))  # 6 not divisible by 4
    with pytest.raises(ConfigurationError):
        ModelConfig(modalities=())
    with pytest.raises(ConfigurationError):
        ModelConfig(modalities=("CT", "MRI"))
    with pytest.raises(ConfigurationError):
        ModelConfig(attention_kernels=(3, 4, 1))
    with pytest.raises(ConfigurationError):
        ModelConfig(fusion_alpha=-1.0)
    cfg = ModelConfig(fusion_alpha=math.inf, input_dims=(16, 16, 16))
    assert cfg.dual


def test_paper_configuration_parameter_count_is_frozen():
    # guards against silent architecture drift
    assert parameter_count(ModelConfig()) == 49_108_112


def test_level_channel_doubling_shapes():
    shapes = param_shapes(TINY)
    assert shapes["ct.enc0.res1.conv1"] == (4, 1, 3, 3, 3)
    assert shapes["ct.enc1.res1.conv1"] == (8, 4, 3, 3, 3)
    assert shapes["ct.enc0.att.k"] == (4, 4, 5, 5, 5)
    assert shapes["ct.enc0.att.ca.fc1"] == (8, 4)
    assert shapes["head.conv"] == (1, 4, 1, 1, 1)
    # decoder consumes upsampled bottleneck (16) plus fused skip (8)
    assert shapes["dec0.res1.conv1"] == (4, 24, 3, 3, 3)


# ---------------------------------------------------------------------------
# residual block
# ---------------------------------------------------------------------------

def test_residual_block_zero_kernels_pass_input_through_relu():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(3, 4, 4, 4)).astype(np.float32))
    params = {
        "blk.conv1": Tensor(np.zeros((3, 3, 3, 3, 3), dtype=np.float32)),
        "blk.conv2": Tensor(np.zeros((3, 3, 3, 3, 3), dtype=np.float32)),
    }
    out = residual_block(x, params, "blk")
    assert np.array_equal(out.data, np.maximum(x.data, 0.0))


def test_residual_block_preserves_spatial_dims():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(2, 6, 6, 6)).astype(np.float32))
    params = {
        "blk.conv1": Tensor(rng.normal(size=(5, 2, 3, 3, 3)).astype(np.float32)),
        "blk.conv2": Tensor(rng.normal(size=(5, 5, 3, 3, 3)).astype(np.float32)),
        "blk.skip": Tensor(rng.normal(size=(5, 2, 1, 1, 1)).astype(np.float32)),
    }
    out = residual_block(x, params, "blk")
    assert out.shape == (5, 6, 6, 6)


@pytest.mark.parametrize("seed", range(3))
def test_residual_block_gradcheck(seed):
    rng = np.random.default_rng(seed)
    params = {
        "blk.conv1": Tensor(rng.normal(0, 0.5, (2, 2, 3, 3, 3))),
        "blk.conv2": Tensor(rng.normal(0, 0.5, (2, 2, 3, 3, 3))),
    }
    x = Tensor(rng.normal(size=(2, 4, 4, 4)))
    w = Tensor(rng.normal(size=(2, 4, 4, 4)))
    err = gradcheck(lambda t: tsum(residual_block(t, params, "blk") * w), x)
    assert err < 1e-3


# ---------------------------------------------------------------------------
# channel attention
# ---------------------------------------------------------------------------

def test_channel_attention_zero_weights_halve_features():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(3, 4, 4, 4)).astype(np.float32))
    params = {
        "ca.fc1": Tensor(np.zeros((6, 3), dtype=np.float32)),
        "ca.fc2": Tensor(np.zeros((3, 6), dtype=np.float32)),
    }
    out = channel_attention(x, params, "ca")
    assert np.allclose(out.data, 0.5 * x.data, atol=1e-7)


def test_channel_attention_gate_in_open_interval():
    rng = np.random.default_rng(3)
    from petctseg.autograd import sigmoid
    from petctseg import ops
    x = Tensor(rng.normal(size=(4, 3, 3, 3)).astype(np.float32))
    params = {
        "ca.fc1": Tensor(rng.normal(0, 0.5, (8, 4)).astype(np.float32)),
        "ca.fc2": Tensor(rng.normal(0, 0.5, (4, 8)).astype(np.float32)),
    }
    pooled = ops.global_avg_pool(x)
    hidden = ops.relu(ops.fully_connected(pooled, params["ca.fc1"]))
    gate = sigmoid(ops.fully_connected(hidden, params["ca.fc2"])).data
    assert np.all(gate > 0.0) and np.all(gate < 1.0)


@pytest.mark.parametrize("seed", range(3))
def test_channel_attention_gradcheck(seed):
    rng = np.random.default_rng(seed)
    params = {
        "ca.fc1": Tensor(rng.normal(0, 0.5, (4, 2))),
        "ca.fc2": Tensor(rng.normal(0, 0.5, (2, 4))),
    }
    x = Tensor(rng.normal(size=(2, 3, 3, 3)))
    err = gradcheck(lambda t: tsum(channel_attention(t, params, "ca") ** 2.0), x)
    assert err < 1e-3


# ---------------------------------------------------------------------------
# spatial attention block
# ---------------------------------------------------------------------------

def _attention_params(rng, channels, kernels=(3, 5, 1), scale=0.5):
    kq, kk, kv = kernels
    return {
        "att.ca.fc1": Tensor(rng.normal(0, scale, (2 * channels, channels)).astype(np.float32)),
        "att.ca.fc2": Tensor(rng.normal(0, scale, (channels, 2 * channels)).astype(np.float32)),
        "att.q": Tensor(rng.normal(0, scale, (channels, channels, kq, kq, kq)).astype(np.float32)),
        "att.k": Tensor(rng.normal(0, scale, (channels, channels, kk, kk, kk)).astype(np.float32)),
        "att.v": Tensor(rng.normal(0, scale, (channels, channels, kv, kv, kv)).astype(np.float32)),
    }


def test_attention_map_sums_to_one():
    rng = np.random.default_rng(4)
    params = _attention_params(rng, 3)
    x = Tensor(rng.normal(size=(3, 4, 4, 4)).astype(np.float32))
    maps = []
    spatial_attention_block(x, params, "att", TINY, collect=maps)
    assert len(maps) == 1
    assert abs(float(maps[0].sum(dtype=np.float64)) - 1.0) < 1e-6
    assert np.all(maps[0] >= 0.0)


def test_attention_uniform_votes_reduce_to_value_plus_input():
    # zero q/k kernels make the vote map uniform; with the voxel-count
    # rescale the weights are then exactly 1 and the block returns
    # value-map + input
    rng = np.random.default_rng(5)
    c = 3
    scaled_cfg = ModelConfig(levels=2, base_channels=4, input_dims=(8, 8, 8),
                             scale_attention=True)
    params = _attention_params(rng, c)
    params["att.q"] = Tensor(np.zeros((c, c, 3, 3, 3), dtype=np.float32))
    x = Tensor(rng.normal(size=(c, 4, 4, 4)).astype(np.float32))

    from petctseg import ops
    out = spatial_attention_block(x, params, "att", scaled_cfg)
    gated = channel_attention(x, params, "att.ca")
    v = ops.relu(ops.conv3d(gated, params["att.v"], padding=0))
    assert np.allclose(out.data, v.data + x.data, atol=1e-5)


def test_attention_output_keeps_input_shape():
    rng = np.random.default_rng(6)
    params = _attention_params(rng, 2)
    x = Tensor(rng.normal(size=(2, 6, 6, 6)).astype(np.float32))
    assert spatial_attention_block(x, params, "att", TINY).shape == (2, 6, 6, 6)


def test_attention_peak_follows_dominant_voxel():
    # center-dominant positive kernels and one dominant positive voxel: the
    # learned weight map must peak exactly on that voxel
    rng = np.random.default_rng(7)
    c = 2
    params = _attention_params(rng, c)
    for name, k in (("att.q", 3), ("att.k", 5), ("att.v", 1)):
        kern = 0.01 * np.abs(rng.normal(size=(c, c, k, k, k))).astype(np.float32)
        kern[:, :, k // 2, k // 2, k // 2] = 1.0
        params[name] = Tensor(kern)
    base = rng.uniform(0.05, 0.1, size=(c, 5, 5, 5)).astype(np.float32)
    base[:, 3, 1, 2] = 50.0
    maps = []
    spatial_attention_block(Tensor(base), params, "att", TINY, collect=maps)
    assert np.unravel_index(np.argmax(maps[0]), (5, 5, 5)) == (3, 1, 2)


def test_attention_scaled_variant_differs():
    rng = np.random.default_rng(8)
    raw_cfg = ModelConfig(levels=2, base_channels=4, input_dims=(8, 8, 8),
                          scale_attention=False)
    scaled_cfg = ModelConfig(levels=2, base_channels=4, input_dims=(8, 8, 8),
                             scale_attention=True)
    params = _attention_params(rng, 2)
    x = Tensor(rng.normal(size=(2, 4, 4, 4)).astype(np.float32))
    raw = spatial_attention_block(x, params, "att", raw_cfg)
    scaled = spatial_attention_block(x, params, "att", scaled_cfg)
    assert not np.allclose(scaled.data, raw.data)
    # the collected (pre-scale) softmax map is identical either way
    m_raw, m_scaled = [], []
    spatial_attention_block(x, params, "att", raw_cfg, collect=m_raw)
    spatial_attention_block(x, params, "att", scaled_cfg, collect=m_scaled)
    assert m_raw[0].tobytes() == m_scaled[0].tobytes()


@pytest.mark.parametrize("seed", range(3))
def test_attention_block_gradcheck(seed):
    rng = np.random.default_rng(seed)
    params = {k: Tensor(v.data.astype(np.float64))
              for k, v in _attention_params(rng, 2).items()}
    x = Tensor(rng.normal(size=(2, 3, 3, 3)))
    err = gradcheck(
        lambda t: tsum(spatial_attention_block(t, params, "att", TINY) ** 2.0), x)
    assert err < 1e-3


# ---------------------------------------------------------------------------
# encoder / fusion / full model
# ---------------------------------------------------------------------------

def test_encoder_level_shapes():
    rng = np.random.default_rng(9)
    params = init_weights(TINY, 0)
    feats = encoder_forward(_rand_input(rng), params, "ct", TINY)
    assert [f.shape for f in feats] == [(4, 8, 8, 8), (8, 4, 4, 4)]


def test_encoder_deterministic():
    rng = np.random.default_rng(10)
    params = init_weights(TINY, 1)
    x = _rand_input(rng)
    a = encoder_forward(x, params, "ct", TINY)
    b = encoder_forward(x, params, "ct", TINY)
    for fa, fb in zip(a, b):
        assert fa.data.tobytes() == fb.data.tobytes()


def test_fusion_weight_endpoints():
    assert fusion_weights(0.0) == (1.0, 0.0)
    assert fusion_weights(math.inf) == (0.0, 1.0)
    assert fusion_weights(1.0) == (0.5, 0.5)


def test_fuse_alpha_one_is_plain_concat():
    rng = np.random.default_rng(11)
    a = Tensor(rng.normal(size=(3, 2, 2, 2)).astype(np.float32))
    b = Tensor(rng.normal(size=(3, 2, 2, 2)).astype(np.float32))
    fused = fuse_features(a, b, 1.0)
    assert fused.data.tobytes() == np.concatenate([a.data, b.data]).tobytes()


def test_fuse_alpha_zero_zeroes_pet_half():
    rng = np.random.default_rng(12)
    a = Tensor(rng.normal(size=(2, 2, 2, 2)).astype(np.float32))
    b = Tensor(rng.normal(size=(2, 2, 2, 2)).astype(np.float32))
    fused = fuse_features(a, b, 0.0)
    assert np.array_equal(fused.data[:2], 2.0 * a.data)
    assert fused.data[2:].tobytes() == np.zeros((2, 2, 2, 2), dtype=np.float32).tobytes()
    fused_inf = fuse_features(a, b, math.inf)
    assert fused_inf.data[:2].tobytes() == np.zeros((2, 2, 2, 2), dtype=np.float32).tobytes()
    assert np.array_equal(fused_inf.data[2:], 2.0 * b.data)


def test_model_forward_shape_and_range():
    rng = np.random.default_rng(13)
    params = init_weights(TINY, 2)
    out = model_forward(params, TINY, ct=_rand_input(rng), pet=_rand_input(rng))
    assert out.shape == (1, 8, 8, 8)
    # sigmoid maps to (0,1); float32 may round saturated logits to the ends
    assert np.all(out.data >= 0.0) and np.all(out.data <= 1.0)
    assert np.all(np.isfinite(out.data))


def test_model_single_modality_modes():
    rng = np.random.default_rng(14)
    for modality in ("CT", "PET"):
        cfg = ModelConfig(levels=2, base_channels=4, input_dims=(8, 8, 8),
                          modalities=(modality,))
        params = init_weights(cfg, 3)
        kwargs = {modality.lower(): _rand_input(rng)}
        out = model_forward(params, cfg, **kwargs)
        assert out.shape == (1, 8, 8, 8)
    with pytest.raises(UsageError):
        model_forward(init_weights(TINY, 0), TINY, ct=_rand_input(rng))


def test_model_output_invariant_to_encoder_order():
    rng = np.random.default_rng(15)
    params = init_weights(TINY, 4)
    ct, pet = _rand_input(rng), _rand_input(rng)
    a = model_forward(params, TINY, ct=ct, pet=pet,
                      encoder_order=("ct", "pet"))
    b = model_forward(params, TINY, ct=ct, pet=pet,
                      encoder_order=("pet", "ct"))
    assert a.data.tobytes() == b.data.tobytes()


def test_alpha_zero_gates_pet_out_bit_exactly():
    rng = np.random.default_rng(16)
    cfg = ModelConfig(levels=2, base_channels=4, input_dims=(8, 8, 8),
                      fusion_alpha=0.0)
    params = init_weights(cfg, 5)
    ct = _rand_input(rng)
    real_pet = _rand_input(rng)
    zero_pet = Tensor(np.zeros((1, 8, 8, 8), dtype=np.float32))
    a = model_forward(params, cfg, ct=ct, pet=real_pet)
    b = model_forward(params, cfg, ct=ct, pet=zero_pet)
    assert a.data.tobytes() == b.data.tobytes()


def test_alpha_inf_gates_ct_out_bit_exactly():
    rng = np.random.default_rng(17)
    cfg = ModelConfig(levels=2, base_channels=4, input_dims=(8, 8, 8),
                      fusion_alpha=math.inf)
    params = init_weights(cfg, 6)
    pet = _rand_input(rng)
    a = model_forward(params, cfg, ct=_rand_input(rng), pet=pet)
    b = model_forward(params, cfg, ct=Tensor(np.zeros((1, 8, 8, 8), dtype=np.float32)),
                      pet=pet)
    assert a.data.tobytes() == b.data.tobytes()


def test_attention_maps_collected_each_pass():
    rng = np.random.default_rng(18)
    params = init_weights(TINY, 7)
    maps = []
    model_forward(params, TINY, ct=_rand_input(rng), pet=_rand_input(rng),
                  collect_attention=maps)
    assert len(maps) == 4  # two branches x two levels
    for m in maps:
        assert abs(float(m.sum(dtype=np.float64)) - 1.0) < 1e-6


def test_forward_backward_stay_finite():
    # finite inputs must never produce NaN/Inf activations or gradients
    from petctseg.autograd import Tape, backward
    rng = np.random.default_rng(20)
    params = init_weights(TINY, 9)
    ct = Tensor(rng.normal(size=(1, 8, 8, 8)).astype(np.float32))
    pet = Tensor(rng.normal(size=(1, 8, 8, 8)).astype(np.float32))
    label = Tensor((rng.random((1, 8, 8, 8)) > 0.8).astype(np.float32))
    with Tape() as tape:
        pred = model_forward(params, TINY, ct=ct, pet=pet)
        loss = total_loss(pred, label)
    assert np.isfinite(loss.item())
    backward(loss, tape)
    for name, t in params.items():
        assert t.grad is not None and np.all(np.isfinite(t.grad)), name


def test_model_gradcheck_through_total_loss():
    rng = np.random.default_rng(19)
    params = cast_params(init_weights(TINY, 8), np.float64)
    pet = Tensor(rng.normal(size=(1, 8, 8, 8)))
    label = Tensor((rng.random((1, 8, 8, 8)) > 0.8).astype(np.float64))

    def fn(t):
        pred = model_forward(params, TINY, ct=t, pet=pet)
        return total_loss(pred, label)

    assert gradcheck(fn, Tensor(rng.normal(size=(1, 8, 8, 8)))) < 1e-3


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def test_init_weights_deterministic_and_complete():
    a = init_weights(TINY, 42)
    b = init_weights(TINY, 42)
    assert sorted(a) == sorted(param_shapes(TINY))
    for name in a:
        assert a[name].data.tobytes() == b[name].data.tobytes()
        assert a[name].requires_grad
    c = init_weights(TINY, 43)
    assert any(a[n].data.tobytes() != c[n].data.tobytes() for n in a)


def test_init_weights_he_statistics():
    cfg = ModelConfig(levels=2, base_channels=8, input_dims=(8, 8, 8))
    params = init_weights(cfg, 0)
    shapes = param_shapes(cfg)
    checked = 0
    for name, t in params.items():
        shape = shapes[name]
        n = t.data.size
        if n < 512:
            continue
        if len(shape) == 5:
            fan_in = shape[1] * shape[2] ** 3
        else:
            fan_in = shape[1]
        expected = math.sqrt(2.0 / fan_in)
        assert abs(t.data.std() - expected) < 0.15 * expected, name
        assert abs(t.data.mean()) < 3.0 * expected / math.sqrt(n), name
        checked += 1
    assert checked >= 5

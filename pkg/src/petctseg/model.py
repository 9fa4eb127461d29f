"""Dual-branch volumetric segmentation network.

Two weight-independent U-Net-style encoders (one per modality) feed a single
shared decoder. Every encoder level applies two residual blocks followed by a
multi-scale spatial attention block; channels double per level while spatial
extents halve via max pooling. Encoder features from the two branches are
fused at every skip level (and the bottleneck) by weighted channel
concatenation, and the decoder upsamples trilinearly, concatenates the fused
skip and refines with two more residual blocks, halving channels per level.
A 1x1x1 convolution plus sigmoid produces the per-voxel tumor probability.

All convolutions are bias-free. Parameters live in a flat ``{name: Tensor}``
map with stable, sorted names, which keeps initialization, checkpointing and
the optimizer trivial.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .autograd import (Tensor, concat, mul, reshape, scale, softmax_flat,
                       tsum, zeros)
from .errors import ConfigurationError, DimensionError, UsageError

MODALITY_BRANCHES = ("ct", "pet")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``attention_kernels`` holds the kernel sizes of the query, key and value
    convolutions inside the spatial attention block. ``fusion_alpha`` is the
    PET:CT fusion weight ratio; 0 keeps only CT, ``inf`` only PET, 1 the
    plain 1:1 concatenation. It is ignored unless both modalities are
    enabled. ``scale_attention`` rescales the softmax attention map by the
    voxel count so its mean gain is 1; off (the default) keeps the raw
    softmax weights, which leaves the residual path intact and avoids the
    single-voxel activation spikes the rescaled form produces on freshly
    initialized networks.
    """

    levels: int = 5
    base_channels: int = 16
    input_dims: tuple = (144, 144, 144)
    attention_kernels: tuple = (3, 5, 1)
    fusion_alpha: float = 1.0
    modalities: tuple = ("CT", "PET")
    scale_attention: bool = False
    norm_eps: float = 1e-5

    def __post_init__(self):
        if self.levels < 1:
            raise ConfigurationError("levels must be >= 1")
        if self.base_channels < 1:
            raise ConfigurationError("base_channels must be >= 1")
        mods = tuple(m.upper() for m in self.modalities)
        object.__setattr__(self, "modalities", mods)
        if not mods or any(m not in ("CT", "PET") for m in mods):
            raise ConfigurationError(
                f"modalities must be a nonempty subset of ('CT','PET'), got {mods}")
        if len(set(mods)) != len(mods):
            raise ConfigurationError("duplicate modalities")
        dims = tuple(int(d) for d in self.input_dims)
        object.__setattr__(self, "input_dims", dims)
        step = 2 ** (self.levels - 1)
        if any(d % step != 0 or d < step for d in dims):
            raise ConfigurationError(
                f"input dims {dims} must be divisible by 2^(levels-1) = {step}")
        ks = tuple(int(k) for k in self.attention_kernels)
        object.__setattr__(self, "attention_kernels", ks)
        if len(ks) != 3 or any(k % 2 != 1 or k < 1 for k in ks):
            raise ConfigurationError("attention kernel sizes must be three odd ints")
        if not (self.fusion_alpha >= 0.0 or math.isinf(self.fusion_alpha)):
            raise ConfigurationError("fusion_alpha must be >= 0 (inf allowed)")

    @property
    def dual(self):
        return len(self.modalities) == 2

    @property
    def branches(self):
        return tuple(m.lower() for m in self.modalities)

    def level_channels(self, level):
        return self.base_channels * (2 ** level)


def fusion_weights(alpha):
    """(w_ct, w_pet) from the PET:CT ratio alpha = w_pet / w_ct."""
    if math.isinf(alpha):
        return 0.0, 1.0
    return 1.0 / (1.0 + alpha), alpha / (1.0 + alpha)


# ---------------------------------------------------------------------------
# parameter bookkeeping
# ---------------------------------------------------------------------------

def _conv_shape(c_out, c_in, k):
    return (c_out, c_in, k, k, k)


def _block_shapes(prefix, c_in, c_out):
    shapes = {
        f"{prefix}.conv1": _conv_shape(c_out, c_in, 3),
        f"{prefix}.conv2": _conv_shape(c_out, c_out, 3),
    }
    if c_in != c_out:
        shapes[f"{prefix}.skip"] = _conv_shape(c_out, c_in, 1)
    return shapes


def _attention_shapes(prefix, channels, kernels):
    kq, kk, kv = kernels
    return {
        f"{prefix}.ca.fc1": (2 * channels, channels),
        f"{prefix}.ca.fc2": (channels, 2 * channels),
        f"{prefix}.q": _conv_shape(channels, channels, kq),
        f"{prefix}.k": _conv_shape(channels, channels, kk),
        f"{prefix}.v": _conv_shape(channels, channels, kv),
    }


def param_shapes(config):
    """Full name -> shape map for a configuration, in sorted name order."""
    shapes = {}
    for branch in config.branches:
        c_in = 1
        for level in range(config.levels):
            c = config.level_channels(level)
            shapes.update(_block_shapes(f"{branch}.enc{level}.res1", c_in, c))
            shapes.update(_block_shapes(f"{branch}.enc{level}.res2", c, c))
            shapes.update(_attention_shapes(f"{branch}.enc{level}.att", c,
                                            config.attention_kernels))
            c_in = c

    width = 2 if config.dual else 1
    prev = width * config.level_channels(config.levels - 1)
    for level in range(config.levels - 2, -1, -1):
        c = config.level_channels(level)
        cat = prev + width * c
        shapes.update(_block_shapes(f"dec{level}.res1", cat, c))
        shapes.update(_block_shapes(f"dec{level}.res2", c, c))
        prev = c
    shapes["head.conv"] = _conv_shape(1, config.base_channels, 1)
    return dict(sorted(shapes.items()))


def parameter_count(config):
    return sum(int(np.prod(s)) for s in param_shapes(config).values())


def init_weights(config, seed):
    """He-normal initialization: std = sqrt(2 / fan_in), no biases.

    fan_in is C_in * k^3 for convolutions and the input width for the fully
    connected layers. Deterministic for a given seed: parameters are drawn
    in sorted name order from one generator.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if len(shape) == 5:
            fan_in = shape[1] * shape[2] * shape[3] * shape[4]
        else:
            fan_in = shape[1]
        std = math.sqrt(2.0 / fan_in)
        values = rng.normal(0.0, std, size=shape).astype(np.float32)
        params[name] = Tensor(values, requires_grad=True)
    return params


def cast_params(params, dtype):
    """Same parameter map with values cast (used for float64 grad checks)."""
    return {name: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)
            for name, t in params.items()}


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def residual_block(x, params, prefix, eps=1e-5):
    """conv3-norm-relu-conv3-norm plus a (possibly projected) shortcut."""
    h = ops.conv3d(x, params[f"{prefix}.conv1"], stride=1, padding=1)
    h = ops.instance_norm(h, eps)
    h = ops.relu(h)
    h = ops.conv3d(h, params[f"{prefix}.conv2"], stride=1, padding=1)
    h = ops.instance_norm(h, eps)
    skip_kernel = params.get(f"{prefix}.skip")
    shortcut = x if skip_kernel is None else ops.conv3d(x, skip_kernel)
    return ops.relu(h + shortcut)


def channel_attention(x, params, prefix):
    """Gate channels with sigmoid(FC_C(relu(FC_2C(GAP(x))))) per channel."""
    pooled = ops.global_avg_pool(x)
    hidden = ops.relu(ops.fully_connected(pooled, params[f"{prefix}.fc1"]))
    gate = ops.sigmoid(ops.fully_connected(hidden, params[f"{prefix}.fc2"]))
    return mul(x, reshape(gate, (x.shape[0], 1, 1, 1)))


def spatial_attention_block(x, params, prefix, config, collect=None):
    """Multi-scale spatial attention with a residual connection.

    Channel attention first picks out informative channels; three parallel
    convolutions (small/large/unit kernels) then produce query, key and value
    maps. The per-voxel channel contraction of query and key, softmaxed over
    all voxels jointly, forms a spatial weight map that modulates the value
    map; the block input is added back so the output keeps the input shape
    and stacks stably. ``collect`` receives each raw softmax map (before the
    voxel-count rescale) for inspection.
    """
    gated = channel_attention(x, params, f"{prefix}.ca")
    kq, kk, kv = config.attention_kernels
    q = ops.relu(ops.conv3d(gated, params[f"{prefix}.q"], padding=(kq - 1) // 2))
    k = ops.relu(ops.conv3d(gated, params[f"{prefix}.k"], padding=(kk - 1) // 2))
    v = ops.relu(ops.conv3d(gated, params[f"{prefix}.v"], padding=(kv - 1) // 2))
    votes = tsum(mul(q, k), axis=0)              # [D,H,W]
    weights = softmax_flat(votes)
    if collect is not None:
        collect.append(np.array(weights.data, copy=True))
    if config.scale_attention:
        weights = scale(weights, float(votes.data.size))
    return mul(v, weights) + x


def encoder_forward(x, params, branch, config, collect=None):
    """Per-level features (pre-pool) of one modality branch.

    Level l has base*2^l channels at input_dims/2^l extents; the last entry
    is the bottleneck.
    """
    features = []
    h = x
    for level in range(config.levels):
        h = residual_block(h, params, f"{branch}.enc{level}.res1",
                           config.norm_eps)
        h = residual_block(h, params, f"{branch}.enc{level}.res2",
                           config.norm_eps)
        h = spatial_attention_block(h, params, f"{branch}.enc{level}.att",
                                    config, collect)
        features.append(h)
        if level < config.levels - 1:
            h = ops.max_pool3d(h, 2)
    return features


def fuse_features(f_ct, f_pet, alpha):
    """Weighted channel concatenation of the two branches.

    The halves are scaled by 2*w so alpha = 1 reproduces the plain 1:1
    concatenation bit for bit. A zero weight replaces its half with a
    detached all-zero tensor, so the gated branch is truly absent from both
    the values and the gradient flow.
    """
    if f_ct.shape != f_pet.shape:
        raise DimensionError(
            f"fusion features disagree: {f_ct.shape} vs {f_pet.shape}")
    w_ct, w_pet = fusion_weights(alpha)

    def part(feat, w):
        if w == 0.0:
            return zeros(feat.shape, dtype=feat.dtype)
        if 2.0 * w == 1.0:
            return feat
        return scale(feat, 2.0 * w)

    return concat([part(f_ct, w_ct), part(f_pet, w_pet)], axis=0)


def model_forward(params, config, ct=None, pet=None, collect_attention=None,
                  encoder_order=None):
    """Forward pass to a [1,D,H,W] probability map.

    ``ct``/``pet`` are [1,D,H,W] tensors for the enabled modalities. In dual
    mode both encoders run with unshared weights and their features fuse at
    every skip level; in single-modality mode the lone branch feeds the
    decoder directly. ``encoder_order`` only reorders branch execution (the
    output is invariant to it); ``collect_attention`` gathers every softmax
    attention map seen during the pass.
    """
    inputs = {"ct": ct, "pet": pet}
    for branch in config.branches:
        if inputs[branch] is None:
            raise UsageError(f"config enables {branch.upper()} but no "
                             f"{branch} tensor was provided")

    features = {}
    order = tuple(encoder_order) if encoder_order else config.branches
    if sorted(order) != sorted(config.branches):
        raise UsageError(f"encoder_order {order} must permute {config.branches}")
    for branch in order:
        features[branch] = encoder_forward(inputs[branch], params, branch,
                                           config, collect_attention)

    if config.dual:
        fused = [fuse_features(features["ct"][l], features["pet"][l],
                               config.fusion_alpha)
                 for l in range(config.levels)]
    else:
        fused = features[config.branches[0]]

    h = fused[-1]
    for level in range(config.levels - 2, -1, -1):
        h = ops.upsample_trilinear(h, 2)
        h = concat([h, fused[level]], axis=0)
        h = residual_block(h, params, f"dec{level}.res1", config.norm_eps)
        h = residual_block(h, params, f"dec{level}.res2", config.norm_eps)
    logits = ops.conv3d(h, params["head.conv"])
    return ops.sigmoid(logits)


def predict_case(params, config, case):
    """Probability map for a preprocessed case, as a [D,H,W] float array."""
    kwargs = {}
    if "CT" in config.modalities:
        kwargs["ct"] = Tensor(case.ct.values[None])
    if "PET" in config.modalities:
        kwargs["pet"] = Tensor(case.pet.values[None])
    return model_forward(params, config, **kwargs).data[0]

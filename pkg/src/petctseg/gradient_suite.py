"""Gradient verification suite covering every differentiable operation.

Each case pairs a scalar-valued function with the tensor whose gradient gets
checked against central finite differences (in float64). The suite also runs
a complete two-level dual-branch model through the combined training loss,
alternating which modality input is probed per seed and spot-checking the
head kernel, so the composed backward path is exercised end to end.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .autograd import (Tensor, clamp, div, gradcheck, log, pow_const,
                       softmax_flat, tsum)
from .losses import dice_loss, focal_loss, total_loss
from .model import ModelConfig, cast_params, init_weights, model_forward
from .runtime import tune_allocator

MODEL_CONFIG = ModelConfig(levels=2, base_channels=4, input_dims=(8, 8, 8))


def op_cases(seed):
    """(name, fn, probe tensor) triples for every differentiable operation."""
    rng = np.random.default_rng(seed)

    x4 = Tensor(rng.uniform(-1, 1, size=(2, 4, 4, 4)))
    kernel = Tensor(rng.uniform(-1, 1, size=(3, 2, 3, 3, 3)))
    kernel5 = Tensor(rng.uniform(-0.5, 0.5, size=(2, 2, 5, 5, 5)))
    w_conv = Tensor(rng.normal(size=(3, 4, 4, 4)))
    w_same = Tensor(rng.normal(size=(2, 4, 4, 4)))
    w_up = Tensor(rng.normal(size=(2, 8, 8, 8)))
    vec = Tensor(rng.normal(size=(5,)))
    weights = Tensor(rng.normal(size=(3, 5)))
    w_vec = Tensor(rng.normal(size=(3,)))
    pos = Tensor(rng.uniform(0.2, 1.5, size=(3, 4)))
    pair = Tensor(rng.uniform(0.5, 1.5, size=(3, 4)))
    probs = Tensor(rng.uniform(0.05, 0.95, size=(3, 3, 3)))
    labels = Tensor((rng.random((3, 3, 3)) > 0.6).astype(np.float64))
    # spread-out integers keep pooling argmaxes stable under the probe step
    pool_in = Tensor(rng.permutation(np.arange(128, dtype=np.float64))
                     .reshape(2, 4, 4, 4))
    shifted = rng.normal(size=(4, 4))
    shifted[np.abs(shifted) < 0.1] += 0.25  # keep clear of the relu kink

    return [
        ("conv3d/input",
         lambda t: tsum(ops.conv3d(t, kernel, stride=1, padding=1) * w_conv), x4),
        ("conv3d/kernel",
         lambda t: tsum(ops.conv3d(x4, t, stride=1, padding=1) * w_conv), kernel),
        ("conv3d/kernel5/input",
         lambda t: tsum(ops.conv3d(t, kernel5, stride=1, padding=2) * w_same), x4),
        ("max_pool3d",
         lambda t: tsum(ops.max_pool3d(t, 2) ** 2.0), pool_in),
        ("upsample_trilinear",
         lambda t: tsum(ops.upsample_trilinear(t, 2) * w_up), x4),
        ("instance_norm",
         lambda t: tsum(ops.instance_norm(t) * w_same), x4),
        ("relu",
         lambda t: tsum(ops.relu(t) ** 2.0), Tensor(shifted)),
        ("sigmoid",
         lambda t: tsum(ops.activation("sigmoid", t) ** 2.0), Tensor(shifted)),
        ("softmax_flat",
         lambda t: tsum(softmax_flat(t) * pos), pair),
        ("fully_connected/input",
         lambda t: tsum(ops.fully_connected(t, weights) * w_vec), vec),
        ("fully_connected/weights",
         lambda t: tsum(ops.fully_connected(vec, t) * w_vec), weights),
        ("global_avg_pool",
         lambda t: tsum(ops.global_avg_pool(t) ** 2.0), x4),
        ("mul_div_log_pow",
         lambda t: tsum(div(log(t) * pair, pow_const(t, 1.5))), pos),
        ("clamp",
         lambda t: tsum(clamp(t, 0.1, 1.4) * pair), pos),
        ("dice_loss", lambda t: dice_loss(t, labels), probs),
        ("focal_loss", lambda t: focal_loss(t, labels), probs),
        ("total_loss", lambda t: total_loss(t, labels), probs),
    ]


MODEL_CASE_STEP = 1e-4


def model_case(seed):
    """Combined loss through the tiny dual-branch model.

    Probes the CT input on even seeds, the PET input on odd ones, and always
    the 1x1x1 head kernel (cheap, covers the kernel-gradient route through
    the whole stack). These cases run at a finer probe step
    (:data:`MODEL_CASE_STEP`): a deep relu/max-pool composition has kinks
    that a coarse central difference occasionally straddles, which reads as
    a false failure even though the analytic gradient is exact.
    """
    params = cast_params(init_weights(MODEL_CONFIG, seed), np.float64)
    rng = np.random.default_rng(seed + 77_000)
    dims = (1,) + MODEL_CONFIG.input_dims
    ct = Tensor(rng.normal(size=dims))
    pet = Tensor(rng.normal(size=dims))
    label = Tensor((rng.random(dims) > 0.8).astype(np.float64))

    def through_input(t):
        kwargs = {"ct": t, "pet": pet} if seed % 2 == 0 else {"ct": ct, "pet": t}
        return total_loss(model_forward(params, MODEL_CONFIG, **kwargs), label)

    def through_head(t):
        patched = dict(params)
        patched["head.conv"] = t
        return total_loss(model_forward(patched, MODEL_CONFIG, ct=ct, pet=pet),
                          label)

    branch = "ct" if seed % 2 == 0 else "pet"
    probe = ct if seed % 2 == 0 else pet
    return [
        (f"model/input_{branch}", through_input, probe),
        ("model/head_kernel", through_head, params["head.conv"]),
    ]


def _run_seed(seed, include_model, step):
    rows = [(name, gradcheck(fn, probe, step=step))
            for name, fn, probe in op_cases(seed)]
    if include_model:
        rows += [(name, gradcheck(fn, probe, step=MODEL_CASE_STEP))
                 for name, fn, probe in model_case(seed)]
    return rows


def run_gradient_suite(seeds=range(10), include_model=True, step=1e-3,
                       jobs=1):
    """Max relative gradient error per case name across the seeds.

    Seeds are independent graphs, so ``jobs`` > 1 fans them out over a
    thread pool (numpy releases the GIL for the heavy lifting).
    """
    tune_allocator()
    worst = {}
    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            per_seed = list(pool.map(
                lambda s: _run_seed(s, include_model, step), seeds))
    else:
        per_seed = [_run_seed(s, include_model, step) for s in seeds]
    for rows in per_seed:
        for name, err in rows:
            worst[name] = max(worst.get(name, 0.0), err)
    return sorted(worst.items())

"""Tour of the tensor engine: forward ops, backward pass, gradient checking.

Run:  python demos/demo_autograd.py
"""

import numpy as np

from petctseg.autograd import Tape, Tensor, backward, gradcheck, tsum
from petctseg import ops

rng = np.random.default_rng(0)

# A tiny feature map [channels, depth, height, width] and a conv kernel.
x = Tensor(rng.normal(size=(2, 6, 6, 6)).astype(np.float32), requires_grad=True)
kernel = Tensor(rng.normal(0, 0.3, size=(4, 2, 3, 3, 3)).astype(np.float32),
                requires_grad=True)

with Tape() as tape:
    h = ops.conv3d(x, kernel, stride=1, padding=1)
    h = ops.instance_norm(h)
    h = ops.relu(h)
    h = ops.max_pool3d(h, 2)
    loss = tsum(h * h)

print(f"forward: conv -> norm -> relu -> pool, loss = {loss.item():.4f}")
print(f"tape recorded {len(tape)} operations")

backward(loss, tape)
print(f"grad wrt input:  shape {x.grad.shape}, |g| mean {np.abs(x.grad).mean():.4f}")
print(f"grad wrt kernel: shape {kernel.grad.shape}, |g| mean {np.abs(kernel.grad).mean():.4f}")

# The checker compares those gradients against central finite differences.
err = gradcheck(lambda t: tsum(ops.relu(ops.conv3d(t, kernel, 1, 1)) ** 2.0),
                Tensor(rng.normal(size=(2, 4, 4, 4))))
print(f"\ngradcheck on a conv/relu composite: max relative error {err:.2e}")

# Upsampling preserves constants exactly thanks to corner alignment.
const = Tensor(np.full((1, 3, 3, 3), 2.5, dtype=np.float32))
up = ops.upsample_trilinear(const, 2)
print(f"\nconstant 2.5 upsampled x2 stays constant: "
      f"{bool(np.all(up.data == 2.5))}, shape {up.shape}")

# softmax over all voxels jointly: one spatial distribution.
from petctseg.autograd import softmax_flat
sm = softmax_flat(Tensor(rng.normal(size=(4, 4, 4))))
print(f"softmax_flat sums to {float(sm.data.sum()):.9f} over {sm.size} voxels")

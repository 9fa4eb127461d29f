"""Training losses and the evaluation metrics with their conventions.

Run:  python demos/demo_losses_metrics.py
"""

import numpy as np

from petctseg.autograd import Tensor
from petctseg.losses import dice_loss, focal_loss, total_loss
from petctseg.metrics import assd, evaluate_case, extract_surface, hausdorff
from petctseg.volume import Volume

# A 12^3 ball as ground truth, and a prediction that is slightly off.
dims = (12, 12, 12)
zz, yy, xx = np.meshgrid(*(np.arange(n) for n in dims), indexing="ij")
truth = (((zz - 6) ** 2 + (yy - 6) ** 2 + (xx - 6) ** 2) <= 9).astype(np.float32)
shifted = np.roll(truth, 1, axis=2)
probs = np.clip(0.85 * shifted + 0.05, 0.0, 1.0).astype(np.float32)

pred_t = Tensor(probs)
true_t = Tensor(truth)
print(f"dice loss  {float(dice_loss(pred_t, true_t).data):.4f}")
print(f"focal loss {float(focal_loss(pred_t, true_t).data):.4f}")
print(f"total      {float(total_loss(pred_t, true_t).data):.4f} (= sum)")

# Metrics work on binary masks with physical spacing.
spacing = (1.0, 1.0, 1.0)
print(f"\nsurface of the truth ball: {int(extract_surface(truth).sum())} voxels "
      f"of {int(truth.sum())}")
print(f"hausdorff(pred, truth) = {hausdorff(shifted, truth, spacing):.3f} mm")
print(f"assd(pred, truth)      = {assd(shifted, truth, spacing):.3f} mm")

report = evaluate_case(Volume(probs, spacing, "MASK"),
                       Volume(truth, spacing, "MASK"), case_id="demo")
print("\nfull report:")
for name in ("dsc", "hd_mm", "assd_mm", "voe", "rvd", "recall", "precision"):
    print(f"  {name:10s} {getattr(report, name):.4f}")

# Undefined distances are flagged, not faked.
empty = np.zeros(dims, dtype=np.float32)
report = evaluate_case(Volume(empty, spacing, "MASK"),
                       Volume(truth, spacing, "MASK"), case_id="empty")
print(f"\nall-background prediction: DSC {report.dsc:.1f}, "
      f"flags {list(report.undefined)}")

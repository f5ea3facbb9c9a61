"""
Which loss terms matter
=======================

Runs the loss ablation on a small synthetic suite and prints one row per
variant. The baseline is a frozen random 1x1 projection with attention
masks only.
"""
from tvgseg.config import toy_config
from tvgseg.harness import ablate, synthetic_suite

eps, concepts = synthetic_suite(episodes_per_class=10, seed=1)
reports = ablate(list(eps), toy_config(), concepts)

print(f"{'variant':12s} {'mIoU':>6s} {'FB-IoU':>7s}")
for name, rep in reports.items():
    print(f"{name:12s} {100 * rep.miou:6.1f} {100 * rep.fb_iou:7.1f}")

# per-class breakdown for the full model
for cls, v in reports["vvea+tvea"].per_class.items():
    print(f"  {cls:8s} {100 * v:.1f}")

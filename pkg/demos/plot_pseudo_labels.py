"""
Text-guided pseudo-labels on a synthetic episode
================================================

A toy vision-language pair scores the query image against "a photo of a
leaf" and "a photo of a non leaf". The gradient of the leaf score gives a
heatmap, and Otsu's threshold turns the heatmap into a binary mask.
"""
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from tvgseg.backbone import ToyVL, vl_encode_image
from tvgseg.harness import iou, synthetic_suite
from tvgseg.tvea import build_prompts, generate_cam, make_pseudo_label

out = Path(__file__).parent / "out"
out.mkdir(exist_ok=True)

# One leaf episode. The concept table tells the toy model what a leaf looks like.
eps, concepts = synthetic_suite(episodes_per_class=4)
ep = [e for e in eps if e.fg_class == "leaf"][0]
vl = ToyVL(seed=0, input_size=64, patch=8, concepts=concepts)

prompts = build_prompts(ep.fg_class, ep.all_classes)
print(prompts.class_order)

cam = generate_cam(vl_encode_image(ep.query, vl), prompts, vl, out_size=ep.query.shape[1:])
print("class scores", np.round(cam.class_scores, 3))

# Otsu picks the cut; a fixed 0.5 cut is shown for comparison
otsu = make_pseudo_label(cam, "otsu")
fixed = make_pseudo_label(cam, "fixed", fixed_tau=0.5)
print(f"otsu threshold {otsu.source.threshold_used:.3f}")
print(f"IoU otsu {iou(otsu.mask, ep.query_gt):.3f}  fixed {iou(fixed.mask, ep.query_gt):.3f}")

fig, axes = plt.subplots(1, 4, figsize=(10, 2.8))
panels = [(ep.query.transpose(1, 2, 0), "query"), (cam.heatmap, "heatmap"),
          (otsu.mask, "otsu mask"), (ep.query_gt, "ground truth")]
for ax, (img, title) in zip(axes, panels):
    ax.imshow(img, cmap=None if img.ndim == 3 else "viridis")
    ax.set_title(title)
    ax.axis("off")
fig.tight_layout()
fig.savefig(out / "pseudo_labels.png", dpi=110)

"""The multi-level hard-region loss, fitted on free logits.

No network is trained. Every voxel gets its own logit and Adam drives the
full loss (Dice on the whole airway plus one Dice term per pooled level of
the hard region) down. The printout shows each term shrinking.

Run with ``python demos/02_hard_region_loss.py``.
"""

from bronchusnet.ahr import build_pyramid, demo_report, hard_region, optimize_logits_demo
from bronchusnet.synthgen import SynthParams, generate_case
from bronchusnet.volgrid import main_trachea, otsu_threshold

H = 3
params = SynthParams(depth=2, shape=(16, 16, 16), root_radius=1.8, root_length_frac=0.35, min_radius=1.0)
case = generate_case(0, params)
_, air = otsu_threshold(case.ct)
trachea = main_trachea(air)

# The hard region and its pooled copies, one per decoder level.
pyramid = build_pyramid(hard_region(case.gt_mask, trachea), H)
print("hard region voxels:", int(pyramid.base.sum()))
for h, level in enumerate(pyramid.levels, start=1):
    print(f"  level {h}: shape {level.shape}, {int(level.sum())} voxels")

for steps in (1, 20, 100, 500):
    trajectory, prob = optimize_logits_demo(case.gt_mask, trachea, H, steps, lr=1.0)
    report = demo_report(case.gt_mask, trachea, prob, H)
    terms = " ".join(f"{t:.4f}" for t in report.hr_terms)
    print(f"after {steps:3d} steps: dice {trajectory[-1]:.4f}, loss {report.total:.4f}, hr terms {terms}")

"""Thresholding a synthetic chest volume and isolating the trachea.

Run with ``python demos/01_threshold_and_trachea.py``.
"""

import numpy as np

from bronchusnet.metrics import dice_score
from bronchusnet.synthgen import generate_case
from bronchusnet.volgrid import connected_components, main_trachea, otsu_threshold

# A synthetic case is a 64^3 CT-like volume with a branching airway tree.
case = generate_case(0)
print("volume", case.ct.shape, case.ct.dtype, "range", case.ct.min().round(1), case.ct.max().round(1))
print("airway voxels in the ground truth:", int(case.gt_mask.sum()))

# Otsu picks the threshold that best separates air from tissue.
thr, air = otsu_threshold(case.ct)
print(f"Otsu threshold {thr:.1f}, {int(air.sum())} voxels below it")

# Thin distal branches blur into the tissue, so the threshold misses them.
print(f"dice of the raw threshold against the truth: {dice_score(air, case.gt_mask):.3f}")

# The trachea is the component with the most voxels in the top slab.
labels, sizes = connected_components(air)
print("component sizes:", sizes[:5], "..." if len(sizes) > 5 else "")
trachea = main_trachea(air)
print("trachea voxels:", int(trachea.sum()))

# The part of the truth the trachea does not cover is where supervision matters.
missed = case.gt_mask.astype(bool) & ~trachea.astype(bool)
print(f"airway voxels outside the trachea: {int(missed.sum())} ({missed.sum() / case.gt_mask.sum():.0%})")
zs = np.flatnonzero(trachea.any(axis=(0, 1)))
print(f"trachea spans z = {zs.min()}..{zs.max()} (top of the volume is high z)")

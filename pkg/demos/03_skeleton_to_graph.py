"""From an airway mask to a labelled segment graph.

Run with ``python demos/03_skeleton_to_graph.py``.
"""

import numpy as np

from bronchusnet.brongraph import augment, build_graph
from bronchusnet.pipeline import GRAPH_MIN_SEGMENT, label_segments
from bronchusnet.skeleton import DIVISION, END, classify_points, extract_segments, skeletonize
from bronchusnet.synthgen import generate_case

case = generate_case(0)

# Thinning keeps a one-voxel-wide centreline with the topology of the mask.
skel = skeletonize(case.gt_mask)
print("mask voxels", int(case.gt_mask.sum()), "-> skeleton voxels", int(skel.sum()))

# Each skeleton voxel is an end, a chain point or a division point.
cls = classify_points(skel)
on = skel.astype(bool)
print("end points:", int((cls.kind[on] == END).sum()), " division points:", int((cls.kind[on] == DIVISION).sum()))

# Cutting at division points gives branch segments; short spurs are dropped.
segs = extract_segments(skel, cls, min_length=GRAPH_MIN_SEGMENT)
print("segments:", segs.n_segments, " lengths:", sorted(len(s) for s in segs.segments))
print("adjacent pairs:", len(segs.adjacency))

# Segments are matched to the generating branches to obtain class labels.
labels = label_segments(segs, case.branches)
print("labels:", labels.tolist())

# Node features: a normalised point-cloud descriptor and sampled voxel features.
graph = build_graph(segs, case.descriptor_feats, labels)
print("point feature", graph.point_feat.shape, " voxel feature", graph.voxel_feat.shape, " pv input", graph.features("pv").shape)

# Augmentation perturbs the point features only.
aug = augment(graph, 1)
print(f"mean point-feature change after augmentation: {np.abs(aug.point_feat - graph.point_feat).mean():.4f}")

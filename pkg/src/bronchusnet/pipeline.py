"""From a synthetic case to a labelled graph, and from there to datasets."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .brongraph import DEFAULT_K, BronchialGraph, build_graph
from .skeleton import SegmentSet, extract_segments, skeletonize
from .synthgen import Branch, SynthParams, SyntheticCase, case_seeds, generate_case, split_indices

# Spur filter used when turning cases into training graphs: drops two-voxel
# forks that thinning occasionally leaves at thick tips.
GRAPH_MIN_SEGMENT = 3


def _axis_distance(pts: np.ndarray, b: Branch) -> np.ndarray:
    seg = b.end - b.start
    t = np.clip(((pts - b.start) @ seg) / float(seg @ seg), 0.0, 1.0)
    return np.linalg.norm(pts - (b.start + t[:, None] * seg), axis=1)


def label_segments(segments: SegmentSet, branches: Sequence[Branch]) -> np.ndarray:
    """Class of each segment: majority vote of its voxels' nearest branch axis."""
    labels = np.empty(segments.n_segments, dtype=np.int64)
    for i, chain in enumerate(segments.segments):
        pts = np.asarray(chain, dtype=np.float64)
        dist = np.stack([_axis_distance(pts, b) for b in branches], axis=1)
        votes = np.bincount(dist.argmin(axis=1), minlength=len(branches))
        labels[i] = branches[int(np.argmax(votes))].class_id
    return labels


def case_graph(case: SyntheticCase, K: int = DEFAULT_K, mask=None, min_length: int = GRAPH_MIN_SEGMENT) -> BronchialGraph:
    """Skeletonize ``mask`` (the ground-truth mask by default) and build the labelled graph."""
    mask = case.gt_mask if mask is None else mask
    segments = extract_segments(skeletonize(mask), min_length=min_length)
    graph = build_graph(segments, case.descriptor_feats, label_segments(segments, case.branches), K=K)
    graph.meta["seed"] = case.seed
    return graph


def benchmark_graphs(
    n_cases: int = 100,
    seed: int = 0,
    train_fraction: float = 0.7,
    params: SynthParams | None = None,
    K: int = DEFAULT_K,
) -> tuple[list[BronchialGraph], list[BronchialGraph]]:
    """Train and test graphs of a synthetic dataset.

    Same cases and split as ``generate_dataset``, but each case is reduced to
    its graph straight away so the volumes never pile up in memory.
    """
    train_ids, test_ids = split_indices(n_cases, seed, train_fraction)
    graphs = [case_graph(generate_case(s, params), K=K) for s in case_seeds(n_cases, seed)]
    return [graphs[i] for i in train_ids], [graphs[i] for i in test_ids]

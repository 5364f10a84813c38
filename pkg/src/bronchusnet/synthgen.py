"""Deterministic synthetic bronchial trees with ground truth at every stage.

A case is a recursive tree of capsule-shaped tubes grown downward (toward
low z) from the centre of the top face. Each branch has a generation, a
radius that decays geometrically, and a class id equal to its heap index in
the tree (root 0, children of ``i`` at ``k*i + 1 .. k*i + k``), capped at the
"other" class. Children split in alternating orthogonal planes, so every
heap position occupies a predictable region and direction.

CT intensities mimic Hounsfield units. Lumen voxels of the root tube read
as air; thinner tubes lose contrast with radius (a partial-volume stand-in),
so a global threshold finds the trachea but not the small bronchi. Both
noise models are uniform in ``mean +/- spread``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .volgrid import load_volume, save_volume

N_CLASSES = 19
OTHER_CLASS = N_CLASSES - 1
N_CHANNELS = 24


@dataclass(frozen=True)
class SynthParams:
    depth: int = 4
    branching: int = 2
    radius_decay: float = 0.7
    root_radius: float = 3.0
    min_radius: float = 1.0
    shape: tuple[int, int, int] = (64, 64, 64)
    root_length_frac: float = 0.3
    length_decay: float = 0.8
    branch_angle: float = 35.0
    angle_jitter: float = 6.0
    length_jitter: float = 0.1
    air_hu: float = -900.0
    air_spread: float = 30.0
    tissue_hu: float = -100.0
    tissue_spread: float = 50.0
    contrast_power: float = 4.0

    def validate(self) -> None:
        if not 1 <= self.depth <= 6:
            raise ValueError(f"depth must be in [1, 6], got {self.depth}")
        if self.branching < 1:
            raise ValueError("branching must be >= 1")
        if len(self.shape) != 3 or min(self.shape) < 8:
            raise ValueError(f"shape must be three dims >= 8, got {self.shape}")
        if not 0 < self.radius_decay <= 1 or self.root_radius <= 0:
            raise ValueError("radii must be positive with decay in (0, 1]")


@dataclass
class Branch:
    index: int
    parent: int
    generation: int
    heap: int
    class_id: int
    start: np.ndarray
    end: np.ndarray
    radius: float
    truncated: bool = False
    centerline: np.ndarray = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "parent": self.parent,
            "generation": self.generation,
            "heap": self.heap,
            "class_id": self.class_id,
            "start": [float(v) for v in self.start],
            "end": [float(v) for v in self.end],
            "radius": float(self.radius),
            "truncated": bool(self.truncated),
            "centerline": self.centerline.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Branch":
        return cls(
            index=int(d["index"]),
            parent=int(d["parent"]),
            generation=int(d["generation"]),
            heap=int(d["heap"]),
            class_id=int(d["class_id"]),
            start=np.asarray(d["start"], dtype=np.float64),
            end=np.asarray(d["end"], dtype=np.float64),
            radius=float(d["radius"]),
            truncated=bool(d["truncated"]),
            centerline=np.asarray(d["centerline"], dtype=np.int64).reshape(-1, 3),
        )


@dataclass
class SyntheticCase:
    seed: int
    params: SynthParams
    ct: np.ndarray
    gt_mask: np.ndarray
    generation_map: np.ndarray
    branches: list[Branch]
    descriptor_feats: np.ndarray

    @property
    def gt_centerline(self) -> list[np.ndarray]:
        return [b.centerline for b in self.branches]


def class_for_heap(heap: int) -> int:
    return heap if heap < OTHER_CLASS else OTHER_CLASS


def _rotate(v: np.ndarray, axis: np.ndarray, angle: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    return (
        v * math.cos(angle)
        + np.cross(axis, v) * math.sin(angle)
        + axis * np.dot(axis, v) * (1 - math.cos(angle))
    )


def _perpendicular_frame(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ref = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = ref - d * np.dot(ref, d)
    u /= np.linalg.norm(u)
    return u, np.cross(d, u)


def grow_tree(params: SynthParams, rng: np.random.Generator) -> list[Branch]:
    """Branch geometry only: start/end points, radii, generations, classes."""
    nx, ny, nz = params.shape
    root_start = np.array([(nx - 1) / 2.0, (ny - 1) / 2.0, nz - 1.0])
    root_len = params.root_length_frac * nz
    branches: list[Branch] = []
    # (parent index, heap, generation, start, direction, length, azimuth offset)
    stack = [(-1, 0, 0, root_start, np.array([0.0, 0.0, -1.0]), root_len, 0.0)]
    while stack:
        parent, heap, gen, start, direction, length, phase = stack.pop(0)
        radius = max(params.root_radius * params.radius_decay**gen, params.min_radius)
        end = start + direction * length
        idx = len(branches)
        branches.append(
            Branch(idx, parent, gen, heap, class_for_heap(heap), start, end, radius)
        )
        if gen + 1 >= params.depth:
            continue
        u, w = _perpendicular_frame(direction)
        k = params.branching
        for c in range(k):
            jitter = rng.uniform(-1.0, 1.0, size=3)
            az = phase + 2.0 * math.pi * c / k + math.radians(params.angle_jitter) * jitter[0]
            tilt = math.radians(params.branch_angle + params.angle_jitter * jitter[1]) if k > 1 else 0.0
            axis = -math.sin(az) * u + math.cos(az) * w
            child_dir = _rotate(direction, axis, tilt)
            child_dir /= np.linalg.norm(child_dir)
            child_len = length * params.length_decay * (1.0 + params.length_jitter * jitter[2])
            stack.append((idx, k * heap + 1 + c, gen + 1, end, child_dir, child_len, phase + math.pi / 2))
    return branches


def _rasterize_line(start: np.ndarray, end: np.ndarray, shape) -> tuple[np.ndarray, bool]:
    n = max(2, int(math.ceil(np.linalg.norm(end - start) * 4)) + 1)
    pts = np.rint(start[None] + np.linspace(0.0, 1.0, n)[:, None] * (end - start)[None]).astype(np.int64)
    keep = np.concatenate([[True], np.any(np.diff(pts, axis=0) != 0, axis=1)])
    pts = pts[keep]
    inside = np.all((pts >= 0) & (pts < np.asarray(shape)), axis=1)
    truncated = not inside.all()
    # Keep only the leading run inside the volume.
    if truncated:
        first_out = int(np.argmin(inside)) if inside[0] else 0
        pts = pts[:first_out]
    return pts, truncated


def _capsule_distance(grid: np.ndarray, start: np.ndarray, end: np.ndarray):
    """Distance from every grid point to segment [start, end] and the axial parameter."""
    seg = end - start
    rel = grid - start
    t = np.clip((rel @ seg) / float(seg @ seg), 0.0, 1.0)
    closest = start + t[..., None] * seg
    return np.linalg.norm(grid - closest, axis=-1), t


def _descriptor_channels(radius_n, tangent, dist_n, inside) -> np.ndarray:
    """Expand five base descriptors (radius, tangent xyz, path distance) to 24 channels."""
    base = np.concatenate([radius_n[..., None], tangent, dist_n[..., None]], axis=-1)
    tx, ty, tz = tangent[..., 0], tangent[..., 1], tangent[..., 2]
    extra = np.stack(
        [
            tx * ty, ty * tz, tx * tz,
            radius_n * dist_n, radius_n**2, dist_n**2,
            tx**2, ty**2, tz**2,
        ],
        axis=-1,
    )
    feats = np.concatenate([base, np.sin(np.pi * base), np.cos(np.pi * base), extra], axis=-1)
    return feats * inside[..., None]


def generate_case(seed: int, params: SynthParams | None = None) -> SyntheticCase:
    params = params or SynthParams()
    params.validate()
    rng = np.random.default_rng(seed)
    shape = tuple(int(s) for s in params.shape)
    branches = grow_tree(params, rng)

    grid = np.stack(np.meshgrid(*(np.arange(s, dtype=np.float64) for s in shape), indexing="ij"), axis=-1)
    gen_map = np.full(shape, -1, dtype=np.int32)
    best = np.full(shape, np.inf)
    radius_map = np.zeros(shape)
    tangent_map = np.zeros(shape + (3,))
    path_map = np.zeros(shape)

    path_start = {}
    for b in branches:
        path_start[b.index] = 0.0 if b.parent < 0 else (
            path_start[b.parent] + float(np.linalg.norm(branches[b.parent].end - branches[b.parent].start))
        )
        # Bounding box of the capsule keeps the distance computation local.
        lo = np.maximum(np.floor(np.minimum(b.start, b.end) - b.radius - 1), 0).astype(int)
        hi = np.minimum(np.ceil(np.maximum(b.start, b.end) + b.radius + 2), shape).astype(int)
        if np.any(hi <= lo):
            b.centerline, b.truncated = np.zeros((0, 3), dtype=np.int64), True
            continue
        sl = tuple(slice(a, z) for a, z in zip(lo, hi))
        dist, t = _capsule_distance(grid[sl], b.start, b.end)
        inside = dist <= b.radius
        sub_gen = gen_map[sl]
        claim = inside & ((sub_gen < 0) | (b.generation < sub_gen))
        sub_gen[claim] = b.generation
        # Descriptors come from the branch whose axis is nearest.
        near = inside & (dist < best[sl])
        best[sl][near] = dist[near]
        length = float(np.linalg.norm(b.end - b.start))
        radius_map[sl][near] = b.radius
        tangent_map[sl][near] = (b.end - b.start) / length
        path_map[sl][near] = path_start[b.index] + t[near] * length
        b.centerline, b.truncated = _rasterize_line(b.start, b.end, shape)

    gt_mask = (gen_map >= 0).astype(np.uint8)

    ct = rng.uniform(params.tissue_hu - params.tissue_spread, params.tissue_hu + params.tissue_spread, size=shape)
    lumen_noise = rng.uniform(-params.air_spread, params.air_spread, size=shape)
    for b in branches:
        contrast = min(1.0, (b.radius / params.root_radius) ** params.contrast_power)
        level = params.tissue_hu + (params.air_hu - params.tissue_hu) * contrast
        sel = (gen_map == b.generation)
        ct[sel] = level + lumen_noise[sel]

    max_path = max(path_map.max(), 1.0)
    feats = _descriptor_channels(
        radius_map / params.root_radius, tangent_map, path_map / max_path, gt_mask.astype(np.float64)
    ).astype(np.float32)

    return SyntheticCase(
        seed=seed,
        params=params,
        ct=ct.astype(np.float32),
        gt_mask=gt_mask,
        generation_map=gen_map,
        branches=branches,
        descriptor_feats=feats,
    )


def case_seeds(n_cases: int, seed: int) -> list[int]:
    ss = np.random.SeedSequence(seed)
    return [int(child.generate_state(1)[0]) for child in ss.spawn(n_cases)]


def generate_dataset(
    n_cases: int,
    seed: int,
    train_fraction: float = 0.7,
    params: SynthParams | None = None,
) -> tuple[list[SyntheticCase], list[SyntheticCase]]:
    """Generate ``n_cases`` cases and split them into train and test lists."""
    train_ids, test_ids = split_indices(n_cases, seed, train_fraction)
    seeds = case_seeds(n_cases, seed)
    cases = [generate_case(s, params) for s in seeds]
    return [cases[i] for i in train_ids], [cases[i] for i in test_ids]


def split_indices(n_cases: int, seed: int, train_fraction: float = 0.7) -> tuple[list[int], list[int]]:
    if n_cases < 2:
        raise ValueError("need at least two cases to split")
    n_train = min(max(int(round(train_fraction * n_cases)), 1), n_cases - 1)
    perm = np.random.default_rng(seed).permutation(n_cases)
    return sorted(int(i) for i in perm[:n_train]), sorted(int(i) for i in perm[n_train:])


def save_case(case: SyntheticCase, directory) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    save_volume(out / "ct.json", case.ct, dtype="f32")
    save_volume(out / "mask.json", case.gt_mask, dtype="u8")
    save_volume(out / "feats.json", case.descriptor_feats, dtype="f32")
    truth = {
        "seed": case.seed,
        "params": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(case.params).items()},
        "branches": [b.to_dict() for b in case.branches],
    }
    (out / "truth.json").write_text(json.dumps(truth))
    return out


def load_case(directory) -> SyntheticCase:
    src = Path(directory)
    truth = json.loads((src / "truth.json").read_text())
    raw = dict(truth["params"])
    raw["shape"] = tuple(raw["shape"])
    params = replace(SynthParams(), **raw)
    branches = [Branch.from_dict(d) for d in truth["branches"]]
    gt_mask = load_volume(src / "mask.json")
    return SyntheticCase(
        seed=int(truth["seed"]),
        params=params,
        ct=load_volume(src / "ct.json"),
        gt_mask=gt_mask,
        generation_map=None,
        branches=branches,
        descriptor_feats=load_volume(src / "feats.json"),
    )

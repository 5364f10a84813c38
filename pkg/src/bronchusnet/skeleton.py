"""Centerline extraction and splitting of the skeleton into segments.

Thinning peels "simple" voxels (removable without changing topology under
26-connectivity of the foreground and 6-connectivity of the background)
in directional sweeps until nothing changes. Curve end points are never
removed. Peeling shortens every free tip by roughly the tube radius, so tips
are re-grown afterwards along their own direction while they stay inside
the mask.

Skeleton voxels are then typed by their 26-neighbour count: 1 end,
2 edge, 3 or more division. Runs of edge/end voxels become segments, and
touching division voxels merge into junctions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy import ndimage

from .volgrid import as_mask, connected_components

END, EDGE, DIVISION = 1, 2, 3

_KERNEL26 = np.ones((3, 3, 3), dtype=np.int32)
_KERNEL26[1, 1, 1] = 0


def _cube_tables():
    coords = [(i, j, k) for i in range(3) for j in range(3) for k in range(3)]
    adj26 = np.full((27, 26), -1, dtype=np.int64)
    adj6 = np.full((27, 6), -1, dtype=np.int64)
    for a, (i, j, k) in enumerate(coords):
        n26 = n6 = 0
        for b, (p, q, r) in enumerate(coords):
            if a == b:
                continue
            d = (abs(i - p), abs(j - q), abs(k - r))
            if max(d) == 1:
                adj26[a, n26] = b
                n26 += 1
                if sum(d) == 1:
                    adj6[a, n6] = b
                    n6 += 1
    # Members of the 18-neighbourhood (cube minus corners) and face neighbours of the centre.
    in18 = np.array([sum(abs(c - 1) for c in xyz) <= 2 for xyz in coords])
    face = np.array([sum(abs(c - 1) for c in xyz) == 1 for xyz in coords])
    return adj26, adj6, in18, face


_ADJ26, _ADJ6, _IN18, _FACE = _cube_tables()
_DIRS = np.array([(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)], dtype=np.int64)


@njit(cache=True)
def _is_simple(nb, adj26, adj6, in18, face):
    """Topological simplicity test on a flattened 3x3x3 neighbourhood (centre index 13)."""
    # Foreground in N26*: exactly one 26-component.
    seen = np.zeros(27, dtype=np.bool_)
    stack = np.empty(27, dtype=np.int64)
    n_fg_comp = 0
    for s in range(27):
        if s == 13 or nb[s] == 0 or seen[s]:
            continue
        n_fg_comp += 1
        if n_fg_comp > 1:
            return False
        top = 0
        stack[top] = s
        seen[s] = True
        while top >= 0:
            a = stack[top]
            top -= 1
            for t in range(26):
                b = adj26[a, t]
                if b < 0:
                    break
                if b != 13 and nb[b] != 0 and not seen[b]:
                    seen[b] = True
                    top += 1
                    stack[top] = b
    if n_fg_comp != 1:
        return False
    # Background in N18*: exactly one 6-component touching a face neighbour.
    seen[:] = False
    n_bg_comp = 0
    for s in range(27):
        if s == 13 or not face[s] or nb[s] != 0 or seen[s]:
            continue
        n_bg_comp += 1
        if n_bg_comp > 1:
            return False
        top = 0
        stack[top] = s
        seen[s] = True
        while top >= 0:
            a = stack[top]
            top -= 1
            for t in range(6):
                b = adj6[a, t]
                if b < 0:
                    break
                if b != 13 and in18[b] and nb[b] == 0 and not seen[b]:
                    seen[b] = True
                    top += 1
                    stack[top] = b
    return n_bg_comp == 1


@njit(cache=True)
def _corner_tip(nb):
    """True when the two foreground neighbours touch each other, i.e. the
    voxel is the tip of a staircase and removing it would unzip the curve."""
    a = -1
    b = -1
    for s in range(27):
        if s != 13 and nb[s] != 0:
            if a < 0:
                a = s
            else:
                b = s
    ax, ay, az = a // 9, (a // 3) % 3, a % 3
    bx, by, bz = b // 9, (b // 3) % 3, b % 3
    return abs(ax - bx) <= 1 and abs(ay - by) <= 1 and abs(az - bz) <= 1


@njit(cache=True)
def _thin(vol, dirs, adj26, adj6, in18, face, protect_corners):
    """Sequential directional thinning in place on a zero-padded volume."""
    nx, ny, nz = vol.shape
    nb = np.zeros(27, dtype=np.uint8)
    changed = True
    while changed:
        changed = False
        for d in range(6):
            dx, dy, dz = dirs[d, 0], dirs[d, 1], dirs[d, 2]
            # Candidates are collected before any deletion in this sweep and
            # visited from the least to the most connected, so corners peel
            # before face centres and tips do not fork.
            cand = []
            weight = []
            for x in range(1, nx - 1):
                for y in range(1, ny - 1):
                    for z in range(1, nz - 1):
                        if vol[x, y, z] != 0 and vol[x + dx, y + dy, z + dz] == 0:
                            cand.append((x, y, z))
                            weight.append(np.sum(vol[x - 1:x + 2, y - 1:y + 2, z - 1:z + 2]))
            order = np.argsort(np.array(weight), kind="mergesort")
            for ci in order:
                x, y, z = cand[ci]
                n = 0
                i = 0
                for a in range(-1, 2):
                    for b in range(-1, 2):
                        for e in range(-1, 2):
                            v = vol[x + a, y + b, z + e]
                            nb[i] = v
                            n += v
                            i += 1
                n -= 1
                if n <= 1:
                    continue
                if protect_corners and n == 2 and _corner_tip(nb):
                    continue
                if _is_simple(nb, adj26, adj6, in18, face):
                    vol[x, y, z] = 0
                    changed = True
    return vol


def neighbor_counts(skel) -> np.ndarray:
    """Number of foreground voxels in each voxel's 26-neighbourhood."""
    return ndimage.convolve(as_mask(skel).astype(np.int32), _KERNEL26, mode="constant", cval=0)


def _extend_tips(skel: np.ndarray, mask: np.ndarray, lookback: int = 4) -> None:
    counts = neighbor_counts(skel)
    shape = np.array(skel.shape)
    tips = np.argwhere((skel == 1) & (counts == 1))
    for tip in tips:
        # Walk back along the curve to estimate the tip direction.
        path = [tuple(tip)]
        prev = None
        cur = tuple(tip)
        for _ in range(lookback):
            nbrs = [
                n for n in _skeleton_neighbors(skel, cur) if n != prev
            ]
            if len(nbrs) != 1:
                break
            prev, cur = cur, nbrs[0]
            path.append(cur)
            if counts[cur] != 2:
                break
        if len(path) < 2:
            continue
        vec = np.asarray(path[0], dtype=float) - np.asarray(path[-1], dtype=float)
        step = np.rint(vec / np.abs(vec).max()).astype(int)
        cur = np.asarray(tip)
        while True:
            nxt = cur + step
            if np.any(nxt < 0) or np.any(nxt >= shape) or mask[tuple(nxt)] == 0 or skel[tuple(nxt)]:
                break
            touching = [n for n in _skeleton_neighbors(skel, tuple(nxt)) if n != tuple(cur)]
            if touching:
                break
            skel[tuple(nxt)] = 1
            cur = nxt


def _skeleton_neighbors(skel: np.ndarray, p) -> list[tuple[int, int, int]]:
    x, y, z = p
    lo = np.maximum(np.array(p) - 1, 0)
    hi = np.minimum(np.array(p) + 2, skel.shape)
    sub = skel[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    out = []
    for off in np.argwhere(sub):
        q = (int(lo[0] + off[0]), int(lo[1] + off[1]), int(lo[2] + off[2]))
        if q != (x, y, z):
            out.append(q)
    return out


def skeletonize(mask, extend_tips: bool = True) -> np.ndarray:
    """Thin a binary mask to a one-voxel-wide centerline.

    Returns a ``uint8`` skeleton mask with the same shape as ``mask``.
    """
    mask = as_mask(mask)
    if not mask.any():
        raise ValueError("cannot skeletonize an empty mask")
    padded = np.pad(mask, 1).astype(np.uint8)
    # Staircase tips are protected while the bulk is peeled, then a strict
    # pass clears the small triangles that protection leaves behind.
    _thin(padded, _DIRS, _ADJ26, _ADJ6, _IN18, _FACE, True)
    _thin(padded, _DIRS, _ADJ26, _ADJ6, _IN18, _FACE, False)
    skel = padded[1:-1, 1:-1, 1:-1].copy()
    if extend_tips:
        _extend_tips(skel, mask)
    return skel


@dataclass
class PointClasses:
    """Per-voxel point types: ``kind`` holds 0 off-skeleton, else END/EDGE/DIVISION."""

    kind: np.ndarray
    count: np.ndarray
    degenerate: list[tuple[int, int, int]] = field(default_factory=list)

    def coords(self, kind: int) -> np.ndarray:
        return np.argwhere(self.kind == kind)


def classify_points(skel) -> PointClasses:
    """Type skeleton voxels by the number ``N`` of skeleton voxels among their 26 neighbours.

    ``N == 1`` end, ``N == 2`` edge, ``N >= 3`` division. Isolated voxels
    (``N == 0``) are typed END and listed in ``degenerate``.
    """
    skel = as_mask(skel)
    count = neighbor_counts(skel) * skel
    kind = np.zeros(skel.shape, dtype=np.uint8)
    kind[(skel == 1) & (count <= 1)] = END
    kind[(skel == 1) & (count == 2)] = EDGE
    kind[(skel == 1) & (count >= 3)] = DIVISION
    degenerate = [tuple(int(v) for v in p) for p in np.argwhere((skel == 1) & (count == 0))]
    return PointClasses(kind=kind, count=count, degenerate=degenerate)


@dataclass
class SegmentSet:
    """Segments (ordered ``(n, 3)`` x/y/z voxel chains), junction clusters and segment adjacency."""

    shape: tuple[int, int, int]
    segments: list[np.ndarray]
    junctions: list[np.ndarray]
    adjacency: list[tuple[int, int]]
    segment_junctions: list[list[int]] = field(default_factory=list)

    @property
    def n_segments(self) -> int:
        return len(self.segments)

    def to_dict(self) -> dict:
        return {
            "shape": list(self.shape),
            "segments": [s.tolist() for s in self.segments],
            "junctions": [j.tolist() for j in self.junctions],
            "edges": [list(e) for e in self.adjacency],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SegmentSet":
        shape = tuple(int(v) for v in d["shape"])
        segs = [np.asarray(s, dtype=np.int64).reshape(-1, 3) for s in d["segments"]]
        juncs = [np.asarray(j, dtype=np.int64).reshape(-1, 3) for j in d["junctions"]]
        adjacency = [tuple(sorted((int(a), int(b)))) for a, b in d["edges"]]
        return cls(shape=shape, segments=segs, junctions=juncs, adjacency=adjacency)


def _zyx(p) -> tuple[int, int, int]:
    return (int(p[2]), int(p[1]), int(p[0]))


def _order_chain(voxels: np.ndarray) -> np.ndarray:
    pts = [tuple(int(v) for v in p) for p in voxels]
    index = {p: i for i, p in enumerate(pts)}
    nbrs = [[] for _ in pts]
    for i, (x, y, z) in enumerate(pts):
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    j = index.get((x + dx, y + dy, z + dz))
                    if j is not None and j != i:
                        nbrs[i].append(j)
    ends = [i for i in range(len(pts)) if len(nbrs[i]) <= 1]
    if len(ends) >= 2:
        a, b = sorted(ends, key=lambda i: _zyx(pts[i]))[:2]
        start = min(a, b, key=lambda i: (_zyx(pts[i]), _zyx(pts[b if i == a else a])))
    else:
        # Closed loop (or single voxel): start at the smallest voxel.
        start = min(range(len(pts)), key=lambda i: _zyx(pts[i]))
    order = [start]
    seen = {start}
    cur = start
    while True:
        step = [j for j in nbrs[cur] if j not in seen]
        if not step:
            break
        cur = min(step, key=lambda j: (len([k for k in nbrs[j] if k not in seen]), _zyx(pts[j])))
        order.append(cur)
        seen.add(cur)
    # Anything the walk could not reach stays in the segment, appended in scan order.
    rest = sorted((i for i in range(len(pts)) if i not in seen), key=lambda i: _zyx(pts[i]))
    return np.asarray([pts[i] for i in order + rest], dtype=np.int64)


def extract_segments(skel, classes: PointClasses | None = None, min_length: int = 0) -> SegmentSet:
    """Split a skeleton into segments, junctions and segment adjacency.

    Segments are maximal 26-connected runs of end/edge voxels, each ordered
    from the end whose ``(z, y, x)`` is smaller. Two segments are adjacent
    when both touch the same junction (a 26-connected cluster of division
    voxels). Segments are numbered by their first voxel in ``(z, y, x)``
    order.

    ``min_length > 0`` prunes spurs: terminal segments shorter than that,
    hanging off a single junction, are deleted from the skeleton and the
    split is recomputed until none remain.
    """
    skel = as_mask(skel).copy()
    if classes is None or min_length > 0:
        classes = classify_points(skel)
    while True:
        segset = _split(skel, classes)
        if min_length <= 0:
            return segset
        spurs = [
            i for i, s in enumerate(segset.segments)
            if len(s) < min_length and len(segset.segment_junctions[i]) == 1
        ]
        if not spurs:
            return segset
        for i in spurs:
            s = segset.segments[i]
            skel[s[:, 0], s[:, 1], s[:, 2]] = 0
        classes = classify_points(skel)


def _split(skel: np.ndarray, classes: PointClasses) -> SegmentSet:
    chain_mask = (classes.kind == END) | (classes.kind == EDGE)
    junc_mask = classes.kind == DIVISION
    chain_lab, chain_sizes = connected_components(chain_mask, 26)
    junc_lab, junc_sizes = connected_components(junc_mask, 26)

    segments = []
    for lab in range(1, len(chain_sizes) + 1):
        segments.append(_order_chain(np.argwhere(chain_lab == lab)))
    order = sorted(range(len(segments)), key=lambda i: _zyx(segments[i][0]))
    segments = [segments[i] for i in order]
    junctions = [np.argwhere(junc_lab == lab) for lab in range(1, len(junc_sizes) + 1)]

    # Junction labels within Chebyshev distance 1 of each segment.
    padded = np.pad(junc_lab, 1)
    seg_juncs: list[list[int]] = []
    for s in segments:
        touched = set()
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    vals = padded[s[:, 0] + 1 + dx, s[:, 1] + 1 + dy, s[:, 2] + 1 + dz]
                    touched.update(int(v) - 1 for v in vals if v > 0)
        seg_juncs.append(sorted(touched))

    members: dict[int, list[int]] = {}
    for i, js in enumerate(seg_juncs):
        for j in js:
            members.setdefault(j, []).append(i)
    adjacency = set()
    for segs in members.values():
        for a in range(len(segs)):
            for b in range(a + 1, len(segs)):
                adjacency.add((min(segs[a], segs[b]), max(segs[a], segs[b])))
    return SegmentSet(
        shape=tuple(int(v) for v in skel.shape),
        segments=segments,
        junctions=junctions,
        adjacency=sorted(adjacency),
        segment_junctions=seg_juncs,
    )

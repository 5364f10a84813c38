"""Featured segment graphs.

Every skeleton segment becomes a node carrying two feature vectors sampled
at ``K`` evenly spaced positions along its voxel chain:

* point features, ``3K`` coordinates normalised to the chain's own
  bounding box, and
* voxel features, ``C*K`` values read from a ``C``-channel feature volume.

Edges join segments that meet at a junction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .skeleton import SegmentSet

DEFAULT_K = 10


class GraphFormatError(ValueError):
    """Raised when graph JSON is missing fields or has inconsistent shapes."""


def sample_indices(n: int, K: int = DEFAULT_K) -> np.ndarray:
    """``round(i * (n - 1) / (K - 1))`` for ``i = 0..K-1``, rounding halves up."""
    if n < 1:
        raise ValueError("cannot sample an empty chain")
    if K < 1:
        raise ValueError("K must be >= 1")
    if K == 1:
        return np.zeros(1, dtype=np.int64)
    return np.floor(np.arange(K) * (n - 1) / (K - 1) + 0.5).astype(np.int64)


def point_feature(chain, K: int = DEFAULT_K) -> np.ndarray:
    """Bounding-box normalised ``(x, y, z)`` of ``K`` sampled chain voxels, flattened.

    Axes with zero extent map to 0.5.
    """
    pts = np.asarray(chain, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("cannot featurize an empty chain")
    lo = pts.min(axis=0)
    extent = pts.max(axis=0) - lo
    safe = np.where(extent > 0, extent, 1.0)
    norm = np.where(extent > 0, (pts - lo) / safe, 0.5)
    return norm[sample_indices(len(pts), K)].ravel()


def voxel_feature(chain, feats: np.ndarray, K: int = DEFAULT_K) -> np.ndarray:
    """Feature-volume channels at the same ``K`` samples as :func:`point_feature`."""
    pts = np.asarray(chain, dtype=np.int64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("cannot featurize an empty chain")
    feats = np.asarray(feats)
    if feats.ndim == 3:
        feats = feats[..., None]
    sel = pts[sample_indices(len(pts), K)]
    if np.any(sel < 0) or np.any(sel >= np.asarray(feats.shape[:3])):
        raise ValueError(f"chain voxel outside feature volume of shape {feats.shape[:3]}")
    return feats[sel[:, 0], sel[:, 1], sel[:, 2]].astype(np.float64).ravel()


@dataclass
class BronchialGraph:
    chains: list[np.ndarray]
    edges: np.ndarray
    point_feat: np.ndarray
    voxel_feat: np.ndarray
    labels: np.ndarray | None = None
    K: int = DEFAULT_K
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.point_feat = np.asarray(self.point_feat, dtype=np.float64).reshape(len(self.chains), -1)
        self.voxel_feat = np.asarray(self.voxel_feat, dtype=np.float64).reshape(len(self.chains), -1)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
        self.validate()

    @property
    def n_nodes(self) -> int:
        return len(self.chains)

    @property
    def n_channels(self) -> int:
        return self.voxel_feat.shape[1] // self.K if self.K else 0

    def features(self, kind: str = "pv") -> np.ndarray:
        """Node input matrix: ``"pv"`` point + voxel, ``"p"`` point only."""
        if kind == "pv":
            return np.concatenate([self.point_feat, self.voxel_feat], axis=1)
        if kind == "p":
            return self.point_feat.copy()
        raise ValueError(f"unknown feature kind {kind!r}")

    def validate(self) -> None:
        n = self.n_nodes
        if self.point_feat.shape != (n, 3 * self.K):
            raise GraphFormatError(f"point_feat has shape {self.point_feat.shape}, expected ({n}, {3 * self.K})")
        if self.voxel_feat.shape[0] != n or (self.K and self.voxel_feat.shape[1] % self.K):
            raise GraphFormatError(f"voxel_feat has shape {self.voxel_feat.shape}")
        if len(self.edges):
            if self.edges.min() < 0 or self.edges.max() >= n:
                raise GraphFormatError("edge references a missing node")
            if np.any(self.edges[:, 0] == self.edges[:, 1]):
                raise GraphFormatError("self-loop in edge list")
            keys = {tuple(sorted(e)) for e in self.edges.tolist()}
            if len(keys) != len(self.edges):
                raise GraphFormatError("duplicate edge")
        if self.labels is not None and self.labels.shape != (n,):
            raise GraphFormatError(f"{self.labels.shape[0]} labels for {n} nodes")

    def to_dict(self) -> dict:
        nodes = []
        for i in range(self.n_nodes):
            node = {"id": i}
            if self.labels is not None:
                node["label"] = int(self.labels[i])
            chain = self.chains[i]
            if np.issubdtype(np.asarray(chain).dtype, np.integer):
                node["chain"] = np.asarray(chain).tolist()
            else:
                node["chain"] = [[_f9(v) for v in p] for p in np.asarray(chain)]
            node["point_feat"] = [_f9(v) for v in self.point_feat[i]]
            node["voxel_feat"] = [_f9(v) for v in self.voxel_feat[i]]
            nodes.append(node)
        return {"K": self.K, "nodes": nodes, "edges": self.edges.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "BronchialGraph":
        try:
            nodes = d["nodes"]
            K = int(d.get("K", DEFAULT_K))
            edges = d["edges"]
        except (KeyError, TypeError) as exc:
            raise GraphFormatError(f"graph JSON missing field {exc}") from exc
        chains, pf, vf, labels = [], [], [], []
        for pos, node in enumerate(nodes):
            for key in ("chain", "point_feat", "voxel_feat"):
                if key not in node:
                    raise GraphFormatError(f"node {pos} missing field '{key}'")
            if int(node.get("id", pos)) != pos:
                raise GraphFormatError(f"node {pos} has field 'id'={node.get('id')}, expected {pos}")
            raw = np.asarray(node["chain"])
            chains.append(raw.astype(np.int64 if np.issubdtype(raw.dtype, np.integer) else np.float64).reshape(-1, 3))
            for key, width in (("point_feat", 3 * K), ("voxel_feat", None)):
                vals = node[key]
                if not isinstance(vals, list) or (width is not None and len(vals) != width):
                    raise GraphFormatError(f"node {pos} field '{key}' should be a list of {width or 'C*K'} numbers")
                if width is None and vf and len(vals) != len(vf[0]):
                    raise GraphFormatError(f"node {pos} field '{key}' has {len(vals)} values, node 0 has {len(vf[0])}")
            pf.append(node["point_feat"])
            vf.append(node["voxel_feat"])
            labels.append(node.get("label"))
        if any(lab is None for lab in labels):
            if not all(lab is None for lab in labels):
                raise GraphFormatError("field 'label' present on some nodes only")
            labels = None
        try:
            return cls(
                chains=chains,
                edges=np.asarray(edges, dtype=np.int64).reshape(-1, 2),
                point_feat=np.asarray(pf, dtype=np.float64).reshape(len(chains), -1),
                voxel_feat=np.asarray(vf, dtype=np.float64).reshape(len(chains), -1),
                labels=labels,
                K=K,
            )
        except (ValueError, TypeError) as exc:
            if isinstance(exc, GraphFormatError):
                raise
            raise GraphFormatError(f"bad graph field shapes: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "BronchialGraph":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise GraphFormatError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(data)


def _f9(v) -> float:
    return float(f"{float(v):.9g}")


def build_graph(segments: SegmentSet, feats: np.ndarray, labels=None, K: int = DEFAULT_K) -> BronchialGraph:
    """One node per segment, one edge per adjacent segment pair."""
    n = segments.n_segments
    if labels is not None and len(labels) != n:
        raise ValueError(f"{len(labels)} labels for {n} segments")
    point = np.stack([point_feature(s, K) for s in segments.segments]) if n else np.zeros((0, 3 * K))
    voxel = np.stack([voxel_feature(s, feats, K) for s in segments.segments]) if n else np.zeros((0, 0))
    return BronchialGraph(
        chains=[np.asarray(s, dtype=np.int64) for s in segments.segments],
        edges=np.asarray(segments.adjacency, dtype=np.int64).reshape(-1, 2),
        point_feat=point,
        voxel_feat=voxel,
        labels=None if labels is None else np.asarray(labels, dtype=np.int64),
        K=K,
    )


def _smooth_field(rng: np.random.Generator, sigma: float, scale: float, n_modes: int = 4):
    """Random displacement field made of a few low-frequency sine modes with RMS ``sigma`` per axis."""
    freqs = rng.normal(0.0, 1.0 / scale, size=(n_modes, 3))
    phases = rng.uniform(0.0, 2 * math.pi, size=(n_modes, 3))
    amps = rng.normal(0.0, 1.0, size=(n_modes, 3))
    amps *= sigma * math.sqrt(2.0 / n_modes)

    def displace(pts: np.ndarray) -> np.ndarray:
        arg = pts @ freqs.T  # (n, modes)
        return np.einsum("nmd,md->nd", np.sin(arg[:, :, None] + phases[None]), amps)

    return displace


def augment(
    graph: BronchialGraph,
    seed: int,
    max_rotation: float = 10.0,
    scale_range: tuple[float, float] = (0.9, 1.1),
    elastic_sigma: float = 1.0,
    elastic_scale: float = 16.0,
) -> BronchialGraph:
    """Random affine (rotation up to ``max_rotation`` degrees per axis,
    isotropic scale) followed by a smooth elastic displacement, applied to
    the raw chains. Point features are recomputed; voxel features, labels
    and edges are carried over untouched.
    """
    rng = np.random.default_rng(seed)
    angles = rng.uniform(-max_rotation, max_rotation, size=3)
    scale = rng.uniform(*scale_range)
    elastic = _smooth_field(rng, elastic_sigma, elastic_scale)
    linear = Rotation.from_euler("xyz", angles, degrees=True).as_matrix() * scale - np.eye(3)

    all_pts = np.concatenate([np.asarray(c, dtype=np.float64) for c in graph.chains])
    center = all_pts.mean(axis=0)
    chains = []
    for c in graph.chains:
        pts = np.asarray(c, dtype=np.float64)
        delta = (pts - center) @ linear.T
        if elastic_sigma > 0:
            delta = delta + elastic(pts)
        chains.append(pts + delta)
    point = np.stack([point_feature(c, graph.K) for c in chains])
    return replace(
        graph,
        chains=chains,
        point_feat=point,
        voxel_feat=graph.voxel_feat.copy(),
        edges=graph.edges.copy(),
        labels=None if graph.labels is None else graph.labels.copy(),
        meta=dict(graph.meta),
    )

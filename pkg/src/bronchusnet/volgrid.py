"""Dense 3D volumes and the morphology primitives used throughout the pipeline.

Volumes are plain numpy arrays indexed ``vol[x, y, z]``. Binary masks are
``uint8`` arrays holding only 0 and 1. Feature volumes carry channels on the
last axis, ``feats[x, y, z, c]``.

On disk a volume is a JSON header plus a sibling ``.raw`` file of
little-endian values with x varying fastest (channels, when present, vary
faster still).
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

__all__ = [
    "VolumeFormatError",
    "as_mask",
    "otsu_threshold",
    "connected_components",
    "main_trachea",
    "maxpool_stride2",
    "dilate26",
    "sliding_window_apply",
    "save_volume",
    "load_volume",
]

_STRUCT = {
    6: ndimage.generate_binary_structure(3, 1),
    26: ndimage.generate_binary_structure(3, 3),
}

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "u8": np.dtype("u1"), "i32": np.dtype("<i4")}


class VolumeFormatError(ValueError):
    """Raised when a volume file or header cannot be decoded."""


def as_mask(vol) -> np.ndarray:
    """Return ``vol`` as a 3D ``uint8`` mask, rejecting values outside {0, 1}."""
    arr = np.asarray(vol)
    if arr.ndim != 3:
        raise ValueError(f"expected a 3D volume, got shape {arr.shape}")
    if arr.dtype == bool:
        return arr.astype(np.uint8)
    if not np.isin(arr, (0, 1)).all():
        raise ValueError("binary volume contains values other than 0 and 1")
    return arr.astype(np.uint8, copy=False)


def otsu_threshold(vol, bins: int = 256) -> tuple[float, np.ndarray]:
    """Otsu threshold over a uniform histogram spanning ``[min, max]``.

    Bins are half-open on the left, ``(e_k, e_{k+1}]`` (the first bin also
    holds the minimum), so the returned mask ``vol <= threshold`` is exactly
    the union of the low bins. Ties in between-class variance go to the
    lower threshold, which fixes the partition; the reported threshold is
    the midpoint of the empty-bin gap separating the two classes.

    Returns
    -------
    threshold : float
        Midpoint between the last occupied low bin and the first occupied
        high bin.
    mask : ndarray of uint8
        1 where intensity is at or below the threshold.
    """
    vol = np.asarray(vol, dtype=np.float64)
    lo, hi = float(vol.min()), float(vol.max())
    if not hi > lo:
        raise ValueError("degenerate histogram: volume is constant")
    edges = np.linspace(lo, hi, bins + 1)
    idx = np.searchsorted(edges[1:-1], vol.ravel(), side="left")
    hist = np.bincount(idx, minlength=bins).astype(np.float64)
    centers = 0.5 * (edges[:-1] + edges[1:])

    n = hist.sum()
    w0 = np.cumsum(hist)[:-1] / n
    w1 = 1.0 - w0
    m0 = np.cumsum(hist * centers)[:-1]
    mtot = (hist * centers).sum()
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = m0 / (w0 * n)
        mu1 = (mtot - m0) / (w1 * n)
        between = w0 * w1 * (mu0 - mu1) ** 2
    between = np.where((w0 > 0) & (w1 > 0), between, -np.inf)
    k = int(np.argmax(between))
    # Every threshold across the run of empty bins above k yields the same
    # partition; report the middle of that gap rather than its lower edge.
    nxt = k + 1 + int(np.flatnonzero(hist[k + 1:])[0])
    threshold = float(0.5 * (edges[k + 1] + edges[nxt]))
    mask = (idx <= k).reshape(vol.shape).astype(np.uint8)
    return threshold, mask


def connected_components(mask, connectivity: int = 26) -> tuple[np.ndarray, list[int]]:
    """Label connected foreground components.

    Labels are canonical: component ``i`` (1-based) is the one whose first
    voxel in x-fastest scan order comes ``i``-th. ``sizes[i - 1]`` is the
    voxel count of label ``i``.
    """
    if connectivity not in _STRUCT:
        raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")
    mask = as_mask(mask)
    raw, n = ndimage.label(mask, structure=_STRUCT[connectivity])
    if n == 0:
        return raw.astype(np.int32), []
    findex = np.arange(mask.size, dtype=np.int64).reshape(mask.shape, order="F")
    first = ndimage.minimum(findex, raw, index=np.arange(1, n + 1))
    order = np.argsort(first, kind="stable")
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[order + 1] = np.arange(1, n + 1, dtype=np.int32)
    labels = remap[raw]
    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    return labels, [int(s) for s in sizes]


def main_trachea(mask, slab_fraction: float = 0.1) -> np.ndarray:
    """Pick the 26-connected component with the most voxels in the top z slab.

    "Top" is the high-z end of the volume; the slab holds the top
    ``ceil(slab_fraction * nz)`` axial planes.
    """
    labels, sizes = connected_components(mask, 26)
    nz = labels.shape[2]
    depth = max(1, math.ceil(slab_fraction * nz))
    slab = labels[:, :, nz - depth:]
    counts = np.bincount(slab.ravel(), minlength=len(sizes) + 1)[1:]
    if counts.size == 0 or counts.max() == 0:
        raise ValueError("no trachea candidate: no component touches the top slab")
    best = int(np.argmax(counts)) + 1
    return (labels == best).astype(np.uint8)


def maxpool_stride2(vol) -> np.ndarray:
    """2x2x2 max pooling with stride 2; odd borders use truncated blocks.

    Works on masks and on continuous volumes alike; the output keeps the
    input dtype and has shape ``ceil(dim / 2)`` per axis.
    """
    vol = np.asarray(vol)
    pads = [(0, d % 2) for d in vol.shape]
    if any(p[1] for p in pads):
        fill = np.iinfo(vol.dtype).min if vol.dtype.kind in "iu" else -np.inf
        if vol.dtype == bool:
            fill = False
        vol = np.pad(vol, pads, constant_values=fill)
    nx, ny, nz = (d // 2 for d in vol.shape)
    return vol.reshape(nx, 2, ny, 2, nz, 2).max(axis=(1, 3, 5))


def dilate26(mask) -> np.ndarray:
    """One step of 3x3x3 dilation with zero padding outside the volume."""
    mask = as_mask(mask)
    return ndimage.maximum_filter(mask, size=3, mode="constant", cval=0)


def _tile_starts(dim: int, cube: int, overlap: int) -> list[int]:
    stride = cube - overlap
    starts = list(range(0, dim - cube + 1, stride))
    if starts[-1] + cube < dim:
        starts.append(dim - cube)
    return starts


def sliding_window_apply(
    vol,
    cube: Sequence[int],
    overlap: Sequence[int],
    predictor: Callable[[np.ndarray], np.ndarray],
) -> np.ndarray:
    """Run ``predictor`` over overlapping tiles and average the overlaps.

    Tiles advance by ``cube - overlap`` per axis; the last tile on each axis
    is shifted back to end flush with the border.
    """
    vol = np.asarray(vol)
    cube = tuple(int(c) for c in cube)
    overlap = tuple(int(o) for o in overlap)
    if len(cube) != 3 or len(overlap) != 3:
        raise ValueError("cube and overlap need three entries")
    for d, c, o in zip(vol.shape, cube, overlap):
        if not 0 < c <= d:
            raise ValueError(f"cube {cube} does not fit volume {vol.shape}")
        if not 0 <= o < c:
            raise ValueError(f"overlap {overlap} must be smaller than cube {cube}")

    acc = np.zeros(vol.shape, dtype=np.float64)
    hits = np.zeros(vol.shape, dtype=np.int32)
    axes = [_tile_starts(d, c, o) for d, c, o in zip(vol.shape, cube, overlap)]
    for x0 in axes[0]:
        for y0 in axes[1]:
            for z0 in axes[2]:
                sl = (slice(x0, x0 + cube[0]), slice(y0, y0 + cube[1]), slice(z0, z0 + cube[2]))
                out = np.asarray(predictor(vol[sl]))
                if out.shape != cube:
                    raise ValueError(f"predictor returned shape {out.shape}, expected {cube}")
                acc[sl] += out
                hits[sl] += 1
    return acc / hits


def save_volume(path, vol, dtype: str | None = None) -> Path:
    """Write ``vol`` as ``<path>.json`` + ``<path>.raw`` and return the header path.

    ``path`` may be given with or without the ``.json`` suffix. 4D arrays are
    written as feature volumes with channels on the last axis.
    """
    vol = np.asarray(vol)
    base = Path(path)
    if base.suffix in (".json", ".raw"):
        base = base.with_suffix("")
    if dtype is None:
        dtype = {"u": "u8", "b": "u8", "i": "i32"}.get(vol.dtype.kind, "f32")
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}")
    if vol.ndim == 3:
        channels = 1
        flat = vol.ravel(order="F")
    elif vol.ndim == 4:
        channels = vol.shape[3]
        flat = np.moveaxis(vol, 3, 0).ravel(order="F")
    else:
        raise ValueError(f"expected a 3D or 4D array, got shape {vol.shape}")
    header = {"dims": [int(d) for d in vol.shape[:3]], "dtype": dtype, "channels": int(channels)}
    base.with_suffix(".raw").write_bytes(flat.astype(_DTYPES[dtype]).tobytes())
    hpath = base.with_suffix(".json")
    hpath.write_text(json.dumps(header))
    return hpath


def load_volume(path) -> np.ndarray:
    """Read a volume written by :func:`save_volume`."""
    base = Path(path)
    if base.suffix in (".json", ".raw"):
        base = base.with_suffix("")
    try:
        header = json.loads(base.with_suffix(".json").read_text())
        dims = [int(d) for d in header["dims"]]
        dtype = _DTYPES[header["dtype"]]
        channels = int(header.get("channels", 1))
    except (OSError, json.JSONDecodeError) as exc:
        raise VolumeFormatError(f"cannot read volume header {base}.json: {exc}") from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise VolumeFormatError(f"bad volume header {base}.json: field {exc}") from exc
    if len(dims) != 3 or min(dims) < 1 or channels < 1:
        raise VolumeFormatError(f"bad volume header {base}.json: dims={dims} channels={channels}")
    raw = np.frombuffer(base.with_suffix(".raw").read_bytes(), dtype=dtype)
    expected = channels * math.prod(dims)
    if raw.size != expected:
        raise VolumeFormatError(f"{base}.raw holds {raw.size} values, header implies {expected}")
    if channels == 1:
        return raw.reshape(dims, order="F").copy()
    return np.moveaxis(raw.reshape([channels, *dims], order="F"), 0, 3).copy()

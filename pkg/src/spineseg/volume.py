"""Core voxel-volume type plus reorientation, resampling, and mask utilities.

Volumes live on a canonical anatomical grid: axis 0 runs anterior to
posterior, axis 1 superior to inferior, and axis 2 left to right. An
orientation is written as one code per stored axis naming the direction
of increasing index, so the canonical orientation is ("P", "I", "R").
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import scipy.ndimage as ndi

CANONICAL_ORIENTATION = ("P", "I", "R")

#: code -> (axis family, sign of increasing index in RAS+ world coordinates)
_CODE_INFO = {
    "R": (0, +1.0),
    "L": (0, -1.0),
    "A": (1, +1.0),
    "P": (1, -1.0),
    "S": (2, +1.0),
    "I": (2, -1.0),
}

_OPPOSITE = {"R": "L", "L": "R", "A": "P", "P": "A", "S": "I", "I": "S"}

VOLUME_KINDS = ("intensity", "semantic", "instance")


def validate_orientation(codes: Sequence[str]) -> tuple[str, str, str]:
    codes = tuple(str(c).upper() for c in codes)
    if len(codes) != 3:
        raise ValueError(f"orientation needs exactly 3 axis codes, got {codes!r}")
    families = []
    for c in codes:
        if c not in _CODE_INFO:
            raise ValueError(f"unknown axis code {c!r}")
        families.append(_CODE_INFO[c][0])
    if len(set(families)) != 3:
        raise ValueError(f"orientation {codes!r} repeats an anatomical axis")
    return codes  # type: ignore[return-value]


@dataclass(frozen=True, eq=False)
class Volume:
    """A dense 3D voxel grid with spacing (mm/voxel) and orientation.

    ``kind`` tells what the voxels mean: "intensity" for continuous data,
    "semantic" for structure codes, "instance" for instance ids. Label
    volumes must hold integers. Operations never mutate a volume in place.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    orientation: tuple[str, str, str] = CANONICAL_ORIENTATION
    kind: str = "intensity"

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"expected a 3D array, got shape {data.shape}")
        if min(data.shape) < 1:
            raise ValueError(f"all dims must be >= 1, got {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ValueError(f"spacing must be 3 positive reals, got {self.spacing!r}")
        if self.kind not in VOLUME_KINDS:
            raise ValueError(f"kind must be one of {VOLUME_KINDS}, got {self.kind!r}")
        if self.kind != "intensity" and not np.issubdtype(data.dtype, np.integer):
            raise ValueError(f"{self.kind} volumes need an integer dtype, got {data.dtype}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "orientation", validate_orientation(self.orientation))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def is_label(self) -> bool:
        return self.kind in ("semantic", "instance")

    def with_data(self, data: np.ndarray, kind: str | None = None) -> "Volume":
        return replace(self, data=data, kind=kind or self.kind)

    def same_grid(self, other: "Volume") -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing)
            and self.orientation == other.orientation
        )


def reorient(vol: Volume, target: Sequence[str]) -> Volume:
    """Permute/flip axes so the volume's orientation matches ``target``.

    Pure axis shuffling: the voxel multiset is preserved and reorienting
    back to the source orientation restores the original volume.
    """
    target = validate_orientation(target)
    src_families = [_CODE_INFO[c][0] for c in vol.orientation]
    perm = []
    flips = []
    for code in target:
        family = _CODE_INFO[code][0]
        src_axis = src_families.index(family)
        perm.append(src_axis)
        flips.append(vol.orientation[src_axis] != code)
    data = np.transpose(vol.data, perm)
    slicer = tuple(slice(None, None, -1) if f else slice(None) for f in flips)
    data = np.ascontiguousarray(data[slicer])
    spacing = tuple(vol.spacing[p] for p in perm)
    return Volume(data, spacing, target, vol.kind)


def to_canonical(vol: Volume) -> Volume:
    return reorient(vol, CANONICAL_ORIENTATION)


def _nearest_indices(coords: np.ndarray, size: int) -> np.ndarray:
    # nearest voxel center, ties resolved toward the smaller index
    idx = np.ceil(coords - 0.5).astype(np.int64)
    return np.clip(idx, 0, size - 1)


def resample(vol: Volume, new_spacing: Sequence[float], mode: str = "nearest") -> Volume:
    """Resample onto a grid with ``new_spacing``, preserving physical extent.

    The grid is anchored at the physical corner of the volume: voxel i
    covers [i*s, (i+1)*s) along each axis, with its center at (i+0.5)*s.
    Output dims are round(dims*spacing/new_spacing), at least 1. Label
    volumes only accept nearest mode so no new label values can appear.
    """
    new_spacing = tuple(float(s) for s in new_spacing)
    if len(new_spacing) != 3 or any(s <= 0 for s in new_spacing):
        raise ValueError(f"new_spacing must be 3 positive reals, got {new_spacing!r}")
    if mode not in ("nearest", "trilinear"):
        raise ValueError(f"mode must be 'nearest' or 'trilinear', got {mode!r}")
    if mode == "trilinear" and vol.is_label:
        raise ValueError("trilinear interpolation is not valid for label volumes")

    if new_spacing == vol.spacing:
        return vol

    old_dims = vol.dims
    new_dims = tuple(
        max(1, int(round(d * s / ns)))
        for d, s, ns in zip(old_dims, vol.spacing, new_spacing)
    )
    # fractional source index of each output voxel center, per axis
    axis_coords = [
        ((np.arange(nd) + 0.5) * ns) / s - 0.5
        for nd, ns, s in zip(new_dims, new_spacing, vol.spacing)
    ]
    if mode == "nearest":
        ii = _nearest_indices(axis_coords[0], old_dims[0])
        jj = _nearest_indices(axis_coords[1], old_dims[1])
        kk = _nearest_indices(axis_coords[2], old_dims[2])
        data = vol.data[np.ix_(ii, jj, kk)]
    else:
        grid = np.meshgrid(*axis_coords, indexing="ij")
        data = ndi.map_coordinates(
            vol.data.astype(np.float64), np.stack(grid), order=1, mode="nearest"
        )
    return Volume(np.ascontiguousarray(data), new_spacing, vol.orientation, vol.kind)


@dataclass
class ComponentSet:
    """Connected components of a binary mask.

    Ids are 1..count with no gaps, ordered by each component's minimum
    linear voxel index so the labeling is deterministic.
    """

    labels: np.ndarray
    count: int
    sizes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    centroids: list[tuple[float, float, float]] = field(default_factory=list)
    bboxes: list[tuple[slice, slice, slice]] = field(default_factory=list)

    def mask(self, component_id: int) -> np.ndarray:
        return self.labels == component_id


def _structuring_element(connectivity: int) -> np.ndarray:
    if connectivity == 6:
        return ndi.generate_binary_structure(3, 1)
    if connectivity == 26:
        return ndi.generate_binary_structure(3, 3)
    raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")


def connected_components(mask: np.ndarray, connectivity: int = 26) -> ComponentSet:
    """Label connected components of a binary mask (6- or 26-connectivity)."""
    mask = np.asarray(mask) != 0
    raw, n = ndi.label(mask, structure=_structuring_element(connectivity))
    if n == 0:
        return ComponentSet(labels=raw.astype(np.int32), count=0)
    # relabel so ids ascend with each component's minimum linear index
    flat = raw.ravel()
    first_seen = np.full(n + 1, flat.size, dtype=np.int64)
    nz = np.flatnonzero(flat)
    # reversed so earlier positions overwrite later ones
    first_seen[flat[nz[::-1]]] = nz[::-1]
    order = np.argsort(first_seen[1:], kind="stable")  # old id-1 sorted by first voxel
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[order + 1] = np.arange(1, n + 1, dtype=np.int32)
    labels = remap[raw]

    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    centroids = ndi.center_of_mass(mask, labels, index=range(1, n + 1))
    centroids = [tuple(float(x) for x in c) for c in centroids]
    objects = ndi.find_objects(labels)
    bboxes = [obj for obj in objects if obj is not None]
    return ComponentSet(labels=labels, count=n, sizes=sizes, centroids=centroids, bboxes=bboxes)


def center_of_mass(mask: np.ndarray) -> tuple[float, float, float]:
    """Arithmetic mean of the foreground voxel index triples."""
    mask = np.asarray(mask) != 0
    total = int(mask.sum())
    if total == 0:
        raise ValueError("center of mass of an empty component is undefined")
    com = ndi.center_of_mass(mask)
    return tuple(float(x) for x in com)


def fill_holes(mask: np.ndarray) -> np.ndarray:
    """Fill background cavities not connected to the volume boundary.

    Background connectivity is 6; foreground never shrinks.
    """
    mask = np.asarray(mask) != 0
    return ndi.binary_fill_holes(mask, structure=_structuring_element(6))


def binary_erosion(mask: np.ndarray, radius: int) -> np.ndarray:
    """Erode by a Euclidean ball of the given voxel radius."""
    mask = np.asarray(mask) != 0
    if radius <= 0:
        return mask.copy()
    se = _ball(radius)
    return ndi.binary_erosion(mask, structure=se, border_value=0)


def binary_closing(mask: np.ndarray, radius: int = 1) -> np.ndarray:
    """Morphological closing that treats space beyond the boundary as open.

    The volume is padded by the structuring-element radius first, so
    closing near the faces behaves as if the mask floated in an infinite
    background instead of being clipped.
    """
    mask = np.asarray(mask) != 0
    if radius <= 0:
        return mask.copy()
    se = np.ones((2 * radius + 1,) * 3, dtype=bool)
    padded = np.pad(mask, radius, mode="constant", constant_values=False)
    closed = ndi.binary_erosion(ndi.binary_dilation(padded, structure=se), structure=se)
    core = tuple(slice(radius, radius + d) for d in mask.shape)
    return closed[core]


def _ball(radius: int) -> np.ndarray:
    r = int(radius)
    grid = np.mgrid[-r : r + 1, -r : r + 1, -r : r + 1]
    return (grid**2).sum(axis=0) <= r * r


def bounding_box(mask: np.ndarray, margin: int = 0) -> tuple[slice, slice, slice] | None:
    """Tight slice box around the foreground, or None for an empty mask."""
    mask = np.asarray(mask)
    nz = np.nonzero(mask)
    if nz[0].size == 0:
        return None
    return tuple(
        slice(max(0, int(axis.min()) - margin), min(dim, int(axis.max()) + 1 + margin))
        for axis, dim in zip(nz, mask.shape)
    )


def window_view(data: np.ndarray, origin, size) -> np.ndarray:
    """Copy a window starting at ``origin`` (any sign), zero-padded where it
    leaves the volume."""
    out = np.zeros(tuple(size), dtype=data.dtype)
    src = []
    dst = []
    for o, s, d in zip(origin, size, data.shape):
        lo, hi = max(0, o), min(d, o + s)
        if lo >= hi:
            return out
        src.append(slice(lo, hi))
        dst.append(slice(lo - o, hi - o))
    out[tuple(dst)] = data[tuple(src)]
    return out

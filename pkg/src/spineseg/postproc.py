"""Semantic/instance consistency enforcement.

Three steps, in a documented order: fill holes (per semantic class, then
per instance id), zero out instance voxels whose semantic voxel is not an
instance-bearing structure, and attach every remaining orphaned semantic
component to the instance with the most neighboring voxels. After the
pass, instance-relevant semantic foreground and instance foreground are
the same voxel set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.ndimage as ndi

from .labels import (
    Structure,
    endplate_id,
    instance_relevant_codes,
    ivd_id,
)
from .volume import Volume, bounding_box, connected_components, fill_holes

_RELEVANT = sorted(instance_relevant_codes())
_RELEVANT_LO, _RELEVANT_HI = _RELEVANT[0], _RELEVANT[-1]


@dataclass
class ConsistencyReport:
    holes_filled: int = 0
    zeroed: int = 0
    orphans_assigned: list[tuple[int, int]] = field(default_factory=list)
    demoted_semantic: int = 0

    def to_dict(self) -> dict:
        return {
            "holes_filled": self.holes_filled,
            "zeroed": self.zeroed,
            "orphans_assigned": [list(t) for t in self.orphans_assigned],
            "demoted_semantic": self.demoted_semantic,
        }


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Volume) else np.asarray(x)


def _check_grids(semantic, instance):
    if isinstance(semantic, Volume) and isinstance(instance, Volume):
        if not semantic.same_grid(instance):
            raise ValueError("semantic and instance volumes live on different grids")
    elif _as_array(semantic).shape != _as_array(instance).shape:
        raise ValueError("semantic and instance masks have different shapes")


def _relevant_mask(sem: np.ndarray) -> np.ndarray:
    return (sem >= _RELEVANT_LO) & (sem <= _RELEVANT_HI)


def foreground_equal(semantic, instance) -> bool:
    """True iff instance-bearing semantic foreground == instance foreground."""
    _check_grids(semantic, instance)
    sem, inst = _as_array(semantic), _as_array(instance)
    return bool(np.array_equal(_relevant_mask(sem), inst > 0))


def _fill_label_holes(arr: np.ndarray, value: int) -> int:
    """Fill enclosed cavities of one label in place; returns voxels added.

    Working inside the label's bounding box is exact: a cavity is
    surrounded by the label, so it cannot reach past the tight box.
    """
    mask = arr == value
    box = bounding_box(mask)
    if box is None:
        return 0
    crop = mask[box]
    filled = fill_holes(crop)
    add = filled & (arr[box] == 0)
    n = int(add.sum())
    if n:
        arr[box][add] = value
    return n


def _neighbor_majority(inst: np.ndarray, comp: np.ndarray, box) -> int:
    """Instance id with the most 26-neighborhood contact voxels; 0 if none.

    Ties go to the smaller id.
    """
    grown = ndi.binary_dilation(comp, structure=np.ones((3, 3, 3), dtype=bool))
    shell = grown & ~comp
    values = inst[box][shell]
    values = values[values > 0]
    if values.size == 0:
        return 0
    counts = np.bincount(values)
    return int(np.argmax(counts))  # argmax returns the first (smallest) maximum


def enforce_consistency(semantic, instance):
    """Make the two masks consistent; returns (semantic, instance, report).

    Inputs are not modified. Works on Volumes or plain arrays; Volume
    inputs come back as Volumes on the same grid.
    """
    _check_grids(semantic, instance)
    sem_vol = semantic if isinstance(semantic, Volume) else None
    inst_vol = instance if isinstance(instance, Volume) else None
    sem = _as_array(semantic).copy()
    inst = _as_array(instance).copy()
    report = ConsistencyReport()

    for code in sorted(int(c) for c in np.unique(sem) if c != 0):
        report.holes_filled += _fill_label_holes(sem, code)
    for vid in sorted(int(v) for v in np.unique(inst) if v != 0):
        report.holes_filled += _fill_label_holes(inst, vid)

    relevant = _relevant_mask(sem)
    has_vertebra = bool(((inst >= 1) & (inst < 100) & relevant).any())
    if not has_vertebra and relevant.any():
        # no vertebra instance will survive the zero-out step, so nothing
        # can anchor the instance-bearing semantics: demote them instead,
        # then fill again so the demotion leaves no enclosed pockets
        report.demoted_semantic = int(relevant.sum())
        sem[relevant] = 0
        for code in sorted(int(c) for c in np.unique(sem) if c != 0):
            report.holes_filled += _fill_label_holes(sem, code)

    stray = (inst > 0) & ~_relevant_mask(sem)
    report.zeroed = int(stray.sum())
    inst[stray] = 0

    orphan = _relevant_mask(sem) & (inst == 0)
    if orphan.any():
        vertebra_ids = sorted(int(v) for v in np.unique(inst) if 1 <= v < 100)
        centroid_y = {}
        for vid in vertebra_ids:
            corpus = (sem == Structure.CORPUS) & (inst == vid)
            sel = corpus if corpus.any() else inst == vid
            centroid_y[vid] = float(np.nonzero(sel)[1].mean())
        topmost = min(vertebra_ids, key=lambda v: centroid_y[v])

        comps = connected_components(orphan, connectivity=26)
        for ci in range(1, comps.count + 1):
            box = comps.bboxes[ci - 1]
            box = tuple(
                slice(max(0, b.start - 1), min(d, b.stop + 1))
                for b, d in zip(box, orphan.shape)
            )
            comp = comps.labels[box] == ci
            target = _neighbor_majority(inst, comp, box)
            if target == 0:
                # no instance contact: key to the nearest vertebra above
                cy = comps.centroids[ci - 1][1]
                above = [v for v in vertebra_ids if centroid_y[v] < cy]
                k = min(above, key=lambda v: (cy - centroid_y[v], v)) if above else topmost
                codes = sem[box][comp]
                dominant = int(np.argmax(np.bincount(codes)))
                if dominant == Structure.IVD:
                    target = ivd_id(k)
                elif dominant == Structure.ENDPLATE:
                    target = endplate_id(k)
                else:
                    target = k
            sub = inst[box]
            sub[comp & (sub == 0)] = target
            report.orphans_assigned.append((int(comp.sum()), int(target)))

    sem_out = sem_vol.with_data(sem) if sem_vol is not None else sem
    inst_out = inst_vol.with_data(inst) if inst_vol is not None else inst
    return sem_out, inst_out, report

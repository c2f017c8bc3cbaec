"""Segmentation evaluation: overlap scores, surface distance, instance
matching, panoptic quality, and the paired significance test.

Masks may be passed as Volume objects (grids are then checked for
compatibility) or as plain boolean/integer arrays of equal shape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage as ndi

from .labels import Structure, classify_instance_id
from .volume import Volume

INSTANCE_KINDS = ("vertebra", "ivd", "endplate")


def _as_mask(x) -> np.ndarray:
    if isinstance(x, Volume):
        x = x.data
    return np.asarray(x) != 0


def _check_compatible(a, b) -> None:
    if isinstance(a, Volume) and isinstance(b, Volume):
        if not a.same_grid(b):
            raise ValueError(
                f"volumes live on different grids: {a.dims}/{a.spacing}/{a.orientation}"
                f" vs {b.dims}/{b.spacing}/{b.orientation}"
            )
    else:
        sa = a.dims if isinstance(a, Volume) else np.asarray(a).shape
        sb = b.dims if isinstance(b, Volume) else np.asarray(b).shape
        if tuple(sa) != tuple(sb):
            raise ValueError(f"mask shapes differ: {tuple(sa)} vs {tuple(sb)}")


def dice(a, b) -> float:
    """Dice similarity 2|A∩B| / (|A|+|B|); 1.0 when both masks are empty."""
    _check_compatible(a, b)
    ma, mb = _as_mask(a), _as_mask(b)
    size = int(ma.sum()) + int(mb.sum())
    if size == 0:
        return 1.0
    return 2.0 * int((ma & mb).sum()) / size


def iou(a, b) -> float:
    """Intersection over union; 1.0 when both masks are empty."""
    _check_compatible(a, b)
    ma, mb = _as_mask(a), _as_mask(b)
    union = int((ma | mb).sum())
    if union == 0:
        return 1.0
    return int((ma & mb).sum()) / union


def surface_mask(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a 6-neighbor background voxel or volume edge."""
    m = _as_mask(mask)
    padded = np.pad(m, 1, constant_values=False)
    interior = np.ones(m.shape, dtype=bool)
    for axis in range(3):
        for shift in (slice(0, -2), slice(2, None)):
            idx = [slice(1, -1)] * 3
            idx[axis] = shift
            interior &= padded[tuple(idx)]
    return m & ~interior


def assd(a, b, spacing=None) -> float:
    """Average symmetric surface distance in millimetres.

    Surfaces are the 6-neighborhood boundaries of each mask; distances are
    exact Euclidean, averaged over both surface-to-surface directions.
    """
    _check_compatible(a, b)
    if spacing is None:
        if isinstance(a, Volume):
            spacing = a.spacing
        elif isinstance(b, Volume):
            spacing = b.spacing
        else:
            spacing = (1.0, 1.0, 1.0)
    ma, mb = _as_mask(a), _as_mask(b)
    if not ma.any() or not mb.any():
        raise ValueError("surface distance is undefined for an empty mask")
    sa, sb = surface_mask(ma), surface_mask(mb)
    dist_to_b = ndi.distance_transform_edt(~sb, sampling=spacing)
    dist_to_a = ndi.distance_transform_edt(~sa, sampling=spacing)
    na, nb = int(sa.sum()), int(sb.sum())
    total = float(dist_to_b[sa].sum()) + float(dist_to_a[sb].sum())
    return total / (na + nb)


def dice_from_iou(value: float) -> float:
    return 2.0 * value / (1.0 + value)


@dataclass
class InstanceMatching:
    """One-to-one instance correspondence at an IoU threshold.

    ``pairs`` holds (predicted id, reference id, IoU) triples; unmatched
    predictions are false positives, unmatched references false negatives.
    """

    pairs: list[tuple[int, int, float]] = field(default_factory=list)
    unmatched_pred: list[int] = field(default_factory=list)
    unmatched_ref: list[int] = field(default_factory=list)
    threshold: float = 0.5

    @property
    def tp(self) -> int:
        return len(self.pairs)

    @property
    def fp(self) -> int:
        return len(self.unmatched_pred)

    @property
    def fn(self) -> int:
        return len(self.unmatched_ref)


def _instance_arrays(pred, ref) -> tuple[np.ndarray, np.ndarray]:
    pa = pred.data if isinstance(pred, Volume) else np.asarray(pred)
    ra = ref.data if isinstance(ref, Volume) else np.asarray(ref)
    return pa, ra


def _ids_of_kind(arr: np.ndarray, kind: str | None) -> list[int]:
    ids = [int(v) for v in np.unique(arr) if v != 0]
    if kind is None:
        return ids
    return [v for v in ids if classify_instance_id(v)[0] == kind]


def match_instances(pred, ref, kind: str | None = None, threshold: float = 0.5) -> InstanceMatching:
    """Greedy one-to-one matching of instance ids by descending IoU.

    Above threshold 0.5 the partner of each instance is forced (no two
    disjoint predictions can both overlap one reference that much), so the
    greedy order only arbitrates exact-threshold ties. ``kind`` restricts
    the matching to one id family (vertebra, ivd, endplate).
    """
    _check_compatible(pred, ref)
    pa, ra = _instance_arrays(pred, ref)
    pred_ids = _ids_of_kind(pa, kind)
    ref_ids = _ids_of_kind(ra, kind)
    if kind is not None:
        keep_p = np.isin(pa, pred_ids)
        keep_r = np.isin(ra, ref_ids)
        pa = np.where(keep_p, pa, 0)
        ra = np.where(keep_r, ra, 0)

    pred_sizes = {v: int((pa == v).sum()) for v in pred_ids}
    ref_sizes = {v: int((ra == v).sum()) for v in ref_ids}

    both = (pa > 0) & (ra > 0)
    candidates = []
    if both.any():
        keys = pa[both].astype(np.int64) * (int(ra.max()) + 1) + ra[both].astype(np.int64)
        uniq, counts = np.unique(keys, return_counts=True)
        base = int(ra.max()) + 1
        for key, inter in zip(uniq, counts):
            p, r = int(key) // base, int(key) % base
            union = pred_sizes[p] + ref_sizes[r] - int(inter)
            value = int(inter) / union
            if value >= threshold:
                candidates.append((p, r, value))
    candidates.sort(key=lambda t: (-t[2], t[0], t[1]))

    used_p, used_r, pairs = set(), set(), []
    for p, r, value in candidates:
        if p in used_p or r in used_r:
            continue
        used_p.add(p)
        used_r.add(r)
        pairs.append((p, r, value))
    return InstanceMatching(
        pairs=pairs,
        unmatched_pred=sorted(set(pred_ids) - used_p),
        unmatched_ref=sorted(set(ref_ids) - used_r),
        threshold=threshold,
    )


@dataclass
class PanopticScores:
    rq: float
    sq: float
    pq: float
    tp: int
    fp: int
    fn: int


def panoptic(matching: InstanceMatching) -> PanopticScores:
    """Recognition/segmentation/panoptic quality from an instance matching.

    RQ = TP/(TP + FP/2 + FN/2), SQ = mean matched IoU (0 with no matches),
    PQ = SQ * RQ. A matching with no instances on either side scores 1.0
    across the board (perfect vacuous agreement).
    """
    tp, fp, fn = matching.tp, matching.fp, matching.fn
    if tp + fp + fn == 0:
        return PanopticScores(rq=1.0, sq=1.0, pq=1.0, tp=0, fp=0, fn=0)
    rq = tp / (tp + 0.5 * fp + 0.5 * fn)
    sq = sum(v for _, _, v in matching.pairs) / tp if tp else 0.0
    return PanopticScores(rq=rq, sq=sq, pq=sq * rq, tp=tp, fp=fp, fn=fn)


@dataclass
class WilcoxonResult:
    statistic: float
    p_value: float
    n: int


def _exact_two_sided_p(doubled_ranks: np.ndarray, doubled_stat: int) -> float:
    """P over all 2^n sign patterns that W+ falls in either tail.

    Works on ranks doubled to integers (average ranks end in .5). The
    distribution of W+ is symmetric, so twice the lower tail suffices.
    """
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled_ranks:
        r = int(r)
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts += shifted
    tail = counts[: doubled_stat + 1].sum()
    return min(1.0, 2.0 * tail / counts.sum())


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def wilcoxon_signed_rank(x, y, exact_limit: int = 25) -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test on paired samples.

    Zero differences are dropped; tied absolute differences share average
    ranks; the statistic is min(W+, W-). The p-value is exact (full sign
    enumeration via counting) up to ``exact_limit`` retained pairs and a
    normal approximation with continuity and tie correction above that.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("paired samples must be equal-length 1D sequences")
    if x.size == 0:
        raise ValueError("need at least one pair")
    diff = x - y
    diff = diff[diff != 0.0]
    n = diff.size
    if n == 0:
        return WilcoxonResult(statistic=0.0, p_value=1.0, n=0)

    ranks = _average_ranks(np.abs(diff))
    w_plus = float(ranks[diff > 0].sum())
    w_minus = float(ranks[diff < 0].sum())
    stat = min(w_plus, w_minus)

    if n <= exact_limit:
        doubled = np.rint(2.0 * ranks).astype(np.int64)
        p = _exact_two_sided_p(doubled, int(round(2.0 * stat)))
    else:
        mean = n * (n + 1) / 4.0
        var = n * (n + 1) * (2 * n + 1) / 24.0
        _, tie_counts = np.unique(np.abs(diff), return_counts=True)
        var -= float(((tie_counts**3 - tie_counts).sum())) / 48.0
        z = (stat - mean + 0.5) / math.sqrt(var)
        p = min(1.0, 2.0 * 0.5 * math.erfc(-z / math.sqrt(2.0)))
    return WilcoxonResult(statistic=stat, p_value=p, n=n)


def semantic_report(pred, ref, spacing=None, codes=None) -> dict:
    """Per-structure DSC (always) and ASSD (when both sides non-empty)."""
    _check_compatible(pred, ref)
    pa, ra = _instance_arrays(pred, ref)
    if spacing is None and isinstance(pred, Volume):
        spacing = pred.spacing
    if codes is None:
        codes = sorted(set(np.unique(pa)) | set(np.unique(ra)))
        codes = [int(c) for c in codes if c != 0]
    entries = {}
    for code in codes:
        mp, mr = pa == code, ra == code
        entry = {"DSC": dice(mp, mr)}
        entry["ASSD"] = assd(mp, mr, spacing) if mp.any() and mr.any() else None
        try:
            name = Structure(code).name.lower()
        except ValueError:
            name = str(code)
        entries[name] = entry
    return entries


def instance_report(pred, ref, spacing=None, kinds=INSTANCE_KINDS) -> dict:
    """Panoptic scores plus global/instance-wise DSC and ASSD per id family."""
    _check_compatible(pred, ref)
    pa, ra = _instance_arrays(pred, ref)
    if spacing is None and isinstance(pred, Volume):
        spacing = pred.spacing
    out = {}
    for kind in kinds:
        matching = match_instances(pa, ra, kind=kind)
        scores = panoptic(matching)
        pred_ids = _ids_of_kind(pa, kind)
        ref_ids = _ids_of_kind(ra, kind)
        union_p = np.isin(pa, pred_ids) if pred_ids else np.zeros_like(pa, dtype=bool)
        union_r = np.isin(ra, ref_ids) if ref_ids else np.zeros_like(ra, dtype=bool)
        pair_dsc = []
        pair_assd = []
        for p, r, value in matching.pairs:
            pair_dsc.append(dice_from_iou(value))
            pair_assd.append(assd(pa == p, ra == r, spacing))
        out[kind] = {
            "DSC": dice(union_p, union_r),
            "instance_DSC": float(np.mean(pair_dsc)) if pair_dsc else None,
            "RQ": scores.rq,
            "SQ": scores.sq,
            "PQ": scores.pq,
            "ASSD": float(np.mean(pair_assd)) if pair_assd else None,
            "TP": scores.tp,
            "FP": scores.fp,
            "FN": scores.fn,
        }
    return out


def evaluate_segmentation(pred_sem, ref_sem, pred_inst=None, ref_inst=None, spacing=None) -> dict:
    """Full evaluation report: semantic per-structure plus optional instance part."""
    report = {"semantic": semantic_report(pred_sem, ref_sem, spacing=spacing)}
    if (pred_inst is None) != (ref_inst is None):
        raise ValueError("instance evaluation needs both predicted and reference volumes")
    if pred_inst is not None:
        report["instances"] = instance_report(pred_inst, ref_inst, spacing=spacing)
    return report

"""A tour of the evaluation metrics on hand-checkable fixtures.

Every number printed here can be verified with pencil and paper: overlap
metrics on boxes, panoptic scores on a tiny matching, and an exact
signed-rank p-value against its definition.
"""

import numpy as np

from spineseg import assd, dice, iou, match_instances, panoptic, wilcoxon_signed_rank


def main():
    a = np.zeros((10, 10, 10), dtype=bool)
    b = np.zeros((10, 10, 10), dtype=bool)
    a[2:6, 2:6, 2:6] = True          # 64 voxels
    b[4:8, 2:6, 2:6] = True          # 64 voxels, 32 shared
    print("two half-overlapping 4x4x4 boxes:")
    print(f"  dice {dice(a, b):.6f}   (expected 2*32/128 = 0.5)")
    print(f"  iou  {iou(a, b):.6f}   (expected 32/96 = 0.3333)")
    print(f"  assd {assd(a, b, (1, 1, 1)):.6f} mm (boxes shifted by 2 voxels)")
    print(f"  dice from iou: {2 * iou(a, b) / (1 + iou(a, b)):.6f} (same by identity)")

    pred = np.zeros((1, 45, 1), dtype=np.uint16)
    ref = np.zeros((1, 45, 1), dtype=np.uint16)
    ref[0, 0:9, 0] = 1
    pred[0, 1:10, 0] = 1             # IoU 0.8 pair
    ref[0, 15:23, 0] = 2
    pred[0, 17:25, 0] = 2            # IoU 0.6 pair
    pred[0, 30:33, 0] = 3            # false positive
    ref[0, 36:39, 0] = 4             # false negative
    scores = panoptic(match_instances(pred, ref))
    print("\npanoptic on matched IoUs {0.8, 0.6} with one FP and one FN:")
    print(f"  RQ {scores.rq:.4f}  SQ {scores.sq:.4f}  PQ {scores.pq:.4f}")
    print(f"  PQ equals SQ*RQ: {abs(scores.pq - scores.sq * scores.rq) < 1e-15}")

    x = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    y = np.zeros(5)
    result = wilcoxon_signed_rank(x, y)
    print("\nsigned-rank test, five positive differences:")
    print(f"  statistic {result.statistic}, p = {result.p_value}")
    print("  (only 1 of 2^5 = 32 sign patterns is as extreme; two-sided p = 2/32 = 0.0625)")

    rng = np.random.default_rng(0)
    big_x = rng.normal(0.3, 1.0, size=60)
    big_y = rng.normal(0.0, 1.0, size=60)
    approx = wilcoxon_signed_rank(big_x, big_y)
    print(f"\nn=60 shifted sample switches to the normal approximation: p = {approx.p_value:.5f}")


if __name__ == "__main__":
    main()

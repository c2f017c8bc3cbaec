"""How hard can the cutout predictions be corrupted before vertebrae are
lost or merged?

Each assembled vertebra is voted on by up to three overlapping cutouts,
so a single bad prediction is usually outvoted. This sweep raises the
per-cutout corruption probability and reports how often the assembled
count still matches the ground truth.
"""

import argparse

import numpy as np

from spineseg import NoiseSpec, OracleInstancePredictor, PhantomSpec, assemble, generate_phantom


def count_vertebrae(arr):
    return len(np.unique(arr[(arr >= 1) & (arr < 100)]))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--runs", type=int, default=10, help="runs per noise level")
    ap.add_argument("--vertebrae", type=int, default=7)
    args = ap.parse_args()

    _, sem_gt, inst_gt = generate_phantom(PhantomSpec(n_vertebrae=args.vertebrae, seed=0))
    want = count_vertebrae(inst_gt.data)

    print(f"{args.vertebrae}-vertebra phantom, {args.runs} runs per level")
    print(f"{'p':>5} {'exact count':>12} {'mean |error|':>13}")
    for p in (0.0, 0.05, 0.1, 0.2, 0.3, 0.4):
        errors = []
        for seed in range(args.runs):
            noise = NoiseSpec(p_erosion=p, p_labeldrop=p, p_downup=p, seed=seed)
            out, _ = assemble(sem_gt, OracleInstancePredictor(inst_gt, sem_gt, noise))
            errors.append(abs(count_vertebrae(out.data) - want))
        exact = sum(e == 0 for e in errors)
        print(f"{p:5.2f} {exact:>7}/{args.runs:<4} {np.mean(errors):>13.2f}")


if __name__ == "__main__":
    main()

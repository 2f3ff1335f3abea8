"""Diameter and length recovery on random phantom loops.

Compares the truth-mask route (ground-truth mask plus ingested truth
keypoints) with the fully native route (vesselness + native keypoints).

    python3 scripts/bench_diameters.py --n 50 --seed 2024
"""

import argparse
import time

import numpy as np

from nailfold.capillary import INGESTED, KeypointSet
from nailfold.phantom import LoopSpec, synth_image
from nailfold.pipeline import analyze_image
from nailfold.report import regression_metrics

FIELDS = {"arterial": "arterial_width", "venous": "venous_width", "apical": "apex_width", "length": "length"}


def run(n: int, seed: int, noise: float, native: bool):
    rng = np.random.default_rng(seed)
    pred = {k: [] for k in FIELDS}
    truth = {k: [] for k in FIELDS}
    missed = 0
    for i in range(n):
        wa, wv = rng.uniform(6, 14, 2)
        wp = rng.uniform(8, 16)
        spec = LoopSpec(apex_center=(60 + rng.uniform(0, 1), 200 + rng.uniform(0, 1)),
                        limb_length=rng.uniform(90, 150), limb_spacing=max(wa, wv, wp) + 18,
                        arterial_width=wa, venous_width=wv, apex_width=wp, noise_sigma=noise, seed=i)
        img, tr = synth_image([spec], (512, 384))
        lp = tr.loops[0]
        if native:
            rep = analyze_image(img)
        else:
            rep = analyze_image(img, mask=tr.mask,
                                keypoints=[KeypointSet(lp.apex, lp.arterial, lp.venous, INGESTED)])
        if len(rep["capillaries"]) != 1:
            missed += 1
            continue
        px = rep["capillaries"][0]["px"]
        for k, attr in FIELDS.items():
            pred[k].append(px[k])
            truth[k].append(getattr(lp, attr))
    return pred, truth, missed


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=50)
    ap.add_argument("--seed", type=int, default=2024)
    ap.add_argument("--noise", type=float, default=0.02)
    args = ap.parse_args()
    for native in (False, True):
        t0 = time.perf_counter()
        pred, truth, missed = run(args.n, args.seed, args.noise, native)
        name = "native" if native else "truth mask"
        print(f"{name}: {args.n - missed}/{args.n} loops measured in {time.perf_counter() - t0:.1f} s")
        for k in FIELDS:
            mae, rmse = regression_metrics(pred[k], truth[k])
            bias = float(np.mean(np.subtract(pred[k], truth[k])))
            print(f"  {k:<9} MAE {mae:6.3f}  RMSE {rmse:6.3f}  bias {bias:+6.3f} px")


if __name__ == "__main__":
    main()

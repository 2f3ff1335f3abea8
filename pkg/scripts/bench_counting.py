"""WBC counting accuracy versus the number of transits and their spacing.

    python3 scripts/bench_counting.py --trials 20 --gap 40 25 15
"""

import argparse
from collections import Counter

import numpy as np

from nailfold.flow import FrameSequence, analyze_video
from nailfold.phantom import LoopSpec, TransitSpec, centerline, synth_video
from nailfold.pipeline import instance_geometry
from nailfold.segmentation import extract_instances

CANVAS = (160, 140)


def loop(seed, noise):
    return LoopSpec(apex_center=(30, 80), limb_length=90, limb_spacing=28, noise_sigma=noise, seed=seed)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--trials", type=int, default=20)
    ap.add_argument("--gap", type=float, nargs="+", default=[40.0, 25.0, 15.0],
                    help="frames between consecutive mid-crossings")
    ap.add_argument("--noise", type=float, default=0.05)
    args = ap.parse_args()
    _, tr = synth_video(loop(0, 0.0), [], 2, canvas=CANVAS)
    (inst,) = extract_instances(tr.mask, 10, 1e6)
    geo = instance_geometry(inst, tr.mask.shape)
    L = centerline(loop(0, 0.0)).length
    for gap in args.gap:
        errors = Counter()
        for trial in range(args.trials):
            rng = np.random.default_rng(trial)
            K = int(rng.integers(1, 6))
            mids = 100 + gap * (np.arange(K) - (K - 1) / 2)
            transits = []
            for m in mids:
                v = float(rng.uniform(0.5, 3))
                transits.append(TransitSpec(v, start_frame=m - (L / 2) / v, direction=str(rng.choice(["+s", "-s"]))))
            frames, _ = synth_video(loop(trial, args.noise), transits, 200, canvas=CANVAS, texture=0.1)
            n = analyze_video(FrameSequence(frames), geo.path, geo.dist).count
            errors[n - K] += 1
        exact = errors[0] / args.trials
        print(f"gap {gap:5.1f} frames: exact {exact:.0%}  count error histogram {dict(sorted(errors.items()))}")


if __name__ == "__main__":
    main()

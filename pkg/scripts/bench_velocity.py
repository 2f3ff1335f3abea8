"""WBC speed and timing recovery across transit speeds and noise levels.

    python3 scripts/bench_velocity.py --trials 5 --noise 0.05 0.1
"""

import argparse

from nailfold.flow import FrameSequence, analyze_video
from nailfold.phantom import LoopSpec, TransitSpec, centerline, synth_video
from nailfold.pipeline import instance_geometry
from nailfold.segmentation import extract_instances

CANVAS = (160, 140)
SPEEDS = (0.25, 0.5, 1.0, 2.0, 4.0)


def loop(seed, noise):
    return LoopSpec(apex_center=(30, 80), limb_length=90, limb_spacing=28, noise_sigma=noise, seed=seed)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--trials", type=int, default=5, help="trials per speed")
    ap.add_argument("--noise", type=float, nargs="+", default=[0.05])
    ap.add_argument("--frames", type=int, default=200)
    args = ap.parse_args()
    _, tr = synth_video(loop(0, 0.0), [], 2, canvas=CANVAS)
    (inst,) = extract_instances(tr.mask, 10, 1e6)
    geo = instance_geometry(inst, tr.mask.shape)
    L = centerline(loop(0, 0.0)).length
    mid = args.frames / 2
    print(f"{'noise':>6} {'speed':>6} {'found':>6} {'speed err':>10} {'time err':>9}")
    for noise in args.noise:
        for v in SPEEDS:
            found, dv, dt = 0, [], []
            for k in range(args.trials):
                frames, truth = synth_video(loop(100 + k, noise), [TransitSpec(v, start_frame=mid - (L / 2) / v)],
                                            args.frames, canvas=CANVAS, texture=0.1)
                res = analyze_video(FrameSequence(frames), geo.path, geo.dist)
                if res.count != 1:
                    continue
                found += 1
                sc = res.profile.center[1]
                t_true = truth.crossing_frame(0, truth.centerline.arc_of(res.profile.samples[int(round(sc))]))
                dv.append(abs(abs(res.events[0].speed_px_per_frame) - v))
                dt.append(abs(res.events[0].occurrence_frame - t_true))
            sv = f"{max(dv):10.3f}" if dv else f"{'-':>10}"
            st = f"{max(dt):9.2f}" if dt else f"{'-':>9}"
            print(f"{noise:6.2f} {v:6.2f} {found:>3}/{args.trials:<2} {sv} {st}")
    print("errors are the worst case over trials (px/frame, frames)")


if __name__ == "__main__":
    main()

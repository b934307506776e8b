"""Time the hot kernels with numba and with the numpy fallback.

Each path runs in its own interpreter because the switch is read at import:

    python benchmarks/bench_kernels.py --repeat 5
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np


def random_boxes(rng, n, extent=200.0):
    xy = rng.uniform(0, extent, size=(n, 2))
    wh = rng.uniform(2, extent / 4, size=(n, 2))
    return np.column_stack([xy, xy + wh])


def cases(rng):
    from wssod import _kernels
    from wssod.matching import hungarian_assign

    a, b = random_boxes(rng, 300), random_boxes(rng, 300)
    boxes = random_boxes(rng, 800)
    labels = rng.integers(0, 5, 800)
    order = np.argsort(-rng.random(800), kind="stable").astype(np.int64)
    small = [rng.uniform(0, 2, size=(7, 7)) for _ in range(200)]
    large = rng.uniform(0, 2, size=(80, 80))
    ious = rng.random((200, 200))
    return {
        "iou_matrix 300x300": lambda: _kernels.iou_matrix(a, b),
        "nms_keep 800 boxes": lambda: _kernels.nms_keep(boxes, labels, order, 0.5),
        "hungarian 200 x (7x7)": lambda: [hungarian_assign(c) for c in small],
        "hungarian 80x80": lambda: hungarian_assign(large),
        "greedy_match 200x200": lambda: _kernels.greedy_match(ious, 0.5),
    }


def run_here(repeat: int) -> dict:
    from wssod import _accel

    rng = np.random.default_rng(0)
    out = {"numba": _accel.USE_NUMBA, "seconds": {}}
    for name, fn in cases(rng).items():
        fn()  # compile / warm caches
        out["seconds"][name] = min(timeit.repeat(fn, number=1, repeat=repeat))
    return out


def run_child(disable: bool, repeat: int) -> dict:
    env = dict(os.environ, WSSOD_DISABLE_NUMBA="1" if disable else "0")
    res = subprocess.run([sys.executable, __file__, "--child", "--repeat", str(repeat)], env=env,
                         capture_output=True, text=True, check=True)
    return json.loads(res.stdout)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args(argv)
    if args.child:
        print(json.dumps(run_here(args.repeat)))
        return
    fast, slow = run_child(False, args.repeat), run_child(True, args.repeat)
    if not fast["numba"]:
        print("numba unavailable; both columns use the fallback")
    print(f"{'kernel':<24}{'numba ms':>12}{'fallback ms':>14}{'speedup':>10}")
    for name, t_fast in fast["seconds"].items():
        t_slow = slow["seconds"][name]
        print(f"{name:<24}{1e3 * t_fast:>12.3f}{1e3 * t_slow:>14.3f}{t_slow / t_fast:>9.1f}x")


if __name__ == "__main__":
    main()

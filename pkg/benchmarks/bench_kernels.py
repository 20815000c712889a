"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each kernel runs once untimed (JIT compile / cache load), then the best of
``--repeat`` runs is reported.  Outputs of the two paths are compared too.
"""

from __future__ import annotations

import argparse
import json
import time

import numpy as np

from fgn import kernels
from fgn._jit import NUMBA_AVAILABLE


def _boxes(rng, n, size=128.0):
    xy = rng.uniform(0, size * 0.8, (n, 2))
    wh = rng.uniform(4, size * 0.3, (n, 2))
    return np.concatenate([xy, xy + wh], axis=1)


def cases(rng):
    feat = rng.normal(size=(32, 32, 64))
    rois = _boxes(rng, 64)
    grad = rng.normal(size=(64, 7, 7, 64))
    a, b = _boxes(rng, 2000), _boxes(rng, 50)
    nb = _boxes(rng, 3000)
    ns = rng.uniform(size=3000)
    return {
        "roi_align_forward (64 RoIs, 32x32x64)":
            lambda u: kernels.roi_align_forward(feat, rois, 0.25, 7, 7, 2, use_numba=u),
        "roi_align_backward (64 RoIs, 32x32x64)":
            lambda u: kernels.roi_align_backward(grad, rois, 0.25, 32, 32, 2, use_numba=u),
        "box_iou (2000 x 50)": lambda u: kernels.box_iou(a, b, use_numba=u),
        "nms (3000 boxes, IoU 0.7)": lambda u: kernels.nms(nb, ns, 0.7, use_numba=u),
    }


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json")
    args = ap.parse_args(argv)
    if not NUMBA_AVAILABLE:
        print("numba not importable; only the numpy path can run")
    rng = np.random.default_rng(0)
    rows = []
    print(f"{'kernel':42s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}  outputs")
    for name, fn in cases(rng).items():
        t_np = best_of(lambda: fn(False), args.repeat)
        row = {"kernel": name, "numpy_s": t_np}
        if NUMBA_AVAILABLE:
            t_nb = best_of(lambda: fn(True), args.repeat)
            same = np.allclose(fn(False), fn(True), rtol=1e-10, atol=1e-12)
            row.update(numba_s=t_nb, speedup=t_np / t_nb, equal=bool(same))
            print(f"{name:42s} {1e3 * t_np:10.2f} {1e3 * t_nb:10.2f} {t_np / t_nb:7.1f}x  "
                  f"{'match' if same else 'DIFFER'}")
        else:
            print(f"{name:42s} {1e3 * t_np:10.2f} {'-':>10s} {'-':>8s}")
        rows.append(row)
    if args.json:
        with open(args.json, "w") as f:
            json.dump(rows, f, indent=2)


if __name__ == "__main__":
    main()

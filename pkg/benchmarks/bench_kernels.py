"""Time the compiled and numpy kernel backends on workloads shaped like a training step.

    python benchmarks/bench_kernels.py [--repeat 20] [--json out.json]
"""
import argparse
import json
import timeit

import numpy as np

from simtune import kernels


def workloads(mod, rng):
    x = rng.standard_normal((128, 32, 32, 30)).astype(np.float32)
    cols = mod.im2col(x, 3, 3, 2, 1)
    p = rng.standard_normal(400_000).astype(np.float32)
    g, m, v = (rng.standard_normal(p.size).astype(np.float32) for _ in range(3))
    v = np.abs(v)
    frames = rng.integers(0, 256, size=(128, 10, 32, 32, 3), dtype=np.uint8)
    img = np.zeros((32, 32, 3))
    color = (0.8, 0.3, 0.2)

    def draw():
        mod.draw_rect(img, 3.2, 5.5, 20.7, 11.1, color)
        mod.draw_circle(img, 15.3, 12.8, 2.9, color)
        mod.draw_segment(img, 16.0, 12.0, 24.5, 27.0, 1.0, color)

    return {
        "im2col conv1 (B=128)": lambda: mod.im2col(x, 3, 3, 2, 1),
        "col2im conv1 (B=128)": lambda: mod.col2im(cols, x.shape, 3, 3, 2, 1),
        "adam 400k params": lambda: mod.adam_update(p, g, m, v, 1e-3, 0.9, 0.999, 0.5, 0.5, 1e-8),
        "stack 10-frame windows": lambda: mod.stack_windows(frames, np.float32),
        "rasterize one frame": draw,
    }


def bench(repeat):
    names = ["pure"] + (["fast"] if kernels.fast_available() else [])
    results = {}
    for name in names:
        mod = kernels.backend_module(name)
        for label, fn in workloads(mod, np.random.default_rng(0)).items():
            number = 200 if label.startswith("rasterize") else 3
            best = min(timeit.repeat(fn, number=number, repeat=repeat)) / number
            results.setdefault(label, {})[name] = best
    return names, results


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=10)
    ap.add_argument("--json")
    args = ap.parse_args()
    names, results = bench(args.repeat)
    print(f"{'kernel':<26}" + "".join(f"{n + ' (ms)':>14}" for n in names) + ("   speedup" if len(names) == 2 else ""))
    for label, row in results.items():
        line = f"{label:<26}" + "".join(f"{1e3 * row[n]:>14.3f}" for n in names)
        if len(names) == 2:
            line += f"   {row['pure'] / row['fast']:7.1f}x"
        print(line)
    if not kernels.fast_available():
        print("compiled backend not built; run `pip install -e . --no-build-isolation` to compare")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()

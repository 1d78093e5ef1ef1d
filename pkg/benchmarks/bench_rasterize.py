"""Compare the numba and pure-numpy compositing kernels on the same projected scene.

    python benchmarks/bench_rasterize.py [--size 128] [--primitives 500] [--repeats 5]

Both kernel modules are imported directly so one process can time both; the
library itself picks one at import time from SPLATLOC_BACKEND.
"""

import argparse
import time

import numpy as np

from splatloc.harness.scene import SceneSpec, ring_pose, synth_scene
from splatloc.render import bin_projection, project_gaussians
from splatloc.render import kernels_numba, kernels_numpy


def _time(fn, repeats):
    fn()  # warm-up (jit compile for numba)
    ts = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    return float(np.median(ts))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--primitives", type=int, default=500)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args(argv)

    spec = SceneSpec(primitive_count=args.primitives, width=args.size, height=args.size)
    gmap, _ = synth_scene(spec)
    K = spec.intrinsics()
    pose = ring_pose(spec, 0.3, spec.ring_height)
    proj = project_gaussians(gmap, pose, K)
    offsets, entries, tiles_x = bin_projection(proj, K.width, K.height)
    inputs = (proj.means2d, proj.conics, proj.opacities, proj.colors, proj.depths,
              offsets, entries, K.width, K.height, tiles_x)
    rng = np.random.default_rng(0)
    gc = rng.standard_normal((K.height, K.width, 3))
    gd = rng.standard_normal((K.height, K.width))
    go = rng.standard_normal((K.height, K.width))

    rows = []
    results = {}
    for name, mod in (("numba", kernels_numba), ("numpy", kernels_numpy)):
        fwd = mod.forward(*inputs)
        results[name] = fwd
        t_f = _time(lambda: mod.forward(*inputs), args.repeats)
        t_b = _time(lambda: mod.backward(*inputs, fwd[3], fwd[4], gc, gd, go), args.repeats)
        rows.append((name, t_f, t_b))

    dev = max(float(np.abs(a - b).max()) for a, b in zip(results["numba"][:3], results["numpy"][:3]))
    print(f"{args.size}x{args.size}, {len(gmap)} primitives, {len(entries)} tile entries")
    print(f"{'backend':8s} {'forward ms':>11s} {'backward ms':>12s}")
    for name, t_f, t_b in rows:
        print(f"{name:8s} {t_f * 1e3:11.2f} {t_b * 1e3:12.2f}")
    print(f"speedup  {rows[1][1] / rows[0][1]:11.1f}x {rows[1][2] / rows[0][2]:11.1f}x")
    print(f"max forward deviation between backends: {dev:.2e}")


if __name__ == "__main__":
    main()

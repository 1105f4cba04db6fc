#!/usr/bin/env python3
"""Hot-kernel timings, numba against the numpy fallback.

The backend is fixed at import time, so each backend runs in its own
subprocess with ``MESHSPLAT_NUMBA`` set. Prints a table, or JSON with --json.

    python benchmarks/bench_kernels.py --repeats 5
"""
import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

SEED = 0


def _time(fn, repeats):
    fn()  # warm-up (numba compile or cache load)
    ts = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    return float(np.median(ts))


def run_kernels(repeats: int, delaunay_sites: int) -> dict:
    from meshsplat import _jit
    from meshsplat.delaunay import triangulate, verify_delaunay
    from meshsplat.meshing import marching_tetrahedra, sphere_mesh
    from meshsplat.render import rasterize_mesh, render_gaussians
    from meshsplat.scene import make_synthetic_scene

    data, scene = make_synthetic_scene("sphere r=1", 300, 4, SEED, resolution=64, n_gt_samples=100)
    cam = data.cameras[1]

    def splat():
        r = render_gaussians(scene, cam, data.background)
        fg = np.isfinite(r.depth)
        r.backward(np.where(fg, 1.0, 0.0), None, np.ones(r.color.shape))

    mesh = sphere_mesh(1.0, 4)
    sites = np.random.default_rng(SEED).uniform(-2, 2, (delaunay_sites, 3))
    tets = triangulate(sites, seed=SEED).tets
    sdf = np.tanh((np.linalg.norm(sites, axis=1) - 1.0) / 0.1)
    return {
        "backend": _jit.backend(),
        "seconds": {
            "splat_fwd_bwd_300g_64px": _time(splat, repeats),
            "raster_sphere_5k_faces_64px": _time(lambda: rasterize_mesh(mesh, cam), repeats),
            f"delaunay_{delaunay_sites}_sites": _time(lambda: triangulate(sites, seed=SEED), repeats),
            f"verify_delaunay_{delaunay_sites}_sites": _time(lambda: verify_delaunay(sites, tets), repeats),
            f"marching_tets_{delaunay_sites}_sites": _time(lambda: marching_tetrahedra(tets, sites, sdf), repeats),
        },
    }


def child(backend: str, repeats: int, sites: int) -> dict:
    env = dict(os.environ, MESHSPLAT_NUMBA="1" if backend == "numba" else "0")
    cmd = [sys.executable, __file__, "--child", "--repeats", str(repeats), "--sites", str(sites)]
    out = subprocess.run(cmd, env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--sites", type=int, default=500, help="Delaunay site count (the numpy path is slow)")
    ap.add_argument("--json", action="store_true")
    ap.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.child:
        print(json.dumps(run_kernels(args.repeats, args.sites)))
        return
    res = {b: child(b, args.repeats, args.sites)["seconds"] for b in ("numba", "numpy")}
    if args.json:
        print(json.dumps(res, indent=2))
        return
    print(f"{'kernel':<34} {'numba s':>10} {'numpy s':>10} {'speedup':>8}")
    for k in res["numba"]:
        a, b = res["numba"][k], res["numpy"][k]
        print(f"{k:<34} {a:>10.4f} {b:>10.4f} {b / a:>8.1f}")


if __name__ == "__main__":
    main()

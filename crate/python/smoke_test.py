#!/usr/bin/env python3
"""Smoke test for the local4d_py extension module.

Build the module first:
    cargo build -p local4d-py --release
then run:
    python3 python/smoke_test.py
"""
import math
import shutil
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def load_module():
    candidates = [
        REPO / "target" / "release" / "liblocal4d_py.so",
        REPO / "target" / "debug" / "liblocal4d_py.so",
    ]
    src = next((c for c in candidates if c.exists()), None)
    if src is None:
        sys.exit("liblocal4d_py.so not found; run `cargo build -p local4d-py --release` first")
    stage = Path(tempfile.mkdtemp(prefix="local4d_py_"))
    shutil.copy(src, stage / "local4d_py.so")
    sys.path.insert(0, str(stage))
    import local4d_py  # noqa: E402

    return local4d_py


def check(name, ok, detail=""):
    status = "PASS" if ok else "FAIL"
    print(f"[{status}] {name} {detail}")
    if not ok:
        sys.exit(1)


def main():
    m = load_module()

    # marching cubes on an analytic sphere
    n, radius, half = 48, 0.2, 0.3
    spacing = 2 * half / (n - 1)
    values = []
    for k in range(n):
        for j in range(n):
            for i in range(n):
                x = -half + i * spacing
                y = -half + j * spacing
                z = -half + k * spacing
                values.append(math.sqrt(x * x + y * y + z * z) - radius)
    mesh = m.marching_cubes(values, (n, n, n), (-half, -half, -half), (spacing,) * 3)
    errs = [abs(math.sqrt(x * x + y * y + z * z) - radius) for (x, y, z) in mesh.vertices()]
    mean_err = sum(errs) / len(errs)
    check("marching_cubes sphere radius", mean_err < 1.5 * spacing, f"mean_err={mean_err:.5f}")
    check("marching_cubes sphere topology", mesh.euler_characteristic() == 2)

    # metrics: self comparison is exact, shifted sphere is not
    sphere = m.TriMesh.uv_sphere(0.2, 24, 32)
    self_eval = m.eval_meshes(sphere, sphere, samples=5000)
    check("eval self chamfer", self_eval["chamfer_l2"] == 0.0)
    check("eval self f_score", self_eval["f_score"] == 1.0)
    pts_a, _ = sphere.sample_surface(2000, seed=1)
    pts_b = [(x + 0.01, y, z) for (x, y, z) in pts_a]
    d = m.chamfer_l2(pts_a, pts_b)
    check("chamfer shifted", 0.0 < d <= 1e-4, f"chamfer={d:.2e}")
    f = m.f_score(pts_a, pts_b, 0.02)
    check("f_score within tau", f == 1.0)

    # deterministic sampling
    s1, n1 = sphere.sample_surface(100, seed=7)
    s2, n2 = sphere.sample_surface(100, seed=7)
    check("sampling deterministic", s1 == s2 and n1 == n2)
    check("normals unit", all(abs(x * x + y * y + z * z - 1) < 1e-9 for (x, y, z) in n1))

    # synthetic sequence generation + OBJ round trip
    out = Path(tempfile.mkdtemp(prefix="local4d_seq_"))
    frames = m.generate_sequence(out, seed=5, preset="sway", frames=3)
    check("generate_sequence frames", frames == 3)
    clothed = m.TriMesh.load(out / "clothed_000.obj")
    check("sequence mesh loads", len(clothed.vertices()) > 1000, repr(clothed))
    roundtrip = out / "roundtrip.obj"
    clothed.save(roundtrip)
    again = m.TriMesh.load(roundtrip)
    check("obj round trip", again.vertices() == clothed.vertices() and again.faces() == clothed.faces())

    print("smoke test passed")


if __name__ == "__main__":
    main()

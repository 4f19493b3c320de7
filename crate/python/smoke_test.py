#!/usr/bin/env python3
"""Smoke test of the cvtopt_py extension module.

Build the extension first:

    cargo build --release -p cvtopt-py

then run this script from anywhere; it locates the cdylib in the cargo
target directory, imports it under the proper module name, and exercises
the main entry points against known values.
"""

import math
import shutil
import sys
import tempfile
from pathlib import Path


def load_module():
    root = Path(__file__).resolve().parent.parent
    candidates = [
        root / "target" / "release" / "libcvtopt_py.so",
        root / "target" / "debug" / "libcvtopt_py.so",
        root / "target" / "release" / "libcvtopt_py.dylib",
        root / "target" / "debug" / "libcvtopt_py.dylib",
    ]
    lib = next((p for p in candidates if p.exists()), None)
    if lib is None:
        sys.exit("extension not built; run: cargo build --release -p cvtopt-py")
    tmp = Path(tempfile.mkdtemp(prefix="cvtopt-py-"))
    shutil.copy2(lib, tmp / "cvtopt_py.so")
    sys.path.insert(0, str(tmp))
    import cvtopt_py

    return cvtopt_py


def check(name, ok, detail=""):
    status = "PASS" if ok else "FAIL"
    print(f"{name}: {status}{'  ' + detail if detail else ''}")
    if not ok:
        sys.exit(1)


def main():
    m = load_module()

    # Single site at the center of the unit square: energy is 1/6.
    e = m.cvt_energy([0.5, 0.5], side=1.0)
    check("energy of centered single site", abs(e - 1.0 / 6.0) <= 1e-15, f"G = {e:.12f}")

    # Seeded sampling is reproducible.
    a = m.sample_sites(50, 7)
    b = m.sample_sites(50, 7)
    check("seeded sampling determinism", a == b)

    # Cell areas of a random diagram partition the domain.
    coords = m.sample_sites(100, 1)
    d = m.Diagram(coords)
    total = sum(d.areas())
    check(
        "areas partition the domain",
        abs(total - d.total_area()) <= 1e-9 * d.total_area(),
        f"sum = {total:.12f}, domain = {d.total_area():.12f}",
    )
    check("cell count", d.cell_count() == 100 and len(d) == 100)

    # The locate query agrees with the polygon data.
    i = d.locate(1.0, 2.0)
    poly = d.cell_polygon(i)
    check("locate returns a valid cell", 0 <= i < 100 and len(poly) >= 3)

    # Both analytic gradients agree with finite differences.
    coords10 = m.sample_sites(10, 1)
    for grad_name in ("integral", "explicit"):
        g = m.cvt_gradient(coords10, grad=grad_name)
        fd = m.finite_difference_gradient(coords10, merit="g")
        err = max(abs(x - y) for x, y in zip(g, fd))
        check(f"{grad_name} gradient vs finite differences", err <= 1e-5, f"max err = {err:.2e}")

    # Merit assembly: f1 = omega * G + J1.
    mv = m.merit_eval(coords10, merit="f1", omega=0.001)
    check(
        "merit components combine",
        abs(mv.f - (0.001 * mv.energy + mv.penalty)) <= 1e-15,
        f"f = {mv.f:.6e}",
    )

    # Optimization reproduces the known 10-site energy level.
    r = m.optimize(coords10, merit="g")
    check(
        "10-site energy minimization",
        r.termination == "converged" and r.pg_norm <= 1e-8 and abs(r.f - 0.169930) < 0.169930 * 0.03,
        f"G = {r.f:.6e}, pg = {r.pg_norm:.1e}, iterations = {r.iterations}",
    )

    # A converged tessellation is a fixed point of the centroid step.
    moved = m.lloyd_step(r.coords)
    motion = max(
        math.hypot(moved[2 * i] - r.coords[2 * i], moved[2 * i + 1] - r.coords[2 * i + 1])
        for i in range(10)
    )
    check("centroid fixed point", motion <= 1e-7, f"max motion = {motion:.2e}")

    # Errors surface as Python exceptions.
    try:
        m.optimize(coords10, merit="f2")
        check("missing c2 raises", False)
    except ValueError:
        check("missing c2 raises", True)

    print("all smoke tests passed")


if __name__ == "__main__":
    main()

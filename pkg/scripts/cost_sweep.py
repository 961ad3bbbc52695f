"""Accuracy versus field evaluations for the section method and the
single-orbit (general) method, on the perturbed benchmark where the exact
volume is still 2 pi^2 R0 r^2.

Writes a CSV ``method,setting,rel_err,n_evals,wall_time``.
"""

import argparse
import csv
import sys
import time

import numpy as np

from fluxvol.field import make_tokamak_field
from fluxvol.volume import SectionDisk, volume_eq1_section, volume_profile_general


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--eps", type=float, default=0.005)
    p.add_argument("--r", type=float, default=0.5)
    p.add_argument("--grids", default="4,6,8,12,16,32")
    p.add_argument("--general", default="4x50,8x100,16x100,16x500",
                   help="comma list of LABELSxTURNS")
    p.add_argument("--out", default="cost_sweep.csv")
    args = p.parse_args()

    f = make_tokamak_field(eps=args.eps)
    ref = 2 * np.pi ** 2 * f.params.R0 * args.r ** 2
    psi = 0.5 * args.r ** 2
    rows = []
    for n in (int(v) for v in args.grids.split(",")):
        f.n_evals = 0
        t0 = time.perf_counter()
        V = volume_eq1_section(f, SectionDisk((f.params.R0, 0.0), args.r), grid=(n, n),
                               error_estimate=False).V
        rows.append(("eq1", f"{n}x{n}", abs(V - ref) / ref, f.n_evals,
                     time.perf_counter() - t0))
    for spec in args.general.split(","):
        nl, nt = (int(v) for v in spec.split("x"))
        f.n_evals = 0
        t0 = time.perf_counter()
        prof = volume_profile_general(f, np.linspace(psi / nl, psi, nl), label_kind="psi",
                                      n_turns=nt, center=(f.params.R0, 0.0))
        rows.append(("general", spec, abs(prof.V[-1] - ref) / ref, f.n_evals,
                     time.perf_counter() - t0))

    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "setting", "rel_err", "n_evals", "wall_time"])
        w.writerows(rows)
    for r in rows:
        print(f"{r[0]:<8} {r[1]:>8} rel_err={r[2]:.2e} evals={r[3]:>9d} time={r[4]:.2f}s")
    return 0


if __name__ == "__main__":
    sys.exit(main())

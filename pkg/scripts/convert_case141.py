"""Convert the MATPOWER ``case141.m`` file into the bundled feeder CSV layout.

Usage: python scripts/convert_case141.py path/to/case141.m [--out DIR]

Loads are given in kVA at power factor 0.85 and impedances in ohms on a
12.47 kV, 10 MVA base; both are converted the same way the case file does.
Bus k becomes node k - 1. The source disables branch limits, so each line
gets a limit of ``--limit-factor`` times its no-response apparent flow
(at least ``--min-limit`` MVA).
"""
import argparse
import math
import re
from pathlib import Path

import numpy as np

from drlearn.feeder import FeederModel, GeneratorParams, Line, Node, lindistflow, write_feeder
from drlearn.participants import case_study_truths, write_participants

GEN_NODES = (30, 40, 50, 60, 70, 80, 101, 121)
GEN_COSTS = (10.0, 11.0, 12.0, 13.0, 14.0, 15.0, 16.0, 17.0)
POWER_FACTOR = 0.85


def _matrix(text: str, name: str) -> np.ndarray:
    m = re.search(rf"mpc\.{name}\s*=\s*\[(.*?)\];", text, re.S)
    if m is None:
        raise ValueError(f"mpc.{name} not found")
    rows = []
    for line in m.group(1).splitlines():
        line = line.split("%")[0].strip().rstrip(";")
        if line:
            rows.append([float(v) for v in line.split()])
    return np.array(rows)


def convert(src: Path, limit_factor: float, min_limit: float, gen_pmax: float) -> FeederModel:
    text = src.read_text()
    base_mva = float(re.search(r"mpc\.baseMVA\s*=\s*([\d.]+)", text).group(1))
    bus = _matrix(text, "bus")
    branch = _matrix(text, "branch")
    vbase = bus[0, 9] * 1e3
    zbase = vbase**2 / (base_mva * 1e6)
    s_mva = bus[:, 2] / 1e3
    pd = s_mva * POWER_FACTOR
    qd = s_mva * math.sin(math.acos(POWER_FACTOR))
    tan_phi = math.tan(math.acos(POWER_FACTOR))
    ids = bus[:, 0].astype(int)
    if not np.array_equal(ids, np.arange(1, len(ids) + 1)):
        raise ValueError("expected buses numbered 1..N")

    nodes = []
    for k, nid in enumerate(ids - 1):
        gen = None
        if nid in GEN_NODES:
            c1 = GEN_COSTS[GEN_NODES.index(nid)]
            gen = GeneratorParams(0.0, c1, 0.0, 0.0, gen_pmax, -0.6 * gen_pmax, 0.6 * gen_pmax)
        vmin, vmax = (0.9, 1.1) if nid else (0.9, 1.1)
        nodes.append(Node(int(nid), float(pd[k]), float(qd[k]),
                          gamma=tan_phi if nid else 0.0,
                          u_min=vmin**2, u_max=vmax**2, generator=gen))
    draft = [Line(int(f) - 1, int(t) - 1, r / zbase, x / zbase, math.inf)
             for f, t, r, x in branch[:, :4]]
    model = FeederModel(tuple(nodes), tuple(draft), base_mva=base_mva, name="feeder141")
    fP, fQ, _ = lindistflow(model, model.dP, model.dQ)
    flow = dict(zip(range(1, model.m), np.hypot(fP, fQ)))
    lines = [Line(ln.up_node, ln.downstream_node, ln.R, ln.X,
                  round(max(min_limit, limit_factor * flow[ln.downstream_node]), 3))
             for ln in draft]
    return FeederModel(tuple(nodes), tuple(lines), base_mva=base_mva, name="feeder141")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("source", type=Path)
    ap.add_argument("--out", type=Path, default=Path(__file__).resolve().parents[1]
                    / "src" / "drlearn" / "data" / "feeder141")
    ap.add_argument("--limit-factor", type=float, default=1.1)
    ap.add_argument("--min-limit", type=float, default=0.5)
    ap.add_argument("--gen-pmax", type=float, default=0.3)
    args = ap.parse_args()
    model = convert(args.source, args.limit_factor, args.min_limit, args.gen_pmax)
    write_feeder(model, args.out)
    write_participants(case_study_truths(model.dP), args.out / "participants.csv")
    print(f"wrote {model.m} nodes, total load {model.dP.sum():.3f} MW to {args.out}")


if __name__ == "__main__":
    main()

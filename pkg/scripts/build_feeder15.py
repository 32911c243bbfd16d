"""Write the bundled 15-node feeder and its participant file.

The topology is a root with two laterals. Nodes 1 and 12, next to the
substation, carry three quarters of the load. Generators sit at nodes 6
and 11. Line data are chosen so that voltage and apparent-power limits bind
without demand response at typical loading.
"""
import argparse
import math
from pathlib import Path

from drlearn.feeder import FeederModel, GeneratorParams, Line, Node, write_feeder
from drlearn.participants import case_study_truths, write_participants

PARENT = {1: 0, 2: 1, 3: 2, 4: 3, 5: 4, 6: 5, 7: 6, 8: 3, 9: 8, 10: 9, 11: 10,
          12: 0, 13: 12, 14: 13}
LOAD_MW = {1: 27.0, 2: 1.2, 3: 1.8, 4: 1.5, 5: 1.3, 6: 1.6, 7: 1.7, 8: 1.4, 9: 1.9,
           10: 1.5, 11: 1.6, 12: 28.5, 13: 1.4, 14: 1.5}
POWER_FACTOR = 0.95
# per-unit on 100 MVA, per line (indexed by downstream node)
R_PU = {1: 0.150, 2: 0.075, 3: 0.075, 4: 0.090, 5: 0.090, 6: 0.120, 7: 0.120,
        8: 0.090, 9: 0.090, 10: 0.120, 11: 0.120, 12: 0.075, 13: 0.090, 14: 0.090}
X_OVER_R = 1.2
S_MAX = {1: 46.0, 12: 60.0}
DEFAULT_S_MAX = 18.0


def build(r_scale: float = 1.0, s_scale: float = 1.0) -> FeederModel:
    tan_phi = math.tan(math.acos(POWER_FACTOR))
    gen = GeneratorParams(c2=0.0, c1=10.0, c0=0.0, gP_min=0.0, gP_max=0.8,
                          gQ_min=-0.5, gQ_max=0.5)
    nodes = [Node(0, 0.0, 0.0)]
    for i in range(1, 15):
        p = LOAD_MW[i]
        nodes.append(Node(i, p, p * tan_phi, gamma=tan_phi,
                          generator=gen if i in (6, 11) else None))
    lines = [Line(PARENT[i], i, r_scale * R_PU[i], r_scale * X_OVER_R * R_PU[i],
                  s_scale * S_MAX.get(i, DEFAULT_S_MAX))
             for i in range(1, 15)]
    return FeederModel(tuple(nodes), tuple(lines), base_mva=100.0, u_root=1.0, name="feeder15")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1]
                                         / "src" / "drlearn" / "data" / "feeder15"))
    args = ap.parse_args()
    model = build()
    write_feeder(model, args.out)
    write_participants(case_study_truths(model.dP), Path(args.out) / "participants.csv")


if __name__ == "__main__":
    main()

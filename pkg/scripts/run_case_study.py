"""Design the case-study controllers and run the nominal and pH-like scenarios.

Usage: python3 scripts/run_case_study.py [--out runs] [--horizon 10]

Writes one trajectory CSV per scenario plus the three design results, and
prints the per-segment summaries as JSON.
"""
import argparse
import json
import time
from pathlib import Path

import numpy as np

from vfrnn.casestudy import case_model, demo_inputs, nominal_scenario, phlike_scenario
from vfrnn.constraints import box
from vfrnn.io import save_result
from vfrnn.simulator import Designs, export_csv, run, summarize
from vfrnn.synthesis import DesignOptions, design_controller, design_observer, design_terminal, empirical_bound


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs")
    ap.add_argument("--horizon", type=int, default=10)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    model = case_model()
    bound = empirical_bound(model, demo_inputs())
    opts = DesignOptions(y_bar=np.array([0.5]))
    t0 = time.perf_counter()
    designs = Designs(controller=design_controller(model, bound, opts),
                      terminal=design_terminal(model, bound, U=box([0.0], [1.0]), Y=box([0.0], [1.0]), options=opts),
                      observer=design_observer(model))
    print(f"designs ready in {time.perf_counter() - t0:.1f} s")
    for kind in ("controller", "terminal", "observer"):
        save_result(model, getattr(designs, kind), out / f"case.{kind}.result")

    report = {}
    for sc in (nominal_scenario(model, horizon=args.horizon), phlike_scenario(model, horizon=args.horizon)):
        t0 = time.perf_counter()
        traj = run(sc, designs)
        export_csv(traj, out / f"{sc.name}.csv")
        report[sc.name] = summarize(traj) | {"seconds": round(time.perf_counter() - t0, 1)}
    print(json.dumps(report, indent=2))


if __name__ == "__main__":
    main()

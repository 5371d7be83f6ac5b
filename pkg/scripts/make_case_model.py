"""Regenerate the shipped case-study model and the demo excitation signal.

Usage: python3 scripts/make_case_model.py [--out src/vfrnn/data]
"""
import argparse
from pathlib import Path

import numpy as np

from vfrnn.casestudy import CASE_DRIVE, CASE_SEED, SAMPLING_PERIOD, case_candidate, multilevel_signal, \
    nominal_scenario, phlike_scenario, steady_state_map
from vfrnn.io import save_model, save_scenario


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "src" / "vfrnn" / "data"))
    args = ap.parse_args()
    out = Path(args.out)
    model = case_candidate(CASE_SEED, drive=CASE_DRIVE)
    if model is None:
        raise SystemExit(f"seed {CASE_SEED} does not give a monotone, locally stable equilibrium map")
    y = steady_state_map(model, np.linspace(0, 1, 11))[:, 0]
    meta = {"seed": CASE_SEED, "drive": CASE_DRIVE, "sampling_period": SAMPLING_PERIOD,
            "equilibrium_output_at_u": {f"{u:.1f}": float(v) for u, v in zip(np.linspace(0, 1, 11), y)}}
    save_model(model, out / "case_model.json", meta)
    u = multilevel_signal(CASE_SEED)
    np.savetxt(out / "demo_inputs.csv", u, fmt="%.17g", header="u[0]", comments="")
    for sc in (nominal_scenario(model), phlike_scenario(model)):
        save_scenario(sc, out / f"{sc.name}.scenario.json", model_ref="builtin:case")
    print(f"wrote {out / 'case_model.json'}, {out / 'demo_inputs.csv'} ({len(u)} samples) and the scenarios")


if __name__ == "__main__":
    main()

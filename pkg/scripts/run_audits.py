"""Run the three synthetic bias audits and print a comparison table.

    python scripts/run_audits.py [--out results/]

The reference column lists the clinical-data accuracies the synthetic
experiments are meant to mirror in sign (ordering), not magnitude.
"""

import argparse
import json
import time
from pathlib import Path

from cxrscreen.experiments import AuditConfig, binary_experiment, population_experiment, severity_experiment

REFERENCE = {
    "population/confounded": 0.9746,
    "population/deconfounded": 0.7468,
    "severity/normal_pcr_plus": 0.4266,
    "severity/mild": 0.6250,
    "severity/moderate": 0.7441,
    "severity/severe": 0.8104,
    "binary": 0.7386,
}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=Path, default=None)
    args = ap.parse_args()
    cfg = AuditConfig()
    rows = {}
    results = {}
    t0 = time.time()
    results["population"] = pop = population_experiment(cfg)
    for arm in ("confounded", "deconfounded"):
        rows[f"population/{arm}"] = pop[arm]["aggregate"]["accuracy"]
    results["severity"] = sev = severity_experiment(cfg)
    for tier in ("normal_pcr_plus", "mild", "moderate", "severe"):
        rows[f"severity/{tier}"] = sev[tier]["aggregate"]["accuracy"]
    results["binary"] = binary = binary_experiment(cfg)
    rows["binary"] = binary["aggregate"]["accuracy"]

    print(f"{'setting':28s} {'synthetic':>16s} {'reference':>10s}")
    for name, acc in rows.items():
        print(f"{name:28s} {acc['mean']:.4f}±{acc['std']:.4f} {REFERENCE[name]:10.4f}")
    print(f"population gap {pop['gap']:.4f}   severity monotone {sev['monotone']}")
    print(f"elapsed {time.time() - t0:.1f}s")
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "audits.json").write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()

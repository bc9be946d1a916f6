"""Ablation sweep: the same synthetic open-set experiment under none/v1/v2/v3.

    PYTHONPATH=src python3 scripts/ablation_sweep.py --out runs/ablation
"""
from __future__ import annotations

import argparse
import logging
from dataclasses import replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from osgait import evalkit
from osgait.cli import load_windows, protocol_of
from osgait.config import ExperimentConfig
from osgait.model import ABLATIONS, PCAA


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path)
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--ablations", default=",".join(ABLATIONS))
    ap.add_argument("--trials", type=int)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")

    base = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    trials = args.trials or base.eval.trials
    args.out.mkdir(parents=True, exist_ok=True)
    lines = ["ablation,n_params,openness,k,mean_f1,dispersion"]
    with threadpool_limits(limits=1):
        windows = load_windows(base)
        for name in args.ablations.split(","):
            cfg = replace(base, ablation=name)
            n_params = sum(p.data.size for p in PCAA(cfg.resolved_model()).parameters())
            rep = evalkit.run_openset_experiment(windows, protocol_of(cfg), trials, cfg.seed)
            rep.write_json(args.out / f"report_{name}.json")
            for r in rep.summary:
                lines.append(f"{name},{n_params},{r['openness']!r},{r['k']},{r['mean_f1']!r},{r['dispersion']!r}")
                print(f"{name:>4} params={n_params} k={r['k']} F1={r['mean_f1']:.3f} ± {r['dispersion']:.3f}")
    (args.out / "ablation.csv").write_text("\n".join(lines) + "\n")


if __name__ == "__main__":
    main()

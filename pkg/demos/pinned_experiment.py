"""
End-to-end pinned experiment
============================

Runs the whole study (phantoms, simulation, three trained correctors,
evaluation, report and re-entry sweep) on the small pinned config in
``demos/configs/pinned_demo.json``. It finishes in about a minute, and two
runs produce byte-identical checkpoints and metric CSVs::

    python demos/pinned_experiment.py out/pinned

The desk-scale study uses ``demos/configs/desk.json`` through the CLI::

    mocodiff experiment --config demos/configs/desk.json --cache artifacts/desk --out out/desk
"""

import sys
from pathlib import Path

from mocodiff import pipeline

cfg = pipeline.load_config(Path(__file__).parent / "configs" / "pinned_demo.json")
out = Path(sys.argv[1] if len(sys.argv) > 1 else "pinned_demo_out")
result = pipeline.run_experiment(cfg, out)

print(Path(result["report"]).read_text())
for row in result["sweep"]:
    print(f"n={row['n']:3d}  NMSE {row['nmse_mean']:.4f} ± {row['nmse_std']:.4f}")

"""
Nuclei-aware pretraining against the baseline
=============================================

Run the NOISe and baseline mouse-to-human arms on a reduced synthetic
corpus and print both report tables. The reduced sizes keep the demo to a
few minutes on one CPU core; the acceptance suite runs the full setting.
"""

import sys
from pathlib import Path

from noiseseg.io import format_table
from noiseseg.pipeline import ExperimentConfig, run_experiment, synthetic_slides

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_output") / "noise"
small = dict(seed=0, mouse_slides=5, human_slides=2, epochs=15, pretrain_epochs=15)

# %%
# Both arms see the same slides; the cache lets arms share one nuclei chain.
slides = synthetic_slides(ExperimentConfig(**small))
cache = {}
rows = []
for name in ("noise-m2h", "yolov8-m2h"):
    res = run_experiment(ExperimentConfig(name=name, **small), out / name, slides=slides, cache=cache)
    if res.nuclei_map50 is not None:
        print(f"nuclei detector held-out box mAP50: {res.nuclei_map50:.3f}")
    rows.append(res.report)

# %%
# Average rows of the two arms side by side.
for r, name in zip(rows, ("NOISe", "baseline")):
    r.label, r.test = name, "M->H"
print(format_table(rows, summary=False, title="reduced M->H comparison"))
print("run directories:", sorted(p.name for p in out.iterdir()))

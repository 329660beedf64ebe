"""
Training one fold and reading a prediction
==========================================

A scaled-down model (d=16, 10 mixture components) is trained on one
cross-validation fold, evaluated on its held-out patients, and used to
draw a survival curve and a patch map for one patient.
"""

import tempfile
from pathlib import Path

import numpy as np

from scmil.bag_data import SyntheticConfig, generate_synthetic_cohort
from scmil.pipeline import (
    RunConfig, evaluate_model, make_folds, predict_curve, time_grid, train_fold, write_scatter_svg,
)

bags, records = generate_synthetic_cohort(SyntheticConfig(n_patients=60, patches_per_bag=(64, 128), d=16, seed=1))
bags = {b.patient_id: b for b in bags}

cfg = RunConfig(d=16, k=10, cluster_size=32, epochs=5, lr=1e-3)
split = make_folds(records, cfg.n_folds, cfg.seed)[0]
state = train_fold(bags, records, split, cfg)
print("mean training loss per epoch:", [round(h["mean_loss"], 3) for h in state.history])

test = [r for r in records if r.patient_id in set(split.test_ids)]
print(evaluate_model(state.model, bags, test).to_json())

# survival curve of the first held-out patient
bag = bags[test[0].patient_id]
table, interp = predict_curve(state.model, bag, time_grid(6, 10.0))
for t, s, p in table:
    print(f"t={t:6.3f}  survival={s:.3f}  density={p:.3f}")

# which patches mattered: importance, cluster membership and pooling weight
kept = interp.cluster_id >= 0
print(f"{kept.sum()} of {bag.n} patches passed the filter into {len(np.unique(interp.cluster_id[kept]))} clusters")
top = np.argsort(interp.alpha)[-3:][::-1]
print("largest pooling weights:", interp.alpha[top].round(4), "at patches", top)

with tempfile.TemporaryDirectory() as tmp:
    svg = Path(tmp) / "patches.svg"
    write_scatter_svg(svg, interp)
    print(svg.read_text()[:80], "...")

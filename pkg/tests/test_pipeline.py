import csv
import json
import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from scmil.bag_data import CohortRecord, PatchBag
from scmil.errors import ConfigError, DomainError, NonFiniteError
from scmil.pipeline import (
    SCMIL, FoldSplit, RunConfig, aggregate, compare_variants, cross_validate, load_model,
    load_train_state, make_folds, predict_curve, save_model, sweep_w1, time_grid, train_fold,
    write_curve_csv, write_interpretation_table, write_scatter_svg,
)

SMALL = dict(d=8, heads=2, k=10, cluster_size=8, epochs=2)


def small_cfg(**kw):
    return RunConfig(**{**SMALL, **kw})


def _bag(rng, n, d=8, pid="x"):
    return PatchBag(pid, rng.standard_normal((n, d)), rng.uniform(0, 100, (n, 2)))


def test_defaults():
    cfg = RunConfig()
    assert (cfg.cluster_size, cfg.thre, cfg.k, cfg.lr, cfg.weight_decay) == (64, 0.5, 100, 2e-4, 1e-3)
    assert (cfg.dropout, cfg.batch_size, cfg.epochs, cfg.w1) == (0.1, 1, 20, 0.8)
    with pytest.raises(ConfigError):
        RunConfig(w1=1.5)
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"lr": 1e-3, "bogus": 1})


# ---------------------------------------------------------------- forward

def test_all_filtered_bag_skips_attention():
    model = SCMIL(small_cfg())
    model.soft_filter.b2.value[:] = -50.0
    fwd = model.forward(_bag(np.random.default_rng(0), 20))
    assert np.all(fwd.interpretation.cluster_id == -1)
    assert fwd.interpretation.max_attention_width == 0
    dist = fwd.mixture.distribution()
    assert abs(dist.lambdas.sum() - 1) < 1e-12 and dist.scdf(0.0) == 1.0


def test_single_patch_bag():
    fwd = SCMIL(small_cfg()).forward(_bag(np.random.default_rng(1), 1))
    assert fwd.interpretation.alpha.tolist() == [1.0]


def test_forward_is_deterministic():
    model = SCMIL(small_cfg())
    bag = _bag(np.random.default_rng(2), 40)
    a = model.predict(bag)
    b = model.predict(bag)
    for x, y in [(a.lambdas, b.lambdas), (a.mus, b.mus), (a.sigmas, b.sigmas)]:
        assert x.tobytes() == y.tobytes()
    t1 = model.forward(bag, training=True, rng=np.random.default_rng(5)).mixture.log_lambdas.value
    t2 = model.forward(bag, training=True, rng=np.random.default_rng(5)).mixture.log_lambdas.value
    assert t1.tobytes() == t2.tobytes()


def test_attention_width_bounded_by_cluster_size():
    model = SCMIL(small_cfg())
    model.soft_filter.b2.value[:] = 50.0
    fwd = model.forward(_bag(np.random.default_rng(3), 30))
    sizes = np.bincount(fwd.interpretation.cluster_id)
    assert len(sizes) == math.ceil(30 / 8)
    assert fwd.interpretation.max_attention_width == sizes.max()
    assert abs(fwd.interpretation.alpha.sum() - 1) < 1e-12


def test_bag_dimension_must_match():
    with pytest.raises(ConfigError):
        SCMIL(small_cfg()).forward(_bag(np.random.default_rng(0), 3, d=4))


def test_model_round_trip(tmp_path):
    model = SCMIL(small_cfg(variant="fixed"))
    save_model(tmp_path / "m.ckpt", model)
    back, meta = load_model(tmp_path / "m.ckpt")
    assert meta["config"] == model.cfg.to_dict()
    bag = _bag(np.random.default_rng(4), 12)
    assert back.predict(bag).mus.tobytes() == model.predict(bag).mus.tobytes()


# ---------------------------------------------------------------- folds & training

def test_folds_partition_and_stratify(small_cohort):
    _, recs = small_cohort
    splits = make_folds(recs, 5, seed=0)
    tests = [pid for s in splits for pid in s.test_ids]
    assert sorted(tests) == sorted(r.patient_id for r in recs)
    ev = {r.patient_id: r.event for r in recs}
    per_fold = [sum(ev[p] for p in s.test_ids) for s in splits]
    assert max(per_fold) - min(per_fold) <= 1
    for s in splits:
        assert not set(s.train_ids) & set(s.test_ids)
    assert [s.test_ids for s in make_folds(recs, 5, seed=0)] == [s.test_ids for s in splits]
    with pytest.raises(ConfigError):
        make_folds(recs[:3], 5)


def test_aggregate():
    assert aggregate([0.7] * 5) == (0.7, 0.0)
    assert aggregate([1.0, 3.0]) == (2.0, 1.0)


def test_history_bookkeeping_and_repeatability(small_cohort):
    bags, recs = small_cohort
    split = make_folds(recs, 5)[0]
    a = train_fold(bags, recs, split, small_cfg())
    b = train_fold(bags, recs, split, small_cfg())
    first = a.history[0]
    assert set(first["losses"]) == set(split.train_ids)
    assert first["mean_loss"] == float(np.mean(list(first["losses"].values())))
    assert a.history == b.history
    assert [h["epoch"] for h in a.history] == [0, 1]


def test_training_reduces_loss(small_cohort):
    bags, recs = small_cohort
    split = make_folds(recs, 5)[0]
    state = train_fold(bags, recs, split, small_cfg(epochs=5, lr=2e-3))
    assert state.history[-1]["mean_loss"] < state.history[0]["mean_loss"]


def test_resume_is_bitwise_identical(small_cohort, tmp_path):
    bags, recs = small_cohort
    split = make_folds(recs, 5)[1]
    cfg = small_cfg(epochs=3)
    full = train_fold(bags, recs, split, cfg)
    train_fold(bags, recs, split, cfg, checkpoint_dir=tmp_path, stop_after=1)
    state, loaded_split = load_train_state(tmp_path / "fold1_epoch001.ckpt")
    assert loaded_split == split
    resumed = train_fold(bags, recs, split, cfg, state=state)
    assert resumed.history == full.history
    for name, value in full.model.state_dict().items():
        assert resumed.model.state_dict()[name].tobytes() == value.tobytes()
    for name in full.optimizer.m:
        assert resumed.optimizer.m[name].tobytes() == full.optimizer.m[name].tobytes()


def test_overlap_is_rejected(small_cohort):
    bags, recs = small_cohort
    ids = [r.patient_id for r in recs]
    with pytest.raises(ConfigError, match="both"):
        train_fold(bags, recs, FoldSplit(0, ids[:20], ids[19:]), small_cfg())


def test_non_finite_loss_names_patient(small_cohort, monkeypatch):
    bags, recs = small_cohort
    split = make_folds(recs, 5)[0]

    def bad_loss(self, bag, *a, **k):
        raise NonFiniteError("overflow")

    monkeypatch.setattr(SCMIL, "loss", bad_loss)
    with pytest.raises(NonFiniteError, match="patient P0"):
        train_fold(bags, recs, split, small_cfg())


def test_variant_registers(small_cohort):
    bags, recs = small_cohort
    split = make_folds(recs, 5)[0]
    for variant, should_change in [("learnable", True), ("fixed", False)]:
        cfg = small_cfg(variant=variant, epochs=1)
        before = SCMIL(cfg, init_seed=[cfg.seed, 0, 0]).state_dict()
        after = train_fold(bags, recs, split, cfg).model.state_dict()
        for name in ("mdn.P_m", "mdn.P_v"):
            same = before[name].tobytes() == after[name].tobytes()
            assert same != should_change


# ---------------------------------------------------------------- cross-validation & harnesses

def test_cross_validation_summary(small_cohort):
    bags, recs = small_cohort
    res = cross_validate(bags, recs, small_cfg(epochs=1))
    doc = json.loads(res.to_json())
    assert doc["epoch_policy"] == "final" and doc["excluded_folds"] == []
    tdcs = [f["tdc"] for f in doc["folds"]]
    assert doc["mean_tdc"] == pytest.approx(np.mean(tdcs))
    assert doc["std_tdc"] == pytest.approx(np.std(tdcs))


def test_folds_without_pairs_are_excluded():
    rng = np.random.default_rng(0)
    bags = {f"p{i}": _bag(rng, 5, pid=f"p{i}") for i in range(5)}
    recs = [CohortRecord(f"p{i}", 1.0 + i, 1, f"p{i}.scmb") for i in range(5)]
    res = cross_validate(bags, recs, small_cfg(epochs=1))
    assert res.excluded == [0, 1, 2, 3, 4]
    assert json.loads(res.to_json())["mean_tdc"] is None


def test_sweep_and_variant_tables(small_cohort, tmp_path):
    bags, recs = small_cohort
    cfg = small_cfg(epochs=1)
    rows = sweep_w1(bags, recs, cfg, [0.0, 0.5, 1.0], tmp_path / "sweep.csv")
    assert [r[0] for r in rows] == [0.0, 0.5, 1.0]
    with open(tmp_path / "sweep.csv") as fh:
        table = list(csv.DictReader(fh))
    assert len(table) == 3 and all(0 <= float(r["mean_tdc"]) <= 1 for r in table)
    a = cross_validate(bags, recs, cfg.replace(w1=0.0, epochs=0))
    b = cross_validate(bags, recs, cfg.replace(w1=1.0, epochs=0))
    assert [s.test_ids for s in a.splits] == [s.test_ids for s in b.splits]
    with pytest.raises(ConfigError):
        sweep_w1(bags, recs, cfg, [1.5])
    compare_variants(bags, recs, cfg, out_csv=tmp_path / "variants.csv")
    with open(tmp_path / "variants.csv") as fh:
        assert [r["variant"] for r in csv.DictReader(fh)] == ["learnable", "fixed", "predicted"]


# ---------------------------------------------------------------- prediction exports

def test_predict_curve(tmp_path):
    model = SCMIL(small_cfg())
    bag = _bag(np.random.default_rng(6), 25)
    grid = time_grid(50, 10.0)
    table, interp = predict_curve(model, bag, grid)
    dist = model.predict(bag)
    assert abs(table[0, 1] - 1) < 1e-9
    assert np.all(np.diff(table[:, 1]) <= 0)
    for t, s, p in table:
        assert abs(s - dist.scdf(t)) < 1e-15 and p == pytest.approx(dist.dpdf(t), rel=1e-14)
    assert predict_curve(model, bag, [1.0])[0].shape == (1, 3)
    with pytest.raises(DomainError):
        predict_curve(model, bag, [0.0, 1.0])

    write_curve_csv(tmp_path / "c.csv", table)
    with open(tmp_path / "c.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 50 and float(rows[3]["scdf"]) == table[3, 1]
    write_interpretation_table(tmp_path / "i.tsv", interp)
    lines = (tmp_path / "i.tsv").read_text().splitlines()
    assert lines[0].split("\t") == ["patch", "x", "y", "importance", "cluster", "alpha"] and len(lines) == 26
    write_scatter_svg(tmp_path / "s.svg", interp)
    root = ET.parse(tmp_path / "s.svg").getroot()
    assert len(root.findall("{http://www.w3.org/2000/svg}circle")) == 50


def test_time_grid_bounds():
    assert time_grid(1, 5.0).tolist() == [1e-3]
    with pytest.raises(ConfigError):
        time_grid(0, 5.0)
    with pytest.raises(DomainError):
        time_grid(5, 5.0, t_min=0.0)

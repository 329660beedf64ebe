"""Model assembly, training, cross-validation and experiment harnesses."""

from __future__ import annotations

import csv
import json
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .bag_data import cohort_arrays
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, DomainError, NonFiniteError, UndefinedMetricError
from .metrics import EvalResult, default_tau, evaluate
from .register_mdn import RegisterMDN, SurvivalDistribution, VARIANTS, nll_loss
from .scsa import GatedAttentionPool, SparseContextAttention
from .soft_filter import SoftFilter, apply_and_split

log = logging.getLogger(__name__)


@dataclass
class RunConfig:
    d: int = 32
    filter_hidden: int | None = None
    heads: int = 4
    gate_dim: int | None = None
    mdn_hidden: int | None = None
    cluster_size: int = 64
    thre: float = 0.5
    w1: float = 0.8
    k: int = 100
    variant: str = "learnable"
    layer_norm: bool = False
    use_soft_filter: bool = True
    use_scsa: bool = True
    lr: float = 2e-4
    weight_decay: float = 1e-3
    dropout: float = 0.1
    epochs: int = 20
    batch_size: int = 1
    seed: int = 0
    n_folds: int = 5
    tau: float | None = None      # None: largest observed event time of the evaluated set
    grid_size: int = 100
    kmeans_max_iter: int = 100
    kmeans_tol: float = 1e-6

    def __post_init__(self):
        if self.d < 1 or self.d % self.heads:
            raise ConfigError(f"d={self.d} must be positive and divisible by heads={self.heads}")
        if not 0.0 < self.thre < 1.0:
            raise ConfigError("thre must lie in (0, 1)")
        if not 0.0 <= self.w1 <= 1.0:
            raise ConfigError("w1 must lie in [0, 1]")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.cluster_size < 1 or self.k < 1 or self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("cluster_size, k, batch_size must be >= 1 and epochs >= 0")
        if self.n_folds < 2:
            raise ConfigError("n_folds must be >= 2")
        if self.grid_size < 2:
            raise ConfigError("grid_size must be >= 2")

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        return asdict(self)

    def replace(self, **changes):
        return RunConfig.from_dict({**self.to_dict(), **changes})


def _patient_rng(seed, patient_id):
    return np.random.default_rng([seed, zlib.crc32(patient_id.encode("utf-8"))])


@dataclass
class Interpretation:
    importance: np.ndarray      # IS per patch
    cluster_id: np.ndarray      # -1 for patches outside the attention stage
    alpha: np.ndarray           # pooling weight per patch
    positions: np.ndarray
    max_attention_width: int = 0


@dataclass
class ForwardResult:
    mixture: object
    interpretation: Interpretation
    feat_prime: nx.Tensor


class SCMIL:
    """Filter -> clustered self-attention -> gated pooling -> mixture survival head."""

    def __init__(self, cfg, init_seed=None):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed if init_seed is None else init_seed)
        self.soft_filter = SoftFilter(cfg.d, cfg.filter_hidden, rng)
        self.scsa = SparseContextAttention(cfg.d, cfg.heads, cfg.cluster_size, cfg.w1, cfg.dropout,
                                           cfg.layer_norm, rng, cfg.kmeans_max_iter, cfg.kmeans_tol)
        self.pool = GatedAttentionPool(cfg.d, cfg.gate_dim, cfg.dropout, rng)
        self.mdn = RegisterMDN(cfg.d, cfg.k, cfg.variant, cfg.mdn_hidden, rng)

    def parameters(self):
        params = []
        if self.cfg.use_soft_filter:
            params += self.soft_filter.parameters()
        if self.cfg.use_scsa:
            params += self.scsa.parameters()
        return params + self.pool.parameters() + self.mdn.parameters()

    def state_parameters(self):
        return (self.soft_filter.parameters() + self.scsa.parameters()
                + self.pool.parameters() + self.mdn.state_parameters())

    def state_dict(self):
        return {p.name: p.value.copy() for p in self.state_parameters()}

    def load_state_dict(self, arrays):
        for p in self.state_parameters():
            if p.name not in arrays:
                raise ConfigError(f"checkpoint lacks parameter {p.name!r}")
            if arrays[p.name].shape != p.value.shape:
                raise ConfigError(f"parameter {p.name!r}: shape {arrays[p.name].shape} != {p.value.shape}")
            p.value = np.array(arrays[p.name], dtype=np.float64)

    def forward(self, bag, training=False, rng=None):
        cfg = self.cfg
        if bag.d != cfg.d:
            raise ConfigError(f"bag {bag.patient_id!r} has d={bag.d}, model expects {cfg.d}")
        if rng is None:
            rng = _patient_rng(cfg.seed, bag.patient_id)
        feat = nx.Tensor(bag.features)
        if cfg.use_soft_filter:
            importance = self.soft_filter.score(feat)
            filtered = apply_and_split(feat, importance, cfg.thre)
        else:
            filtered = apply_and_split(feat, nx.Tensor(np.ones((bag.n, 1))), cfg.thre)
        if not cfg.use_scsa:
            filtered.irrelevant_index = np.arange(bag.n)
            filtered.relevant_index = np.arange(0)
        out = self.scsa(filtered, bag.positions01, training, rng)
        feat_prime, alpha = self.pool(out.h_prime, training, rng)
        mixture = self.mdn(feat_prime)
        alpha_patch = np.empty(bag.n)
        alpha_patch[out.row_origin] = alpha.value[0]
        width = self.scsa.attention.max_softmax_width if out.partition is not None else 0
        interp = Interpretation(filtered.importance.value[:, 0].copy(), out.cluster_of_patch,
                                alpha_patch, bag.positions, width)
        return ForwardResult(mixture, interp, feat_prime)

    def loss(self, bag, duration, event, training=True, rng=None):
        return nll_loss(self.forward(bag, training, rng).mixture, duration, event)

    def predict(self, bag):
        return self.forward(bag, training=False).mixture.distribution()


# ---------------------------------------------------------------- persistence

def save_model(path, model, optimizer=None, metadata=None):
    arrays = model.state_dict()
    meta = {"config": model.cfg.to_dict()}
    if optimizer is not None:
        for name in optimizer.m:
            arrays[f"adam.m/{name}"] = optimizer.m[name]
            arrays[f"adam.v/{name}"] = optimizer.v[name]
        meta["adam_step"] = optimizer.step_count
    meta.update(metadata or {})
    save_checkpoint(path, arrays, meta)


def load_model(path, with_optimizer=False):
    arrays, meta = load_checkpoint(path)
    cfg = RunConfig.from_dict(meta["config"])
    model = SCMIL(cfg)
    model.load_state_dict(arrays)
    if not with_optimizer:
        return model, meta
    opt = nx.Adam(model.parameters(), cfg.lr, cfg.weight_decay)
    for name in opt.m:
        opt.m[name] = np.array(arrays[f"adam.m/{name}"])
        opt.v[name] = np.array(arrays[f"adam.v/{name}"])
    opt.step_count = int(meta.get("adam_step", 0))
    return model, meta, opt


# ---------------------------------------------------------------- training

@dataclass
class FoldSplit:
    fold: int
    train_ids: list
    test_ids: list


def make_folds(records, n_folds=5, seed=0):
    """Event-stratified folds; the test sets partition the cohort."""
    if len(records) < n_folds:
        raise ConfigError(f"need at least {n_folds} patients for {n_folds}-fold CV")
    rng = np.random.default_rng([seed, 7])
    ids = np.array([r.patient_id for r in records])
    events = np.array([r.event for r in records])
    order = np.concatenate([rng.permutation(ids[events == 1]), rng.permutation(ids[events == 0])])
    fold_of = {pid: i % n_folds for i, pid in enumerate(order)}
    splits = []
    for f in range(n_folds):
        test = [r.patient_id for r in records if fold_of[r.patient_id] == f]
        train = [r.patient_id for r in records if fold_of[r.patient_id] != f]
        splits.append(FoldSplit(f, train, test))
    return splits


@dataclass
class TrainState:
    model: SCMIL
    optimizer: nx.Adam
    rng: np.random.Generator
    epoch: int = 0
    history: list = field(default_factory=list)


def new_train_state(cfg, fold=0):
    model = SCMIL(cfg, init_seed=[cfg.seed, fold, 0])
    opt = nx.Adam(model.parameters(), cfg.lr, cfg.weight_decay)
    return TrainState(model, opt, np.random.default_rng([cfg.seed, fold, 1]))


def save_train_state(path, state, split, extra=None):
    meta = {"epoch": state.epoch, "history": state.history, "rng": state.rng.bit_generator.state,
            "fold": split.fold, "train_ids": split.train_ids, "test_ids": split.test_ids, **(extra or {})}
    save_model(path, state.model, state.optimizer, meta)


def load_train_state(path):
    model, meta, opt = load_model(path, with_optimizer=True)
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    split = FoldSplit(meta["fold"], meta["train_ids"], meta["test_ids"])
    return TrainState(model, opt, rng, meta["epoch"], meta["history"]), split


def train_fold(bags, records, split, cfg, checkpoint_dir=None, state=None, stop_after=None):
    """Train on ``split.train_ids``; returns the final ``TrainState``.

    ``state`` resumes from a loaded checkpoint. ``stop_after`` ends the run
    once that many epochs are complete (used to simulate interruption).
    With ``checkpoint_dir`` set, every epoch is written as
    ``fold{f}_epoch{e:03d}.ckpt``.
    """
    by_id = {r.patient_id: r for r in records}
    overlap = set(split.train_ids) & set(split.test_ids)
    if overlap:
        raise ConfigError(f"fold {split.fold}: patients in both train and test: {sorted(overlap)[:5]}")
    if state is None:
        state = new_train_state(cfg, split.fold)
    model, opt, rng = state.model, state.optimizer, state.rng
    train_ids = np.array(split.train_ids)
    last = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    while state.epoch < last:
        order = rng.permutation(train_ids)
        losses = {}
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            opt.zero_grad()
            with nx.Tape() as tape:
                terms = []
                for pid in batch:
                    rec = by_id[pid]
                    try:
                        value = model.loss(bags[pid], rec.duration, rec.event, training=True, rng=rng)
                    except NonFiniteError as exc:
                        raise NonFiniteError(f"non-finite loss for patient {pid}: {exc}") from None
                    losses[str(pid)] = value.item()
                    terms.append(value)
                total = terms[0]
                for term in terms[1:]:
                    total = total + term
                total = nx.scale(total, 1.0 / len(terms))
            tape.backward(total)
            opt.step()
        mean_loss = float(np.mean(list(losses.values())))
        state.history.append({"epoch": state.epoch, "mean_loss": mean_loss, "losses": losses})
        state.epoch += 1
        log.info("fold %d epoch %d mean loss %.5f", split.fold, state.epoch, mean_loss)
        if checkpoint_dir is not None:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_train_state(Path(checkpoint_dir) / f"fold{split.fold}_epoch{state.epoch:03d}.ckpt", state, split,
                             {"max_duration": max(by_id[pid].duration for pid in split.train_ids)})
    return state


def evaluate_model(model, bags, records, tau=None, grid_size=None):
    grid_size = grid_size or model.cfg.grid_size
    tau = tau if tau is not None else model.cfg.tau
    durations, events = cohort_arrays(records)
    dists = [model.predict(bags[r.patient_id]) for r in records]
    return evaluate(durations, events, dists, tau, grid_size)


# ---------------------------------------------------------------- cross-validation

@dataclass
class CVResult:
    folds: list                 # EvalResult or None when the fold was excluded
    splits: list
    excluded: list
    mean_tdc: float
    std_tdc: float
    mean_ibs: float
    std_ibs: float
    histories: list = field(default_factory=list)
    fold_ids: list = field(default_factory=list)

    def to_dict(self):
        def finite(v):
            return None if math.isnan(v) else v

        return {
            "mean_tdc": finite(self.mean_tdc), "std_tdc": finite(self.std_tdc),
            "mean_ibs": finite(self.mean_ibs), "std_ibs": finite(self.std_ibs),
            "excluded_folds": self.excluded,
            "epoch_policy": "final",
            "folds": [{"fold": i, **({} if f is None else f.to_dict())}
                      for i, f in zip(self.fold_ids or range(len(self.folds)), self.folds)],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def aggregate(values):
    """Arithmetic mean and population standard deviation."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return math.nan, math.nan
    return float(arr.mean()), float(arr.std())


def cross_validate(bags, records, cfg, checkpoint_dir=None, folds=None, on_fold=None):
    """Train and evaluate every fold (or the subset ``folds``).

    ``on_fold(split, state, result)`` is called after each fold, e.g. to save
    the final model.
    """
    splits = make_folds(records, cfg.n_folds, cfg.seed)
    by_id = {r.patient_id: r for r in records}
    results, excluded, histories, fold_ids = [], [], [], []
    for split in splits:
        if folds is not None and split.fold not in folds:
            continue
        fold_ids.append(split.fold)
        state = train_fold(bags, records, split, cfg, checkpoint_dir)
        histories.append([h["mean_loss"] for h in state.history])
        test = [by_id[pid] for pid in split.test_ids]
        try:
            res = evaluate_model(state.model, bags, test)
        except UndefinedMetricError as exc:
            log.warning("fold %d excluded from aggregate: %s", split.fold, exc)
            excluded.append(split.fold)
            res = None
        results.append(res)
        if on_fold is not None:
            on_fold(split, state, res)
    kept = [r for r in results if r is not None]
    mean_tdc, std_tdc = aggregate([r.tdc for r in kept])
    mean_ibs, std_ibs = aggregate([r.ibs for r in kept])
    return CVResult(results, splits, excluded, mean_tdc, std_tdc, mean_ibs, std_ibs, histories, fold_ids)


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


SWEEP_HEADER = ["w1", "mean_tdc", "std_tdc", "mean_ibs", "std_ibs"]


def sweep_w1(bags, records, cfg, values, out_csv=None):
    """One cross-validation per clustering weight; folds are shared across rows."""
    rows = []
    for w1 in values:
        if not 0.0 <= w1 <= 1.0:
            raise ConfigError(f"w1 values must lie in [0, 1], got {w1}")
        res = cross_validate(bags, records, cfg.replace(w1=float(w1)))
        rows.append([float(w1), res.mean_tdc, res.std_tdc, res.mean_ibs, res.std_ibs])
    if out_csv is not None:
        _write_rows(out_csv, SWEEP_HEADER, rows)
    return rows


VARIANT_HEADER = ["variant", "mean_tdc", "std_tdc", "mean_ibs", "std_ibs"]


def compare_variants(bags, records, cfg, variants=VARIANTS, out_csv=None):
    rows = []
    for variant in variants:
        res = cross_validate(bags, records, cfg.replace(variant=variant))
        rows.append([variant, res.mean_tdc, res.std_tdc, res.mean_ibs, res.std_ibs])
    if out_csv is not None:
        _write_rows(out_csv, VARIANT_HEADER, rows)
    return rows


# ---------------------------------------------------------------- prediction exports

def time_grid(n, t_max, t_min=1e-3):
    if n < 1:
        raise ConfigError("grid needs at least one point")
    if not 0 < t_min <= t_max:
        raise DomainError("grid bounds must satisfy 0 < t_min <= t_max")
    return np.linspace(t_min, t_max, n)


def predict_curve(model, bag, grid):
    """Rows of (time, SCDF, DPDF) plus the forward pass's interpretation record."""
    grid = np.asarray(grid, dtype=np.float64).reshape(-1)
    if (grid <= 0).any():
        raise DomainError("prediction grid must contain only positive times")
    fwd = model.forward(bag, training=False)
    dist = fwd.mixture.distribution()
    table = np.column_stack([grid, dist.scdf(grid), dist.dpdf(grid)])
    return table, fwd.interpretation


def write_curve_csv(path, table):
    _write_rows(path, ["time", "scdf", "dpdf"], [[repr(float(v)) for v in row] for row in table])


def write_interpretation_table(path, interp):
    rows = []
    for i in range(len(interp.importance)):
        x, y = interp.positions[i]
        rows.append([i, repr(float(x)), repr(float(y)), repr(float(interp.importance[i])),
                     int(interp.cluster_id[i]), repr(float(interp.alpha[i]))])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(["patch", "x", "y", "importance", "cluster", "alpha"])
        w.writerows(rows)


_PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
            "#e377c2", "#bcbd22", "#17becf", "#393b79", "#637939", "#8c6d31"]


def _importance_colour(v):
    # blue (low) -> yellow -> red (high)
    v = min(max(v, 0.0), 1.0)
    if v < 0.5:
        a = v / 0.5
        r, g, b = 255 * a, 255 * a, 255 * (1 - a)
    else:
        a = (v - 0.5) / 0.5
        r, g, b = 255, 255 * (1 - a), 0
    return f"#{int(r):02x}{int(g):02x}{int(b):02x}"


def write_scatter_svg(path, interp, size=360, radius=3.0):
    """Two panels: patches coloured by importance, and by cluster (grey = filtered out)."""
    pos = np.asarray(interp.positions, dtype=np.float64)
    lo = pos.min(axis=0)
    span = np.where(np.ptp(pos, axis=0) > 0, np.ptp(pos, axis=0), 1.0)
    unit = (pos - lo) / span
    pad = 10
    inner = size - 2 * pad
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{2 * size}" height="{size + 20}">',
             f'<text x="{pad}" y="{size + 14}" font-size="12">importance</text>',
             f'<text x="{size + pad}" y="{size + 14}" font-size="12">cluster</text>']
    for i, (ux, uy) in enumerate(unit):
        cx, cy = pad + ux * inner, pad + (1 - uy) * inner
        parts.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="{radius}" '
                     f'fill="{_importance_colour(float(interp.importance[i]))}"/>')
        cid = int(interp.cluster_id[i])
        colour = "#cccccc" if cid < 0 else _PALETTE[cid % len(_PALETTE)]
        parts.append(f'<circle cx="{size + cx:.2f}" cy="{cy:.2f}" r="{radius}" fill="{colour}"/>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")

"""Learnable patch importance scoring and the relevant/irrelevant split."""

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError


@dataclass
class FilteredBag:
    importance: nx.Tensor        # (n, 1), values in (0, 1)
    scaled: nx.Tensor            # H = features * importance
    relevant_index: np.ndarray   # rows with importance >= threshold, ascending
    irrelevant_index: np.ndarray

    @property
    def n_relevant(self):
        return len(self.relevant_index)

    def high(self):
        return nx.select_rows(self.scaled, self.relevant_index)

    def low(self):
        return nx.select_rows(self.scaled, self.irrelevant_index)


class SoftFilter:
    """Per-patch MLP (d -> hidden, tanh, -> 1) followed by a sigmoid."""

    def __init__(self, d, hidden=None, rng=None, prefix="filter"):
        hidden = hidden or max(1, d // 2)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d = d
        self.w1 = nx.Parameter(nx.uniform_init(rng, d, (d, hidden)), f"{prefix}.w1")
        self.b1 = nx.Parameter(nx.uniform_init(rng, d, (1, hidden)), f"{prefix}.b1")
        self.w2 = nx.Parameter(nx.uniform_init(rng, hidden, (hidden, 1)), f"{prefix}.w2")
        self.b2 = nx.Parameter(nx.uniform_init(rng, hidden, (1, 1)), f"{prefix}.b2")

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def score(self, feat):
        feat = nx.constant(feat)
        if feat.cols != self.d:
            raise DimensionError(f"SoftFilter expects {self.d} features per patch, got {feat.cols}")
        hidden = nx.tanh_act(feat @ self.w1 + self.b1)
        return nx.sigmoid(hidden @ self.w2 + self.b2)


def apply_and_split(feat, importance, threshold=0.5):
    """Scale each patch by its score and split at ``threshold`` (ties are relevant).

    The split itself is a hard decision and carries no gradient; the scaling
    does.
    """
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold must lie in (0, 1), got {threshold}")
    feat = nx.constant(feat)
    importance = nx.constant(importance)
    if importance.shape != (feat.rows, 1):
        raise DimensionError(f"importance shape {importance.shape} does not match {feat.rows} patches")
    scaled = nx.mul(feat, importance)
    keep = importance.value[:, 0] >= threshold
    return FilteredBag(importance, scaled, np.flatnonzero(keep), np.flatnonzero(~keep))

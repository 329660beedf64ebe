"""Sparse context-aware self-attention.

Relevant patches are grouped by k-means in a joint morphology/position
space, self-attention runs inside each group only, and every patch
(refined relevant rows plus the untouched irrelevant rows) is pooled by
gated attention into one slide-level vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError

POSITION_SCALE = 2.0


def joint_embed(features, positions01, w1):
    """Embed patches so squared distance = w1*(2 - 2cos) + (1-w1)*2*|dp|^2.

    Feature rows are unit-normalised (zero rows stay zero); positions must
    already be scaled into [0, 1]^2.
    """
    if not 0.0 <= w1 <= 1.0:
        raise ConfigError(f"w1 must lie in [0, 1], got {w1}")
    features = np.asarray(features, dtype=np.float64)
    positions01 = np.asarray(positions01, dtype=np.float64)
    if positions01.shape != (features.shape[0], 2):
        raise DimensionError(f"positions {positions01.shape} do not match {features.shape[0]} patches")
    norms = np.linalg.norm(features, axis=1, keepdims=True)
    unit = np.divide(features, norms, out=np.zeros_like(features), where=norms > 0)
    w2 = 1.0 - w1
    return np.hstack([math.sqrt(w1) * unit, math.sqrt(w2 * POSITION_SCALE) * positions01])


@dataclass
class ClusterPartition:
    assignments: np.ndarray
    num_clusters: int
    centroids: np.ndarray
    objective_trace: list = field(default_factory=list)

    def members(self):
        """Row indices of each cluster, in ascending order."""
        return [np.flatnonzero(self.assignments == c) for c in range(self.num_clusters)]

    @property
    def sizes(self):
        return np.bincount(self.assignments, minlength=self.num_clusters)


def _sq_dists(x, centroids):
    d = (x * x).sum(1)[:, None] - 2.0 * x @ centroids.T + (centroids * centroids).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _sse(x, centroids, assign):
    diff = x - centroids[assign]
    return float((diff * diff).sum())


def kmeans_plus_plus(x, k, rng):
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    closest = ((x - centroids[0]) ** 2).sum(1)
    for j in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            idx = int(rng.integers(n))
        centroids[j] = x[idx]
        closest = np.minimum(closest, ((x - centroids[j]) ** 2).sum(1))
    return centroids


def _repair_empty(x, centroids, assign, k):
    counts = np.bincount(assign, minlength=k)
    for empty in np.flatnonzero(counts == 0):
        cost = ((x - centroids[assign]) ** 2).sum(1)
        cost[counts[assign] <= 1] = -1.0   # never empty another cluster
        donor = int(np.argmax(cost))
        counts[assign[donor]] -= 1
        assign[donor] = empty
        counts[empty] = 1
        centroids[empty] = x[donor]
    return assign


def kmeans(x, k, rng, max_iter=100, tol=1e-6):
    """Lloyd's algorithm with k-means++ seeding; never returns an empty cluster."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ConfigError(f"need 1 <= k <= n, got k={k}, n={n}")
    centroids = kmeans_plus_plus(x, k, rng)
    assign = None
    trace = []
    for _ in range(max_iter):
        new_assign = np.argmin(_sq_dists(x, centroids), axis=1)
        new_assign = _repair_empty(x, centroids, new_assign, k)
        onehot = (new_assign[None, :] == np.arange(k)[:, None]).astype(np.float64)
        new_centroids = (onehot @ x) / onehot.sum(axis=1, keepdims=True)
        obj = _sse(x, new_centroids, new_assign)
        if trace and obj > trace[-1]:
            break   # rounding noise only; keep the previous solution
        unchanged = assign is not None and np.array_equal(new_assign, assign)
        assign, centroids = new_assign, new_centroids
        trace.append(obj)
        if unchanged or (len(trace) > 1 and trace[-2] - obj <= tol * trace[-2]):
            break
    return ClusterPartition(assign, k, centroids, trace)


def cluster(features, positions01, w1=0.8, cluster_size=64, rng=None, max_iter=100, tol=1e-6):
    """Partition patches into ceil(n / cluster_size) groups by k-means."""
    if cluster_size < 1:
        raise ConfigError("cluster_size must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    x = joint_embed(features, positions01, w1)
    k = -(-x.shape[0] // cluster_size)
    return kmeans(x, k, rng, max_iter=max_iter, tol=tol)


def grouped_attention(qkv, groups, heads, dropout_rate=0.0, training=False, rng=None):
    """Scaled dot-product attention restricted to row groups.

    ``qkv`` is (n, 3d) holding queries, keys and values side by side. Rows
    attend only to rows of the same group; returns the (n, d) concatenated
    head outputs. Recorded on the tape as a single operation.
    """
    qkv = nx.constant(qkv)
    if qkv.cols % 3:
        raise DimensionError(f"qkv width {qkv.cols} is not a multiple of 3")
    d = qkv.cols // 3
    if d % heads:
        raise ConfigError(f"feature dim {d} not divisible by {heads} heads")
    if not 0.0 <= dropout_rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {dropout_rate}")
    dh = d // heads
    inv = 1.0 / math.sqrt(dh)
    val = qkv.value
    out = np.zeros((val.shape[0], d))
    saved = []
    for idx in groups:
        s = len(idx)
        block = val[idx].reshape(s, 3, heads, dh).transpose(1, 2, 0, 3)   # (3, h, s, dh)
        q, k, v = block
        scores = q @ k.transpose(0, 2, 1) * inv
        scores -= scores.max(axis=2, keepdims=True)
        p = np.exp(scores)
        p /= p.sum(axis=2, keepdims=True)
        if training and dropout_rate > 0:
            mask = (rng.random(p.shape) >= dropout_rate) / (1.0 - dropout_rate)
        else:
            mask = None
        pd = p * mask if mask is not None else p
        out[idx] = (pd @ v).transpose(1, 0, 2).reshape(s, d)
        saved.append((idx, q, k, v, p, mask))

    def back(g):
        full = np.zeros_like(val)
        for idx, q, k, v, p, mask in saved:
            s = len(idx)
            go = g[idx].reshape(s, heads, dh).transpose(1, 0, 2)
            pd = p * mask if mask is not None else p
            gv = pd.transpose(0, 2, 1) @ go
            gp = go @ v.transpose(0, 2, 1)
            if mask is not None:
                gp = gp * mask
            gs = p * (gp - (gp * p).sum(axis=2, keepdims=True)) * inv
            gq = gs @ k
            gk = gs.transpose(0, 2, 1) @ q
            full[idx] = np.stack([gq, gk, gv]).transpose(2, 0, 1, 3).reshape(s, 3 * d)
        return (full,)

    return nx.record_op(out, (qkv,), back, "grouped_attention")


class MultiHeadSelfAttention:
    """Residual multi-head self-attention applied independently per row group."""

    def __init__(self, d, heads=4, dropout=0.1, layer_norm=False, rng=None, prefix="mhsa"):
        if d % heads:
            raise ConfigError(f"feature dim {d} not divisible by {heads} heads")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d, self.heads, self.dropout, self.layer_norm = d, heads, dropout, layer_norm
        self.w_qkv = nx.Parameter(nx.uniform_init(rng, d, (d, 3 * d)), f"{prefix}.w_qkv")
        self.b_qkv = nx.Parameter(nx.uniform_init(rng, d, (1, 3 * d)), f"{prefix}.b_qkv")
        self.w_out = nx.Parameter(nx.uniform_init(rng, d, (d, d)), f"{prefix}.w_out")
        self.b_out = nx.Parameter(nx.uniform_init(rng, d, (1, d)), f"{prefix}.b_out")
        self.params = [self.w_qkv, self.b_qkv, self.w_out, self.b_out]
        if layer_norm:
            self.ln_gain = nx.Parameter(np.ones((1, d)), f"{prefix}.ln_gain")
            self.ln_bias = nx.Parameter(np.zeros((1, d)), f"{prefix}.ln_bias")
            self.params += [self.ln_gain, self.ln_bias]
        self.max_softmax_width = 0

    def parameters(self):
        return list(self.params)

    def __call__(self, x, groups=None, training=False, rng=None):
        x = nx.constant(x)
        if x.cols != self.d:
            raise DimensionError(f"attention expects width {self.d}, got {x.cols}")
        if groups is None:
            groups = [np.arange(x.rows)]
        self.max_softmax_width = max(len(g) for g in groups)
        qkv = x @ self.w_qkv + self.b_qkv
        attn = grouped_attention(qkv, groups, self.heads, self.dropout, training, rng)
        out = nx.dropout(attn @ self.w_out + self.b_out, self.dropout, training, rng)
        y = x + out
        if self.layer_norm:
            y = _layer_norm(y, self.ln_gain, self.ln_bias)
        return y


def _layer_norm(x, gain, bias, eps=1e-5):
    centred = x - nx.mean_rows(x)
    var = nx.mean_rows(nx.square(centred))
    return centred / nx.exp(nx.scale(nx.log(var + eps), 0.5)) * gain + bias


class GatedAttentionPool:
    """alpha = softmax_i(a . (tanh(V h_i) * sigmoid(U h_i))); pooled = sum_i alpha_i h_i."""

    def __init__(self, d, gate_dim=None, dropout=0.1, rng=None, prefix="pool"):
        gate_dim = gate_dim or max(1, d // 2)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d, self.gate_dim, self.dropout = d, gate_dim, dropout
        # stored transposed (d x h) so each gate is a single right-multiply
        self.v = nx.Parameter(nx.uniform_init(rng, d, (d, gate_dim)), f"{prefix}.V")
        self.u = nx.Parameter(nx.uniform_init(rng, d, (d, gate_dim)), f"{prefix}.U")
        self.a = nx.Parameter(nx.uniform_init(rng, gate_dim, (gate_dim, 1)), f"{prefix}.a")

    def parameters(self):
        return [self.v, self.u, self.a]

    def __call__(self, h, training=False, rng=None):
        h = nx.constant(h)
        if h.rows == 0:
            raise DimensionError("cannot pool an empty bag")
        gate_in = nx.dropout(h, self.dropout, training, rng)
        gated = nx.tanh_act(gate_in @ self.v) * nx.sigmoid(gate_in @ self.u)
        alpha = nx.softmax_rows(nx.transpose(gated @ self.a))   # (1, n)
        return alpha @ h, alpha


@dataclass
class SCSAOutput:
    h_prime: nx.Tensor          # refined relevant rows (cluster order) then irrelevant rows
    row_origin: np.ndarray      # original patch index of each h_prime row
    cluster_of_patch: np.ndarray   # cluster id per original patch, -1 for irrelevant
    partition: ClusterPartition | None


class SparseContextAttention:
    """Cluster relevant rows, refine them with grouped attention, re-attach the rest."""

    def __init__(self, d, heads=4, cluster_size=64, w1=0.8, dropout=0.1, layer_norm=False,
                 rng=None, max_iter=100, tol=1e-6):
        self.cluster_size, self.w1 = cluster_size, w1
        self.max_iter, self.tol = max_iter, tol
        self.attention = MultiHeadSelfAttention(d, heads, dropout, layer_norm, rng)

    def parameters(self):
        return self.attention.parameters()

    def __call__(self, filtered, positions01, training=False, rng=None, partition=None):
        rel, irr = filtered.relevant_index, filtered.irrelevant_index
        n = filtered.scaled.rows
        cluster_of_patch = np.full(n, -1, dtype=np.int64)
        if len(rel) == 0:
            return SCSAOutput(filtered.low(), irr, cluster_of_patch, None)
        high = filtered.high()
        if partition is None:
            partition = cluster(high.value, positions01[rel], self.w1, self.cluster_size, rng,
                                self.max_iter, self.tol)
        groups = partition.members()
        refined = self.attention(high, groups, training, rng)
        order = np.concatenate(groups)
        parts = [nx.select_rows(refined, order)]
        if len(irr):
            parts.append(filtered.low())
        cluster_of_patch[rel] = partition.assignments
        return SCSAOutput(nx.concat_rows(parts), np.concatenate([rel[order], irr]),
                          cluster_of_patch, partition)

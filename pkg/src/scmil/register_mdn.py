"""Gaussian-mixture survival head on a softplus-warped time axis.

A mixture over the latent y axis is mapped to survival time by
t = softplus(y). Mixture weights come from the slide-level feature; the
component means and scales come from two learnable cohort-level vectors
(``learnable``), from fixed anchors (``fixed``) or from the slide feature
itself (``predicted``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from statistics import NormalDist

import numpy as np
from scipy.special import logsumexp

from . import numerics as nx
from .errors import ConfigError, DomainError

SIGMA_MIN = 1e-3
LOG_CLAMP = math.log(1e-12)
VARIANTS = ("learnable", "fixed", "predicted")


def _positive_times(t, allow_zero=False):
    arr = np.asarray(t, dtype=np.float64)
    bad = (arr < 0) if allow_zero else (arr <= 0)
    if bad.any() or not np.isfinite(arr).all():
        bound = ">= 0" if allow_zero else "> 0"
        raise DomainError(f"time must be finite and {bound}, got {arr[bad | ~np.isfinite(arr)][:3]}")
    return arr


def g_inverse(t):
    """Latent value y with softplus(y) = t, i.e. log(exp(t) - 1)."""
    arr = _positive_times(t)
    # log(expm1) is exact near 0; the log1p form avoids overflow for large t
    out = np.empty_like(arr)
    small = arr < 20.0
    out[small] = np.log(np.expm1(arr[small]))
    out[~small] = arr[~small] + np.log1p(-np.exp(-arr[~small]))
    return float(out) if np.ndim(t) == 0 else out


def g_inverse_abs_derivative(t):
    """|dy/dt| = 1 / (1 - exp(-t))."""
    arr = _positive_times(t)
    out = -1.0 / np.expm1(-arr)
    return float(out) if np.ndim(t) == 0 else out


def fixed_anchors(k):
    """Standard-normal quantiles at the midpoints of K equal-probability bins."""
    nd = NormalDist()
    return np.array([nd.inv_cdf((i + 0.5) / k) for i in range(k)])


@dataclass
class SurvivalDistribution:
    """Mixture weights, latent means and latent scales of one patient's prediction."""

    lambdas: np.ndarray
    mus: np.ndarray
    sigmas: np.ndarray

    def __post_init__(self):
        self.lambdas = np.asarray(self.lambdas, dtype=np.float64).reshape(-1)
        self.mus = np.asarray(self.mus, dtype=np.float64).reshape(-1)
        self.sigmas = np.asarray(self.sigmas, dtype=np.float64).reshape(-1)
        if not (self.lambdas.shape == self.mus.shape == self.sigmas.shape):
            raise ConfigError("lambdas, mus and sigmas must have equal length")
        if (self.sigmas <= 0).any():
            raise ConfigError("mixture scales must be positive")

    @property
    def k(self):
        return len(self.lambdas)

    def _z(self, y):
        return (np.asarray(y)[..., None] - self.mus) / self.sigmas

    def log_dpdf(self, t):
        y = g_inverse(t)
        z = self._z(y)
        comp = np.log(self.lambdas) + nx.norm_logpdf(z) - np.log(self.sigmas)
        return np.log(g_inverse_abs_derivative(t)) + logsumexp(comp, axis=-1)

    def dpdf(self, t):
        return np.exp(self.log_dpdf(t))

    def scdf(self, t):
        arr = _positive_times(t, allow_zero=True)
        out = np.ones_like(arr)
        pos = arr > 0
        if pos.any():
            z = self._z(g_inverse(arr[pos]))
            out[pos] = np.clip(nx.norm_sf(z) @ self.lambdas, 0.0, 1.0)
        return float(out) if np.ndim(t) == 0 else out

    def dcdf(self, t):
        return 1.0 - self.scdf(t)

    def log_scdf(self, t):
        z = self._z(g_inverse(t))
        with np.errstate(divide="ignore"):
            log_lam = np.log(self.lambdas)
        return logsumexp(log_lam + nx.log_erfc(z / math.sqrt(2)) - math.log(2), axis=-1)

    def nll(self, td, event):
        """Censored negative log-likelihood, evaluated outside the tape."""
        if event:
            return float(-self.log_dpdf(td))
        return float(-max(self.log_scdf(td), LOG_CLAMP))


@dataclass
class MixtureTensors:
    log_lambdas: nx.Tensor   # (1, K)
    mus: nx.Tensor           # (1, K)
    sigmas: nx.Tensor        # (1, K)

    def distribution(self):
        return SurvivalDistribution(np.exp(self.log_lambdas.value[0]), self.mus.value[0], self.sigmas.value[0])


def nll_loss(mix, td, event):
    """Differentiable -log DPDF(td) for events, -log SCDF(td) for censored patients."""
    if event not in (0, 1):
        raise DomainError(f"event flag must be 0 or 1, got {event}")
    y = g_inverse(td)
    z = (y - mix.mus) / mix.sigmas
    if event:
        log_pdf = nx.scale(nx.square(z), -0.5) - (0.5 * math.log(2 * math.pi)) - nx.log(mix.sigmas)
        log_density = nx.logsumexp_rows(mix.log_lambdas + log_pdf)
        return nx.neg(log_density + math.log(g_inverse_abs_derivative(td)))
    log_sf = nx.logsumexp_rows(mix.log_lambdas + nx.log_norm_sf(z))
    return nx.neg(nx.maximum(log_sf, LOG_CLAMP))


class RegisterMDN:
    """Mixture density head; see the module docstring for the three variants."""

    def __init__(self, d, k=100, variant="learnable", hidden=None, rng=None, prefix="mdn"):
        if variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {variant!r}")
        if k < 1:
            raise ConfigError("number of components must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        hidden = hidden or max(1, d // 2)
        self.d, self.k, self.variant = d, k, variant
        P = nx.Parameter
        self.weight_w1 = P(nx.uniform_init(rng, d, (d, hidden)), f"{prefix}.weight_net.w1")
        self.weight_b1 = P(nx.uniform_init(rng, d, (1, hidden)), f"{prefix}.weight_net.b1")
        self.weight_w2 = P(nx.uniform_init(rng, hidden, (hidden, k)), f"{prefix}.weight_net.w2")
        self.weight_b2 = P(nx.uniform_init(rng, hidden, (1, k)), f"{prefix}.weight_net.b2")
        self._trainable = [self.weight_w1, self.weight_b1, self.weight_w2, self.weight_b2]
        self._frozen = []
        if variant == "learnable":
            self.p_m = P(0.1 * rng.standard_normal((1, k)), f"{prefix}.P_m")
            self.p_v = P(np.zeros((1, k)), f"{prefix}.P_v")
            self.mean_w = P(nx.uniform_init(rng, k, (k, k)), f"{prefix}.mean_net.w")
            self.mean_b = P(nx.uniform_init(rng, k, (1, k)), f"{prefix}.mean_net.b")
            self.var_w = P(nx.uniform_init(rng, k, (k, k)), f"{prefix}.var_net.w")
            self.var_b = P(nx.uniform_init(rng, k, (1, k)), f"{prefix}.var_net.b")
            self._trainable += [self.p_m, self.p_v, self.mean_w, self.mean_b, self.var_w, self.var_b]
        elif variant == "fixed":
            self.p_m = P(fixed_anchors(k).reshape(1, k), f"{prefix}.P_m", requires_grad=False)
            self.p_v = P(np.ones((1, k)), f"{prefix}.P_v", requires_grad=False)
            self._frozen += [self.p_m, self.p_v]
        else:
            self.mu_w = P(nx.uniform_init(rng, d, (d, k)), f"{prefix}.mu_head.w")
            self.mu_b = P(nx.uniform_init(rng, d, (1, k)), f"{prefix}.mu_head.b")
            self.sig_w = P(nx.uniform_init(rng, d, (d, k)), f"{prefix}.sigma_head.w")
            self.sig_b = P(nx.uniform_init(rng, d, (1, k)), f"{prefix}.sigma_head.b")
            self._trainable += [self.mu_w, self.mu_b, self.sig_w, self.sig_b]

    def parameters(self):
        """Parameters the optimizer updates."""
        return list(self._trainable)

    def state_parameters(self):
        """Everything a checkpoint must hold, frozen anchors included."""
        return self._trainable + self._frozen

    def __call__(self, feat_prime):
        feat_prime = nx.constant(feat_prime)
        hidden = nx.tanh_act(feat_prime @ self.weight_w1 + self.weight_b1)
        log_lambdas = nx.log_softmax_rows(hidden @ self.weight_w2 + self.weight_b2)
        if self.variant == "learnable":
            mus = self.p_m @ self.mean_w + self.mean_b
            sigmas = nx.softplus(self.p_v @ self.var_w + self.var_b) + SIGMA_MIN
        elif self.variant == "fixed":
            mus, sigmas = nx.constant(self.p_m.value), nx.constant(self.p_v.value)
        else:
            mus = feat_prime @ self.mu_w + self.mu_b
            sigmas = nx.softplus(feat_prime @ self.sig_w + self.sig_b) + SIGMA_MIN
        return MixtureTensors(log_lambdas, mus, sigmas)

    def mixture_params(self, feat_prime):
        return self(feat_prime).distribution()

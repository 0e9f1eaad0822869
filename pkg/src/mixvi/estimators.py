"""Evidence lower bounds for mixture posteriors and their Monte Carlo estimators.

Every bound is computed from a block of log importance weights

    w[..., k, t] = log p(x | z_kt) + beta * (log r(z_kt) - log q(z_kt | x))

where ``z_kt`` is the t-th draw from posterior component k.  Bounds are
returned per example; :func:`estimate` averages them over the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from . import tensor_ad as ad
from .distributions import Mixture, ancestral_noise, mixture_sample_ancestral, mixture_sample_batch
from .tensor_ad import Variable


class NumericalError(FloatingPointError):
    """Raised when an objective degenerates (all weights -inf, NaN gradients)."""


class Kind(str, Enum):
    ELBO = "elbo"
    SELBO = "selbo"
    IWAE = "iwae"
    SIWAE = "siwae"
    MIWAE = "miwae"
    CIWAE = "ciwae"
    PPD = "ppd"
    SCORE = "score"


@dataclass(frozen=True)
class EstimatorConfig:
    kind: Kind = Kind.SIWAE
    T: int = 1
    stl: bool = False
    beta_kl: float = 1.0
    ciwae_blend: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.beta_kl < 0:
            raise ValueError("beta_kl must be >= 0")
        if not 0.0 <= self.ciwae_blend <= 1.0:
            raise ValueError("ciwae_blend must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "T": self.T,
            "stl": self.stl,
            "beta_kl": self.beta_kl,
            "ciwae_blend": self.ciwae_blend,
        }


@dataclass
class BoundValue:
    objective: Variable  # per-example bound, shape [...]
    evidence_estimate: np.ndarray  # per-example SIWAE/IWAE value on the same draws
    log_weights: Variable
    posterior: Mixture | None = None

    def mean(self) -> Variable:
        return ad.mean(self.objective)


def _check_finite(log_weights: Variable, axes) -> None:
    w = log_weights.value
    if np.isnan(w).any():
        raise NumericalError("NaN in log importance weights")
    if np.all(np.isneginf(w), axis=axes).any():
        raise NumericalError("every importance weight is zero for some example")


# ---------------------------------------------------------------------------
# weights


def log_weights(log_lik: Variable, log_prior: Variable, log_q: Variable, beta: float = 1.0) -> Variable:
    """log p(x|z) + beta (log r(z) - log q(z)); shapes broadcast."""
    if beta == 1.0:
        return log_lik + log_prior - log_q
    return log_lik + beta * (log_prior - log_q)


# ---------------------------------------------------------------------------
# bounds over a stratified block [..., K, T]


def siwae(log_w, log_alpha) -> BoundValue:
    """log (1/T) sum_{k,t} alpha_k exp(w_kt)."""
    log_w, log_alpha = ad.as_variable(log_w), ad.as_variable(log_alpha)
    _check_finite(log_w, (-2, -1))
    T = log_w.shape[-1]
    obj = ad.logsumexp(ad.expand_dims(log_alpha, -1) + log_w, axis=(-2, -1)) - math.log(T)
    return BoundValue(obj, obj.value, log_w)


def selbo(log_w, log_alpha) -> BoundValue:
    """sum_k alpha_k (1/T) sum_t w_kt."""
    log_w, log_alpha = ad.as_variable(log_w), ad.as_variable(log_alpha)
    _check_finite(log_w, (-2, -1))
    obj = ad.sum(ad.exp(log_alpha) * ad.mean(log_w, axis=-1), axis=-1)
    return BoundValue(obj, _siwae_value(log_w.value, log_alpha.value), log_w)


def miwae(log_w, log_alpha) -> BoundValue:
    """(1/T) sum_t log sum_k alpha_k exp(w_kt)."""
    log_w, log_alpha = ad.as_variable(log_w), ad.as_variable(log_alpha)
    _check_finite(log_w, (-2, -1))
    inner = ad.logsumexp(ad.expand_dims(log_alpha, -1) + log_w, axis=-2)
    obj = ad.mean(inner, axis=-1)
    return BoundValue(obj, _siwae_value(log_w.value, log_alpha.value), log_w)


def ciwae(log_w, log_alpha, blend: float) -> BoundValue:
    """blend * SELBO + (1 - blend) * SIWAE on the same draws."""
    s = selbo(log_w, log_alpha)
    i = siwae(log_w, log_alpha)
    obj = blend * s.objective + (1.0 - blend) * i.objective
    return BoundValue(obj, i.evidence_estimate, s.log_weights)


def ppd(log_lik, log_q, log_prior, log_alpha, beta: float = 1.0) -> BoundValue:
    """log mean_{k,t} p(x|z_kt) - beta * KL-hat.

    KL-hat = (1/T) sum_{k,t} alpha_k (log q(z_kt) - log r(z_kt)) is the
    stratified estimate of KL(q || r).
    """
    log_lik = ad.as_variable(log_lik)
    log_alpha = ad.as_variable(log_alpha)
    _check_finite(log_lik, (-2, -1))
    K, T = log_lik.shape[-2:]
    fit = ad.logsumexp(log_lik, axis=(-2, -1)) - math.log(K * T)
    kl = ad.sum(ad.exp(log_alpha) * ad.mean(log_q - log_prior, axis=-1), axis=-1)
    obj = fit - beta * kl
    lw = log_weights(log_lik, log_prior, log_q, beta)
    return BoundValue(obj, _siwae_value(lw.value, log_alpha.value), lw)


# ---------------------------------------------------------------------------
# bounds over pooled i.i.d. draws [..., N]


def iwae(log_w) -> BoundValue:
    """log (1/N) sum_n exp(w_n)."""
    log_w = ad.as_variable(log_w)
    _check_finite(log_w, -1)
    N = log_w.shape[-1]
    obj = ad.logsumexp(log_w, axis=-1) - math.log(N)
    return BoundValue(obj, obj.value, log_w)


def elbo(log_w) -> BoundValue:
    """(1/N) sum_n w_n."""
    log_w = ad.as_variable(log_w)
    _check_finite(log_w, -1)
    obj = ad.mean(log_w, axis=-1)
    N = log_w.shape[-1]
    return BoundValue(obj, ad._lse(log_w.value, (-1,)) - math.log(N), log_w)


def _siwae_value(log_w: np.ndarray, log_alpha: np.ndarray) -> np.ndarray:
    T = log_w.shape[-1]
    return ad._lse(log_alpha[..., None] + log_w, (-2, -1)) - math.log(T)


# ---------------------------------------------------------------------------
# score-function (REINFORCE) estimator


class RunningBaseline:
    """Scalar exponential moving average of past mean log-weights."""

    def __init__(self, momentum: float = 0.9):
        self.momentum = momentum
        self.value = 0.0
        self.initialized = False

    def update(self, batch_mean: float) -> None:
        if not self.initialized:
            self.value = float(batch_mean)
            self.initialized = True
        else:
            self.value = self.momentum * self.value + (1.0 - self.momentum) * float(batch_mean)


def score_function_surrogate(log_w: Variable, log_q: Variable, baseline: float) -> Variable:
    """Per-sample surrogate ``stop(w - b) * log q(z) + w``.

    With ``z`` detached from the parameters its gradient has the expectation of
    the ELBO gradient.  Only the gradient is meaningful, not the value.
    """
    coeff = ad.stop_gradient(log_w) - baseline
    return ad.stop_gradient(coeff) * log_q + log_w


# ---------------------------------------------------------------------------
# model-level dispatch


def estimate(
    config: EstimatorConfig,
    model,
    inputs,
    targets,
    rng: np.random.Generator,
    baseline: RunningBaseline | None = None,
) -> BoundValue:
    """Sample from ``model``'s posterior and evaluate the configured bound.

    ``model`` provides ``encode(inputs) -> Mixture``,
    ``log_likelihood(targets, z)`` for ``z`` with sample axes between the batch
    and event axes, and ``prior.log_prob(z)``.

    ELBO, IWAE and SCORE draw ``K*T`` ancestral samples; the other kinds draw
    ``T`` per component.
    """
    q: Mixture = model.encode(inputs)
    bound = _estimate(config, model, q, targets, rng, baseline)
    bound.posterior = q
    return bound


def _estimate(config, model, q, targets, rng, baseline) -> BoundValue:
    K = q.num_components
    kind = config.kind
    beta = config.beta_kl

    if kind in (Kind.ELBO, Kind.IWAE):
        z, log_q, _ = mixture_sample_ancestral(q, K * config.T, rng, stl=config.stl)
        lw = log_weights(model.log_likelihood(targets, z), model.prior.log_prob(z), log_q, beta)
        return elbo(lw) if kind is Kind.ELBO else iwae(lw)

    if kind is Kind.SCORE:
        # same noise as mixture_sample_ancestral, without its density pass
        eps, idx = ancestral_noise(q, K * config.T, rng)
        z = ad.Variable(q.components.gather(idx).detached().transform(eps).value)
        log_q = q.log_prob(z, sample_axes=1)
        lw = log_weights(model.log_likelihood(targets, z), model.prior.log_prob(z), log_q, beta)
        _check_finite(lw, -1)
        b = baseline.value if baseline is not None else 0.0
        surrogate = score_function_surrogate(lw, log_q, b)
        if baseline is not None:
            baseline.update(float(np.mean(lw.value)))
        N = lw.shape[-1]
        evidence = ad._lse(lw.value, (-1,)) - math.log(N)
        return BoundValue(ad.mean(surrogate, axis=-1), evidence, lw)

    s = mixture_sample_batch(q, config.T, rng, stl=config.stl)
    log_lik = model.log_likelihood(targets, s.z)
    log_prior = model.prior.log_prob(s.z)
    if kind is Kind.PPD:
        return ppd(log_lik, s.log_q, log_prior, s.log_alpha, beta)
    lw = log_weights(log_lik, log_prior, s.log_q, beta)
    if kind is Kind.SIWAE:
        return siwae(lw, s.log_alpha)
    if kind is Kind.SELBO:
        return selbo(lw, s.log_alpha)
    if kind is Kind.MIWAE:
        return miwae(lw, s.log_alpha)
    if kind is Kind.CIWAE:
        return ciwae(lw, s.log_alpha, config.ciwae_blend)
    raise ValueError(f"unknown estimator kind {kind!r}")


def gradient_variance_probe(
    grad_fn: Callable[[int], Sequence[np.ndarray]], n_repeats: int, names: Sequence[str] | None = None
) -> dict:
    """Variance of a stochastic gradient across ``n_repeats`` fresh-noise draws.

    ``grad_fn(i)`` returns the gradient list for repeat ``i`` on a frozen model.
    Returns the mean elementwise variance over all coordinates (``"mean"``)
    and per parameter (``"per_parameter"``).
    """
    if n_repeats < 2:
        raise ValueError("need at least two repeats to estimate a variance")
    draws = [list(grad_fn(i)) for i in range(n_repeats)]
    per_param = []
    for j in range(len(draws[0])):
        stack = np.stack([np.asarray(d[j], dtype=np.float64) for d in draws])
        per_param.append(np.var(stack, axis=0, ddof=1))
    flat = np.concatenate([v.ravel() for v in per_param]) if per_param else np.zeros(0)
    names = list(names) if names is not None else [str(i) for i in range(len(per_param))]
    return {
        "mean": float(flat.mean()) if flat.size else 0.0,
        "per_parameter": {n: float(v.mean()) for n, v in zip(names, per_param)},
    }

"""Reparameterizable distributions used as posteriors, priors and likelihoods.

All parameters are :class:`~mixvi.tensor_ad.Variable` objects with arbitrary
leading batch dimensions.  A mixture stores its components batched along the
axis just before the event axis, i.e. means of shape ``[..., K, d]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor_ad as ad
from .tensor_ad import Variable

LOG_2PI = math.log(2.0 * math.pi)


def rng_stream(seed: int, *keys: int) -> np.random.Generator:
    """Deterministic generator for the tuple ``(seed, *keys)``.

    Every (run, epoch, batch, ...) coordinate gets its own independent stream,
    so two runs that share a seed consume identical noise.
    """
    return np.random.default_rng([int(seed), *(int(k) for k in keys)])


# ---------------------------------------------------------------------------
# Gaussians


class DiagonalGaussian:
    """N(mean, diag(exp(log_scale))^2)."""

    def __init__(self, mean, log_scale):
        self.mean = ad.as_variable(mean)
        self.log_scale = ad.as_variable(log_scale)
        if self.mean.shape[-1:] != self.log_scale.shape[-1:]:
            raise ad.ShapeError("mean and log_scale event sizes differ")

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def scale(self) -> Variable:
        return ad.exp(self.log_scale)

    def detached(self) -> "DiagonalGaussian":
        return DiagonalGaussian(ad.stop_gradient(self.mean), ad.stop_gradient(self.log_scale))

    def transform(self, eps) -> Variable:
        """mean + scale * eps, broadcasting eps against the parameters."""
        return self.mean + self.scale * eps

    def log_prob(self, z) -> Variable:
        u = (ad.as_variable(z) - self.mean) / self.scale
        return -0.5 * ad.sum(ad.square(u), axis=-1) - ad.sum(self.log_scale, axis=-1) - 0.5 * self.dim * LOG_2PI

    def expand_event(self, axis: int) -> "DiagonalGaussian":
        return DiagonalGaussian(ad.expand_dims(self.mean, axis), ad.expand_dims(self.log_scale, axis))

    def gather(self, idx: np.ndarray) -> "DiagonalGaussian":
        """Select components along the component axis (-2) with ``idx`` [..., n]."""
        i = idx[..., None]
        return DiagonalGaussian(
            ad.take_along_axis(self.mean, i, axis=-2),
            ad.take_along_axis(self.log_scale, i, axis=-2),
        )


def tril_from_raw(raw, dim: int) -> Variable:
    """Lower-triangular factor from ``dim*(dim+1)/2`` unconstrained entries.

    Row-major packing of the lower triangle; the diagonal passes through
    softplus so it is strictly positive.
    """
    raw = ad.as_variable(raw)
    n = dim * (dim + 1) // 2
    if raw.shape[-1] != n:
        raise ad.ShapeError(f"expected {n} raw scale entries for dim {dim}, got {raw.shape[-1]}")
    rows, cols = np.tril_indices(dim)
    index = np.zeros((dim, dim), dtype=int)
    index[rows, cols] = np.arange(n)
    lower = np.tril(np.ones((dim, dim), dtype=bool), -1)
    diag = np.eye(dim, dtype=bool)
    full = raw[..., index]
    return ad.where(diag, ad.softplus(full), ad.where(lower, full, 0.0))


class FullCovGaussian:
    """N(mean, L L^T) with lower-triangular ``scale_tril`` L."""

    def __init__(self, mean, scale_tril):
        self.mean = ad.as_variable(mean)
        self.scale_tril = ad.as_variable(scale_tril)
        d = self.mean.shape[-1]
        if self.scale_tril.shape[-2:] != (d, d):
            raise ad.ShapeError("scale_tril must be [..., d, d]")

    @classmethod
    def from_raw(cls, mean, raw_tril):
        mean = ad.as_variable(mean)
        return cls(mean, tril_from_raw(raw_tril, mean.shape[-1]))

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def detached(self) -> "FullCovGaussian":
        return FullCovGaussian(ad.stop_gradient(self.mean), ad.stop_gradient(self.scale_tril))

    def transform(self, eps) -> Variable:
        eps = ad.as_variable(eps)
        return self.mean + ad.sum(self.scale_tril * ad.expand_dims(eps, -2), axis=-1)

    def log_prob(self, z) -> Variable:
        u = ad.tril_solve(self.scale_tril, ad.as_variable(z) - self.mean)
        d = self.dim
        log_diag = ad.log(self.scale_tril[..., np.arange(d), np.arange(d)])
        return -0.5 * ad.sum(ad.square(u), axis=-1) - ad.sum(log_diag, axis=-1) - 0.5 * d * LOG_2PI

    def expand_event(self, axis: int) -> "FullCovGaussian":
        # axis counts from the end of the batch shape, before the event dims
        return FullCovGaussian(
            ad.expand_dims(self.mean, axis),
            ad.expand_dims(self.scale_tril, axis - 1 if axis < 0 else axis),
        )

    def gather(self, idx: np.ndarray) -> "FullCovGaussian":
        return FullCovGaussian(
            ad.take_along_axis(self.mean, idx[..., None], axis=-2),
            ad.take_along_axis(self.scale_tril, idx[..., None, None], axis=-3),
        )


class StandardNormal:
    """Fixed N(0, I_d) prior."""

    def __init__(self, dim: int):
        self.dim = dim

    def parameters(self) -> list[Variable]:
        return []

    def log_prob(self, z) -> Variable:
        z = ad.as_variable(z)
        return -0.5 * ad.sum(ad.square(z), axis=-1) - 0.5 * self.dim * LOG_2PI

    def sample(self, shape, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal((*shape, self.dim))


# ---------------------------------------------------------------------------
# mixtures


@dataclass
class MixtureSamples:
    """One stratified block: ``z`` [..., K, T, d], ``log_q`` [..., K, T], ``log_alpha`` [..., K]."""

    z: Variable
    log_q: Variable
    log_alpha: Variable


class Mixture:
    """Mixture of same-family Gaussians with weights softmax(logits)."""

    def __init__(self, logits, components):
        self.logits = ad.as_variable(logits)
        self.components = components
        if self.logits.shape[-1] != components.mean.shape[-2]:
            raise ad.ShapeError("logits and component counts differ")

    @property
    def num_components(self) -> int:
        return self.logits.shape[-1]

    @property
    def dim(self) -> int:
        return self.components.dim

    def log_weights(self) -> Variable:
        return ad.log_softmax(self.logits, axis=-1)

    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights().value)

    def detached(self) -> "Mixture":
        return Mixture(ad.stop_gradient(self.logits), self.components.detached())

    def component_log_prob(self, z, sample_axes: int = 1) -> Variable:
        """log q_j(z) for every component j.

        ``z`` has shape ``[..., *S, d]`` where the batch dims ``...`` match the
        mixture's and ``S`` has ``sample_axes`` dims.  Returns ``[..., *S, K]``.
        """
        comp = self.components
        for _ in range(sample_axes):
            comp = comp.expand_event(-3)
        return comp.log_prob(ad.expand_dims(ad.as_variable(z), -2))

    def log_prob(self, z, sample_axes: int = 1) -> Variable:
        """log sum_k alpha_k q_k(z)."""
        if isinstance(self.components, DiagonalGaussian):
            c = self.components
            return diag_mixture_log_prob(z, self.log_weights(), c.mean, c.log_scale, sample_axes)
        return self.composed_log_prob(z, sample_axes)

    def composed_log_prob(self, z, sample_axes: int = 1) -> Variable:
        """Same as :meth:`log_prob` built from primitive ops only."""
        la = self.log_weights()
        for _ in range(sample_axes):
            la = ad.expand_dims(la, -2)
        return ad.logsumexp(la + self.component_log_prob(z, sample_axes), axis=-1)


def diag_mixture_log_prob(z, log_alpha, mean, log_scale, sample_axes: int = 1) -> Variable:
    """Fused log density of a diagonal Gaussian mixture.

    ``z`` [..., *S, d]; ``log_alpha`` [..., K]; ``mean``/``log_scale``
    [..., K, d].  Returns [..., *S].
    """
    z, log_alpha = ad.as_variable(z), ad.as_variable(log_alpha)
    mean, log_scale = ad.as_variable(mean), ad.as_variable(log_scale)
    tracked = ad._active_tape() is not None and any(v.requires_grad for v in (z, log_alpha, mean, log_scale))
    if not tracked:
        return ad.Variable(_diag_mixture_log_prob_value(z.value, log_alpha.value, mean.value, log_scale.value, sample_axes))
    pad = (Ellipsis,) + (None,) * sample_axes
    ls = log_scale.value[pad + (slice(None), slice(None))]  # [..., 1*S, K, d]
    inv = np.exp(-ls)
    u = (z.value[..., None, :] - mean.value[pad + (slice(None), slice(None))]) * inv  # [..., *S, K, d]
    d = u.shape[-1]
    a = log_alpha.value[pad + (slice(None),)] - 0.5 * np.einsum("...i,...i->...", u, u) - ls.sum(-1) - 0.5 * d * LOG_2PI
    out = ad._lse(a, (-1,), keepdims=True)
    resp = np.exp(a - out)  # component responsibilities, [..., *S, K]
    out = out[..., 0]
    k_axes = tuple(range(-1 - sample_axes, -1))  # sample axes of [..., *S, K]
    kd_axes = tuple(ax - 1 for ax in k_axes)  # sample axes of [..., *S, K, d]

    def vjp(g):
        gr = g[..., None] * resp
        gu = gr[..., None] * u * inv
        g_z = -gu.sum(axis=-2)
        g_alpha = gr.sum(axis=k_axes)
        g_mu = gu.sum(axis=kd_axes)
        g_ls = (gr[..., None] * (u * u - 1.0)).sum(axis=kd_axes)
        return (
            ad._unbroadcast(g_z, z.shape),
            ad._unbroadcast(g_alpha, log_alpha.shape),
            ad._unbroadcast(g_mu, mean.shape),
            ad._unbroadcast(g_ls, log_scale.shape),
        )

    return ad.custom_op(out, (z, log_alpha, mean, log_scale), vjp)


def _diag_mixture_log_prob_value(z, log_alpha, mean, log_scale, sample_axes: int) -> np.ndarray:
    # value-only path: one pass per (component, coordinate) over large sample arrays
    K, d = mean.shape[-2:]
    pad = (Ellipsis,) + (None,) * sample_axes
    zs = [np.ascontiguousarray(z[..., i]) for i in range(d)]
    inv = np.exp(-log_scale)
    const = log_alpha - log_scale.sum(-1) - 0.5 * d * LOG_2PI  # [..., K]
    terms = []
    for j in range(K):
        acc = None
        for i in range(d):
            u = (zs[i] - mean[..., j, i][pad]) * inv[..., j, i][pad]
            acc = u * u if acc is None else acc + u * u
        terms.append(const[..., j][pad] - 0.5 * acc)
    m = terms[0].copy()
    for t in terms[1:]:
        np.maximum(m, t, out=m)
    m = np.where(np.isfinite(m), m, 0.0)
    total = np.zeros_like(m)
    for t in terms:
        total += np.exp(t - m)
    with np.errstate(divide="ignore"):
        return np.log(total) + m


def sample_reparameterized(g, rng: np.random.Generator, sample_shape=()) -> Variable:
    """Draw ``z = g.transform(eps)`` with eps ~ N(0, I).

    ``sample_shape`` dims are inserted just before the event axis.
    """
    batch = g.mean.shape[:-1]
    eps = rng.standard_normal((*batch, *sample_shape, g.dim))
    if not sample_shape:
        return g.transform(eps)
    comp = g
    for _ in sample_shape:
        comp = comp.expand_event(-2)
    return comp.transform(eps)


def mixture_sample_batch(
    m: Mixture, T: int, rng: np.random.Generator | None = None, eps=None, stl: bool = False
) -> MixtureSamples:
    """T reparameterized draws from every component plus mixture densities.

    ``eps`` overrides the noise ([..., K, T, d]); with ``stl`` the density
    ``log_q`` treats the posterior parameters as constants while ``z`` keeps
    its reparameterization path.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    K, d = m.num_components, m.dim
    batch = m.logits.shape[:-1]
    if eps is None:
        eps = rng.standard_normal((*batch, K, T, d))
    comp = m.components.expand_event(-2)
    z = comp.transform(eps)
    dens = m.detached() if stl else m
    return MixtureSamples(z=z, log_q=dens.log_prob(z, sample_axes=2), log_alpha=m.log_weights())


def ancestral_noise(m: Mixture, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Noise for ``n`` ancestral draws: normals first, then component indices.

    The normal block is drawn first with the same layout as a K=1 stratified
    block, so for one component both samplers see identical noise.
    """
    batch = m.logits.shape[:-1]
    eps = rng.standard_normal((*batch, n, m.dim))
    u = rng.random((*batch, n))
    cdf = np.cumsum(m.weights(), axis=-1)
    # index = number of cdf entries <= u, i.e. searchsorted(side="right") per row
    idx = np.sum(u[..., None] >= cdf[..., None, :-1], axis=-1)
    return eps, idx


def mixture_sample_ancestral(m: Mixture, n: int, rng: np.random.Generator, stl: bool = False):
    """``n`` i.i.d. mixture draws by sampling the component index first.

    Returns ``(z [..., n, d], log_q [..., n], idx [..., n])``.  ``z`` is
    reparameterized given its component; the index itself carries no gradient.
    """
    eps, idx = ancestral_noise(m, n, rng)
    z = m.components.gather(idx).transform(eps)
    dens = m.detached() if stl else m
    return z, dens.log_prob(z, sample_axes=1), idx


def stratified_expectation(m: Mixture, f, T: int, rng: np.random.Generator) -> Variable:
    """sum_k alpha_k (1/T) sum_t f(z_kt), with z_kt drawn from component k.

    ``f`` maps samples ``[..., K, T, d]`` to values ``[..., K, T]``.
    """
    s = mixture_sample_batch(m, T, rng)
    per_comp = ad.mean(ad.as_variable(f(s.z)), axis=-1)
    return ad.sum(ad.exp(s.log_alpha) * per_comp, axis=-1)


def ancestral_expectation(m: Mixture, f, n: int, rng: np.random.Generator) -> Variable:
    """Plain Monte Carlo estimate of E_q f from ``n`` ancestral draws."""
    z, _, _ = mixture_sample_ancestral(m, n, rng)
    return ad.mean(ad.as_variable(f(z)), axis=-1)


class TrainableMixturePrior:
    """Mixture-of-diagonal-Gaussians prior with its own trainable leaves."""

    def __init__(self, num_components: int, dim: int):
        self.dim = dim
        self.logits = Variable(np.zeros(num_components), requires_grad=True, name="prior.logits")
        self.means = Variable(np.zeros((num_components, dim)), requires_grad=True, name="prior.means")
        self.log_scales = Variable(
            np.zeros((num_components, dim)), requires_grad=True, name="prior.log_scales"
        )

    def parameters(self) -> list[Variable]:
        return [self.logits, self.means, self.log_scales]

    def mixture(self) -> Mixture:
        return Mixture(self.logits, DiagonalGaussian(self.means, self.log_scales))

    def log_prob(self, z) -> Variable:
        """Density for ``z`` of any leading shape ``[..., d]``."""
        z = ad.as_variable(z)
        la = ad.log_softmax(self.logits)
        comp = DiagonalGaussian(self.means, self.log_scales)
        lp = comp.log_prob(ad.expand_dims(z, -2))  # [..., K]
        return ad.logsumexp(la + lp, axis=-1)

    def sample(self, shape, rng: np.random.Generator) -> np.ndarray:
        m = Mixture(Variable(self.logits.value), DiagonalGaussian(self.means.value, self.log_scales.value))
        n = int(np.prod(shape)) if shape else 1
        eps, idx = ancestral_noise(m, n, rng)
        mu = self.means.value[idx]
        sd = np.exp(self.log_scales.value[idx])
        return (mu + sd * eps).reshape(*shape, self.dim)


# ---------------------------------------------------------------------------
# likelihoods


class CategoricalLikelihood:
    def __init__(self, logits):
        self.logits = ad.as_variable(logits)

    def log_probs(self) -> Variable:
        return ad.log_softmax(self.logits, axis=-1)

    def log_prob(self, labels: np.ndarray) -> Variable:
        """``labels`` broadcast against the logits' batch shape."""
        lp = self.log_probs()
        idx = np.broadcast_to(np.asarray(labels), lp.shape[:-1])[..., None]
        return ad.take_along_axis(lp, idx, axis=-1)[..., 0]

    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs().value)


class BernoulliLikelihood:
    """Independent per-dimension Bernoulli with probability sigmoid(logits)."""

    def __init__(self, logits):
        self.logits = ad.as_variable(logits)

    def log_prob(self, x) -> Variable:
        x = np.asarray(x, dtype=np.float64)
        return ad.sum(self.logits * x - ad.softplus(self.logits), axis=-1)

    def probs(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.logits.value))

"""Evaluation metrics: streamed evidence, accuracy, calibration, mode coverage, gradient variance."""

from __future__ import annotations

import math

import numpy as np

from . import tensor_ad as ad
from .distributions import mixture_sample_batch, rng_stream
from .estimators import EstimatorConfig, Kind, RunningBaseline, estimate, gradient_variance_probe
from .models import ConfigError, posterior_predictive
from .tensor_ad import Tape


def evaluate_evidence(
    model,
    inputs,
    targets,
    T_eval: int,
    seed: int,
    chunk_T: int | None = None,
    batch_size: int = 100,
) -> float:
    """Mean SIWAE estimate with ``T_eval`` draws per component.

    The T axis is streamed in chunks and merged with a running
    log-sum-exp, so memory stays bounded for T_eval around 10^6.
    Returns the average over examples.
    """
    return float(np.mean(evidence_per_example(model, inputs, targets, T_eval, seed, chunk_T, batch_size)))


def evidence_per_example(model, inputs, targets, T_eval, seed, chunk_T=None, batch_size=100) -> np.ndarray:
    inputs = np.asarray(inputs)
    targets = np.asarray(targets)
    n = len(inputs)
    out = np.empty(n)
    if chunk_T is None:
        chunk_T = max(1, min(T_eval, 2_000_000 // (batch_size * 8)))
    for start in range(0, n, batch_size):
        sl = slice(start, min(start + batch_size, n))
        q = model.encode(inputs[sl])
        log_alpha = q.log_weights().value
        acc = np.full(sl.stop - sl.start, -np.inf)
        done = c = 0
        while done < T_eval:
            t = min(chunk_T, T_eval - done)
            rng = rng_stream(seed, start, c)
            s = mixture_sample_batch(q, t, rng)
            lw = model.log_likelihood(targets[sl], s.z).value + model.prior.log_prob(s.z).value - s.log_q.value
            part = ad._lse(log_alpha[..., None] + lw, (-2, -1))
            acc = np.logaddexp(acc, part)
            done += t
            c += 1
        out[sl] = acc - math.log(T_eval)
    return out


# ---------------------------------------------------------------------------
# classification


def predict_proba(model, inputs, S: int, seed: int, batch_size: int = 200) -> np.ndarray:
    inputs = np.asarray(inputs)
    out = []
    for b, start in enumerate(range(0, len(inputs), batch_size)):
        rng = rng_stream(seed, b)
        out.append(posterior_predictive(model, inputs[start : start + batch_size], S, rng))
    return np.concatenate(out, axis=0)


def accuracy_from_probs(probs: np.ndarray, labels: np.ndarray) -> float:
    # np.argmax returns the first maximum, so ties go to the smaller class index
    return float(np.mean(np.argmax(probs, axis=-1) == labels))


def accuracy(model, inputs, labels, S: int, seed: int) -> float:
    return accuracy_from_probs(predict_proba(model, inputs, S, seed), np.asarray(labels))


def expected_calibration_error(confidences, correct, n_bins: int = 10) -> float:
    """Equal-population binned calibration gap.

    Examples are sorted by the probability assigned to the true class and
    split into ``n_bins`` bins of (near) equal size; the result is the
    unweighted mean over bins of |mean confidence - fraction correct|.
    """
    conf = np.asarray(confidences, dtype=np.float64)
    corr = np.asarray(correct, dtype=np.float64)
    if conf.shape != corr.shape or conf.ndim != 1:
        raise ConfigError("confidences and correct flags must be 1-d arrays of equal length")
    if len(conf) < n_bins:
        raise ConfigError(f"need at least {n_bins} examples for {n_bins} bins, got {len(conf)}")
    order = np.argsort(conf, kind="stable")
    gaps = [abs(conf[b].mean() - corr[b].mean()) for b in np.array_split(order, n_bins)]
    return float(np.mean(gaps))


def classification_report(probs: np.ndarray, labels: np.ndarray) -> dict:
    labels = np.asarray(labels)
    conf = probs[np.arange(len(labels)), labels]
    correct = np.argmax(probs, axis=-1) == labels
    return {
        "accuracy": accuracy_from_probs(probs, labels),
        "ece": expected_calibration_error(conf, correct),
        "n": int(len(labels)),
    }


# ---------------------------------------------------------------------------
# toy diagnostics


def mode_coverage(samples, threshold: float = 0.05) -> int:
    """Number of sign quadrants holding at least ``threshold`` of the samples."""
    s = np.asarray(samples)
    if s.ndim != 2 or s.shape[1] != 2:
        raise ConfigError("mode_coverage expects [n, 2] samples")
    q = (s[:, 0] >= 0).astype(int) * 2 + (s[:, 1] >= 0).astype(int)
    frac = np.bincount(q, minlength=4) / len(s)
    return int(np.sum(frac >= threshold))


def toy_gradient_variance(model, x, config: EstimatorConfig, n_repeats: int, seed: int) -> dict:
    """Gradient variance of ``config``'s objective on a frozen model and fixed batch.

    SCORE uses a baseline fixed at the batch mean log-weight of a separate
    warm-up draw, standing in for the converged running mean.
    """
    params = model.parameters()
    names = [p.name for p in params]
    baseline = None
    if config.kind is Kind.SCORE:
        baseline = RunningBaseline()
        est = estimate(config, model, x, x, rng_stream(seed, 999))
        baseline.update(float(np.mean(est.log_weights.value)))

    def grad_fn(i):
        frozen = None
        if baseline is not None:
            frozen = RunningBaseline(baseline.momentum)
            frozen.update(baseline.value)
        with Tape() as tape:
            b = estimate(config, model, x, x, rng_stream(seed, i), frozen)
            g = tape.backward(-b.mean(), params)
        return [g[p] for p in params]

    return gradient_variance_probe(grad_fn, n_repeats, names)

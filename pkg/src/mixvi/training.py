"""Optimization: Adam with step decay, mixture penalties, burn-in, train loop."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor_ad as ad
from .distributions import rng_stream
from .estimators import EstimatorConfig, Kind, NumericalError, RunningBaseline, estimate
from .tensor_ad import Tape, Variable

# stream tags for rng_stream(seed, tag, ...)
INIT_STREAM = 0
ORDER_STREAM = 1
NOISE_STREAM = 2
EVAL_STREAM = 3
BURN_IN_STREAM = 4


class AdamState:
    """Adam (beta1=0.9, beta2=0.999, eps=1e-8) with a stepwise learning-rate decay."""

    def __init__(
        self,
        params: list[Variable],
        lr: float = 1e-3,
        decay_factor: float = 1.0,
        decay_every: int = 0,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = lr
        self.decay_factor = decay_factor
        self.decay_every = decay_every
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.step_count = 0

    def current_lr(self) -> float:
        if self.decay_every and self.decay_factor != 1.0:
            return self.lr * self.decay_factor ** (self.step_count // self.decay_every)
        return self.lr

    def step(self, grads: list[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ValueError("gradient list does not match parameter list")
        for p, g in zip(self.params, grads):
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for parameter {p.name!r}")
        lr = self.current_lr()
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.value -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# mixture penalties


def entropy_threshold(K: int, max_mass: float = 0.95) -> float:
    """sum_k a_k log a_k at the configuration (max_mass, rest spread evenly)."""
    if K < 2:
        return 0.0
    rest = (1.0 - max_mass) / (K - 1)
    return max_mass * math.log(max_mass) + (K - 1) * rest * math.log(rest)


def entropy_penalty(logits, h0: float) -> Variable:
    """relu(sum_k a_k log a_k - h0), averaged over any batch dims."""
    la = ad.log_softmax(ad.as_variable(logits), axis=-1)
    neg_entropy = ad.sum(ad.exp(la) * la, axis=-1)
    return ad.mean(ad.relu(neg_entropy - h0))


def component_floor_penalty(logits, alpha0: float = math.log(0.01)) -> Variable:
    """sum_k relu(alpha0 - log a_k), averaged over any batch dims."""
    la = ad.log_softmax(ad.as_variable(logits), axis=-1)
    return ad.mean(ad.sum(ad.relu(alpha0 - la), axis=-1))


# ---------------------------------------------------------------------------
# configs and records


@dataclass
class PenaltyConfig:
    entropy: bool = False
    floor: bool = False
    max_mass: float = 0.95
    alpha0: float = math.log(0.01)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    base_lr: float = 1e-3
    lr_decay_factor: float = 1.0
    lr_decay_every_steps: int = 0
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    penalties: PenaltyConfig = field(default_factory=PenaltyConfig)
    burn_in_epochs: int = 0
    seed: int = 0
    eval_every: int = 0  # epochs between evidence evaluations; 0 disables
    eval_T: int = 25
    eval_size: int | None = None  # evaluate on the first eval_size examples

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not 0.0 < self.lr_decay_factor <= 1.0:
            raise ValueError("lr_decay_factor must lie in (0, 1]")
        if self.base_lr < 0:
            raise ValueError("base_lr must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["estimator"] = self.estimator.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        est = d.pop("estimator", {})
        pen = d.pop("penalties", {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        return cls(estimator=EstimatorConfig(**est), penalties=PenaltyConfig(**pen), **d)


@dataclass
class RunRecord:
    epochs: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)
    wall_time: list[float] = field(default_factory=list)  # kept out of serialized output

    def log(self, entry: dict, seconds: float) -> None:
        self.epochs.append(entry)
        self.wall_time.append(seconds)


@dataclass
class Dataset:
    """Encoder inputs and likelihood targets (row-aligned)."""

    inputs: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return len(self.inputs)


# ---------------------------------------------------------------------------
# loops


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _penalty_terms(q, penalties: PenaltyConfig) -> Variable | None:
    K = q.num_components
    if K < 2:
        return None
    total = None
    if penalties.entropy:
        total = entropy_penalty(q.logits, entropy_threshold(K, penalties.max_mass))
    if penalties.floor:
        p = component_floor_penalty(q.logits, penalties.alpha0)
        total = p if total is None else total + p
    return total


def burn_in(model, data: Dataset, epochs: int, seed: int, batch_size: int = 32, lr: float = 1e-3) -> None:
    """Fit the decoder to prior draws and spread the encoder over the prior.

    Per batch, with z_i ~ r(z): loss = -mean log p(x_i|z_i) - mean log q(z_i|x_i).
    Encoder and decoder are updated; the prior is left untouched.
    """
    if epochs <= 0:
        return
    params = model.encoder_parameters() + model.decoder_parameters()
    opt = AdamState(params, lr=lr)
    n = len(data)
    for epoch in range(epochs):
        for b, idx in enumerate(_batches(n, batch_size, rng_stream(seed, BURN_IN_STREAM, epoch))):
            rng = rng_stream(seed, BURN_IN_STREAM, epoch, b + 1)
            z = model.prior.sample((len(idx), 1), rng)
            with Tape() as tape:
                q = model.encode(data.inputs[idx])
                log_lik = model.log_likelihood(data.targets[idx], z)
                log_q = q.log_prob(z, sample_axes=1)
                loss = -ad.mean(log_lik) - ad.mean(log_q)
                grads = tape.backward(loss, params)
            opt.step([grads[p] for p in params])


def train(model, data: Dataset, config: TrainConfig, evaluator=None, log=None) -> RunRecord:
    """Minibatch training of ``model`` on ``data``.

    ``evaluator(model, epoch)`` returns an evidence estimate on evaluation
    epochs.  Identical (config, seed, initial model) give identical records.
    """
    config.validate()
    est = config.estimator
    record = RunRecord()
    if config.burn_in_epochs:
        burn_in(model, data, config.burn_in_epochs, config.seed, config.batch_size, config.base_lr)
    params = model.parameters()
    opt = AdamState(params, config.base_lr, config.lr_decay_factor, config.lr_decay_every_steps)
    baseline = RunningBaseline() if est.kind is Kind.SCORE else None
    n = len(data)
    trace: list[float] = []

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        obj_sum = pen_sum = 0.0
        a_min, a_max = 1.0, 0.0
        steps = 0
        order_rng = rng_stream(config.seed, ORDER_STREAM, epoch)
        for b, idx in enumerate(_batches(n, config.batch_size, order_rng)):
            rng = rng_stream(config.seed, NOISE_STREAM, epoch, b)
            try:
                with Tape() as tape:
                    bound = estimate(est, model, data.inputs[idx], data.targets[idx], rng, baseline)
                    objective = bound.mean()
                    loss = -objective
                    q = bound.posterior
                    pen = _penalty_terms(q, config.penalties) if q is not None else None
                    if pen is not None:
                        loss = loss + pen
                    grads = tape.backward(loss, params)
            except NumericalError as err:
                raise NumericalError(_diagnose(str(err), trace, epoch, b)) from err
            value = float(loss.value)
            trace.append(value)
            if not math.isfinite(value):
                raise NumericalError(_diagnose("non-finite loss", trace, epoch, b))
            try:
                opt.step([grads[p] for p in params])
            except NumericalError as err:
                raise NumericalError(_diagnose(str(err), trace, epoch, b)) from err
            if est.kind is Kind.SCORE:
                obj_sum += float(np.mean(bound.log_weights.value))
            else:
                obj_sum += float(objective.value)
            pen_sum += float(pen.value) if pen is not None else 0.0
            if q is not None:
                w = q.weights()
                a_min = min(a_min, float(w.min()))
                a_max = max(a_max, float(w.max()))
            steps += 1
        entry = {
            "epoch": epoch,
            "objective": obj_sum / max(steps, 1),
            "penalty": pen_sum / max(steps, 1),
            "alpha_min": a_min,
            "alpha_max": a_max,
            "lr": opt.current_lr(),
            "evidence": None,
        }
        last = epoch == config.epochs - 1
        if evaluator is not None and config.eval_every and ((epoch + 1) % config.eval_every == 0 or last):
            entry["evidence"] = float(evaluator(model, epoch))
        record.log(entry, time.perf_counter() - t0)
        if log is not None:
            log(entry)
    return record


def _diagnose(reason: str, trace: list[float], epoch: int, batch: int) -> str:
    tail = ", ".join(f"{v:.4g}" for v in trace[-10:])
    return f"{reason} at epoch {epoch} batch {batch}; recent losses: [{tail}]"

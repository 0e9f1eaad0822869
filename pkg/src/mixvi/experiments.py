"""Experiment drivers: the toy posterior study and the single-column digit studies."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .data import (
    bundled_digits_available,
    generate_toy,
    load_bundled_digits,
    synthetic_digits,
    toy_log_evidence,
    train_test_split,
)
from .distributions import rng_stream
from .estimators import EstimatorConfig, Kind
from .metrics import (
    classification_report,
    evaluate_evidence,
    mode_coverage,
    predict_proba,
    toy_gradient_variance,
)
from .models import ConfigError, ModelSpec, build_model, implicit_posterior_sample, toy_spec, vae_spec, vib_spec
from .training import EVAL_STREAM, INIT_STREAM, Dataset, PenaltyConfig, TrainConfig, train


class _Profile:
    """Shared helpers for the experiment profiles.

    ``model``, ``train`` and ``estimator`` hold field overrides for
    ModelSpec, TrainConfig and EstimatorConfig respectively.
    """

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict, base=None):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown profile fields: {sorted(unknown)}")
        out = base if base is not None else cls()
        for k, v in d.items():
            setattr(out, k, v)
        return out

    def model_spec(self, spec: ModelSpec) -> ModelSpec:
        if not self.model:
            return spec
        return ModelSpec.from_dict({**spec.to_dict(), **self.model})

    def train_config(self, cfg: TrainConfig) -> TrainConfig:
        if not self.train and not self.estimator:
            return cfg
        d = cfg.to_dict()
        allowed = {"lr_decay_factor", "lr_decay_every_steps", "burn_in_epochs", "penalties"}
        bad = set(self.train) - allowed
        if bad:
            raise ConfigError(f"train overrides not allowed here: {sorted(bad)}")
        d.update(self.train)
        est = dict(d["estimator"])
        bad = set(self.estimator) - {"beta_kl", "ciwae_blend"}
        if bad:
            raise ConfigError(f"estimator overrides not allowed here: {sorted(bad)}")
        est.update(self.estimator)
        d["estimator"] = est
        try:
            cfg = TrainConfig.from_dict(d)
            cfg.validate()
        except (TypeError, ValueError) as err:
            raise ConfigError(str(err)) from err
        return cfg

# ---------------------------------------------------------------------------
# toy study


@dataclass
class ToyProfile(_Profile):
    epochs: int = 1000
    eval_samples: int = 1_000_000  # total draws per datapoint for the final evidence
    curve_samples: int = 1000  # total draws per datapoint for per-epoch curves
    eval_every: int = 100
    n_points: int = 1000
    noise_var: float = 0.05
    K: int = 4
    # sample budgets per datapoint; per component unless T_mode == "total"
    T_siwae: int = 10
    T_selbo: int = 100
    T_score: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    probe_repeats: int = 100
    coverage_samples: int = 10_000
    coverage_threshold: float = 0.05
    T_mode: str = "per_component"  # or "total": T is the whole budget, split over K
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    estimator: dict = field(default_factory=dict)

    @classmethod
    def named(cls, name: str, **overrides) -> "ToyProfile":
        if name == "full":
            base = cls()
        elif name == "fast":
            base = cls(epochs=200, eval_samples=10_000, eval_every=50)
        else:
            raise ValueError(f"unknown profile {name!r}")
        for k, v in overrides.items():
            if v is not None:
                setattr(base, k, v)
        return base


TOY_LOSSES = ("siwae", "selbo", "score", "siwae_stl", "selbo_stl")


def toy_estimator(loss: str, p: ToyProfile) -> EstimatorConfig:
    stl = loss.endswith("_stl")
    kind = Kind(loss.removesuffix("_stl"))
    T = {Kind.SIWAE: p.T_siwae, Kind.SELBO: p.T_selbo, Kind.SCORE: p.T_score}[kind]
    if p.T_mode == "total":
        T = max(1, round(T / p.K))
    elif p.T_mode != "per_component":
        raise ConfigError(f"unknown T_mode {p.T_mode!r}")
    return EstimatorConfig(kind=kind, T=T, stl=stl)


@dataclass
class ToyRun:
    loss: str
    record: list = field(default_factory=list)
    evidence: float = float("nan")
    grad_variance: float = float("nan")
    coverage: int = 0
    quadrant_mass: list = field(default_factory=list)
    samples: np.ndarray | None = None
    model: object = None
    train_config: dict = field(default_factory=dict)


def run_toy(loss: str, seed: int, p: ToyProfile, log=None) -> ToyRun:
    """Train one toy posterior and compute its final diagnostics.

    Every loss starts from the same initial weights for a given seed and
    sees the same batch order.
    """
    data = generate_toy(p.n_points, p.noise_var, seed)
    spec = p.model_spec(toy_spec(K=p.K, noise_var=p.noise_var))
    model = build_model(spec, rng_stream(seed, INIT_STREAM))
    cfg = TrainConfig(
        epochs=p.epochs,
        batch_size=p.batch_size,
        base_lr=p.lr,
        estimator=toy_estimator(loss, p),
        seed=seed,
        eval_every=p.eval_every,
    )
    cfg = p.train_config(cfg)
    est = cfg.estimator
    curve_T = max(1, p.curve_samples // p.K)

    def evaluator(m, epoch):
        return evaluate_evidence(m, data.x, data.x, curve_T, seed=_eval_seed(seed))

    record = train(model, Dataset(data.x, data.x), cfg, evaluator=evaluator, log=log)
    run = ToyRun(loss=loss, record=record.epochs, model=model, train_config=cfg.to_dict())
    run.evidence = evaluate_evidence(model, data.x, data.x, max(1, p.eval_samples // p.K), seed=_eval_seed(seed))
    probe = toy_gradient_variance(model, data.x[: p.batch_size], est, p.probe_repeats, seed=_probe_seed(seed))
    run.grad_variance = probe["mean"]
    run.samples = implicit_posterior_at(model, np.array([1.0, 1.0]), p.T_siwae, p.coverage_samples, seed)
    run.coverage = mode_coverage(run.samples, p.coverage_threshold)
    run.quadrant_mass = quadrant_mass(run.samples)
    return run


def implicit_posterior_at(model, x, T: int, n: int, seed: int) -> np.ndarray:
    """``n`` independent draws of the implicit posterior at a single point.

    Each draw resamples one latent from its own stratified block of T draws
    per component, so the output follows the implicit posterior exactly.
    """
    xs = np.repeat(np.asarray(x, dtype=np.float64)[None, :], n, axis=0)
    return implicit_posterior_sample(model, xs, T, 1, rng_stream(seed, EVAL_STREAM, 1))[:, 0, :]


def quadrant_mass(samples: np.ndarray) -> list[float]:
    q = (samples[:, 0] >= 0).astype(int) * 2 + (samples[:, 1] >= 0).astype(int)
    return (np.bincount(q, minlength=4) / len(samples)).tolist()


def _eval_seed(seed: int) -> int:
    return seed * 1000 + EVAL_STREAM


def _probe_seed(seed: int) -> int:
    return seed * 1000 + 7


def toy_true_evidence(seed: int, p: ToyProfile) -> float:
    data = generate_toy(p.n_points, p.noise_var, seed)
    return float(np.mean(toy_log_evidence(data.x, p.noise_var)))


# ---------------------------------------------------------------------------
# digit studies


@dataclass
class DigitProfile(_Profile):
    n_train: int = 4000
    n_test: int = 1000
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    S: int = 1000  # posterior-predictive draws
    beta_kl: float = 0.05
    latent_dim: int = 2
    burn_in_epochs: int = 0
    source: str = "auto"  # auto | bundled | synthetic
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    estimator: dict = field(default_factory=dict)

    @classmethod
    def named(cls, name: str, **overrides) -> "DigitProfile":
        if name == "full":
            base = cls()
        elif name == "fast":
            base = cls(n_train=1000, n_test=500, epochs=3, S=200)
        else:
            raise ValueError(f"unknown profile {name!r}")
        for k, v in overrides.items():
            if v is not None:
                setattr(base, k, v)
        return base


def digit_splits(p: DigitProfile, seed: int, binarize: bool = False, source: str | None = None):
    """Centre-column digits split into train and test sets."""
    source = source or p.source
    if source == "auto":
        source = "bundled" if bundled_digits_available() else "synthetic"
    if source == "bundled":
        ds = load_bundled_digits("center_column", binarize)
    elif source == "synthetic":
        ds = synthetic_digits(p.n_train + p.n_test, seed=0, corruption="center_column", binarize=binarize)
    else:
        raise ValueError(f"unknown digit source {source!r}")
    train_ds, test_ds = train_test_split(ds, p.n_test, seed=0)
    return train_ds.subset(np.arange(min(p.n_train, len(train_ds)))), test_ds, source


def run_classify(loss: str, K: int, T: int, seed: int, p: DigitProfile, data=None, stl: bool = False, log=None) -> dict:
    """Train one VIB classifier on centre-column digits and report accuracy and ECE."""
    train_ds, test_ds, source = data if data is not None else digit_splits(p, seed)
    spec = p.model_spec(vib_spec(K=K, latent_dim=p.latent_dim, input_dim=train_ds.inputs.shape[1]))
    model = build_model(spec, rng_stream(seed, INIT_STREAM))
    est = EstimatorConfig(kind=Kind(loss), T=T, stl=stl, beta_kl=p.beta_kl)
    cfg = TrainConfig(epochs=p.epochs, batch_size=p.batch_size, base_lr=p.lr, estimator=est, seed=seed)
    cfg = p.train_config(cfg)
    record = train(model, Dataset(train_ds.inputs, train_ds.labels), cfg, log=log)
    probs = predict_proba(model, test_ds.inputs, p.S, seed=_eval_seed(seed))
    report = classification_report(probs, test_ds.labels)
    report.update({"loss": loss, "K": K, "T": T, "stl": stl, "seed": seed, "data_source": source})
    return {"report": report, "record": record.epochs, "model": model, "train_config": cfg.to_dict(), "probs": probs}


def run_vae(loss: str, K: int, T: int, seed: int, p: DigitProfile, data=None, eval_total: int = 100, log=None) -> dict:
    """Single-column VAE: encoder sees the centre column, decoder models all binarized pixels."""
    train_ds, test_ds, source = data if data is not None else digit_splits(p, seed, binarize=True)
    spec = p.model_spec(vae_spec(K=K, latent_dim=p.latent_dim, input_dim=train_ds.inputs.shape[1]))
    model = build_model(spec, rng_stream(seed, INIT_STREAM))
    est = EstimatorConfig(kind=Kind(loss), T=T)
    cfg = TrainConfig(
        epochs=p.epochs,
        batch_size=p.batch_size,
        base_lr=p.lr,
        estimator=est,
        seed=seed,
        burn_in_epochs=p.burn_in_epochs,
        penalties=PenaltyConfig(entropy=True, floor=True),
    )
    cfg = p.train_config(cfg)
    targets = train_ds.images.reshape(len(train_ds), -1)
    record = train(model, Dataset(train_ds.inputs, targets), cfg, log=log)
    test_targets = test_ds.images.reshape(len(test_ds), -1)
    # hold the total draw count fixed across K
    T_eval = max(1, eval_total // K)
    ev = evaluate_evidence(model, test_ds.inputs, test_targets, T_eval, seed=_eval_seed(seed), batch_size=50)
    report = {"loss": loss, "K": K, "T": T, "seed": seed, "evidence": ev, "eval_draws": T_eval * K, "data_source": source}
    return {"report": report, "record": record.epochs, "model": model, "train_config": cfg.to_dict()}


def summary_stats(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    return {"mean": float(v.mean()), "median": float(np.median(v)), "min": float(v.min()), "max": float(v.max())}


"""Networks and the three model families built on them.

* ``toy``: amortized mixture posterior with the fixed likelihood
  ``x ~ N(|z|, noise_var I)`` and a standard normal prior.
* ``vib``: mixture posterior over a low-dimensional bottleneck, affine
  decoder to class logits, trainable mixture prior.
* ``vae``: mixture posterior from a partial view of an image, Bernoulli pixel
  decoder (MLP plus an optional affine skip path), standard normal prior.

Parameters are leaf Variables enumerated in a stable order by
``model.named_parameters()``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor_ad as ad
from .distributions import (
    LOG_2PI,
    BernoulliLikelihood,
    CategoricalLikelihood,
    DiagonalGaussian,
    FullCovGaussian,
    Mixture,
    StandardNormal,
    TrainableMixturePrior,
    mixture_sample_ancestral,
    mixture_sample_batch,
    rng_stream,
)
from .estimators import log_weights as _log_weights
from .tensor_ad import Variable


class ConfigError(ValueError):
    """Inconsistent model or run configuration."""


ACTIVATIONS = {"elu": ad.elu, "relu": ad.relu}


@dataclass
class ModelSpec:
    family: str = "toy"  # toy | vib | vae
    input_dim: int = 2
    latent_dim: int = 2
    hidden: list[int] = field(default_factory=lambda: [100, 100])
    activation: str = "elu"
    K: int = 4
    covariance: str = "diagonal"  # diagonal | full
    prior: str = "standard"  # standard | mixture
    num_classes: int = 10
    output_dim: int = 784
    decoder_hidden: list[int] = field(default_factory=lambda: [128, 128])
    decoder_skip: bool = True
    noise_var: float = 0.05
    mean_init_std: float = 0.5
    log_scale_init: float = math.log(0.5)

    def validate(self) -> None:
        if self.family not in ("toy", "vib", "vae"):
            raise ConfigError(f"unknown model family {self.family!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.covariance not in ("diagonal", "full"):
            raise ConfigError(f"unknown covariance {self.covariance!r}")
        if self.prior not in ("standard", "mixture"):
            raise ConfigError(f"unknown prior {self.prior!r}")
        if self.K < 1 or self.latent_dim < 1 or self.input_dim < 1:
            raise ConfigError("K, latent_dim and input_dim must be positive")
        if any(h < 1 for h in self.hidden):
            raise ConfigError("hidden sizes must be positive")
        if self.family == "toy" and self.input_dim != self.latent_dim:
            raise ConfigError("toy likelihood needs input_dim == latent_dim")
        if self.family == "toy" and self.noise_var <= 0:
            raise ConfigError("noise_var must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model spec fields: {sorted(unknown)}")
        return cls(**d)


def toy_spec(K: int = 4, noise_var: float = 0.05, latent_dim: int = 2) -> ModelSpec:
    return ModelSpec(family="toy", input_dim=latent_dim, latent_dim=latent_dim, hidden=[100, 100], K=K, noise_var=noise_var)


def vib_spec(K: int = 5, latent_dim: int = 2, input_dim: int = 28) -> ModelSpec:
    return ModelSpec(
        family="vib",
        input_dim=input_dim,
        latent_dim=latent_dim,
        hidden=[128] * 4,
        K=K,
        covariance="full",
        prior="mixture",
    )


def vae_spec(K: int = 5, latent_dim: int = 2, input_dim: int = 28, output_dim: int = 784) -> ModelSpec:
    return ModelSpec(
        family="vae",
        input_dim=input_dim,
        latent_dim=latent_dim,
        hidden=[128] * 4,
        K=K,
        covariance="full",
        prior="standard",
        output_dim=output_dim,
    )


# ---------------------------------------------------------------------------
# building blocks


class Linear:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str):
        bound = math.sqrt(6.0 / n_in)  # He-uniform
        self.weight = Variable(rng.uniform(-bound, bound, (n_in, n_out)), requires_grad=True, name=f"{name}.weight")
        self.bias = Variable(np.zeros(n_out), requires_grad=True, name=f"{name}.bias")

    def __call__(self, x) -> Variable:
        x = ad.as_variable(x)
        if x.ndim == 1:
            return ad.reshape(ad.matmul(ad.reshape(x, (1, -1)), self.weight), (-1,)) + self.bias
        return ad.matmul(x, self.weight) + self.bias

    def parameters(self) -> list[Variable]:
        return [self.weight, self.bias]


class MLP:
    """Stack of affine layers with an activation after every hidden layer.

    ``hidden=[]`` leaves a single affine map.  With ``out_dim=None`` the last
    hidden activation is the output (a feature extractor).
    """

    def __init__(self, in_dim: int, hidden, out_dim: int | None, rng, activation: str = "elu", name: str = "mlp"):
        dims = [in_dim, *hidden]
        self.hidden_layers = [Linear(a, b, rng, f"{name}.{i}") for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))]
        self.out = Linear(dims[-1], out_dim, rng, f"{name}.out") if out_dim is not None else None
        self.act = ACTIVATIONS[activation]
        self.out_dim = out_dim if out_dim is not None else dims[-1]

    def __call__(self, x) -> Variable:
        h = ad.as_variable(x)
        for layer in self.hidden_layers:
            h = self.act(layer(h))
        return self.out(h) if self.out is not None else h

    def parameters(self) -> list[Variable]:
        ps = [p for layer in self.hidden_layers for p in layer.parameters()]
        if self.out is not None:
            ps += self.out.parameters()
        return ps


class EncoderHead:
    """Affine map from features to mixture parameters.

    Output layout per example: K logits (none when K=1), K*d means, then K*d
    log-scales (diagonal) or K*d(d+1)/2 raw Cholesky entries (full).
    """

    def __init__(self, n_in: int, K: int, d: int, covariance: str, rng, mean_init_std: float, log_scale_init: float):
        self.K, self.d, self.covariance = K, d, covariance
        n_scale = d if covariance == "diagonal" else d * (d + 1) // 2
        self.n_scale = n_scale
        # a single component has no weight to predict
        self.n_logits = nl = K if K > 1 else 0
        self.linear = Linear(n_in, nl + K * d + K * n_scale, rng, "head")
        bias = np.zeros(nl + K * d + K * n_scale)
        bias[nl : nl + K * d] = rng.normal(0.0, mean_init_std, K * d)
        if covariance == "diagonal":
            bias[nl + K * d :] = log_scale_init
        else:
            # softplus^-1 of the target scale on the diagonal, zero off-diagonal
            target = math.exp(log_scale_init)
            raw_diag = math.log(math.expm1(target))
            rows, cols = np.tril_indices(d)
            block = np.where(rows == cols, raw_diag, 0.0)
            bias[nl + K * d :] = np.tile(block, K)
        self.linear.bias.value[:] = bias
        # mixture logits start at zero for every input
        self.linear.weight.value[:, :nl] = 0.0

    def __call__(self, h) -> Mixture:
        out = self.linear(h)
        K, d, ns, nl = self.K, self.d, self.n_scale, self.n_logits
        batch = out.shape[:-1]
        logits = out[..., :nl] if nl else Variable(np.zeros((*batch, 1)))
        means = ad.reshape(out[..., nl : nl + K * d], (*batch, K, d))
        scales = ad.reshape(out[..., nl + K * d :], (*batch, K, ns))
        if self.covariance == "diagonal":
            comp = DiagonalGaussian(means, scales)
        else:
            comp = FullCovGaussian.from_raw(means, scales)
        return Mixture(logits, comp)

    def parameters(self) -> list[Variable]:
        return self.linear.parameters()


# ---------------------------------------------------------------------------
# model families


class _Model:
    spec: ModelSpec
    encoder: MLP
    head: EncoderHead

    def encode(self, x) -> Mixture:
        x = ad.as_variable(np.asarray(x, dtype=np.float64) if not isinstance(x, Variable) else x)
        return self.head(self.encoder(x))

    def encoder_parameters(self) -> list[Variable]:
        return self.encoder.parameters() + self.head.parameters()

    def decoder_parameters(self) -> list[Variable]:
        return []

    def prior_parameters(self) -> list[Variable]:
        return self.prior.parameters()

    def parameters(self) -> list[Variable]:
        return self.encoder_parameters() + self.decoder_parameters() + self.prior_parameters()

    def named_parameters(self) -> Iterator[tuple[str, Variable]]:
        for p in self.parameters():
            yield p.name, p

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.value.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        if set(params) != set(state):
            raise ConfigError("checkpoint tensors do not match the model's parameter registry")
        for n, p in params.items():
            if p.value.shape != state[n].shape:
                raise ConfigError(f"shape mismatch for {n}: {p.value.shape} vs {state[n].shape}")
            p.value[...] = state[n]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class ToyModel(_Model):
    """Posterior-only model for x ~ N(|z|, noise_var I), z ~ N(0, I)."""

    def __init__(self, spec: ModelSpec, rng):
        self.spec = spec
        self.encoder = MLP(spec.input_dim, spec.hidden, None, rng, spec.activation, "encoder")
        self.head = EncoderHead(
            self.encoder.out_dim, spec.K, spec.latent_dim, spec.covariance, rng, spec.mean_init_std, spec.log_scale_init
        )
        self.prior = StandardNormal(spec.latent_dim)

    def log_likelihood(self, x, z) -> Variable:
        """log N(x; |z|, noise_var I) for z [B, *S, d] and x [B, d]."""
        z = ad.as_variable(z)
        x = np.asarray(x, dtype=np.float64)
        x = x.reshape(x.shape[:1] + (1,) * (z.ndim - 2) + x.shape[1:])
        var = self.spec.noise_var
        d = z.shape[-1]
        r = ad.sub(x, ad.abs(z))
        return -0.5 / var * ad.sum(ad.square(r), axis=-1) - 0.5 * d * (LOG_2PI + math.log(var))


class VIBModel(_Model):
    """Variational information bottleneck classifier."""

    def __init__(self, spec: ModelSpec, rng):
        self.spec = spec
        self.encoder = MLP(spec.input_dim, spec.hidden, None, rng, spec.activation, "encoder")
        self.head = EncoderHead(
            self.encoder.out_dim, spec.K, spec.latent_dim, spec.covariance, rng, spec.mean_init_std, spec.log_scale_init
        )
        self.decoder = Linear(spec.latent_dim, spec.num_classes, rng, "decoder")
        if spec.prior == "mixture":
            self.prior = TrainableMixturePrior(spec.K, spec.latent_dim)
        else:
            self.prior = StandardNormal(spec.latent_dim)

    def decoder_parameters(self) -> list[Variable]:
        return self.decoder.parameters()

    def decode(self, z) -> CategoricalLikelihood:
        return CategoricalLikelihood(self.decoder(z))

    def log_likelihood(self, y, z) -> Variable:
        z = ad.as_variable(z)
        y = np.asarray(y).reshape((-1,) + (1,) * (z.ndim - 2))
        return self.decode(z).log_prob(y)


class VAEModel(_Model):
    """Mixture-posterior VAE reconstructing a full image from a partial view."""

    def __init__(self, spec: ModelSpec, rng):
        self.spec = spec
        self.encoder = MLP(spec.input_dim, spec.hidden, None, rng, spec.activation, "encoder")
        self.head = EncoderHead(
            self.encoder.out_dim, spec.K, spec.latent_dim, spec.covariance, rng, spec.mean_init_std, spec.log_scale_init
        )
        self.decoder = MLP(spec.latent_dim, spec.decoder_hidden, spec.output_dim, rng, spec.activation, "decoder")
        self.skip = Linear(spec.latent_dim, spec.output_dim, rng, "skip") if spec.decoder_skip else None
        self.prior = StandardNormal(spec.latent_dim)

    def decoder_parameters(self) -> list[Variable]:
        ps = self.decoder.parameters()
        if self.skip is not None:
            ps = ps + self.skip.parameters()
        return ps

    def decode(self, z) -> BernoulliLikelihood:
        logits = self.decoder(z)
        if self.skip is not None:
            logits = logits + self.skip(z)
        return BernoulliLikelihood(logits)

    def log_likelihood(self, x, z) -> Variable:
        z = ad.as_variable(z)
        x = np.asarray(x, dtype=np.float64)
        x = x.reshape(x.shape[:1] + (1,) * (z.ndim - 2) + x.shape[1:])
        return self.decode(z).log_prob(x)


class DeterministicClassifier:
    """Bottleneck MLP baseline with no latent noise (scaled-down comparison)."""

    def __init__(self, input_dim: int, hidden, bottleneck: int, num_classes: int, rng, activation: str = "elu"):
        self.body = MLP(input_dim, hidden, bottleneck, rng, activation, "det.encoder")
        self.decoder = Linear(bottleneck, num_classes, rng, "det.decoder")

    def logits(self, x) -> Variable:
        return self.decoder(self.body(np.asarray(x, dtype=np.float64)))

    def parameters(self) -> list[Variable]:
        return self.body.parameters() + self.decoder.parameters()

    def predict_proba(self, x) -> np.ndarray:
        return CategoricalLikelihood(self.logits(x)).probs()


FAMILIES = {"toy": ToyModel, "vib": VIBModel, "vae": VAEModel}


def build_model(spec: ModelSpec, rng: np.random.Generator | int):
    """Instantiate and initialize a model from ``spec``."""
    spec.validate()
    if not isinstance(rng, np.random.Generator):
        rng = rng_stream(rng, 0)
    return FAMILIES[spec.family](spec, rng)


# ---------------------------------------------------------------------------
# inference utilities


def posterior_predictive(model: VIBModel, x, S: int, rng: np.random.Generator, chunk: int = 1000) -> np.ndarray:
    """Mean over ``S`` ancestral posterior draws of softmax(decoder(z)); [B, C]."""
    q = model.encode(x)
    total = 0.0
    done = 0
    while done < S:
        n = min(chunk, S - done)
        z, _, _ = mixture_sample_ancestral(q, n, rng)
        total = total + model.decode(z).probs().sum(axis=-2)
        done += n
    return total / S


def implicit_posterior_sample(model, x, T: int, n_out: int, rng: np.random.Generator, eps=None) -> np.ndarray:
    """Sampling-importance-resampling from one stratified block per input.

    Weights are softmax over (k, t) of ``log alpha_k + w_kt``; ``n_out``
    latents are drawn with replacement.  Returns [B, n_out, d].
    """
    q = model.encode(x)
    s = mixture_sample_batch(q, T, rng, eps=eps)
    lw = _log_weights(model.log_likelihood(x, s.z), model.prior.log_prob(s.z), s.log_q)
    logits = (s.log_alpha.value[..., None] + lw.value).reshape(lw.shape[0], -1)
    z = s.z.value.reshape(lw.shape[0], -1, s.z.shape[-1])
    out = np.empty((lw.shape[0], n_out, z.shape[-1]))
    for b in range(lw.shape[0]):
        w = np.exp(logits[b] - logits[b].max())
        w /= w.sum()
        idx = rng.choice(w.size, size=n_out, replace=True, p=w)
        out[b] = z[b, idx]
    return out


# ---------------------------------------------------------------------------
# checkpoints
#
# Container layout (all integers little-endian):
#   magic  b"MXVICKPT"   8 bytes
#   u32    version (=1)
#   u32    tensor count
#   per tensor:
#     u32  name length, name bytes (utf-8)
#     u32  ndim, ndim x u64 dims
#     f64  payload, row-major, prod(dims) values
# The ModelSpec goes in a JSON manifest next to the container.

CKPT_MAGIC = b"MXVICKPT"


def save_checkpoint(model, path: str | Path, manifest_path: str | Path | None = None) -> None:
    path = Path(path)
    parts = [CKPT_MAGIC, struct.pack("<II", 1, len(list(model.named_parameters())))]
    for name, p in model.named_parameters():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<I", p.ndim) + struct.pack(f"<{p.ndim}Q", *p.shape))
        parts.append(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
    path.write_bytes(b"".join(parts))
    if manifest_path is not None:
        Path(manifest_path).write_text(json.dumps({"model_spec": model.spec.to_dict()}, indent=2, sort_keys=True) + "\n")


def read_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise ConfigError("not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != 1:
        raise ConfigError(f"unsupported checkpoint version {version}")
    off = 16
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off : off + n].decode("utf-8")
            off += n
            (ndim,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}Q", buf, off)
            off += 8 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if off + 8 * size > len(buf):
                raise ConfigError("truncated checkpoint")
            out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
            off += 8 * size
    except struct.error as err:
        raise ConfigError("truncated checkpoint") from err
    return out


def load_checkpoint(path: str | Path, manifest_path: str | Path):
    spec = ModelSpec.from_dict(json.loads(Path(manifest_path).read_text())["model_spec"])
    model = build_model(spec, 0)
    model.load_state_dict(read_checkpoint(path))
    return model

"""Recurrent VAE over pianoroll frames and the genre classifier.

Encoder (posterior parameters): BGRU over the frames, all step outputs
concatenated, tanh dense stack, then mean and log-variance heads.
Decoder (likelihood parameters): dense stack from [z; y] to the initial GRU
state, a GRU fed [z; y] at every step, and a sigmoid projection to pitch
probabilities.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import N_PITCHES, N_STEPS
from . import tensor as T
from .tensor import Dense, GRUParams, Tensor

JAZZ = np.array([0.0, 1.0])
OTHER = np.array([1.0, 0.0])


@dataclass
class ModelConfig:
    n_frames: int = N_STEPS
    n_pitches: int = N_PITCHES
    d_hidden: int = 64
    dense: tuple[int, ...] = (256, 256)
    d_z: int = 32
    multitask: bool = False
    beta: float = 1.0
    lambda_genre: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.dense = tuple(int(d) for d in self.dense)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dense"] = list(self.dense)
        return d


def genre_label(jazz: bool | Sequence[bool]) -> np.ndarray:
    """One-hot genre rows: jazz -> [0, 1], other -> [1, 0]."""
    flags = np.atleast_1d(np.asarray(jazz, dtype=bool))
    return np.where(flags[:, None], JAZZ, OTHER)


def _frames(x) -> list[Tensor]:
    if isinstance(x, (list, tuple)):
        return list(x)
    x = T.as_tensor(x)
    if x.data.ndim == 2:
        x = T.reshape(x, (1,) + x.shape)
    if not x.requires_grad:
        return [Tensor(x.data[:, t, :]) for t in range(x.shape[1])]
    return [x[:, t, :] for t in range(x.shape[1])]


class _Stack:
    """BGRU + tanh dense layers; shared by the encoder and the classifier."""

    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        self.cfg = cfg
        self.fwd = GRUParams.init(rng, cfg.n_pitches, cfg.d_hidden)
        self.bwd = GRUParams.init(rng, cfg.n_pitches, cfg.d_hidden)
        widths = [cfg.n_frames * 2 * cfg.d_hidden, *cfg.dense]
        self.layers = [Dense.init(rng, a, b) for a, b in zip(widths, widths[1:])]

    def __call__(self, x) -> Tensor:
        frames = _frames(x)
        if len(frames) != self.cfg.n_frames or frames[0].shape[-1] != self.cfg.n_pitches:
            raise T.ShapeError(
                f"expected {self.cfg.n_frames} frames of {self.cfg.n_pitches} pitches, "
                f"got {len(frames)} of {frames[0].shape[-1]}"
            )
        h = T.concat(T.bgru(frames, self.fwd, self.bwd), axis=1)
        for layer in self.layers:
            h = T.tanh(layer(h))
        return h

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {**self.fwd.named(f"{prefix}.fwd"), **self.bwd.named(f"{prefix}.bwd")}
        for i, layer in enumerate(self.layers):
            out.update(layer.named(f"{prefix}.dense{i}"))
        return out


class Encoder:
    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        self.body = _Stack(rng, cfg)
        width = cfg.dense[-1] if cfg.dense else cfg.n_frames * 2 * cfg.d_hidden
        self.mu = Dense.init(rng, width, cfg.d_z)
        self.log_var = Dense.init(rng, width, cfg.d_z)

    def __call__(self, x) -> tuple[Tensor, Tensor]:
        h = self.body(x)
        return self.mu(h), self.log_var(h)

    def named(self) -> dict[str, Tensor]:
        return {**self.body.named("enc"), **self.mu.named("enc.mu"), **self.log_var.named("enc.log_var")}


class Decoder:
    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        self.cfg = cfg
        n_cond = cfg.d_z + (2 if cfg.multitask else 0)
        widths = [n_cond, *cfg.dense, cfg.d_hidden]
        self.layers = [Dense.init(rng, a, b) for a, b in zip(widths, widths[1:])]
        self.gru = GRUParams.init(rng, n_cond, cfg.d_hidden)
        self.out = Dense.init(rng, cfg.d_hidden, cfg.n_pitches)

    def frames(self, cond: Tensor) -> list[Tensor]:
        h = cond
        for layer in self.layers:
            h = T.tanh(layer(h))
        out = []
        for _ in range(self.cfg.n_frames):
            h = T.gru_cell(cond, h, self.gru)
            out.append(T.sigmoid(self.out(h)))
        return out

    def named(self) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named(f"dec.dense{i}"))
        out.update(self.gru.named("dec.gru"))
        out.update(self.out.named("dec.out"))
        return out


class RecurrentVAE:
    def __init__(self, cfg: ModelConfig | None = None):
        self.cfg = cfg or ModelConfig()
        rng = np.random.default_rng(self.cfg.seed)
        self.encoder = Encoder(rng, self.cfg)
        self.decoder = Decoder(rng, self.cfg)

    def parameters(self) -> dict[str, Tensor]:
        return {**self.encoder.named(), **self.decoder.named()}

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint lacks parameters {sorted(missing)[:5]}")
        for name, t in params.items():
            if arrays[name].shape != t.shape:
                raise T.ShapeError(f"{name}: checkpoint shape {arrays[name].shape} != model {t.shape}")
            t.data[...] = arrays[name]

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.zero_grad()


class GenreClassifier:
    """Encoder-shaped network with a single sigmoid output: P(jazz)."""

    def __init__(self, cfg: ModelConfig | None = None):
        self.cfg = cfg or ModelConfig()
        rng = np.random.default_rng(self.cfg.seed)
        self.body = _Stack(rng, self.cfg)
        width = self.cfg.dense[-1] if self.cfg.dense else self.cfg.n_frames * 2 * self.cfg.d_hidden
        self.head = Dense.init(rng, width, 1)

    def parameters(self) -> dict[str, Tensor]:
        return {**self.body.named("clf"), **self.head.named("clf.head")}

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self.parameters().items():
            t.data[...] = arrays[name]

    def freeze(self) -> None:
        for t in self.parameters().values():
            t.requires_grad = False
            t.grad = None

    def unfreeze(self) -> None:
        for t in self.parameters().values():
            t.requires_grad = True
            t.grad = np.zeros_like(t.data)


# --- forward passes and objectives --------------------------------------------

def encode(model: RecurrentVAE, x) -> tuple[Tensor, Tensor]:
    """Frames (batch, n_frames, n_pitches) -> (mu, log_var), each (batch, d_z)."""
    return model.encoder(x)


def reparameterize(mu: Tensor, log_var: Tensor, noise: np.random.Generator | np.ndarray) -> Tensor:
    """z = mu + exp(log_var / 2) * eps; eps is a constant drawn from ``noise``."""
    eps = noise if isinstance(noise, np.ndarray) else noise.standard_normal(mu.shape)
    return T.add(mu, T.mul(T.exp(T.mul(log_var, 0.5)), eps))


def _condition(model: RecurrentVAE, z: Tensor, y) -> Tensor:
    if model.cfg.multitask and y is None:
        raise ValueError("multitask model needs a genre label")
    if not model.cfg.multitask and y is not None:
        raise ValueError("genre label given to a model without genre conditioning")
    z = T.as_tensor(z)
    if z.data.ndim == 1:
        z = T.reshape(z, (1, -1))
    if z.shape[1] != model.cfg.d_z:
        raise T.ShapeError(f"latent must have {model.cfg.d_z} dims, got {z.shape[1]}")
    if y is None:
        return z
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = np.broadcast_to(y, (z.shape[0], 2))
    return T.concat([z, Tensor(y)], axis=1)


def decode_frames(model: RecurrentVAE, z, y=None) -> list[Tensor]:
    return model.decoder.frames(_condition(model, z, y))


def decode(model: RecurrentVAE, z, y=None) -> Tensor:
    """Pitch probabilities, shape (batch, n_frames, n_pitches)."""
    return T.stack(decode_frames(model, z, y), axis=1)


def elbo_loss(x, reconstruction: Tensor, mu: Tensor, log_var: Tensor, beta: float = 1.0):
    """Negative ELBO, batch-averaged: (total, reconstruction BCE, KL divergence)."""
    r = reconstruction.data
    # NaN passes here and surfaces as a non-finite loss
    if np.any((r < 0.0) | (r > 1.0)):
        raise ValueError("reconstruction probabilities must lie in (0, 1)")
    batch = reconstruction.shape[0] if reconstruction.data.ndim == 3 else 1
    recon = T.mul(T.binary_cross_entropy(x, reconstruction), 1.0 / batch)
    kl_terms = T.sub(T.add(T.square(mu), T.exp(log_var)), T.add(log_var, 1.0))
    kld = T.mul(T.sum(kl_terms), 0.5 / batch)
    total = T.add(recon, T.mul(kld, beta)) if beta != 1.0 else T.add(recon, kld)
    return total, recon, kld


def classifier_forward(clf: GenreClassifier, x) -> Tensor:
    """P(jazz) per batch row, shape (batch,)."""
    h = clf.body(x)
    return T.reshape(T.sigmoid(clf.head(h)), (-1,))


def genre_loss(y_hat: Tensor, y) -> Tensor:
    """Batch-mean BCE of the classifier output against the jazz indicator of ``y``."""
    target = np.asarray(y, dtype=float).reshape(-1, 2)[:, 1]
    target = np.broadcast_to(target, y_hat.shape)
    return T.mul(T.binary_cross_entropy(target, y_hat), 1.0 / y_hat.shape[0])


def multitask_loss(x, y, reconstruction: Tensor, mu: Tensor, log_var: Tensor, y_hat: Tensor,
                   beta: float = 1.0, lambda_genre: float = 1.0):
    """(total, reconstruction BCE, KL divergence, genre BCE)."""
    total, recon, kld = elbo_loss(x, reconstruction, mu, log_var, beta)
    lg = genre_loss(y_hat, y)
    if lambda_genre != 0.0:
        total = T.add(total, T.mul(lg, lambda_genre))
    return total, recon, kld, lg


@dataclass
class StepOutput:
    total: Tensor
    recon: Tensor
    kld: Tensor
    genre: Tensor | None = None
    extras: dict = field(default_factory=dict)


def forward_loss(model: RecurrentVAE, x: np.ndarray, noise, y=None, classifier: GenreClassifier | None = None,
                 beta: float | None = None) -> StepOutput:
    """Full objective for one batch of frames; the genre term needs ``y`` and ``classifier``."""
    beta = model.cfg.beta if beta is None else beta
    mu, log_var = encode(model, x)
    z = reparameterize(mu, log_var, noise)
    frames = decode_frames(model, z, y)
    recon = T.stack(frames, axis=1)
    if classifier is None:
        total, lr_, kl = elbo_loss(x, recon, mu, log_var, beta)
        return StepOutput(total, lr_, kl)
    y_hat = classifier_forward(classifier, frames)
    total, lr_, kl, lg = multitask_loss(x, y, recon, mu, log_var, y_hat, beta, model.cfg.lambda_genre)
    return StepOutput(total, lr_, kl, lg)


def kld_value(mu: np.ndarray, log_var: np.ndarray) -> float:
    # expm1 keeps the small-log_var terms from rounding below zero
    return 0.5 * float(np.sum(mu * mu + (np.expm1(log_var) - log_var)))


BCE_UNIFORM = N_STEPS * N_PITCHES * math.log(2.0)

"""Training regimes: two baselines, fine-tuning, and genre-conditioned multitask."""

from __future__ import annotations

import enum
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .corpus import Corpus, Genre, NotePhrase, binarize_monophonic, from_pianoroll, sample_ratio, to_pianoroll
from .model import (
    GenreClassifier, ModelConfig, RecurrentVAE, classifier_forward, decode, forward_loss, genre_label,
)

log = logging.getLogger(__name__)

PRETRAIN_LR = 1e-3


class NumericalError(FloatingPointError):
    """Loss or gradient became non-finite."""


class Regime(str, enum.Enum):
    BASELINE_SOURCE = "baseline-source"
    BASELINE_TARGET = "baseline-target"
    FINETUNE = "finetune"
    MULTITASK = "multitask"

    @property
    def uses_source_ratio(self) -> bool:
        return self in (Regime.FINETUNE, Regime.MULTITASK)


@dataclass
class TrainConfig:
    regime: Regime = Regime.FINETUNE
    R: int | None = 1
    epochs: int = 100
    finetune_epochs: int = 120
    classifier_epochs: int = 20
    batch_size: int = 32
    lr: float = PRETRAIN_LR
    clip_norm: float | None = 5.0
    kl_warmup_epochs: int = 0
    reset_adam: bool = False
    init_seed: int = 0
    shuffle_seed: int = 1
    noise_seed: int = 2
    sample_seed: int = 3
    checkpoint_every: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        self.regime = Regime(self.regime)
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if self.regime.uses_source_ratio:
            if self.R is None or not 1 <= self.R:
                raise ValueError(f"regime {self.regime.value} needs a ratio R >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["regime"] = self.regime.value
        d["model"] = self.model.to_dict()
        return d


@dataclass
class EpochRecord:
    epoch: int
    stage: int
    lr: float
    l_recon: float
    l_lat: float
    l_genre: float | None
    seconds: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        self.records.append(rec)

    def stage(self, n: int) -> list[EpochRecord]:
        return [r for r in self.records if r.stage == n]

    def to_csv(self, wall_time: bool = True) -> str:
        buf = io.StringIO()
        buf.write("epoch,stage,lr,l_recon,l_lat,l_genre,seconds\n")
        for r in self.records:
            genre = "" if r.l_genre is None else repr(r.l_genre)
            secs = f"{r.seconds:.3f}" if wall_time else ""
            buf.write(f"{r.epoch},{r.stage},{r.lr!r},{r.l_recon!r},{r.l_lat!r},{genre},{secs}\n")
        return buf.getvalue()


@dataclass
class TrainResult:
    model: RecurrentVAE
    log: TrainLog
    adam: T.AdamState
    stage_checkpoints: dict[int, dict[str, np.ndarray]] = field(default_factory=dict)
    train_corpus: Corpus | None = None


def lr_schedule_finetune(t: int) -> float:
    """Fine-tuning learning rate at epoch ``t`` of the second stage."""
    if t < 0:
        raise ValueError("epoch index must be non-negative")
    if t < 40:
        return 1e-5
    if t < 80:
        return 1e-7
    return 1e-9


def phrases_to_frames(phrases: list[NotePhrase]) -> np.ndarray:
    """(N, 64, 48) float frames from phrases."""
    if not phrases:
        return np.zeros((0, 64, 48))
    return np.stack([to_pianoroll(p).reshape(64, 48) for p in phrases]).astype(np.float64)


def _labels(phrases: list[NotePhrase]) -> np.ndarray:
    return genre_label([p.genre is Genre.JAZZ for p in phrases])


def _check_frames(cfg: ModelConfig) -> None:
    if (cfg.n_frames, cfg.n_pitches) != (64, 48):
        raise ValueError("training on phrases requires n_frames=64 and n_pitches=48")


def _save(directory: Path | None, name: str, model: RecurrentVAE, meta: dict) -> None:
    if directory is None:
        return
    directory.mkdir(parents=True, exist_ok=True)
    T.save_checkpoint(directory / name, model.arrays(), meta)


def run_stage(
    model: RecurrentVAE,
    x: np.ndarray,
    cfg: TrainConfig,
    stage: int,
    epochs: int,
    lr_at: Callable[[int], float],
    adam: T.AdamState,
    train_log: TrainLog,
    y: np.ndarray | None = None,
    classifier: GenreClassifier | None = None,
    checkpoint_dir: Path | None = None,
    tag: str = "model",
) -> None:
    """Mini-batch ADAM over ``x`` for ``epochs`` epochs, appending one log record per epoch."""
    params = model.parameters()
    n = len(x)
    noise = np.random.default_rng([cfg.noise_seed, stage])
    meta = {"train": cfg.to_dict(), "stage": stage}
    for t in range(epochs):
        started = time.perf_counter()
        adam.lr = lr_at(t)
        beta = model.cfg.beta
        if cfg.kl_warmup_epochs > 0:
            beta *= min(1.0, (t + 1) / cfg.kl_warmup_epochs)
        order = np.random.default_rng([cfg.shuffle_seed, stage, t]).permutation(n)
        sums = np.zeros(3)
        for b0 in range(0, n, cfg.batch_size):
            idx = order[b0:b0 + cfg.batch_size]
            model.zero_grad()
            out = forward_loss(
                model, x[idx], noise,
                y=None if y is None else y[idx],
                classifier=classifier, beta=beta,
            )
            if not math.isfinite(out.total.item()):
                raise NumericalError(f"non-finite loss at stage {stage} epoch {t}")
            T.backward(out.total)
            grads = {k: p.grad for k, p in params.items()}
            if cfg.clip_norm is not None:
                norm = T.clip_grad_norm(grads.values(), cfg.clip_norm)
                if not math.isfinite(norm):
                    raise NumericalError(f"non-finite gradient at stage {stage} epoch {t}")
            T.adam_step({k: p.data for k, p in params.items()}, grads, adam)
            w = len(idx)
            sums += w * np.array([
                out.recon.item(), out.kld.item(), out.genre.item() if out.genre is not None else 0.0,
            ])
        means = sums / n
        train_log.append(EpochRecord(
            t, stage, adam.lr, float(means[0]), float(means[1]),
            float(means[2]) if classifier is not None else None,
            time.perf_counter() - started,
        ))
        log.info("stage %d epoch %d lr=%g recon=%.3f kl=%.3f", stage, t, adam.lr, means[0], means[1])
        if cfg.checkpoint_every and (t + 1) % cfg.checkpoint_every == 0 and t + 1 < epochs:
            _save(checkpoint_dir, f"{tag}-stage{stage}-epoch{t + 1:04d}.ckpt", model, {**meta, "epoch": t + 1})
    _save(checkpoint_dir, f"{tag}-stage{stage}.ckpt", model, {**meta, "epoch": epochs})


def _new_model(cfg: TrainConfig, multitask: bool = False) -> RecurrentVAE:
    mcfg = replace(cfg.model, seed=cfg.init_seed, multitask=multitask)
    _check_frames(mcfg)
    return RecurrentVAE(mcfg)


def train_baseline(cfg: TrainConfig, corpus: Corpus, checkpoint_dir: Path | None = None) -> TrainResult:
    """Single-stage ELBO training at the pre-training rate."""
    phrases = corpus.train().phrases
    if not phrases:
        raise ValueError("empty training corpus")
    model = _new_model(cfg)
    adam = T.AdamState(lr=cfg.lr)
    train_log = TrainLog()
    run_stage(model, phrases_to_frames(phrases), cfg, 1, cfg.epochs, lambda t: cfg.lr, adam, train_log,
              checkpoint_dir=checkpoint_dir)
    return TrainResult(model, train_log, adam, {1: model.arrays()}, train_corpus=corpus.train())


def train_finetune(cfg: TrainConfig, source: Corpus, target: Corpus, checkpoint_dir: Path | None = None) -> TrainResult:
    """Pre-train on R x |target| source phrases, then continue on the target with the decaying schedule."""
    if not len(source.train()) or not len(target.train()):
        raise ValueError("both corpora need training phrases")
    sampled = sample_ratio(source, target, cfg.R, cfg.sample_seed)
    result = train_baseline(cfg, sampled, checkpoint_dir)
    if cfg.reset_adam:
        result.adam.reset()
    run_stage(
        result.model, phrases_to_frames(target.train().phrases), cfg, 2, cfg.finetune_epochs,
        lr_schedule_finetune, result.adam, result.log, checkpoint_dir=checkpoint_dir,
    )
    result.stage_checkpoints[2] = result.model.arrays()
    result.train_corpus = sampled
    return result


def train_multitask(
    cfg: TrainConfig,
    source: Corpus,
    target: Corpus,
    classifier: GenreClassifier,
    checkpoint_dir: Path | None = None,
) -> TrainResult:
    """Joint training on sampled source (label other) and target (label jazz) with the frozen classifier loss."""
    if not len(source.train()) or not len(target.train()):
        raise ValueError("both corpora need training phrases")
    sampled = sample_ratio(source, target, cfg.R, cfg.sample_seed)
    src, tgt = sampled.phrases, target.train().phrases
    x = phrases_to_frames(src + tgt)
    y = np.concatenate([genre_label([False] * len(src)), genre_label([True] * len(tgt))])
    model = _new_model(cfg, multitask=True)
    adam = T.AdamState(lr=cfg.lr)
    train_log = TrainLog()
    classifier.freeze()
    run_stage(model, x, cfg, 1, cfg.epochs, lambda t: cfg.lr, adam, train_log, y=y,
              classifier=classifier, checkpoint_dir=checkpoint_dir)
    union = Corpus(src + tgt, provenance=f"union({sampled.provenance}, {target.provenance})")
    return TrainResult(model, train_log, adam, {1: model.arrays()}, train_corpus=union)


@dataclass
class ClassifierResult:
    classifier: GenreClassifier
    accuracy: float
    losses: list[float]


def train_classifier(
    source: Corpus,
    target: Corpus,
    epochs: int,
    seed: int,
    model_cfg: ModelConfig | None = None,
    batch_size: int = 32,
    lr: float = PRETRAIN_LR,
) -> ClassifierResult:
    """Fit P(jazz) on target (1) vs source (0) training phrases; accuracy on their test splits.

    When neither corpus has a test split, the last tenth of each training split is held out.
    """
    src_train, tgt_train = source.train().phrases, target.train().phrases
    if not src_train or not tgt_train:
        raise ValueError("empty corpus")
    src_test, tgt_test = source.test().phrases, target.test().phrases
    if not src_test and not tgt_test:
        cut_s, cut_t = max(1, len(src_train) // 10), max(1, len(tgt_train) // 10)
        src_train, src_test = src_train[:-cut_s], src_train[-cut_s:]
        tgt_train, tgt_test = tgt_train[:-cut_t], tgt_train[-cut_t:]
    cfg = replace(model_cfg or ModelConfig(), seed=seed, multitask=False)
    _check_frames(cfg)
    clf = GenreClassifier(cfg)
    x = phrases_to_frames(src_train + tgt_train)
    labels = np.array([0.0] * len(src_train) + [1.0] * len(tgt_train))
    params = clf.parameters()
    adam = T.AdamState(lr=lr)
    losses = []
    for epoch in range(epochs):
        order = np.random.default_rng([seed, epoch]).permutation(len(x))
        total = 0.0
        for b0 in range(0, len(x), batch_size):
            idx = order[b0:b0 + batch_size]
            for p in params.values():
                p.zero_grad()
            prob = classifier_forward(clf, x[idx])
            loss = T.mul(T.binary_cross_entropy(labels[idx], prob), 1.0 / len(idx))
            if not math.isfinite(loss.item()):
                raise NumericalError(f"non-finite classifier loss at epoch {epoch}")
            T.backward(loss)
            grads = {k: p.grad for k, p in params.items()}
            T.clip_grad_norm(grads.values(), 5.0)
            T.adam_step({k: p.data for k, p in params.items()}, grads, adam)
            total += loss.item() * len(idx)
        losses.append(total / len(x))
    test_x = phrases_to_frames(src_test + tgt_test)
    test_y = np.array([0.0] * len(src_test) + [1.0] * len(tgt_test))
    pred = classify(clf, test_x)
    accuracy = float(np.mean((pred >= 0.5) == (test_y == 1.0))) if len(test_y) else float("nan")
    clf.freeze()
    return ClassifierResult(clf, accuracy, losses)


def classify(clf: GenreClassifier, frames: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    with T.no_grad():
        for b0 in range(0, len(frames), batch_size):
            out.append(classifier_forward(clf, frames[b0:b0 + batch_size]).data.copy())
    return np.concatenate(out) if out else np.zeros(0)


def generate(
    model: RecurrentVAE,
    count: int,
    seed: int,
    y: np.ndarray | None = None,
    threshold: float = 0.5,
    batch_size: int = 256,
    id_prefix: str = "gen",
) -> Corpus:
    """Decode z ~ N(0, I) samples into monophonic phrases."""
    if count < 1:
        raise ValueError("count must be at least 1")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((count, model.cfg.d_z))
    genre = Genre.JAZZ if y is None or np.asarray(y).reshape(-1)[-1] == 1 else Genre.OTHER
    phrases = []
    with T.no_grad():
        for b0 in range(0, count, batch_size):
            probs = decode(model, z[b0:b0 + batch_size], y).data
            for i, p in enumerate(probs):
                grid = binarize_monophonic(p.reshape(4, 16, 48), threshold)
                phrases.append(from_pianoroll(grid, id=f"{id_prefix}-{seed}-{b0 + i:05d}", genre=genre))
    return Corpus(phrases, provenance=f"generated seed={seed} count={count}")

"""Command-line entry point: ingest, synth, train, generate, eval, experiment, report, gradcheck.

Exit codes: 0 success, 1 usage, 2 data or config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import tensor as T
from .corpus import (
    LOWEST_PITCH, Corpus, CorpusError, Genre, SlicePolicy, parse_jsonl, parse_smf, synth_corpus, write_jsonl,
)
from .features import FEATURE_NAMES, normalize
from .gradcheck import model_gradcheck, op_gradchecks
from .model import JAZZ, ModelConfig, RecurrentVAE, GenreClassifier
from .oa import OaReport, evaluate_sets
from .smf import SMFError
from .train import (
    NumericalError, Regime, TrainConfig, TrainResult, generate, train_baseline, train_classifier, train_finetune,
    train_multitask,
)

log = logging.getLogger("jazzvae")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

REGIME_INDEX = {Regime.BASELINE_SOURCE: 0, Regime.BASELINE_TARGET: 1, Regime.FINETUNE: 2, Regime.MULTITASK: 3}
REGIME_LABELS = {
    Regime.BASELINE_SOURCE: "Baseline 1 (source)",
    Regime.BASELINE_TARGET: "Baseline 2 (target)",
    Regime.FINETUNE: "Method 1",
    Regime.MULTITASK: "Method 2",
}
OCTAVE_BANDS = ("I", "II", "III", "IV")
PITCH_NAMES = ("C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B")
OP_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3


class ConfigError(ValueError):
    pass


class UsageError(Exception):
    pass


# --- run configuration --------------------------------------------------------

@dataclass
class CorpusSpec:
    """A JSONL corpus file, or a synthetic profile when ``path`` is unset."""

    path: str | None = None
    synth: str | None = None
    count: int = 200
    seed: int = 0
    test_fraction: float = 0.1

    def load(self, base: Path) -> Corpus:
        if self.path:
            p = Path(self.path)
            return parse_jsonl(p if p.is_absolute() else base / p)
        return synth_corpus(self.synth, self.count, self.seed, self.test_fraction)


@dataclass
class EvalConfig:
    rests: bool = False
    normalize: bool = False
    grid_points: int = 1000
    reference: str = "train"
    n_generated: int | None = None
    generation_seed: int = 0
    threshold: float = 0.5


@dataclass
class ExperimentConfig:
    regimes: list[str] = field(default_factory=lambda: ["finetune", "multitask"])
    ratios: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5, 6])
    baselines: bool = True


@dataclass
class ClassifierConfig:
    epochs: int = 20
    seed: int = 0


@dataclass
class RunConfig:
    target: CorpusSpec
    source: CorpusSpec | None = None
    output_dir: str = "runs/default"
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: dict = field(default_factory=dict)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    base_dir: Path = field(default=Path("."), repr=False, compare=False)

    def train_config(self, regime: Regime | str | None = None, R: int | None = None) -> TrainConfig:
        fields = dict(self.train)
        if regime is not None:
            fields["regime"] = Regime(regime)
            fields["R"] = R
        return TrainConfig(**fields, model=self.model)

    def to_dict(self) -> dict:
        return {
            "target": dataclasses.asdict(self.target),
            "source": None if self.source is None else dataclasses.asdict(self.source),
            "output_dir": self.output_dir,
            "seed": self.seed,
            "model": self.model.to_dict(),
            "train": {k: (v.value if isinstance(v, Regime) else v) for k, v in self.train.items()},
            "classifier": dataclasses.asdict(self.classifier),
            "eval": dataclasses.asdict(self.eval),
            "experiment": dataclasses.asdict(self.experiment),
        }


_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"model"}


def _section(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in dataclasses.fields(cls) if f.name != "base_dir"}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_run_config(data: dict, base_dir: Path = Path(".")) -> RunConfig:
    """Validate a config document; every field has a default except the target corpus."""
    if not isinstance(data, dict):
        raise ConfigError("config: expected a JSON object")
    top = {"target", "source", "output_dir", "seed", "model", "train", "classifier", "eval", "experiment"}
    unknown = sorted(set(data) - top)
    if unknown:
        raise ConfigError(f"config: unknown key(s) {', '.join(unknown)}")
    if "target" not in data:
        raise ConfigError("config: 'target' corpus is required")

    def corpus(key):
        spec = _section(CorpusSpec, data[key], key)
        if not spec.path and not spec.synth:
            raise ConfigError(f"{key}: give either 'path' or 'synth'")
        return spec

    train = dict(data.get("train", {}))
    bad = sorted(set(train) - _TRAIN_KEYS)
    if bad:
        raise ConfigError(f"train: unknown key(s) {', '.join(bad)}")
    cfg = RunConfig(
        target=corpus("target"),
        source=corpus("source") if data.get("source") is not None else None,
        output_dir=str(data.get("output_dir", "runs/default")),
        seed=int(data.get("seed", 0)),
        model=_section(ModelConfig, data.get("model", {}), "model"),
        train=train,
        classifier=_section(ClassifierConfig, data.get("classifier", {}), "classifier"),
        eval=_section(EvalConfig, data.get("eval", {}), "eval"),
        experiment=_section(ExperimentConfig, data.get("experiment", {}), "experiment"),
        base_dir=base_dir,
    )
    if cfg.eval.reference not in ("train", "test"):
        raise ConfigError("eval.reference must be 'train' or 'test'")
    try:
        cfg.train_config()
        regimes = [Regime(r) for r in cfg.experiment.regimes]
        for R in cfg.experiment.ratios:
            if int(R) < 1:
                raise ConfigError("experiment.ratios must be positive integers")
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train/experiment: {exc}") from None
    needs_source = any(r is not Regime.BASELINE_TARGET for r in regimes) or cfg.experiment.baselines
    if needs_source and cfg.source is None and data.get("experiment") is not None:
        raise ConfigError("source corpus is required for the configured regimes")
    return cfg


def _apply_override(data: dict, assignment: str) -> None:
    key, sep, raw = assignment.partition("=")
    if not sep or not key:
        raise UsageError(f"--set expects key=value, got {assignment!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    if isinstance(value, (dict, list)):
        raise UsageError(f"--set only overrides scalar fields ({key})")
    node = data
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set {key}: {part} is not a section")
    node[parts[-1]] = value


def load_run_config(path: str | Path, overrides: Sequence[str] = ()) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    for o in overrides:
        _apply_override(data, o)
    return parse_run_config(data, path.parent)


def _dump_json(obj: Any, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _prepare_dir(path: Path, cfg: RunConfig | None) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    if cfg is not None:
        _dump_json(cfg.to_dict(), path / "config.json")
    return path


def _write(path: Path, text: str) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


# --- seeds and single runs ------------------------------------------------------

def derived_offset(master: int, regime: Regime, R: int | None) -> int:
    """Seed offset for one run: master + 1000 * regime index + 10 * R."""
    return master + 1000 * REGIME_INDEX[regime] + 10 * (R or 0)


def seeded(cfg: TrainConfig, offset: int) -> TrainConfig:
    return replace(
        cfg,
        init_seed=cfg.init_seed + offset,
        shuffle_seed=cfg.shuffle_seed + offset,
        noise_seed=cfg.noise_seed + offset,
        sample_seed=cfg.sample_seed + offset,
    )


def _reference(corpus: Corpus, which: str) -> Corpus:
    ref = corpus.test() if which == "test" else corpus.train()
    if len(ref) < 2:
        raise CorpusError(f"target {which} split has {len(ref)} phrases; need at least 2")
    return ref


def _train_regime(
    cfg: TrainConfig, source: Corpus | None, target: Corpus, classifier: GenreClassifier | None, out: Path,
) -> TrainResult:
    if cfg.regime is Regime.BASELINE_TARGET:
        return train_baseline(cfg, target, out)
    if source is None:
        raise CorpusError(f"regime {cfg.regime.value} needs a source corpus")
    if cfg.regime is Regime.BASELINE_SOURCE:
        return train_baseline(cfg, source, out)
    if cfg.regime is Regime.FINETUNE:
        return train_finetune(cfg, source, target, out)
    return train_multitask(cfg, source, target, classifier, out)


def _save_model(result: TrainResult, path: Path, tcfg: TrainConfig) -> None:
    meta = {"model": result.model.cfg.to_dict(), "train": tcfg.to_dict()}
    T.save_checkpoint(path, result.model.arrays(), meta)


def _log_timings(result: TrainResult, tag: str) -> None:
    for r in result.log.records:
        log.info("%s stage %d epoch %d took %.3fs", tag, r.stage, r.epoch, r.seconds)


def _fit_classifier(cfg: RunConfig, source: Corpus, target: Corpus, out: Path) -> GenreClassifier:
    res = train_classifier(source, target, cfg.classifier.epochs, cfg.seed + cfg.classifier.seed, cfg.model)
    T.save_checkpoint(out / "classifier.ckpt", res.classifier.arrays(), {"model": res.classifier.cfg.to_dict()})
    lines = ["epoch,loss"] + [f"{i},{v!r}" for i, v in enumerate(res.losses)]
    _write(out / "classifier.csv", "\n".join(lines) + f"\n# held_out_accuracy={res.accuracy!r}\n")
    log.info("classifier held-out accuracy %.4f", res.accuracy)
    return res.classifier


def _run_and_evaluate(
    cfg: RunConfig, regime: Regime, R: int | None, source: Corpus | None, target: Corpus,
    classifier: GenreClassifier | None, out: Path,
) -> OaReport:
    offset = derived_offset(cfg.seed, regime, R)
    tcfg = seeded(cfg.train_config(regime, R), offset)
    _prepare_dir(out, cfg)
    started = time.perf_counter()
    result = _train_regime(tcfg, source, target, classifier, out)
    tag = out.name
    _log_timings(result, tag)
    _write(out / "train_log.csv", result.log.to_csv(wall_time=False))
    _save_model(result, out / "model.ckpt", tcfg)
    reference = _reference(target, cfg.eval.reference)
    count = cfg.eval.n_generated or len(reference)
    y = JAZZ if regime is Regime.MULTITASK else None
    generated = generate(result.model, count, cfg.eval.generation_seed + offset, y=y,
                         threshold=cfg.eval.threshold, id_prefix=tag)
    write_jsonl(generated, out / "generated.jsonl")
    report = evaluate_sets(
        reference, generated, rests=cfg.eval.rests, grid_points=cfg.eval.grid_points,
        config={"regime": regime.value, "R": "" if R is None else R, "seed_offset": offset,
                "init_seed": tcfg.init_seed, "generation_seed": cfg.eval.generation_seed + offset},
    )
    _write(out / "oa.csv", report.to_csv())
    log.info("%s finished in %.1fs, average OA %.6f", tag, time.perf_counter() - started, report.average)
    return report


# --- report tables --------------------------------------------------------------

def _mark_row(values: Sequence[float]) -> list[str]:
    best = max(round(v, 6) for v in values)
    return [f"{v:.6f}*" if round(v, 6) == best else f"{v:.6f}" for v in values]


def oa_grid_csv(reports: dict[int, OaReport], title: str) -> str:
    """Rows NC..PCTM plus average, one column per R; '*' marks each row's maximum."""
    ratios = sorted(reports)
    lines = ["feature," + ",".join(f"R={R}" for R in ratios)]
    for name in (*FEATURE_NAMES, "average"):
        vals = [reports[R].average if name == "average" else reports[R].rows[name] for R in ratios]
        lines.append(name + "," + ",".join(_mark_row(vals)))
    lines.append(f"# table={title}")
    lines.append("# marker=* marks the row maximum")
    return "\n".join(lines) + "\n"


def comparison_csv(columns: dict[str, OaReport]) -> str:
    names = list(columns)
    lines = ["feature," + ",".join(names)]
    for feat in (*FEATURE_NAMES, "average"):
        vals = [columns[c].average if feat == "average" else columns[c].rows[feat] for c in names]
        lines.append(feat + "," + ",".join(_mark_row(vals)))
    lines.append("# marker=* marks the row maximum")
    return "\n".join(lines) + "\n"


def _best_ratio(reports: dict[int, OaReport]) -> int:
    return max(sorted(reports), key=lambda R: round(reports[R].average, 12))


def run_experiment(cfg: RunConfig) -> Path:
    """Train every configured regime and ratio, generate, evaluate, and write the report tables."""
    out = _prepare_dir(Path(cfg.output_dir), cfg)
    handler = logging.FileHandler(out / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    try:
        target = cfg.target.load(cfg.base_dir)
        source = cfg.source.load(cfg.base_dir) if cfg.source is not None else None
        regimes = [Regime(r) for r in cfg.experiment.regimes]
        classifier = None
        if Regime.MULTITASK in regimes:
            classifier = _fit_classifier(cfg, source, target, out)
        method_reports: dict[Regime, dict[int, OaReport]] = {}
        for regime in regimes:
            reports = {}
            for R in cfg.experiment.ratios:
                reports[int(R)] = _run_and_evaluate(
                    cfg, regime, int(R), source, target, classifier, out / "runs" / f"{regime.value}-R{R}",
                )
            method_reports[regime] = reports
            label = f"{REGIME_LABELS[regime]} ({regime.value})"
            _write(out / f"grid-{regime.value}.csv", oa_grid_csv(reports, label))
        columns: dict[str, OaReport] = {}
        if cfg.experiment.baselines:
            for regime in (Regime.BASELINE_SOURCE, Regime.BASELINE_TARGET):
                columns[REGIME_LABELS[regime]] = _run_and_evaluate(
                    cfg, regime, None, source, target, None, out / "runs" / regime.value,
                )
        for regime, reports in method_reports.items():
            R = _best_ratio(reports)
            columns[f"{REGIME_LABELS[regime]} (R={R})"] = reports[R]
        if columns:
            _write(out / "comparison.csv", comparison_csv(columns))
    finally:
        log.removeHandler(handler)
        handler.close()
    return out


# --- histogram figures ------------------------------------------------------------

def pitch_histogram(corpus: Corpus) -> np.ndarray:
    h = np.zeros(48)
    for p in corpus:
        for n in p.notes:
            h[n.pitch - LOWEST_PITCH] += 1
    return h


def pitch_class_histogram_total(corpus: Corpus) -> np.ndarray:
    h = pitch_histogram(corpus)
    return h.reshape(4, 12).sum(axis=0)


def _fmt(v: float) -> str:
    return repr(float(v)) if not float(v).is_integer() else str(int(v))


def histogram_csvs(corpora: dict[str, Corpus], normalized: bool = False) -> tuple[str, str]:
    basic = {k: pitch_histogram(c) for k, c in corpora.items()}
    pcs = {k: h.reshape(4, 12).sum(axis=0) for k, h in basic.items()}
    if normalized:
        basic = {k: normalize(v) for k, v in basic.items()}
        pcs = {k: normalize(v) for k, v in pcs.items()}
    names = list(corpora)
    rows = ["bin,midi,name,octave," + ",".join(names)]
    for i in range(48):
        pitch = LOWEST_PITCH + i
        label = f"{PITCH_NAMES[pitch % 12]}{pitch // 12 - 1}"
        rows.append(f"{i},{pitch},{label},{OCTAVE_BANDS[i // 12]}," + ",".join(_fmt(basic[k][i]) for k in names))
    cls = ["bin,name," + ",".join(names)]
    for i in range(12):
        cls.append(f"{i},{PITCH_NAMES[i]}," + ",".join(_fmt(pcs[k][i]) for k in names))
    return "\n".join(rows) + "\n", "\n".join(cls) + "\n"


_COLOURS = ("#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3")


def bar_chart_svg(title: str, labels: Sequence[str], series: dict[str, np.ndarray],
                  bands: Sequence[str] | None = None) -> str:
    """Grouped bar chart; ``bands`` shades equal-width label groups (octaves) and names them."""
    width, height, left, bottom, top = 960, 360, 50, 60, 40
    plot_w, plot_h = width - left - 20, height - bottom - top
    peak = max((float(v.max()) for v in series.values()), default=0.0) or 1.0
    slot = plot_w / len(labels)
    bar = slot * 0.8 / max(len(series), 1)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="10">',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{title}</text>',
    ]
    if bands:
        per = len(labels) // len(bands)
        for k, name in enumerate(bands):
            x = left + k * per * slot
            fill = "#f2f2f2" if k % 2 == 0 else "#ffffff"
            out.append(f'<rect x="{x:.1f}" y="{top}" width="{per * slot:.1f}" height="{plot_h}" fill="{fill}"/>')
            out.append(f'<text x="{x + per * slot / 2:.1f}" y="{top + 12}" text-anchor="middle" '
                       f'font-size="12">{name}</text>')
    for s, (name, values) in enumerate(series.items()):
        colour = _COLOURS[s % len(_COLOURS)]
        for i, v in enumerate(values):
            h = plot_h * float(v) / peak
            x = left + i * slot + slot * 0.1 + s * bar
            out.append(f'<rect x="{x:.1f}" y="{top + plot_h - h:.1f}" width="{bar:.1f}" height="{h:.1f}" '
                       f'fill="{colour}"/>')
        out.append(f'<text x="{width - 20}" y="{top + 14 * (s + 2)}" text-anchor="end" fill="{colour}">{name}</text>')
    out.append(f'<line x1="{left}" y1="{top + plot_h}" x2="{left + plot_w}" y2="{top + plot_h}" stroke="black"/>')
    out.append(f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="black"/>')
    out.append(f'<text x="{left - 4}" y="{top + 4}" text-anchor="end">{peak:g}</text>')
    out.append(f'<text x="{left - 4}" y="{top + plot_h}" text-anchor="end">0</text>')
    step = max(1, len(labels) // 24)
    for i in range(0, len(labels), step):
        x = left + (i + 0.5) * slot
        out.append(f'<text x="{x:.1f}" y="{top + plot_h + 14}" text-anchor="middle">{labels[i]}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def report_histograms(corpora: dict[str, Corpus], out: Path, normalized: bool = False) -> list[Path]:
    for name, c in corpora.items():
        if not len(c) or not any(p.notes for p in c):
            raise CorpusError(f"corpus {name} is empty")
    out.mkdir(parents=True, exist_ok=True)
    basic_csv, class_csv = histogram_csvs(corpora, normalized)
    paths = [out / "pitch_histogram.csv", out / "pitch_class_histogram.csv",
             out / "pitch_histogram.svg", out / "pitch_class_histogram.svg"]
    _write(paths[0], basic_csv)
    _write(paths[1], class_csv)
    basic = {k: pitch_histogram(c) for k, c in corpora.items()}
    pcs = {k: v.reshape(4, 12).sum(axis=0) for k, v in basic.items()}
    if normalized:
        basic = {k: normalize(v) for k, v in basic.items()}
        pcs = {k: normalize(v) for k, v in pcs.items()}
    pitch_labels = [f"{PITCH_NAMES[(LOWEST_PITCH + i) % 12]}{(LOWEST_PITCH + i) // 12 - 1}" for i in range(48)]
    _write(paths[2], bar_chart_svg("Pitch histogram", pitch_labels, basic, OCTAVE_BANDS))
    _write(paths[3], bar_chart_svg("Pitch class histogram", list(PITCH_NAMES), pcs))
    return paths


# --- commands -----------------------------------------------------------------------

def cmd_ingest(args) -> int:
    fmt = args.format or ("smf" if Path(args.input).suffix.lower() in (".mid", ".midi", ".smf") else "jsonl")
    if fmt == "smf":
        corpus = parse_smf(args.input, args.track, args.transpose, genre=args.genre, policy=args.policy)
        if corpus.notes_dropped:
            log.warning("%d notes outside [48,95] dropped", corpus.notes_dropped)
    else:
        corpus = parse_jsonl(args.input)
    if args.output:
        write_jsonl(corpus, args.output)
    print(f"{len(corpus)} phrases, {corpus.n_bars} bars")
    return EXIT_OK


def cmd_synth(args) -> int:
    corpus = synth_corpus(args.profile, args.count, args.seed, args.test_fraction)
    write_jsonl(corpus, args.output)
    print(f"{len(corpus)} phrases, {corpus.n_bars} bars")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.set)
    tcfg = cfg.train_config(args.regime or cfg.train.get("regime", Regime.FINETUNE),
                            args.R if args.R is not None else cfg.train.get("R", 1))
    if not tcfg.regime.uses_source_ratio:
        tcfg = replace(tcfg, R=None)
    out = _prepare_dir(Path(cfg.output_dir), cfg)
    target = cfg.target.load(cfg.base_dir)
    source = cfg.source.load(cfg.base_dir) if cfg.source is not None else None
    classifier = _fit_classifier(cfg, source, target, out) if tcfg.regime is Regime.MULTITASK else None
    result = _train_regime(tcfg, source, target, classifier, out)
    _log_timings(result, tcfg.regime.value)
    _write(out / "train_log.csv", result.log.to_csv(wall_time=args.wall_time))
    _save_model(result, out / "model.ckpt", tcfg)
    last = result.log.records[-1]
    print(f"trained {tcfg.regime.value}: {len(result.log.records)} epochs, final l_recon {last.l_recon:.4f}")
    return EXIT_OK


def load_model(path: str | Path) -> RecurrentVAE:
    arrays, meta = T.load_checkpoint(path)
    if "model" not in meta:
        raise CorpusError(f"{path}: checkpoint has no model config")
    model = RecurrentVAE(ModelConfig(**meta["model"]))
    model.load_arrays(arrays)
    return model


def cmd_generate(args) -> int:
    model = load_model(args.checkpoint)
    y = None
    if model.cfg.multitask:
        y = JAZZ if args.genre == "jazz" else np.array([1.0, 0.0])
    corpus = generate(model, args.count, args.seed, y=y, threshold=args.threshold)
    write_jsonl(corpus, args.output)
    print(f"{len(corpus)} phrases, {corpus.n_bars} bars")
    return EXIT_OK


def cmd_eval(args) -> int:
    target, generated = parse_jsonl(args.target), parse_jsonl(args.generated)
    report = evaluate_sets(_reference(target, args.reference), generated, rests=args.rests,
                           grid_points=args.grid_points)
    text = report.to_csv()
    if args.output:
        _write(Path(args.output), text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = load_run_config(args.config, args.set)
    if cfg.source is None and (cfg.experiment.baselines or any(r != "baseline-target" for r in cfg.experiment.regimes)):
        raise ConfigError("experiment needs a source corpus")
    out = run_experiment(cfg)
    print(f"reports written to {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    labels = args.labels or [Path(p).stem for p in args.corpora]
    if len(labels) != len(args.corpora):
        raise UsageError("--labels must name every corpus")
    corpora = {label: parse_jsonl(p) for label, p in zip(labels, args.corpora)}
    for p in report_histograms(corpora, Path(args.output), args.normalize):
        print(p)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    worst_name, worst_err, failed = "", 0.0, False
    for name, err in op_gradchecks(args.seed).items():
        ok = err < OP_TOLERANCE
        failed |= not ok
        print(f"op {name:<10} {err:.3e} {'ok' if ok else 'FAIL'}")
        if err / OP_TOLERANCE > worst_err / (OP_TOLERANCE if worst_name.startswith("op:") else MODEL_TOLERANCE):
            worst_name, worst_err = f"op:{name}", err
    max_entries = 6 if args.quick else None
    for multitask in (False, True):
        tag = "multitask" if multitask else "elbo"
        for r in model_gradcheck(multitask, seed=args.seed + 3, max_entries=max_entries):
            ok = r.max_rel_error < MODEL_TOLERANCE
            failed |= not ok
            print(f"{tag} {r.name:<22} {r.max_rel_error:.3e} {'ok' if ok else 'FAIL'}")
            scaled = r.max_rel_error / MODEL_TOLERANCE
            current = worst_err / (OP_TOLERANCE if worst_name.startswith("op:") else MODEL_TOLERANCE)
            if scaled > current:
                worst_name, worst_err = f"{tag}:{r.name}", r.max_rel_error
    if failed:
        print(f"FAIL worst {worst_name} relative error {worst_err:.3e}")
        return EXIT_NUMERIC
    print(f"PASS worst {worst_name} relative error {worst_err:.3e}")
    return EXIT_OK


# --- argument parsing -------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="jazzvae", description="Jazz melody transfer-learning pipeline")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="validate a JSONL corpus or slice an SMF file")
    p.add_argument("input")
    p.add_argument("--format", choices=["jsonl", "smf"])
    p.add_argument("--genre", choices=[g.value for g in Genre], default="other")
    p.add_argument("--track", type=int, default=0)
    p.add_argument("--transpose", type=int, default=0)
    p.add_argument("--policy", choices=[s.value for s in SlicePolicy], default="non-overlapping")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="write a synthetic corpus")
    p.add_argument("profile")
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-fraction", type=float, default=0.1)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_synth)

    def config_args(p):
        p.add_argument("--config", required=True)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a scalar config field, e.g. train.epochs=5")

    p = sub.add_parser("train", help="train one regime from a config")
    config_args(p)
    p.add_argument("--regime", choices=[r.value for r in Regime])
    p.add_argument("--R", type=int)
    p.add_argument("--wall-time", action="store_true", help="keep per-epoch seconds in train_log.csv")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="sample phrases from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--genre", choices=["jazz", "other"], default="jazz")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="OA of generated phrases against a target corpus")
    p.add_argument("--target", required=True)
    p.add_argument("--generated", required=True)
    p.add_argument("--reference", choices=["train", "test"], default="train")
    p.add_argument("--rests", action="store_true")
    p.add_argument("--grid-points", type=int, default=1000)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("experiment", help="full regime x ratio grid with OA tables")
    config_args(p)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("report", help="figure data")
    rsub = p.add_subparsers(dest="report", required=True, parser_class=_Parser)
    h = rsub.add_parser("histograms", help="48-bin pitch and 12-bin pitch-class histograms")
    h.add_argument("corpora", nargs="+")
    h.add_argument("--labels", nargs="+")
    h.add_argument("--normalize", action="store_true")
    h.add_argument("-o", "--output", required=True)
    h.set_defaults(func=cmd_report)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and both objectives")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quick", action="store_true", help="sample a few entries per parameter")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(logging.INFO if args.verbose else logging.WARNING)
    console.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    log.addHandler(console)
    log.setLevel(logging.INFO)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CorpusError, SMFError, ConfigError, KeyError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    finally:
        log.removeHandler(console)


if __name__ == "__main__":
    sys.exit(main())

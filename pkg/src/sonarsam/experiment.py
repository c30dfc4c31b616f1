"""Config-driven experiment matrices and comparison tables.

A config is flat ``key = value`` text. Top-level keys set the data source,
training hyperparameters and row defaults; each ``row =`` line adds one
matrix row as whitespace-separated ``key=value`` tokens, for example::

    preset = mini
    task_mode = box_prompt
    seeds = 0, 1, 2
    row = label=FZ/FF encoder=FZ decoder=FF
    row = label=L/FF encoder=L decoder=FF
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import os
import re
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .adapters import LoraConfig, check_modes, prepare_model
from .data import SynthSpec, load_dataset, preprocess, read_class_names, split_dataset, synth_generate
from .errors import ConfigurationError, ParseError, UsageError
from .kvtext import parse_assignments
from .metrics import CLASS_NAMES, DiceReport, aggregate_report
from .model import PRESETS, build_model, get_preset
from .train import TASK_MODES, TrainConfig, evaluate, train

OUTPUT_ROOT_ENV = "SONARSAM_OUTPUT_ROOT"

ROW_KEYS = {"label", "preset", "encoder", "decoder", "task", "seeds"}
_ROW_DEFAULTS = {"preset": "preset", "encoder": "encoder_mode", "decoder": "decoder_mode", "task": "task_mode"}
# TrainConfig fields set per run rather than globally
_PER_RUN = {"seed", "preset", "encoder_mode", "decoder_mode", "task_mode"}


@dataclass(frozen=True)
class MatrixRow:
    label: str
    preset: str
    encoder_mode: str
    decoder_mode: str
    task_mode: str
    seeds: tuple[int, ...]


@dataclass(frozen=True)
class DataSettings:
    """Where samples come from and how they are split and sized.

    ``dataset`` is ``synth`` or a directory in the images/masks layout.
    ``split`` is ``6:2:2`` (shuffled largest-remainder split) or explicit
    ``train, val, test`` counts taken in shuffled order.
    """

    dataset: str = "synth"
    samples: int = 60
    num_classes: int = 11
    data_seed: int = 0
    image_size: int = 128
    split: str = "6:2:2"
    evaluate_on: str = "test"

    def __post_init__(self):
        if self.evaluate_on not in ("val", "test"):
            raise ConfigurationError("evaluate_on must be 'val' or 'test'")
        if self.samples < 5:
            raise ConfigurationError("samples must be >= 5")
        self.split_counts()

    def split_counts(self) -> tuple[int, int, int] | None:
        if self.split == "6:2:2":
            return None
        try:
            counts = tuple(int(p) for p in self.split.split(","))
        except ValueError:
            raise ConfigurationError(f"split must be '6:2:2' or 'train, val, test' counts, got {self.split!r}") from None
        if len(counts) != 3 or min(counts) < 0 or counts[0] == 0:
            raise ConfigurationError(f"split counts {self.split!r} must be three non-negative integers, train > 0")
        return counts


@dataclass(frozen=True)
class ExperimentMatrix:
    rows: tuple[MatrixRow, ...]
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataSettings = field(default_factory=DataSettings)
    output_dir: str = "runs"

    def runs(self):
        """``(row index, row, seed)`` in execution order."""
        for i, row in enumerate(self.rows):
            for s in row.seeds:
                yield i, row, s

    def run_config(self, row: MatrixRow, seed: int) -> TrainConfig:
        return dataclasses.replace(
            self.train,
            preset=row.preset,
            encoder_mode=row.encoder_mode,
            decoder_mode=row.decoder_mode,
            task_mode=row.task_mode,
            seed=seed,
        )

    def to_text(self) -> str:
        """Every setting spelled out; ``parse_config_text`` reads it back to an equal matrix."""
        lines = [f"output_dir = {self.output_dir}"]
        lines += [f"{k} = {v}" for k, v in dataclasses.asdict(self.data).items()]
        for k, v in dataclasses.asdict(self.train).items():
            if k not in _PER_RUN:
                lines.append(f"{k} = {_fmt_value(v)}")
        for r in self.rows:
            seeds = ",".join(str(s) for s in r.seeds)
            lines.append(
                f"row = label={r.label} preset={r.preset} encoder={r.encoder_mode} "
                f"decoder={r.decoder_mode} task={r.task_mode} seeds={seeds}"
            )
        return "\n".join(lines) + "\n"


def _fmt_value(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


# ---------------------------------------------------------------------------
# parsing

_TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig) if f.name not in _PER_RUN}
_DATA_FIELDS = {f.name: f for f in dataclasses.fields(DataSettings)}
_ROW_LEVEL = {"preset", "encoder_mode", "decoder_mode", "task_mode", "seeds"}
VALID_KEYS = sorted(set(_TRAIN_FIELDS) | set(_DATA_FIELDS) | _ROW_LEVEL | {"output_dir", "row"})


def _convert(kind, value: str):
    if kind is bool:
        low = value.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(value)
        return low in ("true", "1", "yes")
    return kind(value)


def _parse_seeds(value: str) -> tuple[int, ...]:
    seeds = tuple(int(p) for p in value.split(",") if p.strip())
    if not seeds:
        raise ValueError(value)
    return seeds


def _parse_row(value: str, lineno: int) -> dict:
    out = {}
    for token in value.split():
        key, sep, val = token.partition("=")
        if not sep or not val:
            raise ParseError(f"row entries are key=value, got {token!r}", lineno)
        if key not in ROW_KEYS:
            raise ParseError(f"unknown row key {key!r}; valid: {sorted(ROW_KEYS)}", lineno)
        if key in out:
            raise ParseError(f"row key {key!r} given twice", lineno)
        out[key] = val
    return out


def _check_row(row: MatrixRow) -> None:
    if row.preset not in PRESETS:
        raise ConfigurationError(f"row {row.label!r}: unknown preset {row.preset!r}; choose from {sorted(PRESETS)}")
    check_modes(row.encoder_mode, row.decoder_mode)
    if row.task_mode not in TASK_MODES:
        raise ConfigurationError(f"row {row.label!r}: task must be one of {TASK_MODES}")
    if row.task_mode == "box_prompt" and row.decoder_mode == "C":
        raise ConfigurationError(f"row {row.label!r}: the custom head (C) has no box-prompt path")


def parse_config_text(text: str) -> ExperimentMatrix:
    """Parse config text; every error names its line."""
    train_kw, data_kw, top = {}, {}, {}
    raw_rows: list[tuple[int, dict]] = []
    seen: dict[str, int] = {}
    for lineno, key, value in parse_assignments(text):
        if key == "row":
            raw_rows.append((lineno, _parse_row(value, lineno)))
            continue
        if key not in VALID_KEYS:
            raise ParseError(f"unknown key {key!r}; valid keys: {', '.join(VALID_KEYS)}", lineno)
        if key in seen:
            raise ParseError(f"{key!r} already set on line {seen[key]}", lineno)
        seen[key] = lineno
        try:
            if key in _TRAIN_FIELDS:
                default = getattr(TrainConfig(), key)
                train_kw[key] = _convert(type(default), value)
            elif key in _DATA_FIELDS:
                default = getattr(DataSettings(), key)
                data_kw[key] = _convert(type(default), value)
            elif key == "seeds":
                top[key] = _parse_seeds(value)
            else:
                top[key] = value
        except ValueError:
            raise ParseError(f"malformed value {value!r} for {key}", lineno) from None
        if key == "encoder_mode" or key == "decoder_mode":
            try:
                check_modes(top.get("encoder_mode", "FZ"), top.get("decoder_mode", "FF"))
            except ConfigurationError as exc:
                raise ParseError(str(exc), lineno) from None

    if not raw_rows:
        raw_rows = [(None, {})]
    rows = []
    for lineno, spec in raw_rows:
        resolved = {}
        for rk, top_key in _ROW_DEFAULTS.items():
            if rk in spec:
                resolved[rk] = spec[rk]
            elif top_key in top:
                resolved[rk] = top[top_key]
            else:
                where = f"row on line {lineno}" if lineno else "config"
                raise ParseError(f"{where}: missing required key {top_key!r}", lineno)
        try:
            seeds = _parse_seeds(spec["seeds"]) if "seeds" in spec else top.get("seeds", (0,))
        except ValueError:
            raise ParseError(f"malformed seeds {spec['seeds']!r}", lineno) from None
        label = spec.get("label", f"{resolved['encoder']}/{resolved['decoder']}")
        row = MatrixRow(label, resolved["preset"], resolved["encoder"], resolved["decoder"], resolved["task"], seeds)
        try:
            _check_row(row)
        except ConfigurationError as exc:
            raise ParseError(str(exc), lineno) from None
        rows.append(row)

    labels = [r.label for r in rows]
    dupes = sorted({x for x in labels if labels.count(x) > 1})
    if dupes:
        raise ParseError(f"duplicate row labels {dupes}")
    try:
        matrix = ExperimentMatrix(
            tuple(rows), TrainConfig(**train_kw), DataSettings(**data_kw), top.get("output_dir", "runs")
        )
    except ConfigurationError as exc:
        raise ParseError(str(exc)) from None
    return matrix


def parse_config(path) -> ExperimentMatrix:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file {path} not found")
    return parse_config_text(path.read_text(encoding="utf-8"))


def resolve_output_dir(output_dir: str) -> Path:
    """Relative output directories are placed under ``$SONARSAM_OUTPUT_ROOT`` when it is set."""
    out = Path(output_dir)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


# ---------------------------------------------------------------------------
# running


@dataclass
class PreparedData:
    train: list
    val: list
    test: list
    class_names: tuple[str, ...]


def prepare_data(settings: DataSettings) -> PreparedData:
    if settings.dataset == "synth":
        spec = SynthSpec(num_classes=settings.num_classes)
        samples = synth_generate(spec, settings.data_seed, settings.samples)
        names = spec.class_names
    else:
        samples = load_dataset(settings.dataset)
        names = read_class_names(settings.dataset)
    by_id = {s.sample_id: s for s in samples}
    counts = settings.split_counts()
    if counts is None:
        sp = split_dataset(sorted(by_id), settings.data_seed)
        parts = (sp.train, sp.val, sp.test)
    else:
        if sum(counts) > len(by_id):
            raise UsageError(f"split {counts} needs {sum(counts)} samples, have {len(by_id)}")
        ids = sorted(by_id)
        order = [ids[i] for i in np.random.default_rng(settings.data_seed).permutation(len(ids))]
        a, b, c = counts
        parts = (order[:a], order[a : a + b], order[a + b : a + b + c])
    size = settings.image_size
    train_s, val_s, test_s = ([preprocess(by_id[i], size) for i in p] for p in parts)
    return PreparedData(train_s, val_s, test_s, tuple(names))


def _slug(i: int, label: str) -> str:
    return f"{i:02d}_" + re.sub(r"[^A-Za-z0-9]+", "_", label).strip("_")


def run_dir(out: Path, index: int, row: MatrixRow, seed: int) -> Path:
    return out / _slug(index, row.label) / f"seed{seed}"


def validate_matrix(matrix: ExperimentMatrix, n_train: int | None = None) -> None:
    """Check every row before anything trains."""
    if not matrix.rows:
        raise ConfigurationError("matrix has no rows")
    labels = [r.label for r in matrix.rows]
    if len(set(labels)) != len(labels):
        raise ConfigurationError("row labels must be unique")
    for row in matrix.rows:
        _check_row(row)
        if not row.seeds:
            raise ConfigurationError(f"row {row.label!r} has no seeds")
        if row.decoder_mode == "C" and row.task_mode != "semantic":
            raise ConfigurationError(f"row {row.label!r}: plan C is semantic-only")
        if n_train is not None:
            matrix.run_config(row, row.seeds[0]).schedule(n_train)


@dataclass
class MatrixResult:
    reports: dict[str, list[DiceReport]]
    trained: int
    skipped: int
    output_dir: Path


def _read_report(path: Path) -> DiceReport:
    return DiceReport.from_dict(json.loads(path.read_text())["report"])


def run_matrix(matrix: ExperimentMatrix, data: PreparedData | None = None, log=print) -> MatrixResult:
    """Run every (row, seed) in order, skipping runs whose summary already exists.

    Each run directory gets ``runlog.jsonl``, ``best.ckpt``, ``report.json`` and
    finally ``summary.json``; the table files go to the output directory.
    """
    data = data if data is not None else prepare_data(matrix.data)
    validate_matrix(matrix, len(data.train))
    out = resolve_output_dir(matrix.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "matrix.txt").write_text(matrix.to_text(), encoding="utf-8")
    eval_set = data.test if matrix.data.evaluate_on == "test" else data.val
    if not eval_set:
        raise UsageError(f"the {matrix.data.evaluate_on} split is empty")

    reports: dict[str, list[DiceReport]] = {r.label: [] for r in matrix.rows}
    trained = skipped = 0
    for i, row, seed in matrix.runs():
        rdir = run_dir(out, i, row, seed)
        if (rdir / "summary.json").exists():
            reports[row.label].append(_read_report(rdir / "report.json"))
            skipped += 1
            log(f"[skip] {row.label} seed {seed}: already complete")
            continue
        config = matrix.run_config(row, seed)
        preset = get_preset(row.preset, matrix.data.image_size)
        model = build_model(preset, len(data.class_names), seed=seed, semantic_head=row.decoder_mode == "C")
        plan = prepare_model(model, row.encoder_mode, row.decoder_mode, LoraConfig(rank=config.lora_rank))
        for w in plan.warnings:
            log(f"[warn] {row.label}: {w}")
        result = train(config, data.train, model, plan, data.val or None, rdir, data.class_names)
        report = evaluate(model, eval_set, row.task_mode, row.decoder_mode, data.class_names)
        record = {"label": row.label, "row": i, "seed": seed, "split": matrix.data.evaluate_on}
        (rdir / "report.json").write_text(json.dumps({**record, "report": report.to_dict()}, indent=1))
        summary = {**record, **result.log.summary, "average": report.average}
        (rdir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
        reports[row.label].append(report)
        trained += 1
        log(f"[done] {row.label} seed {seed}: DICE {report.average:.2f}")

    (out / "table.csv").write_text(emit_table(reports, "csv"), encoding="utf-8")
    (out / "table.md").write_text(emit_table(reports, "markdown") + "\n", encoding="utf-8")
    return MatrixResult(reports, trained, skipped, out)


def collect_reports(output_dir) -> dict[str, list[DiceReport]]:
    """Reports under a matrix output directory, grouped by row in matrix order."""
    found = []
    for path in sorted(Path(output_dir).glob("*/seed*/report.json")):
        rec = json.loads(path.read_text())
        found.append((rec["row"], rec["seed"], rec["label"], DiceReport.from_dict(rec["report"])))
    if not found:
        raise UsageError(f"no reports under {output_dir}")
    grouped: dict[str, list[DiceReport]] = {}
    for _, _, label, report in sorted(found, key=lambda r: (r[0], r[1])):
        grouped.setdefault(label, []).append(report)
    return grouped


# ---------------------------------------------------------------------------
# tables


def fixed2(x: float) -> str:
    """Two decimals, ties to even, applied to the shortest decimal form of ``x``."""
    return str(Decimal(repr(float(x))).quantize(Decimal("0.01"), rounding=ROUND_HALF_EVEN))


def _cell(values: Sequence[float]) -> str:
    if not values:
        return ""
    if len(values) == 1:
        return fixed2(values[0])
    return f"{fixed2(np.mean(values))} ± {fixed2(np.std(values, ddof=1))}"


def emit_table(reports, fmt: str = "markdown") -> str:
    """Rows of per-class scores then the average, in class-index order.

    ``reports`` maps a row label to its per-seed reports (a bare report or a
    list of reports is also accepted). Rows with several seeds print
    ``mean ± sample SD``.
    """
    if isinstance(reports, DiceReport):
        reports = {"": [reports]}
    elif not isinstance(reports, Mapping):
        reports = {str(i): [r] for i, r in enumerate(reports)}
    reports = {k: list(v) if not isinstance(v, DiceReport) else [v] for k, v in reports.items()}
    if not reports or not all(reports.values()):
        raise UsageError("emit_table needs at least one report per row")
    if fmt not in ("csv", "markdown"):
        raise ConfigurationError(f"format must be 'csv' or 'markdown', got {fmt!r}")
    first = next(iter(reports.values()))[0]
    classes = sorted({c for rs in reports.values() for r in rs for c in r.scores})
    header = ["row"] + [first.name(c) for c in classes] + ["average"]
    body = []
    for label, rs in reports.items():
        cells = [_cell([r.scores[c] for r in rs if c in r.scores]) for c in classes]
        body.append([label] + cells + [_cell([r.average for r in rs])])
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(body)
        return buf.getvalue()
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(r) + " |" for r in body]
    return "\n".join(lines)


def report_from_values(values: Sequence[float], class_names: tuple[str, ...] = CLASS_NAMES) -> DiceReport:
    """A report holding one score per class, classes numbered from 1."""
    return aggregate_report(enumerate(values, start=1), class_names)

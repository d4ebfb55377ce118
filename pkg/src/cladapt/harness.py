"""Config-driven experiment runs and report generation.

Config files are YAML. Schema (``config_version: 1``)::

    config_version: 1
    seed: 0                      # root seed; init, shuffle and generator streams derive from it
    num_classes: 3
    stream:                      # exactly one of synthetic / folders / cache
      synthetic: {mode: vector, ...}   # StreamSpec fields; seed defaults to the root seed
      folders: [{name: city, path: data/city, test_fraction: 0.2}, ...]
      cache: stream.clstrm
    arch: mlp                    # "mlp", "cnn" or an explicit architecture dict
    hyperparams: {lr: 0.002, lambda_e: 1.0, weight_decay: 1.0e-4,
                  epochs_per_experience: 30, batch_size: 8,
                  embedding_norm: squared, freeze_head: true}
    strategies: [naive, lfl, joint]
    output_dir: results          # relative paths resolve under $CLADAPT_OUTPUT_ROOT if set
    eval_every: 1
    parallel: false

Unknown keys anywhere are rejected. Relative data paths are resolved against
the config file's directory.
"""

from __future__ import annotations

import copy
import csv
import datetime as _dt
import hashlib
import io
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import yaml

from .checkpoint import save_checkpoint
from .data import (DataError, Experience, StreamSpec, StreamView, generate_synthetic_stream,
                   load_folder_dataset, load_stream)
from .metrics import (METRIC_CONVENTION, DeltaReport, EvalMatrix, EvalRow, TrendPoint,
                      delta_vs_joint)
from .model import ConfigError, default_cnn_arch, default_mlp_arch, parse_arch
from .strategies import STRATEGIES, Hyperparams, ProtocolResult, run_protocol

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
OUTPUT_ROOT_ENV = "CLADAPT_OUTPUT_ROOT"
_TOP_KEYS = {"config_version", "seed", "num_classes", "stream", "arch", "hyperparams",
             "strategies", "output_dir", "eval_every", "parallel"}
_HP_KEYS = {f.name for f in fields(Hyperparams)} - {"seed"}


@dataclass
class ExperimentConfig:
    seed: int = 0
    num_classes: int = 3
    stream: dict = field(default_factory=lambda: {"synthetic": {}})
    arch: Any = "mlp"
    hyperparams: dict = field(default_factory=dict)
    strategies: list[str] = field(default_factory=lambda: list(STRATEGIES))
    output_dir: str = "results"
    eval_every: int = 1
    parallel: bool = False
    base_dir: Path = field(default=Path("."), repr=False, compare=False)

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path = Path(".")) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
        unknown = set(raw) - _TOP_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        version = raw.get("config_version")
        if version != CONFIG_VERSION:
            raise ConfigError(f"config_version must be {CONFIG_VERSION}, got {version!r}")
        kwargs = {k: v for k, v in raw.items() if k != "config_version"}
        cfg = cls(**kwargs, base_dir=Path(base_dir))
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        d = {"config_version": CONFIG_VERSION}
        for f in fields(self):
            if f.name != "base_dir":
                d[f.name] = copy.deepcopy(getattr(self, f.name))
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def hp(self) -> Hyperparams:
        unknown = set(self.hyperparams) - _HP_KEYS
        if unknown:
            raise ConfigError(f"unknown hyperparams keys: {sorted(unknown)}")
        hp = Hyperparams(seed=int(self.seed), **self.hyperparams)
        hp.validate()
        return hp

    def arch_config(self, sample_shape: Optional[tuple[int, ...]] = None) -> dict:
        if isinstance(self.arch, dict):
            arch = copy.deepcopy(self.arch)
        elif self.arch == "mlp":
            if sample_shape is None or len(sample_shape) != 1:
                raise ConfigError("arch 'mlp' needs vector samples")
            arch = default_mlp_arch(sample_shape[0])
        elif self.arch == "cnn":
            arch = default_cnn_arch()
        else:
            raise ConfigError(f"arch must be 'mlp', 'cnn' or a dict, got {self.arch!r}")
        parse_arch(arch)
        return arch

    def validate(self) -> None:
        if not isinstance(self.strategies, list) or not self.strategies:
            raise ConfigError("strategies must be a non-empty list")
        bad = [s for s in self.strategies if s not in STRATEGIES]
        if bad:
            raise ConfigError(f"unknown strategies: {bad}")
        if len(set(self.strategies)) != len(self.strategies):
            raise ConfigError("strategies contains duplicates")
        if int(self.eval_every) < 1:
            raise ConfigError("eval_every must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if not isinstance(self.stream, dict) or len(self.stream) != 1:
            raise ConfigError("stream needs exactly one of: synthetic, folders, cache")
        (kind, value), = self.stream.items()
        if kind == "synthetic":
            spec = self.stream_spec()
            spec.validate()
        elif kind == "folders":
            if not isinstance(value, list) or not value:
                raise ConfigError("stream.folders must be a non-empty list")
            for i, entry in enumerate(value):
                extra = set(entry) - {"name", "path", "test_fraction"}
                if extra or "path" not in entry:
                    raise ConfigError(f"stream.folders[{i}]: needs 'path', allows name/test_fraction")
        elif kind != "cache":
            raise ConfigError(f"unknown stream source {kind!r}")
        self.hp()

    def stream_spec(self) -> StreamSpec:
        d = dict(self.stream["synthetic"] or {})
        d.setdefault("seed", int(self.seed))
        return StreamSpec.from_dict(d)

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def output_path(self) -> Path:
        p = Path(self.output_dir)
        if p.is_absolute():
            return p
        root = os.environ.get(OUTPUT_ROOT_ENV)
        return Path(root) / p if root else self.base_dir / p


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return ExperimentConfig.from_dict(raw, base_dir=path.parent)


def load_experiences(cfg: ExperimentConfig) -> list[Experience]:
    (kind, value), = cfg.stream.items()
    if kind == "synthetic":
        return generate_synthetic_stream(cfg.stream_spec())
    if kind == "cache":
        return load_stream(cfg.resolve(value))
    exps = []
    for i, entry in enumerate(value):
        path = cfg.resolve(entry["path"])
        e = load_folder_dataset(path, name=entry.get("name"), exp_id=i,
                                test_fraction=entry.get("test_fraction", 0.2), seed=cfg.seed + i)
        exps.append(e)
    shapes = {e.sample_shape for e in exps}
    if len(shapes) != 1:
        raise DataError(f"experiences have differing sample shapes: {sorted(shapes)}")
    return exps


@dataclass
class RunManifest:
    config_hash: str
    started: str
    finished: str
    strategies: dict
    cost: dict
    artifacts: list[str]

    def to_dict(self) -> dict:
        return asdict(self)


def _run_one(args) -> ProtocolResult:
    strategy, experiences, hp, arch, num_classes, eval_every = args
    return run_protocol(strategy, StreamView(experiences), hp, arch, num_classes, eval_every)


def _result_payload(res: ProtocolResult, hp: Hyperparams) -> dict:
    logs = []
    for lg in res.logs:
        logs.append({"experience": lg.experience, "samples": lg.samples,
                     "epochs": [{"epoch": e.epoch, "loss_ce": e.loss_ce, "loss_emb": e.loss_emb,
                                 "reg": e.reg, "samples": e.samples} for e in lg.epochs]})
    return {
        "strategy": res.strategy,
        "hyperparams": asdict(hp),
        "matrix": EvalMatrix(res.strategy, res.rows).to_dict(),
        "trend": [asdict(p) for p in res.trend],
        "train_logs": logs,
    }


def _json_dump(obj, path: Path) -> None:
    def clean(o):
        if isinstance(o, float) and math.isnan(o):
            return None
        if isinstance(o, dict):
            return {k: clean(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [clean(v) for v in o]
        return o

    path.write_text(json.dumps(clean(obj), indent=2, sort_keys=True) + "\n")


def cost_summary(results: dict[str, ProtocolResult], train_sizes: list[int]) -> dict:
    """Processed-sample and wall-time ratios of joint retraining vs the last finetune."""
    if "joint" not in results:
        return {}
    joint = results["joint"].logs[0]
    out = {"joint_samples": joint.samples, "joint_wall_time": joint.wall_time,
           "expected_sample_ratio": sum(train_sizes) / train_sizes[-1], "per_strategy": {}}
    for name in ("naive", "lfl"):
        if name not in results:
            continue
        last = results[name].logs[-1]
        out["per_strategy"][name] = {
            "last_finetune_samples": last.samples,
            "last_finetune_wall_time": last.wall_time,
            "sample_ratio": joint.samples / last.samples,
            "wall_time_ratio": joint.wall_time / last.wall_time if last.wall_time > 0 else None,
        }
    return out


def run_experiment(config) -> RunManifest:
    """Run every configured strategy and write results, checkpoints, tables and a manifest."""
    cfg = config if isinstance(config, ExperimentConfig) else load_config(config)
    started = _dt.datetime.now(_dt.timezone.utc).isoformat()
    experiences = load_experiences(cfg)
    hp = cfg.hp()
    arch = cfg.arch_config(experiences[0].sample_shape)
    out = cfg.output_path()
    (out / "results").mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))

    jobs = [(s, experiences, hp, arch, cfg.num_classes, int(cfg.eval_every)) for s in cfg.strategies]
    if cfg.parallel and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=len(jobs)) as pool:
            outputs = list(pool.map(_run_one, jobs))
    else:
        outputs = [_run_one(j) for j in jobs]
    results = dict(zip(cfg.strategies, outputs))

    artifacts = ["config.yaml"]
    for name, res in results.items():
        rel = f"results/{name}.json"
        _json_dump(_result_payload(res, hp), out / rel)
        artifacts.append(rel)
        for i, net in enumerate(res.checkpoints):
            tag = "union" if name == "joint" else f"exp{i}"
            rel = f"checkpoints/{name}_{tag}.clnet"
            save_checkpoint(net, out / rel)
            artifacts.append(rel)
    artifacts += emit_report(out)

    train_sizes = [len(e.train_y) for e in experiences]
    strategies = {name: {"rows": len(res.rows),
                         "train_logs": [lg.summary() for lg in res.logs]}
                  for name, res in results.items()}
    manifest = RunManifest(cfg.config_hash(), started,
                           _dt.datetime.now(_dt.timezone.utc).isoformat(),
                           strategies, cost_summary(results, train_sizes),
                           sorted(set(artifacts)) + ["manifest.json"])
    _json_dump(manifest.to_dict(), out / "manifest.json")
    return manifest


# --- reporting -------------------------------------------------------------------

def _fmt(v: Optional[float], digits: Optional[int]) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "NA"
    return f"{v:.{digits}f}" if digits is not None else repr(float(v))


def _write_csv(path: Path, header: list[str], rows: list[list[str]]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def _table_rows(matrix: EvalMatrix, digits: Optional[int]) -> tuple[list[str], list[list[str]]]:
    header = ["training_stage"]
    for c in matrix.columns:
        header += [f"{c}_auroc", f"{c}_f1"]
    rows = []
    for r in matrix.rows:
        line = [r.label]
        for a, f in zip(r.auroc, r.f1):
            line += [_fmt(a, digits), _fmt(f, digits)]
        rows.append(line)
    return header, rows


def _render_text(title: str, header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(header)]
    line = lambda cells: "  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                                   for i, (c, w) in enumerate(zip(cells, widths)))
    sep = "-" * len(line(header))
    return "\n".join([title, sep, line(header), sep, *(line(r) for r in rows), sep, ""])


def emit_report(results_dir) -> list[str]:
    """Write the per-strategy tables, the joint delta table and the union trend CSV.

    Returns the written file names relative to ``results_dir``. Missing
    strategies produce a partial report and a warning.
    """
    root = Path(results_dir)
    loaded = {}
    for name in STRATEGIES:
        p = root / "results" / f"{name}.json"
        if p.exists():
            loaded[name] = json.loads(p.read_text())
    missing = [s for s in STRATEGIES if s not in loaded]
    if missing:
        log.warning("report is partial; missing strategies: %s", ", ".join(missing))
    if not loaded:
        raise FileNotFoundError(f"no strategy results under {root / 'results'}")

    written, text = [], []
    matrices = {n: EvalMatrix.from_dict(d["matrix"]) for n, d in loaded.items()}
    for name, matrix in matrices.items():
        for suffix, digits in (("", 4), ("_raw", None)):
            header, rows = _table_rows(matrix, digits)
            fname = f"table_{name}{suffix}.csv"
            _write_csv(root / fname, header, rows)
            written.append(fname)
        header, rows = _table_rows(matrix, 4)
        text.append(_render_text(f"{name} strategy (AUROC / F1 per test set)", header, rows))

    if "joint" in matrices:
        joint_row = matrices["joint"].rows[-1]
        deltas = [delta_vs_joint(matrices[s].rows[-1], joint_row, s)
                  for s in ("naive", "lfl") if s in matrices]
        if deltas:
            for suffix, digits in (("", 4), ("_raw", None)):
                header = ["strategy"]
                for c in deltas[0].columns:
                    header += [f"{c}_d_auroc", f"{c}_d_f1"]
                rows = []
                for d in deltas:
                    line = [d.strategy]
                    for a, f in zip(d.d_auroc, d.d_f1):
                        line += [_fmt(a, digits), _fmt(f, digits)]
                    rows.append(line)
                fname = f"table_delta{suffix}.csv"
                _write_csv(root / fname, header, rows)
                written.append(fname)
                if suffix == "":
                    text.append(_render_text("final model vs joint (joint minus strategy)", header, rows))

    trend_rows = []
    for name, d in loaded.items():
        for p in d["trend"]:
            trend_rows.append([str(p["epoch"]), name, str(p["experience"]),
                               _fmt(p["auroc"], None), _fmt(p["f1"], None),
                               "1" if p["boundary"] else "0"])
    _write_csv(root / "trend.csv", ["epoch", "strategy", "experience", "auroc", "f1",
                                    "experience_boundary"], trend_rows)
    written.append("trend.csv")
    if missing:
        text.append(f"missing strategies: {', '.join(missing)}\n")
    text.append("metrics: " + "; ".join(f"{k}: {v}" for k, v in METRIC_CONVENTION.items()) + "\n")
    (root / "tables.txt").write_text("\n".join(text))
    written.append("tables.txt")
    return written


def read_table(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


__all__ = ["ExperimentConfig", "RunManifest", "load_config", "load_experiences",
           "run_experiment", "emit_report", "cost_summary", "read_table",
           "DeltaReport", "EvalRow", "TrendPoint"]

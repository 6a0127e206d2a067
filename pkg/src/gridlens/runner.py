"""Config loading, deterministic result writing and run records."""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np
import yaml

import gridlens

RESULT_SCHEMA = 1
RECORD_FILE = "run.json"
TIMING_FILE = "timing.json"  # the only output that differs between identical runs
ERROR_FILE = "error.json"
KINDS = ("gen", "plant", "train", "eval", "ablate", "probe", "knockout", "cma", "head-ablate", "report")
TOP_LEVEL_KEYS = ("kind", "seed", "out", "model", "scenes", "params")
# kinds that read a checkpoint / a scene manifest
NEEDS_MODEL = {"eval", "ablate", "probe", "knockout", "cma", "head-ablate"}
NEEDS_SCENES = {"train", "eval", "ablate", "probe", "knockout", "cma", "head-ablate"}


class ConfigError(ValueError):
    pass


class ExperimentError(RuntimeError):
    """A module error, re-raised with the experiment kind attached."""

    def __init__(self, kind: str, cause: BaseException):
        super().__init__(f"{kind}: {type(cause).__name__}: {cause}")
        self.kind = kind
        self.cause = cause


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    seed: int
    out: str
    model: str | None
    scenes: str | None
    params: dict

    def canonical(self) -> dict:
        """Everything that determines results; ``out`` is excluded."""
        return {"kind": self.kind, "seed": self.seed, "model": self.model, "scenes": self.scenes,
                "params": self.params, "inputs": {k: _file_digest(p) for k, p in self._inputs().items()}}

    def _inputs(self) -> dict[str, str]:
        out = {}
        if self.model:
            out["model"] = self.model
        if self.scenes:
            out["scenes"] = self.scenes
        for i, run in enumerate(self.params.get("runs", []) if self.kind == "report" else []):
            out[f"run{i}"] = str(Path(run) / "summary.json")
        return out

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(_canonical_json(self.canonical()).encode()).hexdigest()


def _file_digest(path: str) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _merge(defaults: dict, given: dict, where: str) -> dict:
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        if isinstance(defaults[k], dict) and defaults[k] and k != "model":
            if not isinstance(v, dict):
                raise ConfigError(f"{where}.{k} must be a mapping")
            out[k] = _merge(defaults[k], v, f"{where}.{k}")
        else:
            out[k] = v
    return out


def build_config(raw: dict, *, kind: str | None = None, seed: int | None = None, out: str | None = None,
                 base_dir: Path | None = None) -> ExperimentConfig:
    """Validate a raw mapping (unknown keys rejected) and fill kind defaults."""
    from gridlens.experiments import PARAM_DEFAULTS

    raw = dict(raw or {})
    unknown = set(raw) - set(TOP_LEVEL_KEYS)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    k = raw.get("kind", kind)
    if kind is not None and k != kind:
        raise ConfigError(f"config is for {k!r} but the {kind!r} command was run")
    if k not in KINDS:
        raise ConfigError(f"kind must be one of {KINDS}, got {k!r}")
    s = seed if seed is not None else raw.get("seed", 0)
    if not isinstance(s, int) or isinstance(s, bool) or s < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {s!r}")
    o = out if out is not None else raw.get("out")
    if not o:
        raise ConfigError("no output directory: set 'out' or pass --out")
    if out is None and base_dir is not None and not Path(o).is_absolute():
        o = base_dir / o  # like input paths, a config-file 'out' is relative to the config
    params = raw.get("params") or {}
    if not isinstance(params, dict):
        raise ConfigError("params must be a mapping")
    params = _merge(PARAM_DEFAULTS[k], params, "params")

    def resolve(p):
        if p is None:
            return None
        p = Path(p)
        if base_dir is not None and not p.is_absolute():
            p = base_dir / p
        return str(p)

    model, scenes = resolve(raw.get("model")), resolve(raw.get("scenes"))
    if k in NEEDS_MODEL and model is None:
        raise ConfigError(f"{k} needs a 'model' checkpoint path")
    if k in NEEDS_SCENES and scenes is None:
        raise ConfigError(f"{k} needs a 'scenes' manifest path")
    if k == "report":
        params["runs"] = [resolve(r) for r in params["runs"]]
        if not params["runs"]:
            raise ConfigError("report needs at least one run directory in params.runs")
    cfg = ExperimentConfig(k, s, str(o), model, scenes, params)
    for name, path in cfg._inputs().items():
        if not Path(path).is_file():
            raise ConfigError(f"{name} file does not exist: {path}")
    return cfg


def load_config(path: str | Path | None, *, kind: str | None = None, seed: int | None = None,
                out: str | None = None) -> ExperimentConfig:
    if path is None:
        return build_config({}, kind=kind, seed=seed, out=out)
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file does not exist: {p}")
    try:
        raw = yaml.safe_load(p.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"{p}: not valid YAML: {e}") from e
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    return build_config(raw or {}, kind=kind, seed=seed, out=out, base_dir=p.parent)


# --------------------------------------------------------------------------
# deterministic serialization


def fmt(v: Any) -> str:
    """Shortest round-trip text for a CSV cell."""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        f = float(v)
        if np.isnan(f):
            return "nan"
        return repr(f)
    if v is None:
        return ""
    if isinstance(v, (tuple, list)):
        return " ".join(fmt(x) for x in v)
    return str(v)


def _plain(v: Any) -> Any:
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, np.ndarray):
        return _plain(v.tolist())
    if isinstance(v, (np.bool_,)):
        return bool(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, (float, np.floating)):
        f = float(v)
        return None if np.isnan(f) else f
    return v


def _canonical_json(obj: Any) -> str:
    return json.dumps(_plain(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def csv_text(columns: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        if len(r) != len(columns):
            raise ValueError(f"row has {len(r)} fields, expected {len(columns)}")
        w.writerow([fmt(v) for v in r])
    return buf.getvalue()


def grid_csv(matrix: np.ndarray, row_labels: Sequence[Any], col_labels: Sequence[Any], corner: str = "") -> str:
    """Dense matrix with a header row and a label column."""
    m = np.asarray(matrix)
    return csv_text([corner] + [fmt(c) for c in col_labels],
                    [[r] + list(m[i]) for i, r in enumerate(row_labels)])


class ResultSink:
    """Collects result files in memory; ``flush`` writes them in name order."""

    def __init__(self):
        self.files: dict[str, bytes] = {}

    def text(self, name: str, content: str) -> None:
        self.files[name] = content.encode()

    def json(self, name: str, obj: Any) -> None:
        self.text(name, _canonical_json({"schema": RESULT_SCHEMA, **obj}))

    def csv(self, name: str, columns: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
        self.text(name, f"# schema {RESULT_SCHEMA}\n" + csv_text(columns, rows))

    def grid(self, name: str, matrix, row_labels, col_labels, corner: str = "") -> None:
        self.text(name, f"# schema {RESULT_SCHEMA}\n" + grid_csv(matrix, row_labels, col_labels, corner))

    def binary(self, name: str, data: bytes) -> None:
        self.files[name] = data

    def flush(self, out: Path) -> dict[str, str]:
        out.mkdir(parents=True, exist_ok=True)
        digests = {}
        for name in sorted(self.files):
            (out / name).write_bytes(self.files[name])
            digests[name] = hashlib.sha256(self.files[name]).hexdigest()
        return digests


def read_csv(path: str | Path) -> list[dict[str, str]]:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("# schema")]
    return list(csv.DictReader(lines))


# --------------------------------------------------------------------------
# run records


@dataclass
class RunRecord:
    config_hash: str
    artifact_version: str
    kind: str
    seed: int
    files: dict[str, str]
    seed_ledger: dict
    summary: dict
    wall_clock_s: float = 0.0
    complete: bool = True
    error: str | None = None
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        """Everything but the wall-clock time, which lives in its own file."""
        return {"schema": RESULT_SCHEMA, "config_hash": self.config_hash, "artifact_version": self.artifact_version,
                "kind": self.kind, "seed": self.seed, "files": self.files, "seed_ledger": self.seed_ledger,
                "summary": self.summary, "complete": self.complete, "error": self.error, "config": self.config}

    @property
    def record_hash(self) -> str:
        return hashlib.sha256(_canonical_json(self.to_dict()).encode()).hexdigest()

    @classmethod
    def load(cls, path: str | Path) -> "RunRecord":
        path = Path(path)
        d = json.loads(path.read_text())
        d.pop("schema", None)
        timing = path.parent / TIMING_FILE
        if timing.is_file():
            d["wall_clock_s"] = json.loads(timing.read_text())["wall_clock_s"]
        return cls(**d)


@dataclass
class Context:
    """What an experiment function receives."""

    config: ExperimentConfig
    sink: ResultSink
    summary: dict
    seed_ledger: dict

    @property
    def params(self) -> dict:
        return self.config.params

    def derive_seed(self, label: str, index: int = 0) -> int:
        """Stable sub-seed for a named random stream."""
        h = hashlib.sha256(f"{self.config.seed}:{label}:{index}".encode()).digest()
        seed = int.from_bytes(h[:4], "little") & 0x7FFFFFFF
        self.seed_ledger.setdefault(label, {})[str(index)] = seed
        return seed


def format_summary(kind: str, summary: dict) -> str:
    width = max([len(k) for k in summary] + [6])
    lines = [f"{kind} summary", "-" * (width + 24)]
    for k, v in summary.items():
        lines.append(f"{k:<{width}}  {fmt(v) if not isinstance(v, float) else f'{v:.4f}'}")
    return "\n".join(lines)


def run_experiment(config: ExperimentConfig, *, quiet: bool = False,
                   printer: Callable[[str], None] = print) -> RunRecord:
    """Run one experiment, write its result files and ``run.json``.

    On failure the files produced so far are written, ``run.json`` is marked
    incomplete and an ExperimentError is raised.
    """
    from gridlens.experiments import EXPERIMENTS

    out = Path(config.out)
    ctx = Context(config, ResultSink(), {}, {"run": config.seed})
    start = time.perf_counter()
    error: BaseException | None = None
    try:
        EXPERIMENTS[config.kind](ctx)
    except Exception as e:  # noqa: BLE001 - surfaced below with context
        error = e
    ctx.sink.json("summary.json", {"kind": config.kind, "summary": ctx.summary})
    digests = ctx.sink.flush(out)
    record = RunRecord(config.config_hash, gridlens.__version__, config.kind, config.seed, digests,
                       ctx.seed_ledger, _plain(ctx.summary), round(time.perf_counter() - start, 3),
                       error is None, None if error is None else f"{type(error).__name__}: {error}",
                       _plain(config.canonical()))
    (out / RECORD_FILE).write_text(_canonical_json(record.to_dict()))
    (out / TIMING_FILE).write_text(_canonical_json({"wall_clock_s": record.wall_clock_s}))
    if error is not None:
        raise ExperimentError(config.kind, error) from error
    if not quiet:
        printer(format_summary(config.kind, ctx.summary))
    return record

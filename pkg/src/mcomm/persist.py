"""Experiment configuration, JSONL traces, checkpoints and CSV export."""
from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from . import envs
from .gradcore import ParamArray
from .protocol import ProtocolParams, ProtocolSpec
from .training import TrainConfig

logger = logging.getLogger(__name__)

CHECKPOINT_TAG = "MCOMM1"
OUTPUT_ENV_VAR = "MCOMM_OUTPUT_DIR"
TRACE_FIELDS = ("epoch", "success", "H", "xi", "C", "IEI", "SEI", "TEI", "la", "lQ", "Lt", "wIEI", "wSEI")
CSV_COLUMNS = TRACE_FIELDS

_OPTIONAL = {
    ("training", "rounds_train"): int,
    ("training", "rounds_exec"): int,
    ("training", "grad_clip"): float,
}


class ConfigErrors(ValueError):
    """All violations found while loading a config."""

    def __init__(self, errors: list[str]):
        super().__init__("invalid config:\n  " + "\n  ".join(errors))
        self.errors = errors


@dataclass
class ExperimentConfig:
    env_kind: str = "traffic_junction"
    env_params: dict = field(default_factory=dict)
    protocol: ProtocolSpec = field(default_factory=ProtocolSpec)
    training: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "runs"
    label: str = "run"

    def make_env(self):
        return envs.make_env(self.env_kind, self.env_params)

    def resolved_output_dir(self) -> Path:
        return Path(os.environ.get(OUTPUT_ENV_VAR) or self.output_dir)

    def to_dict(self) -> dict:
        env_cls = envs.TJConfig if self.env_kind == "traffic_junction" else envs.ToyConfig
        env = {"kind": self.env_kind}
        env.update({f.name: getattr(env_cls(**self.env_params), f.name) for f in fields(env_cls)})
        return {
            "label": self.label,
            "output_dir": self.output_dir,
            "environment": env,
            "protocol": self.protocol.to_dict(),
            "training": self.training.to_dict(),
        }


def _check_type(section: str, name: str, value, default, errors: list) -> object:
    expected = _OPTIONAL.get((section, name))
    if expected is not None:
        if value is None:
            return None
        default = expected()
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    else:
        ok = True
    if not ok:
        errors.append(f"{section}.{name}: expected {type(default).__name__}, got {value!r}")
    return value


def _section(raw: dict, section: str, cls, errors: list, skip=()) -> dict:
    data = raw.get(section) or {}
    if not isinstance(data, dict):
        errors.append(f"{section}: expected a mapping")
        return {}
    known = {f.name: f for f in fields(cls)}
    out = {}
    for key, value in data.items():
        if key in skip:
            continue
        if key not in known:
            errors.append(f"{section}.{key}: unknown key")
            continue
        out[key] = _check_type(section, key, value, known[key].default, errors)
    return out


def parse_config(raw: dict | None) -> ExperimentConfig:
    raw = raw or {}
    errors: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigErrors(["top level: expected a mapping"])
    for key in raw:
        if key not in ("label", "output_dir", "environment", "protocol", "training"):
            errors.append(f"{key}: unknown key")
    env_raw = raw.get("environment") or {}
    kind = env_raw.get("kind", "traffic_junction") if isinstance(env_raw, dict) else None
    env_cls = {"traffic_junction": envs.TJConfig, "toy_sum": envs.ToyConfig}.get(kind)
    if env_cls is None:
        errors.append(f"environment.kind: must be 'traffic_junction' or 'toy_sum', got {kind!r}")
        env_params = {}
    else:
        env_params = _section(raw, "environment", env_cls, errors, skip=("kind",))
    proto = _section(raw, "protocol", ProtocolSpec, errors)
    train = _section(raw, "training", TrainConfig, errors)
    for key in ("label", "output_dir"):
        if key in raw and not isinstance(raw[key], str):
            errors.append(f"{key}: expected str, got {raw[key]!r}")
    if errors:
        raise ConfigErrors(errors)

    env_cfg = env_cls(**env_params)
    errors += [f"environment.{e.field}: {str(e).split(': ', 1)[1]}" for e in env_cfg.validate()]
    spec = ProtocolSpec(**proto)
    errors += [f"protocol.{e}" for e in spec.validate(env_cfg.n_agents)]
    tcfg = TrainConfig(**train)
    errors += [f"training.{e}" for e in tcfg.validate()]
    if errors:
        raise ConfigErrors(errors)
    return ExperimentConfig(
        env_kind=kind,
        env_params=env_params,
        protocol=spec,
        training=tcfg,
        output_dir=raw.get("output_dir", "runs"),
        label=raw.get("label", "run"),
    )


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    return parse_config(raw)


def dump_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)


# ---------------------------------------------------------------------------
# traces


def trace_record(stats, losses: dict) -> dict:
    return {
        "epoch": stats.epoch,
        "success": stats.success,
        "H": stats.entropy,
        "xi": stats.similarity,
        "C": stats.comm_count,
        "IEI": stats.iei,
        "SEI": stats.sei,
        "TEI": stats.tei,
        "la": losses.get("la"),
        "lQ": losses.get("lQ"),
        "Lt": losses.get("Lt"),
        "wIEI": losses.get("wIEI"),
        "wSEI": losses.get("wSEI"),
    }


def append_trace(record: dict, path) -> None:
    missing = set(TRACE_FIELDS) - set(record)
    if missing:
        raise ValueError(f"trace record misses fields {sorted(missing)}")
    line = json.dumps({k: record[k] for k in TRACE_FIELDS}, allow_nan=False)
    with open(path, "a") as fh:
        fh.write(line + "\n")
        fh.flush()


def read_trace(path, errors: list | None = None) -> list[dict]:
    """Parse a JSONL trace; malformed lines are reported in ``errors`` and skipped."""
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if not isinstance(rec, dict) or "epoch" not in rec:
                    raise ValueError("not a trace record")
            except ValueError as exc:
                msg = f"{path}:{lineno}: malformed line ({exc})"
                logger.warning(msg)
                if errors is not None:
                    errors.append(msg)
                continue
            records.append(rec)
    return records


def export_csv(trace_path, csv_path=None) -> tuple[Path, list[str]]:
    trace_path = Path(trace_path)
    csv_path = Path(csv_path) if csv_path else trace_path.with_suffix(".csv")
    errors: list[str] = []
    records = read_trace(trace_path, errors)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for rec in records:
            w.writerow(["" if rec.get(c) is None else repr(rec[c]) for c in CSV_COLUMNS])
    return csv_path, errors


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        rec = {}
        for k, v in row.items():
            if v == "":
                rec[k] = None
            elif k in ("epoch", "C"):
                rec[k] = int(v)
            else:
                rec[k] = float(v)
        out.append(rec)
    return out


# ---------------------------------------------------------------------------
# checkpoints


class CheckpointError(ValueError):
    pass


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def save_checkpoint(path, params: ProtocolParams, epoch: int, rng_state: dict | None = None) -> None:
    doc = {
        "format": CHECKPOINT_TAG,
        "epoch": epoch,
        "spec": {
            "protocol": params.spec.to_dict(),
            "obs_dim": params.obs_dim,
            "n_agents": params.n_agents,
            "n_actions": params.n_actions,
        },
        "rng_state": rng_state,
        "params": {
            name: {"shape": list(p.value.shape), "data": [float(x) for x in p.value.ravel()]}
            for name, p in params.arrays.items()
        },
    }
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(_dumps(doc))
    tmp.replace(path)


def load_checkpoint(path, expect: dict | None = None) -> tuple[ProtocolParams, dict]:
    """Returns ``(params, meta)``.  ``expect`` may pin spec/obs_dim/n_agents/n_actions."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_TAG:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_TAG} checkpoint (format={doc.get('format')!r})")
    meta = doc["spec"]
    spec = ProtocolSpec(**meta["protocol"])
    dims = dict(obs_dim=meta["obs_dim"], n_agents=meta["n_agents"], n_actions=meta["n_actions"])
    if expect:
        for key in ("obs_dim", "n_agents", "n_actions"):
            if key in expect and expect[key] != dims[key]:
                raise CheckpointError(f"checkpoint {key}={dims[key]} does not match expected {expect[key]}")
    ref_spec = expect.get("protocol", spec) if expect else spec
    from .protocol import param_shapes

    shapes = param_shapes(ref_spec, dims["obs_dim"], dims["n_agents"], dims["n_actions"])
    arrays = {}
    problems = []
    for name, shape in shapes.items():
        entry = doc["params"].get(name)
        if entry is None:
            problems.append(f"{name}: missing (expected shape {shape})")
            continue
        if tuple(entry["shape"]) != shape:
            problems.append(f"{name}: checkpoint shape {tuple(entry['shape'])} != expected {shape}")
            continue
        arrays[name] = ParamArray(name, np.asarray(entry["data"], dtype=np.float64).reshape(shape))
    for name in doc["params"]:
        if name not in shapes:
            problems.append(f"{name}: not part of the expected parameter set")
    if problems:
        raise CheckpointError("checkpoint does not match spec: " + "; ".join(problems))
    params = ProtocolParams(ref_spec, dims["obs_dim"], dims["n_agents"], dims["n_actions"], arrays)
    return params, {"epoch": doc["epoch"], "rng_state": doc["rng_state"], "spec": meta}

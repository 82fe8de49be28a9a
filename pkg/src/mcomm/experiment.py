"""Run orchestration: one directory per run holding config, trace and checkpoints."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import persist
from . import protocol as pr
from . import training as tr

logger = logging.getLogger(__name__)

INIT_STREAM = 2**31 - 2
CONFIG_FILE = "config.yaml"
TRACE_FILE = "trace.jsonl"
TIMING_FILE = "timing.jsonl"
TOPOLOGY_FILE = "topology.jsonl"
FINAL_CHECKPOINT = "checkpoint.json"


def init_params(cfg: persist.ExperimentConfig, env) -> pr.ProtocolParams:
    rng = np.random.default_rng([cfg.training.seed, INIT_STREAM])
    return pr.init_params(cfg.protocol, env.obs_dim, env.n_agents, env.n_actions, rng)


def with_overrides(cfg: persist.ExperimentConfig, seed=None, epochs=None, output_dir=None, label=None):
    training = cfg.training
    if seed is not None:
        training = replace(training, seed=seed)
    if epochs is not None:
        training = replace(training, epochs=epochs)
    return replace(
        cfg,
        training=training,
        output_dir=cfg.output_dir if output_dir is None else str(output_dir),
        label=cfg.label if label is None else label,
    )


def _topology_line(epoch: int, topologies: list) -> str:
    rows = [np.asarray(g, dtype=int).tolist() for g in topologies]
    return json.dumps({"epoch": epoch, "G": rows}, separators=(",", ":"))


def run_experiment(cfg: persist.ExperimentConfig, callback=None, output_dir=None) -> Path:
    """Phase-1 training.  Writes into ``<output_dir>/<label>/`` and returns that path.

    The trace carries no wall-clock values so that seeded reruns produce
    identical bytes; epoch durations go to a separate timing file.
    """
    # an explicit directory (CLI flag) beats the environment override
    run_dir = (Path(output_dir) if output_dir else cfg.resolved_output_dir()) / cfg.label
    run_dir.mkdir(parents=True, exist_ok=True)
    persist.dump_config(cfg, run_dir / CONFIG_FILE)
    trace_path = run_dir / TRACE_FILE
    timing_path = run_dir / TIMING_FILE
    topo_path = run_dir / TOPOLOGY_FILE
    for p in (trace_path, timing_path, topo_path):
        p.unlink(missing_ok=True)

    env = cfg.make_env()
    params = init_params(cfg, env)
    tcfg = cfg.training
    for epoch in range(tcfg.epochs):
        t0 = time.perf_counter()
        result = tr.train_epoch(params, env, tcfg, epoch)
        wall_ms = (time.perf_counter() - t0) * 1e3
        record = persist.trace_record(result.stats, result.losses)
        persist.append_trace(record, trace_path)
        with open(timing_path, "a") as fh:
            fh.write(json.dumps({"epoch": epoch, "wall_ms": round(wall_ms, 3)}) + "\n")
        if tcfg.log_topology and result.topologies:
            with open(topo_path, "a") as fh:
                fh.write(_topology_line(epoch, result.topologies) + "\n")
        if result.aborted:
            logger.warning("epoch %d aborted; parameters unchanged", epoch)
        if tcfg.checkpoint_every and (epoch + 1) % tcfg.checkpoint_every == 0:
            persist.save_checkpoint(
                run_dir / f"checkpoint_{epoch + 1:05d}.json", params, epoch + 1, _rng_state(tcfg, epoch + 1)
            )
        if callback is not None:
            callback(epoch, record)
    persist.save_checkpoint(run_dir / FINAL_CHECKPOINT, params, tcfg.epochs, _rng_state(tcfg, tcfg.epochs))
    return run_dir


def _rng_state(tcfg: tr.TrainConfig, next_epoch: int) -> dict:
    # every epoch draws from substreams keyed by (seed, epoch, episode), so
    # the pair below fully determines where a resumed run would continue
    return {"seed": tcfg.seed, "next_epoch": next_epoch}


def read_topologies(path) -> dict[int, list]:
    out = {}
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            out[rec["epoch"]] = [np.asarray(g) for g in rec["G"]]
    return out


def evaluate_checkpoint(cfg: persist.ExperimentConfig, checkpoint, episodes=None, rounds=None):
    """Phase-2 greedy decentralized execution of a saved parameter set."""
    env = cfg.make_env()
    expect = {
        "protocol": cfg.protocol,
        "obs_dim": env.obs_dim,
        "n_agents": env.n_agents,
        "n_actions": env.n_actions,
    }
    params, _ = persist.load_checkpoint(checkpoint, expect)
    tcfg = cfg.training if rounds is None else replace(cfg.training, rounds_exec=rounds)
    return tr.evaluate(params, env, tcfg, episodes)


# ---------------------------------------------------------------------------
# trace analysis


def recompute_cems(record: dict, threshold: float):
    from .metrics import compute_cems

    return compute_cems(record["success"], record["H"], record["xi"], record["C"], threshold)


def analyze_trace(records: list[dict], threshold: float) -> tuple[list[dict], float]:
    """Recompute IEI/SEI/TEI per record; returns the rows and the largest deviation."""
    rows, worst = [], 0.0
    for rec in records:
        iei, sei, tei = recompute_cems(rec, threshold)
        dev = max(abs(iei - rec["IEI"]), abs(sei - rec["SEI"]))
        if (tei is None) != (rec["TEI"] is None):
            dev = float("inf")
        elif tei is not None:
            dev = max(dev, abs(tei - rec["TEI"]))
        worst = max(worst, dev)
        rows.append({"epoch": rec["epoch"], "IEI": iei, "SEI": sei, "TEI": tei, "deviation": dev})
    return rows, worst


def convergence_epoch(records: list[dict], metric: str, window: int = 50, tol: float = 0.05):
    """First epoch from which ``window`` consecutive values stay within ``tol`` of the final value."""
    values = [r.get(metric) for r in records]
    if not values or values[-1] is None:
        return None
    final = values[-1]
    band = tol * abs(final)
    ok = [v is not None and abs(v - final) <= band for v in values]
    run = 0
    # scan backwards so each position knows how long its in-band streak is
    streak = [0] * len(ok)
    for i in range(len(ok) - 1, -1, -1):
        run = run + 1 if ok[i] else 0
        streak[i] = run
    for i, s in enumerate(streak):
        if s >= window:
            return records[i]["epoch"]
    return None


def compare_rows(runs: list[tuple[str, list[dict]]], window: int = 50) -> list[dict]:
    rows = []
    for label, records in runs:
        last = records[-1] if records else {}
        rows.append(
            {
                "label": label,
                "success_epoch": convergence_epoch(records, "success", window),
                "success_final": last.get("success"),
                "tei_epoch": convergence_epoch(records, "TEI", window),
                "tei_final": last.get("TEI"),
            }
        )
    return rows


def format_grid(rows: list[dict]) -> str:
    def cell(v, fmt):
        return "-" if v is None else format(v, fmt)

    header = f"{'run':<24} {'S conv':>8} {'S final':>10} {'TEI conv':>9} {'TEI final':>12}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(
            f"{r['label']:<24} {cell(r['success_epoch'], 'd'):>8} {cell(r['success_final'], '.4f'):>10} "
            f"{cell(r['tei_epoch'], 'd'):>9} {cell(r['tei_final'], '.6g'):>12}"
        )
    return "\n".join(lines)

import json

import numpy as np
import pytest
import yaml

from mcomm import experiment as xp
from mcomm import persist
from mcomm import protocol as pr
from mcomm.charts import render_chart
from mcomm.metrics import EpochStats


def write_cfg(path, data):
    path.write_text(yaml.safe_dump(data))
    return path


def record(epoch, tei=0.01, **kw):
    stats = EpochStats(epoch, 0.5, 1.2, 0.3, 40, 2.4, 0.6, tei)
    losses = {"la": 0.1, "lQ": 0.9, "Lt": 0.55, "wIEI": None, "wSEI": None}
    rec = persist.trace_record(stats, losses)
    rec.update(kw)
    return rec


def test_minimal_config_gets_reference_defaults(tmp_path):
    cfg = persist.load_config(write_cfg(tmp_path / "c.yaml", {"environment": {"kind": "toy_sum"}}))
    t = cfg.training
    assert (t.eps, t.threshold, t.beta, t.alpha, t.lambda_min, t.lambda_max) == (1e-10, 0.05, 0.5, 0.01, 1e-5, 5e-3)
    assert cfg.env_kind == "toy_sum" and cfg.protocol == pr.ProtocolSpec()


def test_config_reports_every_violation(tmp_path):
    data = {
        "foo": 1,
        "environment": {"kind": "traffic_junction", "grid_dim": 6},
        "protocol": {"topology": "ring", "bar": 2},
        "training": {"lambda_min": 0.2, "lambda_max": 0.1, "lr": "fast"},
    }
    with pytest.raises(persist.ConfigErrors) as exc:
        persist.load_config(write_cfg(tmp_path / "c.yaml", data))
    text = str(exc.value)
    assert "foo: unknown key" in text and "protocol.bar: unknown key" in text
    assert "training.lr" in text
    # type errors stop before the cross-field pass; rerun with the types fixed
    data["training"]["lr"] = 0.1
    data.pop("foo")
    data["protocol"].pop("bar")
    with pytest.raises(persist.ConfigErrors) as exc:
        persist.load_config(write_cfg(tmp_path / "c.yaml", data))
    errs = exc.value.errors
    assert any(e.startswith("environment.grid_dim") for e in errs)
    assert any(e.startswith("protocol.topology") for e in errs)
    assert any("0.2" in e and "0.1" in e for e in errs if e.startswith("training.lambda_min"))


def test_config_snapshot_round_trips(tmp_path):
    data = {"label": "x", "environment": {"kind": "toy_sum", "n_agents": 2}, "training": {"grad_clip": 2.0}}
    cfg = persist.load_config(write_cfg(tmp_path / "c.yaml", data))
    persist.dump_config(cfg, tmp_path / "snap.yaml")
    again = persist.load_config(tmp_path / "snap.yaml")
    assert again.protocol == cfg.protocol and again.training == cfg.training
    assert again.env_params["n_agents"] == 2
    persist.dump_config(again, tmp_path / "snap2.yaml")
    assert (tmp_path / "snap.yaml").read_bytes() == (tmp_path / "snap2.yaml").read_bytes()


def test_trace_round_trip_and_null_tei(tmp_path):
    path = tmp_path / "t.jsonl"
    recs = [record(0), record(1, tei=None), record(2)]
    for r in recs:
        persist.append_trace(r, path)
    lines = path.read_text().splitlines()
    assert len(lines) == 3
    assert json.loads(lines[1])["TEI"] is None and '"TEI": null' in lines[1]
    back = persist.read_trace(path)
    assert back == recs
    assert [r["epoch"] for r in back] == [0, 1, 2]


def test_append_rejects_incomplete_record(tmp_path):
    with pytest.raises(ValueError):
        persist.append_trace({"epoch": 0}, tmp_path / "t.jsonl")


def test_csv_export(tmp_path):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    out, errs = persist.export_csv(empty)
    assert out.read_text().splitlines() == [",".join(persist.CSV_COLUMNS)] and errs == []

    one = tmp_path / "one.jsonl"
    persist.append_trace(record(0, tei=None), one)
    out, _ = persist.export_csv(one)
    lines = out.read_text().splitlines()
    assert len(lines) == 2 and lines[1].split(",")[7] == ""


def test_csv_reimport_and_malformed_lines(tmp_path):
    path = tmp_path / "t.jsonl"
    rng = np.random.default_rng(0)
    for e in range(5):
        persist.append_trace(record(e, H=float(rng.random()), xi=float(rng.normal()) / 3), path)
    with open(path, "a") as fh:
        fh.write("{not json\n")
    persist.append_trace(record(5), path)
    out, errs = persist.export_csv(path, tmp_path / "t.csv")
    assert len(errs) == 1 and ":6:" in errs[0]
    rows = persist.read_csv(out)
    assert len(rows) == 6
    for a, b in zip(persist.read_trace(path), rows):
        for k in persist.CSV_COLUMNS:
            if a[k] is None:
                assert b[k] is None
            else:
                assert b[k] == pytest.approx(a[k], abs=1e-9)


def test_checkpoint_byte_identical_round_trip(tmp_path):
    spec = pr.ProtocolSpec(hidden_dim=4, message_dim=4, topology="gated", aggregation="attention")
    params = pr.init_params(spec, 7, 3, 2, np.random.default_rng(1))
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    persist.save_checkpoint(a, params, 12, {"seed": 3, "next_epoch": 12})
    loaded, meta = persist.load_checkpoint(a)
    persist.save_checkpoint(b, loaded, meta["epoch"], meta["rng_state"])
    assert a.read_bytes() == b.read_bytes()
    assert json.loads(a.read_text())["format"] == "MCOMM1"
    for k in params.names():
        assert loaded[k].value.tobytes() == params[k].value.tobytes()


def test_checkpoint_mismatch_names_parameter(tmp_path):
    spec = pr.ProtocolSpec(hidden_dim=4, message_dim=4)
    params = pr.init_params(spec, 7, 3, 2, np.random.default_rng(1))
    persist.save_checkpoint(tmp_path / "c.json", params, 0)
    other = pr.ProtocolSpec(hidden_dim=6, message_dim=6)
    with pytest.raises(persist.CheckpointError) as exc:
        persist.load_checkpoint(tmp_path / "c.json", {"protocol": other})
    assert "obs.W" in str(exc.value) and "(7, 4)" in str(exc.value) and "(7, 6)" in str(exc.value)
    with pytest.raises(persist.CheckpointError, match="n_agents"):
        persist.load_checkpoint(tmp_path / "c.json", {"n_agents": 4})


def test_topology_log_recount_matches_trace(tmp_path):
    data = {
        "label": "r",
        "output_dir": str(tmp_path),
        "environment": {"kind": "traffic_junction"},
        "protocol": {"topology": "gated", "hidden_dim": 6, "message_dim": 6},
        "training": {"epochs": 3, "episodes_per_epoch": 2, "log_topology": True, "lr": 0.1},
    }
    run = xp.run_experiment(persist.load_config(write_cfg(tmp_path / "c.yaml", data)))
    topo = xp.read_topologies(run / xp.TOPOLOGY_FILE)
    for rec in persist.read_trace(run / xp.TRACE_FILE):
        count = 0
        for G in topo[rec["epoch"]]:
            G = G.reshape(-1, 5, 5)
            count += int(sum(G[b][i, j] for b in range(len(G)) for i in range(5) for j in range(5) if i != j))
        assert count == rec["C"]


def test_convergence_epoch_definition():
    recs = [{"epoch": e, "success": v} for e, v in enumerate([0.0] * 10 + [0.96] * 3 + [1.0] * 60)]
    assert xp.convergence_epoch(recs, "success") == 10
    recs[40]["success"] = 0.5
    assert xp.convergence_epoch(recs, "success") is None
    short = [{"epoch": e, "success": 1.0} for e in range(49)]
    assert xp.convergence_epoch(short, "success") is None
    assert xp.convergence_epoch([{"epoch": 0, "TEI": None}], "TEI") is None


# -- charts ----------------------------------------------------------------


def test_chart_bytes_are_deterministic(tmp_path):
    runs = [("a", [record(e, success=0.1 * e) for e in range(5)]), ("b", [record(e) for e in range(5)])]
    render_chart(runs, "success", tmp_path / "1.svg")
    render_chart(runs, "success", tmp_path / "2.svg")
    assert (tmp_path / "1.svg").read_bytes() == (tmp_path / "2.svg").read_bytes()
    svg = (tmp_path / "1.svg").read_text()
    assert ">a<" in svg and ">b<" in svg and ">epoch<" in svg


def test_chart_constant_series_is_horizontal(tmp_path, monkeypatch):
    import matplotlib.axes

    seen = []
    real = matplotlib.axes.Axes.plot

    def spy(self, *args, **kw):
        seen.append(args)
        return real(self, *args, **kw)

    monkeypatch.setattr(matplotlib.axes.Axes, "plot", spy)
    render_chart([("c", [record(e) for e in range(4)])], "H", tmp_path / "h.svg")
    ys = seen[0][1]
    assert len(set(ys)) == 1


def test_chart_all_null_series_annotated(tmp_path):
    render_chart([("n", [record(e, tei=None) for e in range(3)])], "TEI", tmp_path / "n.svg")
    assert "no data" in (tmp_path / "n.svg").read_text()


def test_chart_rejects_unknown_metric(tmp_path):
    with pytest.raises(ValueError):
        render_chart([("a", [record(0)])], "speed", tmp_path / "x.svg")

import json
import shutil

import numpy as np
import pytest
import yaml

from bisimvib.cli import main
from bisimvib.envs import column_world
from bisimvib.errors import AggregationError, ConfigurationError, UsageError
from bisimvib.harness import (
    ExperimentConfig, Pipeline, StageFailure, export_latents, principal_axes, read_csv, report, run_pipeline,
    stage_rng, write_csv,
)
from bisimvib.vib import VibConfig, VibModel

from _util import exhaustive_dataset, lookup_model

TINY = {
    "seed": 0,
    "env": {"id": "column_world", "params": {"rows": 4, "cols": 3}},
    "dqn": {"episodes": 40, "max_steps": 20},
    "dataset": {"sizes": [200, 400], "behavior_epsilon": 0.7, "max_steps": 20},
    "vib": {"sizes": [400], "prior": "hmm", "K": 4, "d": 2, "steps": 150, "batch_size": 32},
    "baseline": {"epsilon": 0.5, "model": {"hidden": 16, "min_steps": 150}},
    "eval": {"tasks": ["right_column"], "budget": 10, "episodes": 20, "metrics": ["success", "return"],
             "mean_q": True},
}
OUTPUTS = ("abstraction_sweep.csv", "evaluation.csv", "report.json", "dataset.jsonl", "partition_400.json", "vib_400.json")


def _write(tmp_path, doc, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(doc))
    return path


def _with(**changes):
    doc = json.loads(json.dumps(TINY))
    for key, value in changes.items():
        block, _, field = key.partition("__")
        if field:
            doc[block][field] = value
        elif value is None:
            doc.pop(block)
        else:
            doc[block] = value
    return doc


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    cfg = _write(root, TINY)
    assert main(["run", "--config", str(cfg), "--out", str(root / "a")]) == 0
    return root, cfg


# --- config validation --------------------------------------------------------

@pytest.mark.parametrize("doc", [
    _with(seed=None),
    _with(seed="zero"),
    _with(extra={"x": 1}),
    _with(env={"id": "pong"}),
    _with(env={"params": {}}),
    _with(dqn__tasks=["fly"]),
    _with(dataset__sizes=[]),
    _with(dataset__behavior_epsilon=2.0),
    _with(vib__sizes=[5000]),
    _with(vib__K=1),
    _with(vib__beta=-1.0),
    _with(vib__layers=3),
    _with(vib=None),  # eval without vib
    _with(eval__metrics=["regret"]),
    _with(eval__tasks=[]),
    _with(baseline__model={"depth": 2}),
    _with(artifacts={"render": "x"}),
])
def test_invalid_configs_rejected(doc):
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict(doc)


def test_config_echo_and_seed_override():
    cfg = ExperimentConfig.from_dict(TINY)
    echo = cfg.to_dict()
    assert echo["env"] == {"id": "column_world", "params": {"rows": 4, "cols": 3}}
    assert echo["vib"]["prior_kind"] == "hmm" and echo["vib"]["sizes"] == [400]
    assert echo["baseline"]["sizes"] == [200, 400]
    s7 = cfg.with_seed(7)
    assert s7.seed == 7 and s7.vib.seed == 7 and s7.dataset_seed == 7
    assert ExperimentConfig.from_dict(s7.to_dict() | {"output": "x"}).to_dict() == s7.to_dict()


def test_load_errors(tmp_path):
    with pytest.raises(ConfigurationError):
        ExperimentConfig.load(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("seed: [1,\n")
    with pytest.raises(ConfigurationError):
        ExperimentConfig.load(bad)


def test_stage_rng_independent_and_reproducible():
    a = stage_rng(0, "collect").random(3)
    assert np.array_equal(a, stage_rng(0, "collect").random(3))
    assert not np.array_equal(a, stage_rng(1, "collect").random(3))
    assert not np.array_equal(a, stage_rng(0, "evaluate").random(3))
    assert not np.array_equal(stage_rng(0, "evaluate", "x").random(3), stage_rng(0, "evaluate", "y").random(3))


def test_write_csv_rejects_non_finite(tmp_path):
    with pytest.raises(UsageError):
        write_csv(tmp_path / "x.csv", ("a",), [(float("nan"),)])


# --- pipeline -------------------------------------------------------------------

def test_run_outputs(tiny_run):
    root, _ = tiny_run
    out = root / "a"
    for name in OUTPUTS + ("timing.json", "partition_oracle.json", "policy_right_column.json",
                           "abstract_mdp_right_column.json", "dqn_right_column.json"):
        assert (out / name).exists(), name
    sweep = read_csv(out / "abstraction_sweep.csv")
    assert list(sweep[0]) == ["method", "size", "seed", "purity", "abstraction_size"]
    assert {(r["method"], r["size"]) for r in sweep} == {("baseline", "200"), ("baseline", "400"), ("vib", "400")}
    ev = read_csv(out / "evaluation.csv")
    assert list(ev[0]) == ["task", "seed", "metric", "value", "stddev"]
    names = {r["metric"] for r in ev}
    assert {"plan_success@400", "random_success", "dqn_return", "mean_q_return@400"} <= names
    rep = json.loads((out / "report.json").read_text())
    assert all(s["status"] == "ok" for s in rep["stages"].values())
    assert rep["stages"]["baseline"]["metrics"]["oracle"]["blocks"] == 3
    for text in (out / "abstraction_sweep.csv").read_text(), (out / "evaluation.csv").read_text():
        assert "nan" not in text.lower() and "inf" not in text.lower()


def test_rerun_is_byte_identical(tiny_run):
    root, cfg = tiny_run
    assert main(["run", "--config", str(cfg), "--out", str(root / "b")]) == 0
    for name in OUTPUTS:
        assert (root / "a" / name).read_bytes() == (root / "b" / name).read_bytes(), name


def test_seed_override_changes_outputs(tiny_run):
    root, cfg = tiny_run
    assert main(["run", "--config", str(cfg), "--seed", "1", "--out", str(root / "s1")]) == 0
    rep = json.loads((root / "s1" / "report.json").read_text())
    assert rep["seed"] == 1
    assert (root / "a" / "dataset.jsonl").read_bytes() != (root / "s1" / "dataset.jsonl").read_bytes()


def test_stagewise_cli_matches_full_run(tiny_run):
    root, cfg = tiny_run
    out = root / "stagewise"
    for stage in ("train-dqn", "collect", "train-vib", "baseline", "extract", "plan", "evaluate"):
        assert main([stage, "--config", str(cfg), "--out", str(out)]) == 0
    for name in OUTPUTS:
        if name != "report.json":
            assert (root / "a" / name).read_bytes() == (out / name).read_bytes(), name
    rep = json.loads((out / "report.json").read_text())
    assert len(rep["stages"]) == 7


def test_skipped_stages_use_earlier_artifacts(tiny_run, tmp_path):
    root, _ = tiny_run
    doc = _with(artifacts={"train-dqn": str(root / "a"), "collect": str(root / "a" / "dataset.jsonl")})
    rep = run_pipeline(doc, tmp_path / "reuse")
    assert rep.stages["train-dqn"]["status"] == "skipped"
    assert not (tmp_path / "reuse" / "dataset.jsonl").exists()
    assert (root / "a" / "abstraction_sweep.csv").read_bytes() == (tmp_path / "reuse" / "abstraction_sweep.csv").read_bytes()


def test_missing_artifact_is_configuration_error(tmp_path):
    doc = _with(artifacts={"train-dqn": str(tmp_path / "nowhere")})
    with pytest.raises(ConfigurationError):
        run_pipeline(doc, tmp_path / "out")
    cfg = _write(tmp_path, doc)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "out2")]) == 1


def test_stage_out_of_order_is_configuration_error(tmp_path):
    cfg = _write(tmp_path, TINY)
    assert main(["collect", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1


def test_stage_failure_exit_code_and_record(tmp_path):
    doc = _with(dqn__lr=float("nan"))
    cfg = _write(tmp_path, doc)
    out = tmp_path / "fail"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 2
    rep = json.loads((out / "report.json").read_text())
    assert rep["stages"]["train-dqn"]["status"] == "failed"
    assert "TrainingError" in rep["stages"]["train-dqn"]["error"]
    with pytest.raises(StageFailure) as info:
        run_pipeline(doc, tmp_path / "fail2")
    assert info.value.stage == "train-dqn" and info.value.report.failed


def test_cli_argument_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["run"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["fly"])
    assert exc.value.code == 1
    cfg = _write(tmp_path, _with(seed=None))
    assert main(["run", "--config", str(cfg)]) == 1
    assert "seed" in capsys.readouterr().err


# --- report ------------------------------------------------------------------------

def test_report_aggregates_seeds(tiny_run, tmp_path):
    root, _ = tiny_run
    rows = report([root / "a", root / "s1"], tmp_path / "agg.csv")
    by = {(r["metric"], r["task"], r["size"]): r for r in rows}
    vib = by[("vib_purity", "", "400")]
    assert vib["n"] == 2
    vals = [float(r["purity"]) for d in ("a", "s1") for r in read_csv(root / d / "abstraction_sweep.csv") if r["method"] == "vib"]
    assert vib["mean"] == pytest.approx(np.mean(vals)) and vib["std"] == pytest.approx(np.std(vals))
    assert ("plan_success", "right_column", "400") in by
    assert (tmp_path / "agg.json").exists() and (tmp_path / "agg.txt").exists()


def test_report_single_run_std_zero(tiny_run, tmp_path):
    root, _ = tiny_run
    rows = report([root / "a"], tmp_path / "one.csv")
    assert all(r["std"] == 0.0 and r["n"] == 1 for r in rows)


def test_report_mismatched_configs(tiny_run, tmp_path):
    root, _ = tiny_run
    other = tmp_path / "other"
    shutil.copytree(root / "a", other)
    rep = json.loads((other / "report.json").read_text())
    rep["config"]["env"]["id"] = "symbolic_shapes"
    (other / "report.json").write_text(json.dumps(rep))
    with pytest.raises(AggregationError, match="env.id"):
        report([root / "a", other], tmp_path / "bad.csv")
    assert main(["report", str(root / "a"), str(other), "--out", str(tmp_path / "bad2.csv")]) == 1
    assert main(["report", str(root / "a"), "--out", str(tmp_path / "ok.csv")]) == 0


# --- latents -------------------------------------------------------------------------

def test_export_latents_column_world(tmp_path):
    env = column_world()
    data = exhaustive_dataset(env)
    model = lookup_model(env, env.labels, 6)
    model.mean_head.W.values[...] += np.random.default_rng(0).normal(scale=0.1, size=model.mean_head.W.shape)
    n_pts, n_cent = export_latents(model, data, tmp_path / "lat.csv", env.labels)
    assert (n_pts, n_cent) == (90, 6)
    rows = read_csv(tmp_path / "lat.csv")
    points = [r for r in rows if r["kind"] == "point"]
    assert len(points) == 90 and sum(r["kind"] == "centroid" for r in rows) == 6
    assert all(int(r["label"]) == env.labels[int(r["state"])] for r in points)


def test_export_latents_d2_is_rotation(tmp_path):
    env = column_world(3, 3)
    data = exhaustive_dataset(env)
    model = VibModel(env.feature_dim, 4, 4, VibConfig(K=2, d=2, hidden=()), np.random.default_rng(0))
    export_latents(model, data, tmp_path / "lat.csv")
    z = model.encode(env.features).mean
    pts = np.array([[float(r["pc1"]), float(r["pc2"])] for r in read_csv(tmp_path / "lat.csv") if r["kind"] == "point"])
    center, axes = principal_axes(model.encode(data.s_t).mean)
    assert np.allclose(axes.T @ axes, np.eye(2))
    assert np.allclose(pts @ axes.T + center, z, atol=1e-8)  # reconstruction error 0


def test_export_latents_needs_two_dims(tmp_path):
    env = column_world(2, 2)
    model = VibModel(env.feature_dim, 4, 4, VibConfig(K=2, d=1, hidden=()), np.random.default_rng(0))
    with pytest.raises(UsageError):
        export_latents(model, exhaustive_dataset(env), tmp_path / "x.csv")


def test_cli_export_latents(tiny_run):
    root, cfg = tiny_run
    assert main(["export-latents", "--config", str(cfg), "--out", str(root / "a")]) == 0
    rows = read_csv(root / "a" / "latents_400.csv")
    assert sum(r["kind"] == "centroid" for r in rows) == 4

"""Config-driven experiment pipeline: DQN, dataset, VIB and baseline, extraction, planning, evaluation.

Each stage reads and writes files in the run's output directory, so a stage
can be run alone once its inputs exist, or skipped by pointing
``artifacts.<stage>`` at a directory (or file) written by an earlier run.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
import traceback
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import abstraction as ab
from . import baseline as bl
from .dqn import DQNConfig, QNetwork, TransitionDataset, collect_dataset, config_dict, train_dqn
from .envs import goal_mask, make_env
from .errors import AggregationError, ConfigurationError, GoalNotRepresented, UsageError
from .vib import VibConfig, VibModel, train_vib

log = logging.getLogger(__name__)

STAGES = ("train-dqn", "collect", "train-vib", "baseline", "extract", "plan", "evaluate")
_STAGE_CODE = {name: i + 1 for i, name in enumerate(STAGES)}


class StageFailure(RuntimeError):
    """A pipeline stage raised; ``report`` holds the partial results."""

    def __init__(self, stage, cause, report):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage, self.cause, self.report = stage, cause, report


def stage_rng(seed, stage, *extra):
    """Independent, reproducible generator per (seed, stage, extra keys)."""
    keys = [int(seed), _STAGE_CODE[stage]]
    for e in extra:
        keys.append(e if isinstance(e, int) else sum(ord(ch) * 31 ** i for i, ch in enumerate(str(e))) % 2**31)
    return np.random.default_rng(keys)


def _strict(cls, block, where):
    block = dict(block or {})
    unknown = set(block) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigurationError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**block)
    except TypeError as exc:
        raise ConfigurationError(f"{where}: {exc}") from None


def _int_list(values, where):
    if isinstance(values, int):
        values = [values]
    if not isinstance(values, (list, tuple)) or not values:
        raise ConfigurationError(f"{where} must be a nonempty list of integers")
    out = []
    for v in values:
        if not isinstance(v, int) or isinstance(v, bool) or v < 1:
            raise ConfigurationError(f"{where}: {v!r} is not a positive integer")
        out.append(v)
    return tuple(sorted(set(out)))


@dataclass
class DatasetConfig:
    sizes: tuple = (20000,)
    behavior_epsilon: float = 0.1
    max_steps: int = 50
    seed: int | None = None

    def __post_init__(self):
        self.sizes = _int_list(self.sizes, "dataset.sizes")
        if not 0.0 <= self.behavior_epsilon <= 1.0:
            raise ConfigurationError("dataset.behavior_epsilon must lie in [0, 1]")
        if self.max_steps < 1:
            raise ConfigurationError("dataset.max_steps must be >= 1")


@dataclass
class BaselineConfig:
    epsilon: float = 0.5
    sizes: tuple | None = None
    holdout: float = 0.1
    oracle: bool = True
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigurationError("baseline.epsilon must be >= 0")
        if self.sizes is not None:
            self.sizes = _int_list(self.sizes, "baseline.sizes")
        if not 0.0 < self.holdout < 1.0:
            raise ConfigurationError("baseline.holdout must lie in (0, 1)")
        self.model = _strict(bl.ForwardModelConfig, self.model, "baseline.model")


@dataclass
class EvalConfig:
    tasks: tuple = ()
    budget: int = 20
    episodes: int = 100
    temperature: float = 0.1
    metrics: tuple = ("success",)
    projection: str = "any"
    mean_q: bool = False

    def __post_init__(self):
        self.tasks = tuple(self.tasks) if not isinstance(self.tasks, str) else (self.tasks,)
        if not self.tasks:
            raise ConfigurationError("eval.tasks must name at least one task")
        if self.budget < 0 or self.episodes < 1:
            raise ConfigurationError("eval.budget must be >= 0 and eval.episodes >= 1")
        if not self.temperature > 0:
            raise ConfigurationError("eval.temperature must be positive")
        self.metrics = (self.metrics,) if isinstance(self.metrics, str) else tuple(self.metrics)
        if not self.metrics or set(self.metrics) - {"success", "return"}:
            raise ConfigurationError("eval.metrics must list 'success' and/or 'return'")
        if self.projection not in ("any", "mean"):
            raise ConfigurationError("eval.projection must be 'any' or 'mean'")


@dataclass
class ExperimentConfig:
    env_id: str
    env_params: dict
    seed: int
    output: str
    dqn: DQNConfig
    dqn_tasks: tuple
    dataset: DatasetConfig
    vib: VibConfig | None = None
    vib_sizes: tuple = ()
    baseline: BaselineConfig | None = None
    eval: EvalConfig | None = None
    artifacts: dict = field(default_factory=dict)

    TOP_KEYS = ("env", "seed", "output", "dqn", "dataset", "vib", "baseline", "eval", "artifacts")

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict):
            raise ConfigurationError("config must be a mapping")
        unknown = set(doc) - set(cls.TOP_KEYS)
        if unknown:
            raise ConfigurationError(f"unknown top-level keys {sorted(unknown)}")
        if "seed" not in doc or not isinstance(doc["seed"], int) or isinstance(doc["seed"], bool):
            raise ConfigurationError("an integer 'seed' is required")
        env = doc.get("env")
        if not isinstance(env, dict) or "id" not in env:
            raise ConfigurationError("env block with an 'id' is required")
        if set(env) - {"id", "params"}:
            raise ConfigurationError(f"env: unknown keys {sorted(set(env) - {'id', 'params'})}")
        env_params = dict(env.get("params") or {})
        if "grid" in env_params:
            env_params["grid"] = tuple(env_params["grid"])
        probe = make_env(env["id"], **env_params)
        for block in ("dqn", "dataset"):
            if block not in doc:
                raise ConfigurationError(f"{block} block is required")
        dqn_block = dict(doc["dqn"] or {})
        dqn_tasks = dqn_block.pop("tasks", None) or [probe.task]
        if isinstance(dqn_tasks, str):
            dqn_tasks = [dqn_tasks]
        if "hidden" in dqn_block:
            dqn_block["hidden"] = tuple(dqn_block["hidden"])
        dataset = _strict(DatasetConfig, doc["dataset"], "dataset")
        vib, vib_sizes = None, ()
        if doc.get("vib") is not None:
            vib_block = dict(doc["vib"])
            vib_sizes = vib_block.pop("sizes", None)
            vib_sizes = _int_list(vib_sizes, "vib.sizes") if vib_sizes is not None else (max(dataset.sizes),)
            if "prior" in vib_block:
                vib_block["prior_kind"] = vib_block.pop("prior")
            if "hidden" in vib_block:
                vib_block["hidden"] = tuple(vib_block["hidden"])
            vib_block["seed"] = doc["seed"]
            vib = _strict(VibConfig, vib_block, "vib")
        baseline = _strict(BaselineConfig, doc["baseline"], "baseline") if doc.get("baseline") is not None else None
        if baseline is not None and baseline.sizes is None:
            baseline.sizes = dataset.sizes
        ev = _strict(EvalConfig, doc["eval"], "eval") if doc.get("eval") is not None else None
        if ev is not None and vib is None:
            raise ConfigurationError("eval needs a vib block (plans come from the VIB abstraction)")
        n_max = max(dataset.sizes)
        for name, sizes in (("vib.sizes", vib_sizes), ("baseline.sizes", baseline.sizes if baseline else ())):
            if any(s > n_max for s in sizes):
                raise ConfigurationError(f"{name} exceeds the largest dataset size {n_max}")
        for task in tuple(dqn_tasks) + (ev.tasks if ev else ()):
            goal_mask(probe, task)  # raises ConfigurationError for unknown tasks
        artifacts = dict(doc.get("artifacts") or {})
        if set(artifacts) - set(STAGES):
            raise ConfigurationError(f"artifacts: unknown stages {sorted(set(artifacts) - set(STAGES))}")
        return cls(
            env_id=env["id"], env_params=env_params, seed=doc["seed"], output=str(doc.get("output", "runs/run")),
            dqn=_strict(DQNConfig, dqn_block, "dqn"), dqn_tasks=tuple(dqn_tasks), dataset=dataset,
            vib=vib, vib_sizes=vib_sizes, baseline=baseline, eval=ev, artifacts=artifacts,
        )

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                doc = yaml.safe_load(fh)
        except FileNotFoundError:
            raise ConfigurationError(f"config file {path} not found") from None
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"config file {path} is not valid YAML: {exc}") from None
        return cls.from_dict(doc)

    def with_seed(self, seed):
        vib = replace(self.vib, seed=seed) if self.vib is not None else None
        return replace(self, seed=int(seed), vib=vib)

    @property
    def dataset_seed(self):
        return self.seed if self.dataset.seed is None else self.dataset.seed

    def to_dict(self):
        """Canonical echo of the resolved configuration."""
        params = {k: list(v) if isinstance(v, tuple) else v for k, v in self.env_params.items()}
        doc = {
            "env": {"id": self.env_id, "params": params},
            "seed": self.seed,
            "dqn": dict(config_dict(self.dqn), tasks=list(self.dqn_tasks)),
            "dataset": {"sizes": list(self.dataset.sizes), "behavior_epsilon": self.dataset.behavior_epsilon,
                        "max_steps": self.dataset.max_steps, "seed": self.dataset.seed},
        }
        if self.vib is not None:
            doc["vib"] = dict(self.vib.to_dict(), sizes=list(self.vib_sizes))
            del doc["vib"]["seed"]  # always the run seed
        if self.baseline is not None:
            b = self.baseline
            doc["baseline"] = {"epsilon": b.epsilon, "sizes": list(b.sizes), "holdout": b.holdout,
                               "oracle": b.oracle, "model": bl.config_dict(b.model)}
        if self.eval is not None:
            e = self.eval
            doc["eval"] = {"tasks": list(e.tasks), "budget": e.budget, "episodes": e.episodes,
                           "temperature": e.temperature, "metrics": list(e.metrics), "projection": e.projection,
                           "mean_q": e.mean_q}
        return doc


@dataclass
class RunReport:
    config: dict
    seed: int
    stages: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)

    @property
    def failed(self):
        return any(s.get("status") == "failed" for s in self.stages.values())

    def to_dict(self):
        return {"seed": self.seed, "config": self.config, "stages": self.stages, "artifacts": self.artifacts}


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        if not math.isfinite(x):
            raise UsageError(f"refusing to write non-finite value {x}")
        return format(float(x), ".10g")
    return str(x)


def write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    Path(path).write_text(buf.getvalue())


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _dump(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        if not math.isfinite(x):
            return None
        return x
    return obj


class Pipeline:
    """One run: a resolved config, an output directory and the stage implementations."""

    def __init__(self, config: ExperimentConfig, out_dir=None):
        self.config = config
        self.out = Path(out_dir if out_dir is not None else config.output)
        self.out.mkdir(parents=True, exist_ok=True)
        self.report = RunReport(config.to_dict(), config.seed)
        self._envs = {}
        previous = self.out / "report.json"
        if previous.exists():
            # Stages run one at a time accumulate into one report.
            doc = json.loads(previous.read_text())
            if doc.get("config") == _json_safe(self.report.config):
                self.report.stages.update(doc.get("stages", {}))
                self.report.artifacts.update(doc.get("artifacts", {}))

    # --- helpers -------------------------------------------------------
    def env(self, task=None):
        task = task or self.config.dqn_tasks[0]
        if task not in self._envs:
            params = dict(self.config.env_params)
            if self.config.env_id == "symbolic_shapes":
                params["task"] = task
            self._envs[task] = make_env(self.config.env_id, **params)
        return self._envs[task]

    def path(self, stage, name, must_exist=False):
        """Where ``name`` lives: the stage's artifact override if given, else the output dir."""
        src = self.config.artifacts.get(stage)
        if src is not None:
            p = Path(src)
            p = p / name if p.is_dir() else p
            if not p.exists():
                raise ConfigurationError(f"artifact {p} for skipped stage {stage} does not exist")
            return p
        p = self.out / name
        if must_exist and not p.exists():
            raise ConfigurationError(
                f"{p} is missing; run stage {stage} first or set artifacts.{stage} to an earlier output"
            )
        return p

    def skipped(self, stage):
        return stage in self.config.artifacts

    def _record(self, stage, key, path):
        # relative to the run directory, so reports do not depend on where the run lives
        path = Path(path)
        if path.is_relative_to(self.out):
            path = path.relative_to(self.out)
        self.report.artifacts.setdefault(stage, {})[key] = str(path)

    def dataset(self, size=None):
        ds = TransitionDataset.load(self.path("collect", "dataset.jsonl", must_exist=True))
        if size is not None:
            if size > len(ds):
                raise ConfigurationError(f"requested {size} transitions but the dataset holds {len(ds)}")
            ds = ds.subset(np.arange(size))
        return ds

    def qnet(self, task):
        return QNetwork.load(self.path("train-dqn", f"dqn_{task}.json", must_exist=True))

    def vib_model(self, size):
        return VibModel.load(self.path("train-vib", f"vib_{size}.json", must_exist=True))

    @property
    def plan_size(self):
        return max(self.config.vib_sizes)

    # --- stages --------------------------------------------------------
    def stage_train_dqn(self):
        metrics = {}
        for i, task in enumerate(self.config.dqn_tasks):
            q = train_dqn(self.env(task), self.config.dqn, stage_rng(self.config.seed, "train-dqn", i))
            p = self.out / f"dqn_{task}.json"
            q.save(p)
            self._record("train-dqn", task, p)
            trace = np.asarray(q.loss_trace)
            tenth = max(1, trace.size // 10)
            metrics[task] = {"updates": int(trace.size), "td_loss_first": float(trace[:tenth].mean()),
                             "td_loss_last": float(trace[-tenth:].mean())}
        return metrics

    def stage_collect(self):
        cfg = self.config.dataset
        qnets = [self.qnet(t) for t in self.config.dqn_tasks]
        env = self.env()
        ds = collect_dataset(env, qnets[0], max(cfg.sizes), cfg.behavior_epsilon,
                             stage_rng(self.config.dataset_seed, "collect"), label_qnets=qnets,
                             max_steps=cfg.max_steps, seed=self.config.dataset_seed)
        ds.meta["label_tasks"] = list(self.config.dqn_tasks)
        p = self.out / "dataset.jsonl"
        ds.save(p)
        self._record("collect", "dataset", p)
        return {"transitions": len(ds), "distinct_states": int(np.unique(ds.s_id).size),
                "goal_transitions": int(ds.done.sum())}

    def stage_train_vib(self):
        metrics = {}
        full = self.dataset()
        for size in self.config.vib_sizes:
            ds = full.subset(np.arange(size))
            model = train_vib(ds, self.config.vib, stage_rng(self.config.seed, "train-vib", size))
            p = self.out / f"vib_{size}.json"
            model.save(p)
            self._record("train-vib", size, p)
            trace = np.asarray(model.loss_trace)
            tail = trace[-max(1, len(trace) // 10):]
            metrics[size] = {"loss_last": float(tail[:, 0].mean()), "prediction_last": float(tail[:, 1].mean()),
                             "regularizer_last": float(tail[:, 2].mean())}
        return metrics

    def stage_baseline(self):
        cfg = self.config.baseline
        env = self.env()
        metrics = {}
        if cfg.oracle:
            part = bl.greedy_approx_bisimulation(bl.OracleModel(env), env.n_states, env.n_actions, cfg.epsilon)
            part.save(self.out / "partition_oracle.json")
            self._record("baseline", "oracle", self.out / "partition_oracle.json")
            size, pur = bl.partition_metrics(part, env.labels)
            metrics["oracle"] = {"blocks": size, "purity": pur}
        full = self.dataset()
        model_cfg = replace(cfg.model, n_states=env.n_states)
        for size in cfg.sizes:
            rng = stage_rng(self.config.seed, "baseline", size)
            train, held = bl.holdout_split(full.subset(np.arange(size)), cfg.holdout, rng)
            fm = bl.train_forward_model(train, model_cfg, rng)
            part = bl.greedy_approx_bisimulation(fm, env.n_states, env.n_actions, cfg.epsilon)
            p = self.out / f"partition_{size}.json"
            part.save(p)
            self._record("baseline", size, p)
            n_blocks, pur = bl.partition_metrics(part, env.labels)
            metrics[size] = {"blocks": n_blocks, "purity": pur, "heldout_accuracy": bl.next_state_accuracy(fm, held)}
        return metrics

    def stage_extract(self):
        env = self.env()
        rows, metrics = [], {}
        for size in self.config.vib_sizes if self.config.vib else ():
            model = self.vib_model(size)
            amap = ab.abstraction_map(model, env)
            pur = ab.purity(amap.assign, env.labels)
            n_used = ab.effective_num_states(amap.assign)
            p = self.out / f"abstraction_{size}.json"
            _dump(p, {"K": amap.K, "assign": amap.assign.tolist(), "purity": pur, "abstraction_size": n_used})
            self._record("extract", size, p)
            rows.append(("vib", size, self.config.seed, pur, n_used))
            metrics[size] = {"purity": pur, "abstraction_size": n_used}
        if self.config.baseline is not None:
            for size in self.config.baseline.sizes:
                part = bl.Partition.load(self.path("baseline", f"partition_{size}.json", must_exist=True))
                n_blocks, pur = bl.partition_metrics(part, env.labels)
                rows.append(("baseline", size, self.config.seed, pur, n_blocks))
        rows.sort(key=lambda r: (r[0], r[1]))
        write_csv(self.out / "abstraction_sweep.csv", ("method", "size", "seed", "purity", "abstraction_size"), rows)
        self._record("extract", "sweep", self.out / "abstraction_sweep.csv")
        return metrics

    def stage_plan(self):
        ev = self.config.eval
        size = self.plan_size
        model = self.vib_model(size)
        ds = self.dataset(size)
        metrics = {}
        for task in ev.tasks:
            env = self.env(task)
            try:
                mdp, q, pi = ab.plan_for_goal(model, ds, goal_mask(env, task), env.gamma,
                                              temperature=ev.temperature, mode=ev.projection)
            except GoalNotRepresented as exc:
                metrics[task] = {"status": "goal_not_represented", "error": str(exc)}
                continue
            mdp.save(self.out / f"abstract_mdp_{task}.json")
            _dump(self.out / f"policy_{task}.json", {"task": task, "size": size, "temperature": ev.temperature,
                                                     "policy": pi.tolist(), "q": q.values.tolist(),
                                                     "iterations": q.iterations, "converged": q.converged})
            self._record("plan", task, self.out / f"policy_{task}.json")
            metrics[task] = {"status": "ok", "iterations": q.iterations, "converged": q.converged,
                             "rewarded_pairs": int(np.count_nonzero(mdp.reward))}
        return metrics

    def stage_evaluate(self):
        ev = self.config.eval
        size = self.plan_size
        model = self.vib_model(size)
        seed = self.config.seed
        rows = []
        ds = None
        for task in ev.tasks:
            env = self.env(task)
            goal = goal_mask(env, task)
            policies = []
            policy_path = self.path("plan", f"policy_{task}.json")
            if policy_path.exists():
                pi = np.array(json.loads(policy_path.read_text())["policy"])
                policies.append((f"plan_{{}}@{size}", pi, model))
            policies.append(("random_{}", ab.random_policy(env.n_actions), None))
            if task in self.config.dqn_tasks:
                policies.append(("dqn_{}", ab.ground_greedy_policy(self.qnet(task)), None))
                if ev.mean_q:
                    ds = ds if ds is not None else self.dataset(size)
                    mq = ab.mean_q(model, ds, task=self.config.dqn_tasks.index(task))
                    policies.append((f"mean_q_{{}}@{size}", ab.greedy_policy(mq), model))
            for metric in ev.metrics:
                for name, policy, mdl in policies:
                    # equal seeds per (task, metric) pair the episodes across policies
                    rng = stage_rng(seed, "evaluate", f"{task}/{metric}")
                    r = ab.evaluate_policy(env, mdl, policy, ev.budget, ev.episodes, rng, goal=goal, metric=metric)
                    rows.append((task, seed, name.format(metric), r.mean, r.std))
        write_csv(self.out / "evaluation.csv", ("task", "seed", "metric", "value", "stddev"), rows)
        self._record("evaluate", "evaluation", self.out / "evaluation.csv")
        return {f"{t}:{m}": v for t, _, m, v, _ in rows}

    # --- driver --------------------------------------------------------
    def enabled(self, stage):
        c = self.config
        return {
            "train-vib": c.vib is not None,
            "baseline": c.baseline is not None,
            "plan": c.eval is not None,
            "evaluate": c.eval is not None,
        }.get(stage, True)

    def run_stage(self, stage):
        if stage not in STAGES:
            raise UsageError(f"unknown stage {stage!r}")
        if not self.enabled(stage):
            raise ConfigurationError(f"stage {stage} needs its config block")
        fn = getattr(self, "stage_" + stage.replace("-", "_"))
        t0 = time.perf_counter()
        log.info("stage %s", stage)
        try:
            metrics = fn()
        except (ConfigurationError, UsageError):
            raise
        except Exception as exc:  # noqa: BLE001 - recorded, then re-raised as StageFailure
            self.report.stages[stage] = {"status": "failed", "error": f"{type(exc).__name__}: {exc}",
                                         "traceback": traceback.format_exc(limit=5)}
            self.report.timing[stage] = time.perf_counter() - t0
            self.write_report()
            raise StageFailure(stage, exc, self.report) from exc
        self.report.stages[stage] = {"status": "ok", "metrics": _json_safe(metrics)}
        self.report.timing[stage] = time.perf_counter() - t0
        return metrics

    def write_report(self):
        _dump(self.out / "report.json", _json_safe(self.report.to_dict()))
        _dump(self.out / "timing.json", {"seconds": self.report.timing,
                                         "total": float(sum(self.report.timing.values()))})

    def run(self, stages=STAGES):
        for stage in stages:
            if not self.enabled(stage):
                continue
            if self.skipped(stage) and stage in ("train-dqn", "collect", "train-vib", "baseline", "plan"):
                self.report.stages[stage] = {"status": "skipped", "source": str(self.config.artifacts[stage])}
                continue
            self.run_stage(stage)
        self.write_report()
        return self.report


def run_pipeline(config, out_dir=None, stages=STAGES):
    """Run ``stages`` in order and return the RunReport.

    ``config`` is an ExperimentConfig, a dict or a YAML path.  A failing
    stage raises StageFailure after writing report.json with the partial
    results and the cause.
    """
    if isinstance(config, (str, Path)):
        config = ExperimentConfig.load(config)
    elif isinstance(config, dict):
        config = ExperimentConfig.from_dict(config)
    return Pipeline(config, out_dir).run(stages)


# --- latents --------------------------------------------------------------


def principal_axes(points, n=2):
    """Top-``n`` covariance eigenvectors (columns), signs fixed so the largest-magnitude entry is positive."""
    x = np.asarray(points, dtype=np.float64)
    center = x.mean(axis=0)
    cov = np.cov(x - center, rowvar=False, bias=True).reshape(x.shape[1], x.shape[1])
    vals, vecs = np.linalg.eigh(cov)
    axes = vecs[:, ::-1][:, :n]
    flip = np.sign(axes[np.argmax(np.abs(axes), axis=0), np.arange(n)])
    flip[flip == 0] = 1.0
    return center, axes * flip


def export_latents(model, dataset, out_path, labels=None):
    """PCA of encoder means over ``dataset``; one row per ground state plus one per component mean.

    Columns: kind (point|centroid), state, label, component, pc1, pc2.
    ``labels`` maps state id to ground-truth label.
    """
    if model.config.d < 2:
        raise UsageError("latent export needs at least 2 latent dimensions")
    center, axes = principal_axes(model.encode(dataset.s_t).mean)
    ids = np.unique(np.concatenate([dataset.s_id, dataset.s_next_id]))
    ids = ids[ids >= 0]
    feats = np.empty((ids.size, dataset.s_t.shape[1]))
    feats[np.searchsorted(ids, dataset.s_id)] = dataset.s_t
    feats[np.searchsorted(ids, dataset.s_next_id)] = dataset.s_next
    z = model.encode(feats).mean
    comp = ab.assign_abstract_state(model, feats)
    proj = (z - center) @ axes
    rows = [("point", int(s), "" if labels is None else labels[s], int(c), p[0], p[1])
            for s, c, p in zip(ids, comp, proj)]
    means = (model.mixture.means - center) @ axes
    rows += [("centroid", "", "", k, p[0], p[1]) for k, p in enumerate(means)]
    write_csv(out_path, ("kind", "state", "label", "component", "pc1", "pc2"), rows)
    return len(ids), len(means)


# --- aggregation ----------------------------------------------------------


def _flatten(doc, prefix=""):
    out = {}
    for k, v in doc.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def report(run_dirs, out_path):
    """Mean and standard deviation of every metric across seeded runs of one config.

    Writes ``out_path`` (CSV), a JSON summary next to it and a text table;
    returns the summary rows.
    """
    run_dirs = [Path(d) for d in run_dirs]
    if not run_dirs:
        raise UsageError("report needs at least one run directory")
    docs = []
    for d in run_dirs:
        p = d / "report.json"
        if not p.exists():
            raise UsageError(f"{d} has no report.json")
        docs.append(json.loads(p.read_text()))
    ref = _flatten({k: v for k, v in docs[0]["config"].items() if k != "seed"})
    differing = set()
    for doc in docs[1:]:
        other = _flatten({k: v for k, v in doc["config"].items() if k != "seed"})
        differing |= {k for k in set(ref) | set(other) if ref.get(k) != other.get(k)}
    if differing:
        raise AggregationError(sorted(differing))
    samples = {}
    for d, doc in zip(run_dirs, docs):
        if (d / "abstraction_sweep.csv").exists():
            for row in read_csv(d / "abstraction_sweep.csv"):
                for m in ("purity", "abstraction_size"):
                    samples.setdefault((f"{row['method']}_{m}", "", row["size"]), []).append(float(row[m]))
        if (d / "evaluation.csv").exists():
            for row in read_csv(d / "evaluation.csv"):
                metric, _, size = row["metric"].partition("@")
                samples.setdefault((metric, row["task"], size), []).append(float(row["value"]))
        timing = d / "timing.json"
        if timing.exists():
            samples.setdefault(("wall_clock_seconds", "", ""), []).append(json.loads(timing.read_text())["total"])
    rows = []
    for (metric, task, size), vals in sorted(samples.items(), key=lambda kv: (kv[0][0], kv[0][1], int(kv[0][2] or 0))):
        v = np.asarray(vals)
        rows.append({"metric": metric, "task": task, "size": size, "n": int(v.size),
                     "mean": float(v.mean()), "std": float(v.std())})
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_csv(out_path, ("metric", "task", "size", "n", "mean", "std"),
              [(r["metric"], r["task"], r["size"], r["n"], r["mean"], r["std"]) for r in rows])
    _dump(out_path.with_suffix(".json"), {"runs": [str(d) for d in run_dirs],
                                          "seeds": [doc["seed"] for doc in docs], "metrics": rows})
    lines = [f"{'metric':<28}{'task':<14}{'size':>7}{'n':>4}  mean ± std"]
    lines += [f"{r['metric']:<28}{r['task']:<14}{r['size']:>7}{r['n']:>4}  {r['mean']:.4f} ± {r['std']:.4f}" for r in rows]
    out_path.with_suffix(".txt").write_text("\n".join(lines) + "\n")
    return rows

"""End-to-end experiment pipeline: cohort, grouping, training, diagnostics, report.

A run goes cohort -> k-means groups -> behavior trajectories -> baseline
(cross-entropy only) training -> reference selection -> the selected
algorithm -> evaluation. Sweeps share everything up to and including the
baseline, so sweep points are paired comparisons under the same seeds.
"""

from __future__ import annotations

import dataclasses
import hashlib
import itertools
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .cohort import (
    N_ACTIONS,
    N_STATES,
    CohortSettings,
    SurrogateRiskModel,
    build_mdp,
    generate_cohort,
    sample_trajectories,
)
from .diagnostics import batch_means, write_batch_report, write_convergence, write_csv
from .distributions import SupportGrid
from .grouping import GroupAssignment, elbow_select, kmeans, write_inertia_csv
from .projection import ProjectionConfig
from .training import (
    ParameterTable,
    TrainingConfig,
    TrainingLogs,
    select_reference,
    train_baseline_optimality,
    train_boosted,
    train_q_learning,
)

ALGOS = ("bdrl", "drl", "qlearning")
INITS = ("uniform", "disjoint")
SWEEP_KEYS = ("lambda", "epsilon", "rho", "alpha_floor", "divergence", "algo")
OUTPUT_FILES = ("report.csv", "convergence.csv", "projections.jsonl", "training.jsonl",
                "batch_means.csv", "config_resolved.json", "inertia.csv")
DISJOINT_LOGIT = -1e4


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class CohortConfig:
    n_agents: int = 30
    overrides: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class GroupingConfig:
    k: Any = 3  # int or "auto"
    k_range: Tuple[int, int] = (1, 8)


@dataclass(frozen=True)
class EvaluationConfig:
    mc_samples: int = 55_000
    batch_count: int = 30


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    algo: str = "bdrl"
    init: str = "uniform"
    cohort: CohortConfig = field(default_factory=CohortConfig)
    grid: SupportGrid = field(default_factory=lambda: SupportGrid(0.0, 34.0, 51))
    training: TrainingConfig = field(default_factory=TrainingConfig)
    grouping: GroupingConfig = field(default_factory=GroupingConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    sweep: Mapping[str, Sequence[Any]] = field(default_factory=dict)
    out_dir: Optional[str] = None

    # -- serialization -----------------------------------------------------

    def to_dict(self, include_runtime: bool = True) -> dict:
        t = dataclasses.asdict(self.training)
        t.pop("seed")
        t["projection"]["epsilon"] = _num(t["projection"]["epsilon"])
        d = {
            "seed": self.seed,
            "algo": self.algo,
            "init": self.init,
            "cohort": {"n_agents": self.cohort.n_agents, "overrides": dict(self.cohort.overrides)},
            "grid": self.grid.to_dict(),
            "training": t,
            "grouping": {"k": self.grouping.k, "k_range": list(self.grouping.k_range)},
            "evaluation": dataclasses.asdict(self.evaluation),
            "sweep": {k: [_num(v) for v in vs] for k, vs in self.sweep.items()},
        }
        if include_runtime:
            d["out_dir"] = self.out_dir
        else:
            d["training"].pop("workers")
        return d

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(include_runtime=False), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ExperimentConfig":
        return _parse(d)

    def with_point(self, point: Mapping[str, Any]) -> "ExperimentConfig":
        """Copy with sweep keys applied and the sweep cleared."""
        t, algo = self.training, self.algo
        proj = t.projection
        for key, v in point.items():
            try:
                if key == "lambda":
                    t = dataclasses.replace(t, lam=float(v))
                elif key == "epsilon":
                    proj = ProjectionConfig(float(v), proj.rho, proj.alpha_floor)
                elif key == "rho":
                    proj = ProjectionConfig(proj.epsilon, float(v), proj.alpha_floor)
                elif key == "alpha_floor":
                    proj = ProjectionConfig(proj.epsilon, proj.rho, float(v))
                elif key == "divergence":
                    t = dataclasses.replace(t, divergence_penalty=str(v))
                elif key == "algo":
                    if v not in ALGOS:
                        raise ValueError(f"must be one of {ALGOS}")
                    algo = str(v)
                else:
                    raise ConfigError(f"sweep.{key}", f"unknown sweep key; expected one of {SWEEP_KEYS}")
            except (ValueError, TypeError) as exc:
                if isinstance(exc, ConfigError):
                    raise
                raise ConfigError(f"sweep.{key}", str(exc)) from None
        t = dataclasses.replace(t, projection=proj)
        return dataclasses.replace(self, training=t, algo=algo, sweep={})


def _num(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def _float(v, path):
    if isinstance(v, str) and v.strip().lower() in ("inf", "+inf", "infinity"):
        return math.inf
    if isinstance(v, bool) or not isinstance(v, (int, float, str)):
        raise ConfigError(path, f"expected a number, got {v!r}")
    try:
        return float(v)
    except ValueError:
        raise ConfigError(path, f"expected a number, got {v!r}") from None


def _int(v, path):
    if isinstance(v, bool) or not (isinstance(v, int) or (isinstance(v, str) and v.isdigit())):
        raise ConfigError(path, f"expected an integer, got {v!r}")
    return int(v)


def _check_keys(d, allowed, path):
    if not isinstance(d, Mapping):
        raise ConfigError(path or "<root>", "expected an object")
    for k in d:
        if k not in allowed:
            raise ConfigError(f"{path}.{k}" if path else k, "unknown key")


_TRAINING_INT = ("epochs", "minibatch_size", "trajectories_per_agent", "horizon", "workers", "track_every")
_TRAINING_FLOAT = ("lam", "gamma", "learning_rate", "exploration_rate", "q_learning_rate")


def _parse(d: Mapping[str, Any]) -> ExperimentConfig:
    base = ExperimentConfig()
    _check_keys(d, {"seed", "algo", "init", "cohort", "grid", "training", "grouping",
                    "evaluation", "sweep", "out_dir"}, "")
    seed = _int(d.get("seed", base.seed), "seed")
    if not 0 <= seed < 2**64:
        raise ConfigError("seed", "must be a 64-bit unsigned integer")
    algo = d.get("algo", base.algo)
    if algo not in ALGOS:
        raise ConfigError("algo", f"must be one of {ALGOS}")
    init = d.get("init", base.init)
    if init not in INITS:
        raise ConfigError("init", f"must be one of {INITS}")

    c = d.get("cohort", {})
    _check_keys(c, {"n_agents", "overrides"}, "cohort")
    n_agents = _int(c.get("n_agents", base.cohort.n_agents), "cohort.n_agents")
    if n_agents < 1:
        raise ConfigError("cohort.n_agents", "must be >= 1")
    overrides = c.get("overrides", {})
    if not isinstance(overrides, Mapping):
        raise ConfigError("cohort.overrides", "expected an object")
    allowed = {f.name for f in dataclasses.fields(CohortSettings)}
    for key in overrides:
        if key not in allowed:
            raise ConfigError(f"cohort.overrides.{key}", "unknown cohort setting")
    if isinstance(overrides.get("risk_model"), Mapping):
        risk_fields = {f.name for f in dataclasses.fields(SurrogateRiskModel)}
        for key in overrides["risk_model"]:
            if key not in risk_fields:
                raise ConfigError(f"cohort.overrides.risk_model.{key}", "unknown coefficient")

    g = d.get("grid", {})
    _check_keys(g, {"z_min", "z_max", "atoms"}, "grid")
    try:
        grid = SupportGrid(_float(g.get("z_min", 0.0), "grid.z_min"),
                           _float(g.get("z_max", 34.0), "grid.z_max"),
                           _int(g.get("atoms", 51), "grid.atoms"))
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError("grid", str(exc)) from None

    t = d.get("training", {})
    _check_keys(t, set(_TRAINING_INT) | set(_TRAINING_FLOAT) | {"projection", "divergence_penalty"},
                "training")
    kw: Dict[str, Any] = {}
    for k in _TRAINING_INT:
        if k in t:
            kw[k] = _int(t[k], f"training.{k}")
    for k in _TRAINING_FLOAT:
        if k in t:
            kw[k] = _float(t[k], f"training.{k}")
    if "divergence_penalty" in t:
        kw["divergence_penalty"] = t["divergence_penalty"]
    p = t.get("projection", {})
    _check_keys(p, {"epsilon", "rho", "alpha_floor"}, "training.projection")
    bp = base.training.projection
    try:
        kw["projection"] = ProjectionConfig(_float(p.get("epsilon", bp.epsilon), "training.projection.epsilon"),
                                            _float(p.get("rho", bp.rho), "training.projection.rho"),
                                            _float(p.get("alpha_floor", bp.alpha_floor),
                                                   "training.projection.alpha_floor"))
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError("training.projection", str(exc)) from None
    try:
        training = TrainingConfig(seed=seed, **kw)
    except ValueError as exc:
        raise ConfigError("training", str(exc)) from None

    gr = d.get("grouping", {})
    _check_keys(gr, {"k", "k_range"}, "grouping")
    k = gr.get("k", base.grouping.k)
    if k != "auto":
        k = _int(k, "grouping.k")
        if not 1 <= k <= n_agents:
            raise ConfigError("grouping.k", f"must lie in [1, {n_agents}] or be 'auto'")
    kr = gr.get("k_range", list(base.grouping.k_range))
    if (not isinstance(kr, Sequence) or len(kr) != 2
            or _int(kr[0], "grouping.k_range") < 1 or _int(kr[1], "grouping.k_range") < kr[0] + 2):
        raise ConfigError("grouping.k_range", "expected [k_min, k_max] spanning at least 3 values")

    e = d.get("evaluation", {})
    _check_keys(e, {"mc_samples", "batch_count"}, "evaluation")
    ev = EvaluationConfig(_int(e.get("mc_samples", base.evaluation.mc_samples), "evaluation.mc_samples"),
                          _int(e.get("batch_count", base.evaluation.batch_count), "evaluation.batch_count"))
    if ev.batch_count < 2 or ev.mc_samples < ev.batch_count:
        raise ConfigError("evaluation", "need batch_count >= 2 and mc_samples >= batch_count")

    sw = d.get("sweep", {})
    if not isinstance(sw, Mapping):
        raise ConfigError("sweep", "expected an object")
    sweep = {}
    for key, vals in sw.items():
        if key not in SWEEP_KEYS:
            raise ConfigError(f"sweep.{key}", f"unknown sweep key; expected one of {SWEEP_KEYS}")
        if isinstance(vals, (str, bytes)) or not isinstance(vals, Sequence) or not vals:
            raise ConfigError(f"sweep.{key}", "expected a nonempty list")
        if key in ("divergence", "algo"):
            sweep[key] = [str(v) for v in vals]
        else:
            sweep[key] = [_float(v, f"sweep.{key}") for v in vals]

    out = d.get("out_dir")
    cfg = ExperimentConfig(seed, algo, init, CohortConfig(n_agents, dict(overrides)), grid, training,
                           GroupingConfig(k, (int(kr[0]), int(kr[1]))), ev, sweep,
                           None if out is None else str(out))
    for point in sweep_points(cfg):
        cfg.with_point(point)  # validate every sweep point up front
    return cfg


def sweep_points(cfg: ExperimentConfig) -> List[Dict[str, Any]]:
    if not cfg.sweep:
        return [{}]
    keys = list(cfg.sweep)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(cfg.sweep[k] for k in keys))]


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class Prepared:
    config: ExperimentConfig
    patients: list
    mdps: list
    assignment: GroupAssignment
    groups: Dict[int, List[int]]
    inertia_curve: tuple
    trajectories: Dict[int, list]
    baseline: ParameterTable
    baseline_logs: TrainingLogs
    references: dict


@dataclass
class AgentSummary:
    agent: int
    group: int
    mean_return: float
    learned_mean: float
    p05: Optional[float]
    p50: Optional[float]
    p95: Optional[float]
    mc_mean: float
    mc_se: float


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    config_hash: str
    seed: int
    algo: str
    agents: List[AgentSummary]
    group_rows: List[Tuple[str, AgentSummary]]
    convergence: List[dict]
    training_log: List[dict]
    projection_log: List[dict]
    batch_reports: List[Tuple[str, Any]]
    inertia_curve: tuple
    references: Dict[int, int]
    reference_digests_match: bool
    wall_time: float = 0.0

    def agent(self, agent_id: int) -> AgentSummary:
        return next(a for a in self.agents if a.agent == agent_id)


def _training_cfg(cfg: ExperimentConfig) -> TrainingConfig:
    return dataclasses.replace(cfg.training, seed=cfg.seed)


def prepare(cfg: ExperimentConfig) -> Prepared:
    patients = generate_cohort(cfg.cohort.n_agents, cfg.seed, dict(cfg.cohort.overrides) or None)
    mdps = [build_mdp(p) for p in patients]
    ids = [p.agent_id for p in patients]
    features = np.array([p.features for p in patients])

    k_lo, k_hi = cfg.grouping.k_range
    k_hi = min(k_hi, len(ids))
    curve = ()
    if k_hi - k_lo >= 2:
        curve = elbow_select(features, range(k_lo, k_hi + 1), cfg.seed).curve
    if cfg.grouping.k == "auto":
        k = elbow_select(features, range(k_lo, k_hi + 1), cfg.seed).k if curve else 1
    else:
        k = min(int(cfg.grouping.k), len(ids))
    assignment = kmeans(features, k, cfg.seed, agent_ids=ids)
    groups = {g: members for g, members in assignment.groups().items() if members}

    tcfg = _training_cfg(cfg)
    trajectories = {}
    for p, mdp in zip(patients, mdps):
        rng = np.random.default_rng([cfg.seed, 7, p.agent_id])
        trajectories[p.agent_id] = sample_trajectories(
            mdp, mdp.q_values(), tcfg.trajectories_per_agent, tcfg.exploration_rate, rng, tcfg.horizon)

    baseline, blogs = train_baseline_optimality(ids, trajectories, tcfg, cfg.grid, N_STATES, N_ACTIONS,
                                                groups)
    starts = {p.agent_id: int(p.start) for p in patients}
    refs = {g: select_reference(g, members, baseline, starts) for g, members in groups.items()}
    return Prepared(cfg, patients, mdps, assignment, groups, curve, trajectories, baseline, blogs, refs)


def disjoint_initial_table(grid: SupportGrid, groups: Mapping[int, Sequence[int]],
                           agent_ids: Sequence[int]) -> ParameterTable:
    """Logits whose supports are disjoint atom bands across agents of each group."""
    table = ParameterTable(grid, agent_ids, N_STATES, N_ACTIONS)
    table.logits[:] = DISJOINT_LOGIT
    for members in groups.values():
        width = grid.n_atoms // len(members)
        if width < 2:
            raise ValueError("grid too coarse for disjoint bands")
        for k, aid in enumerate(sorted(members)):
            band = slice(k * width, (k + 1) * width)
            # uneven in-band weights so W2 between bands has a nonzero gradient
            table.logits[table.index(aid), :, :, band] = np.linspace(0.0, 1.0, width)
    return table


def simulate_returns(mdp, policy: np.ndarray, n: int, rng: np.random.Generator,
                     horizon: int) -> np.ndarray:
    """Discounted returns of ``n`` greedy rollouts, simulated in lockstep."""
    S = mdp.n_states
    cdf = np.cumsum(mdp.P[np.arange(S), policy], axis=1)
    cdf[:, -1] = 1.0
    r = mdp.R[np.arange(S), policy]
    s = np.full(n, mdp.start)
    alive = ~mdp.terminal[s]
    g = np.zeros(n)
    disc = 1.0
    for _ in range(horizon):
        if not alive.any():
            break
        g += np.where(alive, disc * r[s], 0.0)
        u = rng.random(n)
        nxt = (u[:, None] >= cdf[s]).sum(axis=1)
        s = np.where(alive, np.minimum(nxt, S - 1), s)
        alive &= ~mdp.terminal[s]
        disc *= mdp.gamma
    return g


def _percentile(p: np.ndarray, atoms: np.ndarray, q: float) -> float:
    cdf = np.cumsum(p)
    return float(atoms[min(int(np.searchsorted(cdf, q - 1e-12)), len(atoms) - 1)])


def execute(prep: Prepared, cfg: ExperimentConfig) -> ExperimentReport:
    t0 = time.perf_counter()
    tcfg = _training_cfg(cfg)
    ids = [p.agent_id for p in prep.patients]
    digests = {g: r.digest() for g, r in prep.references.items()}
    logs = prep.baseline_logs
    table, q_tables = None, None
    if cfg.algo == "bdrl":
        init = disjoint_initial_table(cfg.grid, prep.groups, ids) if cfg.init == "disjoint" else None
        table, policy, logs = train_boosted(ids, prep.groups, prep.trajectories, tcfg, prep.references,
                                            cfg.grid, N_STATES, N_ACTIONS, initial_table=init)
    elif cfg.algo == "drl":
        if cfg.init == "disjoint":
            off = dataclasses.replace(tcfg, lam=0.0,
                                      projection=ProjectionConfig(math.inf, tcfg.projection.rho))
            init = disjoint_initial_table(cfg.grid, prep.groups, ids)
            table, policy, logs = train_boosted(ids, prep.groups, prep.trajectories, off, {},
                                                cfg.grid, N_STATES, N_ACTIONS, initial_table=init)
        else:
            table = prep.baseline
            policy = {a: table.policy(a) for a in ids}
    else:
        q_tables, policy = train_q_learning(ids, prep.trajectories, tcfg, N_STATES, N_ACTIONS)
        logs = TrainingLogs()
    refs_ok = all(prep.references[g].digest() == d for g, d in digests.items())

    group_of = prep.assignment.labels
    summaries, batch_reports = [], []
    atoms = cfg.grid.atoms
    for p, mdp in zip(prep.patients, prep.mdps):
        aid = p.agent_id
        pol = np.asarray(policy[aid])
        s0 = mdp.start
        value = float(mdp.policy_value(pol)[s0])
        if table is not None:
            dist = table.probs(aid)[s0, pol[s0]]
            learned = float(dist @ atoms)
            pct = [_percentile(dist, atoms, q) for q in (0.05, 0.50, 0.95)]
        else:
            learned = float(q_tables[aid][s0, pol[s0]])
            pct = [None, None, None]
        rng = np.random.default_rng([cfg.seed, 11, aid])
        samples = simulate_returns(mdp, pol, cfg.evaluation.mc_samples, rng, tcfg.horizon)
        bm = batch_means(samples, cfg.evaluation.batch_count)
        batch_reports.append((f"agent{aid}", bm))
        summaries.append(AgentSummary(aid, group_of[aid], value, learned, *pct,
                                      bm.grand_mean, bm.standard_error))

    group_rows = []
    for g in sorted(prep.groups):
        members = sorted((s for s in summaries if s.group == g),
                         key=lambda s: (-s.mean_return, s.agent))
        group_rows += [("resilient", members[0]), ("median", members[(len(members) - 1) // 2]),
                       ("vulnerable", members[-1])]

    return ExperimentReport(
        cfg, cfg.hash(), cfg.seed, cfg.algo, summaries, group_rows,
        list(logs.convergence),
        logs.training, logs.projections, batch_reports, prep.inertia_curve,
        {g: r.agent for g, r in prep.references.items()}, refs_ok,
        wall_time=time.perf_counter() - t0)


def run(cfg: ExperimentConfig, prepared: Optional[Prepared] = None) -> ExperimentReport:
    if cfg.sweep:
        raise ConfigError("sweep", "run() takes a single-point config; use sweep()")
    t0 = time.perf_counter()
    prep = prepared or prepare(cfg)
    report = execute(prep, cfg)
    report.wall_time = time.perf_counter() - t0
    if cfg.out_dir:
        write_outputs(report, Path(cfg.out_dir))
    return report


def point_label(point: Mapping[str, Any]) -> str:
    return ",".join(f"{k}={_num(v)}" for k, v in point.items()) or "base"


def sweep(cfg: ExperimentConfig) -> List[Tuple[Dict[str, Any], ExperimentReport]]:
    """One report per sweep grid point, all sharing cohort, groups, data and baseline."""
    points = sweep_points(cfg)
    base = cfg.with_point({})
    prep = prepare(base)
    out = []
    for point in points:
        pcfg = cfg.with_point(point)
        if cfg.out_dir:
            pcfg = dataclasses.replace(pcfg, out_dir=str(Path(cfg.out_dir) / point_label(point)))
        out.append((point, run(pcfg, prep)))
    return out


# ---------------------------------------------------------------------------
# outputs

REPORT_COLUMNS = ("row", "agent", "group", "mean_return", "learned_mean", "p05", "p50", "p95",
                  "mc_mean", "mc_se")


def _report_rows(report: ExperimentReport):
    def row(label, s):
        return [label, s.agent, s.group, s.mean_return, s.learned_mean,
                "" if s.p05 is None else s.p05, "" if s.p50 is None else s.p50,
                "" if s.p95 is None else s.p95, s.mc_mean, s.mc_se]
    for s in report.agents:
        yield row("agent", s)
    for label, s in report.group_rows:
        yield row(label, s)


def _jsonl(path: Path, records, config_hash: str):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps({"config_hash": config_hash, **r}, sort_keys=True) + "\n")


def existing_hash(path: Path) -> Optional[str]:
    """Config hash stamped in an output file, if any."""
    try:
        if path.suffix == ".csv":
            with open(path) as fh:
                first = fh.readline().strip()
            return first.split("config_hash=", 1)[1] if "config_hash=" in first else None
        if path.suffix == ".jsonl":
            with open(path) as fh:
                first = fh.readline()
            return json.loads(first).get("config_hash") if first.strip() else None
        if path.suffix == ".json":
            return json.loads(path.read_text()).get("config_hash")
    except (OSError, ValueError):
        return None
    return None


def check_output_dir(out: Path, config_hash: str):
    """Reject a directory already holding outputs of a different configuration."""
    if not out.exists():
        return
    for f in sorted(out.iterdir()):
        if f.is_file():
            h = existing_hash(f)
            if h is not None and h != config_hash:
                raise ConfigError("out_dir", f"{f} belongs to config {h[:12]}, not {config_hash[:12]}")


def write_outputs(report: ExperimentReport, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    h = report.config_hash
    check_output_dir(out, h)
    tag = f"config_hash={h}"
    write_csv(out / "report.csv", REPORT_COLUMNS, _report_rows(report), tag)
    write_convergence(out / "convergence.csv", report.convergence, tag)
    _jsonl(out / "training.jsonl", report.training_log, h)
    _jsonl(out / "projections.jsonl", report.projection_log, h)
    write_batch_report(out / "batch_means.csv", report.batch_reports, tag)
    write_inertia_csv(out / "inertia.csv", report.inertia_curve, tag)
    resolved = {"config_hash": h, "config": report.config.to_dict(),
                "references": {str(g): a for g, a in sorted(report.references.items())}}
    (out / "config_resolved.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    meta = {"config_hash": h, "seed": report.seed, "algo": report.algo,
            "wall_time_s": round(report.wall_time, 3),
            "reference_snapshots_unchanged": report.reference_digests_match}
    (out / "run_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

"""Synthetic hypertension-treatment cohort: one tabular MDP per patient.

States are the ten health conditions, actions the 21 (standard, half) dose
combinations with at most five drugs. Annual ASCVD risk comes from a logistic
surrogate over baseline features; treatment scales MI and stroke risk
multiplicatively per dose. All clinical numbers other than the treatment
effects and disutilities are configuration defaults, not calibrated values.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from enum import IntEnum
from typing import Optional, Sequence

import numpy as np

from .bellman import Transition

log = logging.getLogger(__name__)


class HealthCondition(IntEnum):
    HEALTHY = 0
    HISTORY_MI = 1
    HISTORY_STROKE = 2
    HISTORY_BOTH = 3
    SURVIVED_MI = 4
    SURVIVED_STROKE = 5
    DEAD_NON_ASCVD = 6
    DEAD_MI = 7
    DEAD_STROKE = 8
    DEAD = 9


N_STATES = len(HealthCondition)
ALIVE = (HealthCondition.HEALTHY, HealthCondition.HISTORY_MI, HealthCondition.HISTORY_STROKE,
         HealthCondition.HISTORY_BOTH, HealthCondition.SURVIVED_MI, HealthCondition.SURVIVED_STROKE)
DEATH_CAUSES = (HealthCondition.DEAD_NON_ASCVD, HealthCondition.DEAD_MI, HealthCondition.DEAD_STROKE)
_MI_HISTORY = {HealthCondition.HISTORY_MI, HealthCondition.HISTORY_BOTH, HealthCondition.SURVIVED_MI}
_STROKE_HISTORY = {HealthCondition.HISTORY_STROKE, HealthCondition.HISTORY_BOTH,
                   HealthCondition.SURVIVED_STROKE}


@dataclass(frozen=True)
class TreatmentAction:
    std_doses: int
    half_doses: int

    def __post_init__(self):
        if self.std_doses < 0 or self.half_doses < 0 or self.std_doses + self.half_doses > 5:
            raise ValueError(f"illegal dose combination {self}")


# index 0 is no treatment; ordered by number of standard doses, then half doses
ACTIONS: tuple = tuple(TreatmentAction(s, h) for s in range(6) for h in range(6 - s))
N_ACTIONS = len(ACTIONS)


@dataclass(frozen=True)
class DynamicsParams:
    sbp_reduction_std: float = 5.5
    sbp_reduction_half: float = 3.7
    dbp_reduction_std: float = 3.3
    dbp_reduction_half: float = 2.2
    rr_mi_std: float = 0.13
    rr_mi_half: float = 0.07
    rr_stroke_std: float = 0.21
    rr_stroke_half: float = 0.14
    mi_weight: float = 0.70
    stroke_weight: float = 0.30
    disutility_half: float = 0.001
    disutility_std: float = 0.002
    gamma: float = 0.97


DEFAULT_QOL = {
    HealthCondition.HEALTHY: 1.0,
    HealthCondition.HISTORY_MI: 0.90,
    HealthCondition.HISTORY_STROKE: 0.90,
    HealthCondition.HISTORY_BOTH: 0.90,
    HealthCondition.SURVIVED_MI: 0.80,
    HealthCondition.SURVIVED_STROKE: 0.80,
    HealthCondition.DEAD_NON_ASCVD: 0.0,
    HealthCondition.DEAD_MI: 0.0,
    HealthCondition.DEAD_STROKE: 0.0,
    HealthCondition.DEAD: 0.0,
}

FEATURE_NAMES = ("age", "sex", "race", "smoking", "diabetes", "sbp",
                 "total_chol", "hdl", "ldl")


@dataclass(frozen=True)
class PatientModel:
    agent_id: int
    features: tuple  # ordered as FEATURE_NAMES
    base_mi: float
    base_stroke: float
    base_death: float
    mi_fatality: float = 0.20
    stroke_fatality: float = 0.15
    history_odds: float = 2.0
    qol: tuple = tuple(DEFAULT_QOL[c] for c in HealthCondition)
    start: int = HealthCondition.HEALTHY

    def __post_init__(self):
        for name in ("base_mi", "base_stroke", "base_death", "mi_fatality", "stroke_fatality"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.history_odds < 1.0:
            raise ValueError("history odds multiplier must be >= 1")
        if len(self.qol) != N_STATES or any(not 0.0 <= w <= 1.0 for w in self.qol):
            raise ValueError("quality-of-life weights must be 10 values in [0, 1]")
        if self.qol[HealthCondition.DEAD] != 0.0:
            raise ValueError("Dead must carry zero quality-of-life weight")

    def feature_vector(self) -> np.ndarray:
        return np.asarray(self.features, dtype=np.float64)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["features"] = dict(zip(FEATURE_NAMES, self.features))
        d["qol"] = {c.name: w for c, w in zip(HealthCondition, self.qol)}
        return d


@dataclass
class TabularMDP:
    """Explicit finite MDP: ``P[s, a, s']``, ``R[s, a]``, terminal mask."""

    P: np.ndarray
    R: np.ndarray
    terminal: np.ndarray
    gamma: float
    start: int = 0

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]

    def q_values(self, tol: float = 1e-12, max_iter: int = 100_000) -> np.ndarray:
        """Optimal action values by value iteration; terminal states are worth 0."""
        live = ~self.terminal
        v = np.zeros(self.n_states)
        for _ in range(max_iter):
            q = self.R + self.gamma * self.P @ (v * live)
            v_new = q.max(axis=1)
            if np.max(np.abs(v_new - v)) < tol:
                v = v_new
                break
            v = v_new
        return self.R + self.gamma * self.P @ (v * live)

    def policy_value(self, policy: np.ndarray) -> np.ndarray:
        """Exact discounted value of a deterministic policy (one action per state)."""
        idx = np.arange(self.n_states)
        P = self.P[idx, policy] * (~self.terminal)[None, :]
        r = self.R[idx, policy]
        return np.linalg.solve(np.eye(self.n_states) - self.gamma * P, r)


def _odds_scale(p: float, k: float) -> float:
    if p >= 1.0:
        return 1.0
    o = k * p / (1.0 - p)
    return o / (1.0 + o)


def _clamp_risk(name: str, p: float) -> float:
    if p < 0.0 or p > 1.0:
        log.warning("%s risk %.6g outside [0, 1]; clamped", name, p)
        return min(max(p, 0.0), 1.0)
    return p


def treated_risks(patient: PatientModel, condition: HealthCondition, action: TreatmentAction,
                  params: DynamicsParams) -> tuple:
    """Annual (MI, stroke) risk after history and treatment adjustments."""
    mi, stroke = patient.base_mi, patient.base_stroke
    if condition in _MI_HISTORY or condition in _STROKE_HISTORY:
        mi = _odds_scale(mi, patient.history_odds)
        stroke = _odds_scale(stroke, patient.history_odds)
    mi *= (1 - params.rr_mi_std) ** action.std_doses * (1 - params.rr_mi_half) ** action.half_doses
    stroke *= ((1 - params.rr_stroke_std) ** action.std_doses
               * (1 - params.rr_stroke_half) ** action.half_doses)
    return _clamp_risk("MI", mi), _clamp_risk("stroke", stroke)


def treated_sbp(patient: PatientModel, action: TreatmentAction, params: DynamicsParams) -> float:
    sbp = patient.features[FEATURE_NAMES.index("sbp")]
    return sbp - params.sbp_reduction_std * action.std_doses - params.sbp_reduction_half * action.half_doses


def _survivor_state(event: HealthCondition, condition: HealthCondition) -> HealthCondition:
    # a survived event on top of the other event type's history lands in HistoryBoth
    if event == HealthCondition.SURVIVED_MI and condition in _STROKE_HISTORY:
        return HealthCondition.HISTORY_BOTH
    if event == HealthCondition.SURVIVED_STROKE and condition in _MI_HISTORY:
        return HealthCondition.HISTORY_BOTH
    return event


_NO_EVENT_NEXT = {
    HealthCondition.HEALTHY: HealthCondition.HEALTHY,
    HealthCondition.HISTORY_MI: HealthCondition.HISTORY_MI,
    HealthCondition.HISTORY_STROKE: HealthCondition.HISTORY_STROKE,
    HealthCondition.HISTORY_BOTH: HealthCondition.HISTORY_BOTH,
    HealthCondition.SURVIVED_MI: HealthCondition.HISTORY_MI,
    HealthCondition.SURVIVED_STROKE: HealthCondition.HISTORY_STROKE,
}


def build_transition_kernel(patient: PatientModel, condition: HealthCondition,
                            action: TreatmentAction, params: DynamicsParams) -> np.ndarray:
    """Next-year distribution over the ten health conditions.

    Non-ASCVD death is resolved first; survivors then draw MI and stroke
    independently. When both occur the year is attributed to MI or stroke by
    the 70/30 weighting. Each event is fatal with the patient's case-fatality
    probability.
    """
    condition = HealthCondition(condition)
    row = np.zeros(N_STATES)
    if condition in DEATH_CAUSES or condition == HealthCondition.DEAD:
        row[HealthCondition.DEAD] = 1.0
        return row
    mi, stroke = treated_risks(patient, condition, action, params)
    death = patient.base_death
    p_mi = mi * (1 - stroke) + mi * stroke * params.mi_weight
    p_stroke = stroke * (1 - mi) + mi * stroke * params.stroke_weight
    p_none = (1 - mi) * (1 - stroke)
    alive = 1.0 - death
    row[HealthCondition.DEAD_NON_ASCVD] += death
    row[HealthCondition.DEAD_MI] += alive * p_mi * patient.mi_fatality
    row[_survivor_state(HealthCondition.SURVIVED_MI, condition)] += alive * p_mi * (1 - patient.mi_fatality)
    row[HealthCondition.DEAD_STROKE] += alive * p_stroke * patient.stroke_fatality
    row[_survivor_state(HealthCondition.SURVIVED_STROKE, condition)] += (
        alive * p_stroke * (1 - patient.stroke_fatality))
    row[_NO_EVENT_NEXT[condition]] += alive * p_none
    return row / row.sum()


def reward(patient: PatientModel, condition: HealthCondition, action: TreatmentAction,
           params: DynamicsParams) -> float:
    condition = HealthCondition(condition)
    if condition in DEATH_CAUSES or condition == HealthCondition.DEAD:
        return 0.0
    return (patient.qol[condition] - params.disutility_std * action.std_doses
            - params.disutility_half * action.half_doses)


def build_mdp(patient: PatientModel, params: DynamicsParams = DynamicsParams()) -> TabularMDP:
    P = np.empty((N_STATES, N_ACTIONS, N_STATES))
    R = np.empty((N_STATES, N_ACTIONS))
    for s in HealthCondition:
        for k, a in enumerate(ACTIONS):
            P[s, k] = build_transition_kernel(patient, s, a, params)
            R[s, k] = reward(patient, s, a, params)
    terminal = np.zeros(N_STATES, dtype=bool)
    terminal[HealthCondition.DEAD] = True
    return TabularMDP(P, R, terminal, params.gamma, int(patient.start))


@dataclass(frozen=True)
class SurrogateRiskModel:
    """Logistic annual-risk surrogate; coefficients are per unit of each feature."""

    intercept: float = math.log(0.012 / 0.988)
    age: float = 0.07
    male: float = 0.35
    black: float = 0.20
    smoking: float = 0.55
    diabetes: float = 0.60
    sbp: float = 0.018
    total_chol: float = 0.004
    hdl: float = -0.012
    death_intercept: float = math.log(0.006 / 0.994)
    death_age: float = 0.08
    death_smoking: float = 0.50
    death_diabetes: float = 0.40

    def ascvd_logit(self, x: np.ndarray) -> np.ndarray:
        age, sex, race, smoke, diab, sbp, tc, hdl, _ = np.moveaxis(np.asarray(x, dtype=float), -1, 0)
        return (self.intercept + self.age * (age - 52) + self.male * sex + self.black * race
                + self.smoking * smoke + self.diabetes * diab + self.sbp * (sbp - 130)
                + self.total_chol * (tc - 200) + self.hdl * (hdl - 50))

    def death_logit(self, x: np.ndarray) -> np.ndarray:
        age, _, _, smoke, diab = np.moveaxis(np.asarray(x, dtype=float), -1, 0)[:5]
        return (self.death_intercept + self.death_age * (age - 52)
                + self.death_smoking * smoke + self.death_diabetes * diab)

    def risks(self, x: np.ndarray) -> tuple:
        ascvd = 1.0 / (1.0 + np.exp(-self.ascvd_logit(x)))
        death = 1.0 / (1.0 + np.exp(-self.death_logit(x)))
        return ascvd, death

    def zeroed(self) -> "SurrogateRiskModel":
        """Copy with every feature coefficient set to zero (intercepts kept)."""
        keep = {"intercept", "death_intercept"}
        return replace(self, **{k: 0.0 for k in asdict(self) if k not in keep})


@dataclass(frozen=True)
class CohortSettings:
    age_range: tuple = (50.0, 54.0)
    sbp_mean: float = 135.0
    sbp_sd: float = 18.0
    total_chol_mean: float = 205.0
    total_chol_sd: float = 38.0
    hdl_mean: float = 52.0
    hdl_sd: float = 14.0
    ldl_mean: float = 125.0
    ldl_sd: float = 32.0
    p_male: float = 0.5
    p_black: float = 0.2
    p_smoking: float = 0.2
    p_diabetes: float = 0.15
    mi_fatality: float = 0.20
    stroke_fatality: float = 0.15
    history_odds: float = 2.0
    risk_model: SurrogateRiskModel = field(default_factory=SurrogateRiskModel)


def generate_cohort(n_agents: int, seed: int, overrides: Optional[dict] = None,
                    params: DynamicsParams = DynamicsParams()) -> list:
    """Seeded synthetic cohort aged 50 to 54 without ASCVD history."""
    if n_agents < 1:
        raise ValueError("n_agents must be >= 1")
    settings = CohortSettings()
    if overrides:
        risk = overrides.get("risk_model")
        rest = {k: v for k, v in overrides.items() if k != "risk_model"}
        settings = replace(settings, **rest)
        if risk is not None:
            rm = risk if isinstance(risk, SurrogateRiskModel) else replace(settings.risk_model, **risk)
            settings = replace(settings, risk_model=rm)
    rng = np.random.default_rng(seed)
    n = n_agents
    x = np.column_stack([
        rng.uniform(*settings.age_range, size=n),
        rng.random(n) < settings.p_male,
        rng.random(n) < settings.p_black,
        rng.random(n) < settings.p_smoking,
        rng.random(n) < settings.p_diabetes,
        np.clip(rng.normal(settings.sbp_mean, settings.sbp_sd, n), 95, 200),
        np.clip(rng.normal(settings.total_chol_mean, settings.total_chol_sd, n), 110, 330),
        np.clip(rng.normal(settings.hdl_mean, settings.hdl_sd, n), 20, 100),
        np.clip(rng.normal(settings.ldl_mean, settings.ldl_sd, n), 40, 250),
    ]).astype(np.float64)
    ascvd, death = settings.risk_model.risks(x)
    return [
        PatientModel(
            agent_id=i,
            features=tuple(float(v) for v in x[i]),
            base_mi=float(params.mi_weight * ascvd[i]),
            base_stroke=float(params.stroke_weight * ascvd[i]),
            base_death=float(death[i]),
            mi_fatality=settings.mi_fatality,
            stroke_fatality=settings.stroke_fatality,
            history_odds=settings.history_odds,
        )
        for i in range(n)
    ]


def sample_trajectories(mdp: TabularMDP, policy_table: Optional[np.ndarray], n_trajectories: int,
                        exploration_rate: float, rng: np.random.Generator,
                        horizon: int = 100, start: Optional[int] = None) -> list:
    """Epsilon-greedy rollouts from the start state.

    ``policy_table`` holds action values ``Q[s, a]``; ``None`` means all
    actions tie (greedy picks action 0). A rollout ends on entering a terminal
    state or after ``horizon`` steps.
    """
    if n_trajectories < 1:
        raise ValueError("need at least one trajectory")
    if not 0.0 <= exploration_rate <= 1.0:
        raise ValueError("exploration_rate must lie in [0, 1]")
    q = np.zeros((mdp.n_states, mdp.n_actions)) if policy_table is None else np.asarray(policy_table)
    greedy = np.argmax(q, axis=1)
    cdf = np.cumsum(mdp.P, axis=2)
    s0 = mdp.start if start is None else start
    out = []
    for _ in range(n_trajectories):
        s, traj = s0, []
        for _ in range(horizon):
            if exploration_rate > 0 and rng.random() < exploration_rate:
                a = int(rng.integers(mdp.n_actions))
            else:
                a = int(greedy[s])
            s_next = int(np.searchsorted(cdf[s, a], rng.random(), side="right"))
            s_next = min(s_next, mdp.n_states - 1)
            done = bool(mdp.terminal[s_next])
            traj.append(Transition(int(s), a, float(mdp.R[s, a]), s_next, done))
            if done:
                break
            s = s_next
        out.append(traj)
    return out


def discounted_return(traj: Sequence[Transition], gamma: float) -> float:
    g = 0.0
    for t in reversed(traj):
        g = t.reward + gamma * g
    return g

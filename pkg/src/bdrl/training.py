"""Tabular softmax training: optimality-only baseline, boosted training, Q-learning.

Each agent owns a block of logits ``(n_states, n_actions, n_atoms)``; the
return distribution at ``(s, a)`` is the softmax of its logits. One epoch of
boosted training, per group:

1. sample a minibatch of ``(s, a)`` pairs from the group's pooled transitions;
2. pick the pair of agents with the largest summed discrepancy on the batch;
3. take one gradient step on cross-entropy to the categorical Bellman targets
   (every agent in the group) plus ``lam`` times the pair penalty;
4. project every agent's updated distributions at the batch ``(s, a)`` toward
   the group's frozen reference snapshot.

Groups own disjoint slices of the logit array and draw from independent
random streams seeded by ``(seed, group_id)``, so results do not depend on
whether groups run sequentially or in threads.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .bellman import Transition, project_values
from .distributions import CategoricalReturn, SupportGrid, kl_array, js_array, w2_array
from .projection import BRANCH_CODES, ProjectionConfig, solve_projection_array

DIVERGENCES = ("w2", "kl", "js")
SATURATION_TOL = 1e-8
_LOG_FLOOR = 1e-300


@dataclass(frozen=True)
class TrainingConfig:
    lam: float = 0.1
    gamma: float = 0.97
    epochs: int = 2000
    minibatch_size: int = 256
    learning_rate: float = 0.02
    exploration_rate: float = 0.3
    trajectories_per_agent: int = 42
    projection: ProjectionConfig = field(default_factory=lambda: ProjectionConfig(0.01, 0.90, 0.05))
    divergence_penalty: str = "w2"
    seed: int = 0
    horizon: int = 100
    q_learning_rate: float = 0.1
    workers: int = 1
    track_every: int = 1

    def __post_init__(self):
        if self.lam < 0 or not math.isfinite(self.lam):
            raise ValueError("lam must be a finite value >= 0")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.epochs < 1 or self.minibatch_size < 1 or self.trajectories_per_agent < 1:
            raise ValueError("epochs, minibatch_size and trajectories_per_agent must be positive")
        if not self.learning_rate >= 0 or not self.q_learning_rate > 0:
            raise ValueError("learning_rate must be >= 0 and q_learning_rate > 0")
        if not 0.0 <= self.exploration_rate <= 1.0:
            raise ValueError("exploration_rate must lie in [0, 1]")
        if self.divergence_penalty not in DIVERGENCES:
            raise ValueError(f"divergence_penalty must be one of {DIVERGENCES}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.workers < 1 or self.track_every < 1 or self.horizon < 1:
            raise ValueError("workers, track_every and horizon must be positive")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class ParameterTable:
    """Logits for every (agent, state, action); probabilities via softmax."""

    def __init__(self, grid: SupportGrid, agent_ids: Sequence[int], n_states: int,
                 n_actions: int, logits: Optional[np.ndarray] = None):
        self.grid = grid
        self.agent_ids = tuple(int(a) for a in agent_ids)
        self._index = {a: k for k, a in enumerate(self.agent_ids)}
        shape = (len(self.agent_ids), n_states, n_actions, grid.n_atoms)
        if logits is None:
            logits = np.zeros(shape)
        logits = np.array(logits, dtype=np.float64)
        if logits.shape != shape:
            raise ValueError(f"logits shape {logits.shape} != {shape}")
        self.logits = logits

    @property
    def n_states(self) -> int:
        return self.logits.shape[1]

    @property
    def n_actions(self) -> int:
        return self.logits.shape[2]

    def index(self, agent_id: int) -> int:
        return self._index[agent_id]

    def copy(self) -> "ParameterTable":
        return ParameterTable(self.grid, self.agent_ids, self.n_states, self.n_actions,
                              self.logits.copy())

    def probs(self, agent_id: Optional[int] = None) -> np.ndarray:
        if agent_id is None:
            return softmax(self.logits)
        return softmax(self.logits[self._index[agent_id]])

    def distribution(self, agent_id: int, state: int, action: int) -> CategoricalReturn:
        return CategoricalReturn(self.grid, softmax(self.logits[self._index[agent_id], state, action]))

    def expectations(self, agent_id: Optional[int] = None) -> np.ndarray:
        return self.probs(agent_id) @ self.grid.atoms

    def policy(self, agent_id: int) -> np.ndarray:
        return np.argmax(self.expectations(agent_id), axis=-1)

    def set_probs(self, agent_idx, states, actions, p: np.ndarray):
        self.logits[agent_idx, states, actions] = np.log(np.maximum(p, _LOG_FLOOR))

    @classmethod
    def from_probs(cls, grid: SupportGrid, agent_ids, probs: np.ndarray) -> "ParameterTable":
        probs = np.asarray(probs, dtype=np.float64)
        return cls(grid, agent_ids, probs.shape[1], probs.shape[2],
                   np.log(np.maximum(probs, _LOG_FLOOR)))

    def to_records(self) -> list:
        p = self.probs()
        g = self.grid.to_dict()
        return [{"agent": aid, "s": s, "a": a, "grid": g, "probs": p[k, s, a].tolist()}
                for k, aid in enumerate(self.agent_ids)
                for s in range(self.n_states) for a in range(self.n_actions)]


@dataclass(frozen=True)
class GroupReference:
    group: int
    agent: int
    distributions: np.ndarray  # (n_states, n_actions, n_atoms), read-only
    grid: SupportGrid

    def __post_init__(self):
        d = np.array(self.distributions, dtype=np.float64)
        d.flags.writeable = False
        object.__setattr__(self, "distributions", d)

    def __getitem__(self, sa: Tuple[int, int]) -> CategoricalReturn:
        s, a = sa
        return CategoricalReturn(self.grid, self.distributions[s, a])

    def digest(self) -> bytes:
        return self.distributions.tobytes()


# ---------------------------------------------------------------------------
# data


@dataclass
class AgentData:
    """Transitions of one agent, deduplicated into weighted records per (s, a)."""

    agent: int
    s: np.ndarray
    a: np.ndarray
    rec_sa: np.ndarray
    rec_r: np.ndarray
    rec_next: np.ndarray
    rec_done: np.ndarray
    rec_w: np.ndarray
    sa_count: np.ndarray  # visits per flattened (s, a)

    @classmethod
    def from_trajectories(cls, agent: int, trajectories: Sequence[Sequence[Transition]],
                          n_states: int, n_actions: int) -> "AgentData":
        ts = [t for traj in trajectories for t in traj]
        if not ts:
            raise ValueError(f"agent {agent} has no transitions")
        arr = np.array([(t.state, t.action, t.reward, t.next_state, float(t.done)) for t in ts])
        s = arr[:, 0].astype(np.int64)
        a = arr[:, 1].astype(np.int64)
        if s.min() < 0 or s.max() >= n_states or a.min() < 0 or a.max() >= n_actions:
            raise ValueError(f"agent {agent}: state/action id out of range")
        sa = s * n_actions + a
        keys = np.column_stack([sa, arr[:, 2], arr[:, 3], arr[:, 4]])
        uniq, counts = np.unique(keys, axis=0, return_counts=True)
        sa_count = np.bincount(sa, minlength=n_states * n_actions)
        rec_sa = uniq[:, 0].astype(np.int64)
        return cls(agent, s, a, rec_sa, uniq[:, 1], uniq[:, 2].astype(np.int64),
                   uniq[:, 3].astype(bool), counts / sa_count[rec_sa], sa_count)


def build_agent_data(trajectories: Mapping[int, Sequence], n_states: int, n_actions: int) -> dict:
    return {aid: AgentData.from_trajectories(aid, trajs, n_states, n_actions)
            for aid, trajs in trajectories.items()}


@dataclass
class Minibatch:
    states: np.ndarray      # (U,) unique states
    actions: np.ndarray     # (U,)
    counts: np.ndarray      # (U,) multiplicity in the sampled batch
    agents: Tuple[int, ...]  # agent ids the targets belong to
    targets: np.ndarray     # (n, U, D)
    mask: np.ndarray        # (n, U) agent has data at (s, a)

    def row(self, agent_id: int) -> int:
        return self.agents.index(agent_id)


@dataclass
class GroupRecords:
    """Weighted records of several agents concatenated for vectorized targets."""

    agents: Tuple[int, ...]
    k: np.ndarray       # position of the owning agent in ``agents``
    sa: np.ndarray
    r: np.ndarray
    next: np.ndarray
    done: np.ndarray
    w: np.ndarray

    @classmethod
    def build(cls, data: Mapping[int, AgentData], agents: Sequence[int]) -> "GroupRecords":
        ds = [data[a] for a in agents]
        return cls(tuple(agents),
                   np.concatenate([np.full(len(d.rec_sa), k) for k, d in enumerate(ds)]),
                   np.concatenate([d.rec_sa for d in ds]),
                   np.concatenate([d.rec_r for d in ds]),
                   np.concatenate([d.rec_next for d in ds]),
                   np.concatenate([d.rec_done for d in ds]),
                   np.concatenate([d.rec_w for d in ds]))


def bellman_targets(table: ParameterTable, data: Mapping[int, AgentData], agents: Sequence[int],
                    states: np.ndarray, actions: np.ndarray, gamma: float,
                    records: Optional[GroupRecords] = None):
    """Empirical categorical Bellman targets for ``agents`` at the given pairs.

    The next-state action is the agent's current greedy action. Returns
    ``(targets, mask)``; pairs an agent never visited get a zero target and
    ``mask`` False.
    """
    grid = table.grid
    n_s, n_a, n_d = table.n_states, table.n_actions, grid.n_atoms
    U, n = len(states), len(agents)
    if records is None or records.agents != tuple(agents):
        records = GroupRecords.build(data, agents)
    pos = np.full(n_s * n_a, -1, dtype=np.int64)
    pos[states * n_a + actions] = np.arange(U)
    sel = np.flatnonzero(pos[records.sa] >= 0)
    targets = np.zeros((n * U, n_d))
    mask = np.zeros(n * U, dtype=bool)
    if sel.size:
        k, nxt, done = records.k[sel], records.next[sel], records.done[sel]
        rows = np.array([table.index(a) for a in agents])
        key, inv = np.unique(k * n_s + nxt, return_inverse=True)
        z = softmax(table.logits[rows[key // n_s], key % n_s])   # (Q, A, D)
        greedy = np.argmax(z @ grid.atoms, axis=-1)
        p = z[np.arange(len(key)), greedy][inv.ravel()]         # (R, D)
        p[done] = 0.0
        p[done, 0] = 1.0
        values = records.r[sel, None] + gamma * grid.atoms[None, :] * (~done)[:, None]
        m = project_values(values, p, grid) * records.w[sel, None]
        flat = k * U + pos[records.sa[sel]]
        np.add.at(targets, flat, m)
        mask[flat] = True
    return targets.reshape(n, U, n_d), mask.reshape(n, U)


def make_minibatch(table: ParameterTable, data: Mapping[int, AgentData], agents: Sequence[int],
                   sa_sample: np.ndarray, gamma: float,
                   records: Optional[GroupRecords] = None) -> Minibatch:
    uniq, counts = np.unique(sa_sample, return_counts=True)
    states, actions = np.divmod(uniq, table.n_actions)
    targets, mask = bellman_targets(table, data, agents, states, actions, gamma, records)
    return Minibatch(states, actions, counts.astype(np.float64), tuple(agents), targets, mask)


# ---------------------------------------------------------------------------
# discrepancy, loss and gradients


def pair_discrepancy(p: np.ndarray, q: np.ndarray, divergence: str, delta_z: float) -> np.ndarray:
    if divergence == "w2":
        return w2_array(p, q, delta_z)
    if divergence == "kl":
        return kl_array(p, q)
    if divergence == "js":
        return js_array(p, q)
    raise ValueError(f"unknown divergence {divergence!r}")


def _penalty_prob_grads(p, q, divergence: str, delta_z: float):
    """d(penalty)/dp and d(penalty)/dq for each row; non-finite rows get zeros."""
    if divergence == "w2":
        gap = np.cumsum(p - q, axis=-1)
        gap[..., -1] = 0.0
        w = delta_z * np.sqrt(np.sum(gap * gap, axis=-1, keepdims=True))
        tail = np.cumsum(gap[..., ::-1], axis=-1)[..., ::-1]  # sum_{d >= k} gap_d
        safe = np.where(w > 0, w, 1.0)
        g = np.where(w > 0, delta_z * delta_z * tail / safe, 0.0)
        return g, -g
    with np.errstate(divide="ignore", invalid="ignore"):
        if divergence == "kl":
            gp = np.where(p > 0, np.log(p) - np.log(q) + 1.0, 0.0)
            gq = np.where(p > 0, -p / q, 0.0)
        elif divergence == "js":
            m = 0.5 * (p + q)
            gp = np.where(p > 0, 0.5 * (np.log(p) - np.log(m)), 0.0)
            gq = np.where(q > 0, 0.5 * (np.log(q) - np.log(m)), 0.0)
        else:
            raise ValueError(f"unknown divergence {divergence!r}")
    bad = ~np.all(np.isfinite(gp) & np.isfinite(gq), axis=-1, keepdims=True)
    return np.where(bad, 0.0, gp), np.where(bad, 0.0, gq)


def _softmax_backward(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Chain d/dp through the softmax: p * (g - <p, g>)."""
    return p * (g - np.sum(p * g, axis=-1, keepdims=True))


@dataclass
class LossParts:
    accuracy: float
    penalty: float  # unweighted penalty sum; may be inf for KL
    lam: float

    @property
    def total(self) -> float:
        if self.lam == 0:
            return self.accuracy
        return self.accuracy + self.lam * self.penalty


def _batch_probs(table: ParameterTable, agent_ids: Sequence[int], batch: Minibatch) -> np.ndarray:
    rows = [table.index(a) for a in agent_ids]
    return softmax(table.logits[rows][:, batch.states, batch.actions])


def _cross_entropy(p: np.ndarray, m: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(m > 0, m * np.log(p), 0.0)
    return -t.sum(axis=-1)


def composite_loss_parts(table: ParameterTable, batch: Minibatch, pair: Optional[Tuple[int, int]],
                         lam: float, divergence: str = "w2",
                         agents: Optional[Sequence[int]] = None) -> LossParts:
    """Cross-entropy of ``agents`` (default: the pair) plus ``lam`` x pair penalty."""
    if agents is None:
        agents = list(pair) if pair is not None else list(batch.agents)
    rows = [batch.row(a) for a in agents]
    p = _batch_probs(table, agents, batch)
    ce = _cross_entropy(p, batch.targets[rows])
    acc = float(np.sum(batch.counts * np.where(batch.mask[rows], ce, 0.0)))
    pen = 0.0
    if pair is not None:
        pi, pj = _batch_probs(table, pair, batch)
        pen = float(np.sum(batch.counts * pair_discrepancy(pi, pj, divergence, table.grid.delta_z)))
    return LossParts(acc, pen, lam)


def composite_loss(table: ParameterTable, batch: Minibatch, pair: Optional[Tuple[int, int]],
                   lam: float, divergence: str = "w2",
                   agents: Optional[Sequence[int]] = None) -> float:
    return composite_loss_parts(table, batch, pair, lam, divergence, agents).total


def loss_gradient(table: ParameterTable, batch: Minibatch, pair: Optional[Tuple[int, int]],
                  lam: float, divergence: str = "w2", agents: Optional[Sequence[int]] = None):
    """Gradient of the composite loss with respect to the batch logits.

    Returns ``(grads, penalty_grad_norm)`` where ``grads`` maps agent id to a
    ``(U, D)`` array aligned with the batch rows and the norm is that of the
    unweighted penalty term alone.
    """
    if agents is None:
        agents = list(pair) if pair is not None else list(batch.agents)
    grads: Dict[int, np.ndarray] = {}
    rows = [batch.row(a) for a in agents]
    p = _batch_probs(table, agents, batch)
    m = batch.targets[rows]
    w = (batch.counts[None, :] * batch.mask[rows])[..., None]
    # d CE / d logits = p * sum(m) - m
    g_ce = w * (p * m.sum(axis=-1, keepdims=True) - m)
    for k, aid in enumerate(agents):
        grads[aid] = g_ce[k]
    pen_norm = 0.0
    if pair is not None:
        i, j = pair
        pi, pj = _batch_probs(table, pair, batch)
        gp, gq = _penalty_prob_grads(pi, pj, divergence, table.grid.delta_z)
        c = batch.counts[:, None]
        li = c * _softmax_backward(pi, gp)
        lj = c * _softmax_backward(pj, gq)
        pen_norm = float(math.sqrt(np.sum(li * li) + np.sum(lj * lj)))
        if lam:
            grads[i] = grads.get(i, 0.0) + lam * li
            grads[j] = grads.get(j, 0.0) + lam * lj
    return grads, pen_norm


def gradient_step(table: ParameterTable, batch: Minibatch, pair: Optional[Tuple[int, int]],
                  cfg: TrainingConfig, agents: Optional[Sequence[int]] = None) -> ParameterTable:
    """In-place gradient descent step on the batch logits; returns ``table``."""
    grads, _ = loss_gradient(table, batch, pair, cfg.lam, cfg.divergence_penalty, agents)
    for aid, g in grads.items():
        table.logits[table.index(aid), batch.states, batch.actions] -= cfg.learning_rate * g
    return table


# ---------------------------------------------------------------------------
# selection


def _pairwise_sums(p: np.ndarray, counts: np.ndarray, divergence: str, delta_z: float) -> np.ndarray:
    """(n, n) matrix of count-weighted summed discrepancies over batch rows."""
    n = p.shape[0]
    if divergence == "w2":
        f = np.cumsum(p, axis=-1)[..., :-1]                    # (n, U, D-1)
        f = (f - f.mean(axis=0, keepdims=True)).transpose(1, 0, 2)  # centered, (U, n, D-1)
        gram = f @ f.transpose(0, 2, 1)                        # (U, n, n)
        sq = np.einsum("uii->ui", gram)
        d2 = sq[:, :, None] + sq[:, None, :] - 2.0 * gram
        d = delta_z * np.sqrt(np.maximum(d2, 0.0)).transpose(1, 2, 0)
        idx = np.arange(n)
        d[idx, idx] = 0.0
    else:
        d = np.empty((n, n, p.shape[1]))
        for a in range(n):
            d[a] = pair_discrepancy(p[a][None], p, divergence, delta_z)
    return np.einsum("iju,u->ij", d, counts)


def select_worst_pair(group: Sequence[int], table: ParameterTable, batch: Minibatch,
                      divergence: str = "w2") -> Tuple[int, int]:
    """Unordered pair with the largest summed W2 over the batch; ties go low.

    Pair selection always uses W2, as in the boosting procedure; the
    ``divergence`` argument only exists for diagnostics.
    """
    group = sorted(group)
    if len(group) < 2:
        raise ValueError("pair selection needs at least two agents")
    p = _batch_probs(table, group, batch)
    s = _pairwise_sums(p, batch.counts, divergence, table.grid.delta_z)
    best, best_val = None, -np.inf
    for a in range(len(group)):
        for b in range(a + 1, len(group)):
            if s[a, b] > best_val:
                best, best_val = (group[a], group[b]), s[a, b]
    return best


def select_reference(group_id: int, group: Sequence[int], table: ParameterTable,
                     start_states: Mapping[int, int]) -> GroupReference:
    """Agent with the largest greedy expected return at its own start state."""
    if len(group) == 0:
        raise ValueError("empty group")
    best, best_val = None, -np.inf
    for aid in sorted(group):
        v = float(np.max(table.expectations(aid)[start_states[aid]]))
        if v > best_val:
            best, best_val = aid, v
    return GroupReference(group_id, best, table.probs(best).copy(), table.grid)


def max_pair_discrepancy(table: ParameterTable, group: Sequence[int], states: np.ndarray,
                         actions: np.ndarray, counts: Optional[np.ndarray] = None) -> float:
    """Max over agent pairs of summed W2 across the given (s, a) pairs."""
    if len(group) < 2 or len(states) == 0:
        return 0.0
    rows = [table.index(a) for a in sorted(group)]
    p = softmax(table.logits[rows][:, states, actions])
    c = np.ones(len(states)) if counts is None else counts
    return float(np.max(_pairwise_sums(p, c, "w2", table.grid.delta_z)))


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainingLogs:
    training: List[dict] = field(default_factory=list)
    projections: List[dict] = field(default_factory=list)
    convergence: List[dict] = field(default_factory=list)


def probe_set(data: Mapping[int, AgentData], group: Sequence[int], n_actions: int):
    visited = np.zeros_like(data[group[0]].sa_count, dtype=bool)
    for aid in group:
        visited |= data[aid].sa_count > 0
    sa = np.flatnonzero(visited)
    return np.divmod(sa, n_actions)


def _train_group(table: ParameterTable, data: Mapping[int, AgentData], group_id: int,
                 group: Sequence[int], cfg: TrainingConfig,
                 reference: Optional[GroupReference], boosted: bool) -> TrainingLogs:
    logs = TrainingLogs()
    group = sorted(group)
    rng = np.random.default_rng([cfg.seed, group_id])
    pool = np.concatenate([data[a].s * table.n_actions + data[a].a for a in group])
    probe_s, probe_a = probe_set(data, group, table.n_actions)
    rows = np.array([table.index(a) for a in group])
    lam = cfg.lam if boosted else 0.0
    project = boosted and reference is not None and cfg.projection.enabled
    dz = table.grid.delta_z
    records = GroupRecords.build(data, group)

    for epoch in range(1, cfg.epochs + 1):
        sample = pool[rng.integers(len(pool), size=cfg.minibatch_size)]
        batch = make_minibatch(table, data, group, sample, cfg.gamma, records)
        pair = select_worst_pair(group, table, batch) if len(group) >= 2 else None
        parts = composite_loss_parts(table, batch, pair, lam, cfg.divergence_penalty, group)
        p_old = softmax(table.logits[rows][:, batch.states, batch.actions])
        grads, pen_norm = loss_gradient(table, batch, pair, lam, cfg.divergence_penalty, group)
        for aid, g in grads.items():
            table.logits[table.index(aid), batch.states, batch.actions] -= cfg.learning_rate * g

        event = None
        if pair is not None and lam > 0:
            if not math.isfinite(parts.penalty):
                event = "nonfinite"
            elif parts.penalty > 1e-12 and pen_norm < SATURATION_TOL:
                event = "saturated"

        if project:
            p_new = softmax(table.logits[rows][:, batch.states, batch.actions])
            p_ref = reference.distributions[batch.states, batch.actions][None]
            res, br, alpha, d0, d1 = solve_projection_array(p_old, p_new, p_ref, dz, cfg.projection)
            change = br != 0
            if change.any():
                k, u = np.nonzero(change)
                table.set_probs(rows[k], batch.states[u], batch.actions[u], res[k, u])
            for k, aid in enumerate(group):
                counts = np.bincount(br[k], minlength=3)
                worst = int(br[k].max())
                a_k = alpha[k][np.isfinite(alpha[k])]
                logs.projections.append({
                    "epoch": epoch, "group": group_id, "agent": aid,
                    "branch": BRANCH_CODES[worst].value,
                    "alpha": float(a_k.max()) if a_k.size else None,
                    "d_before": float(d0[k].max()), "d_after": float(d1[k].max()),
                    "n_accepted": int(counts[0]), "n_solved": int(counts[1]),
                    "n_fallback": int(counts[2]),
                })

        trace = None
        if epoch % cfg.track_every == 0 or epoch == cfg.epochs:
            trace = max_pair_discrepancy(table, group, probe_s, probe_a)
            logs.convergence.append({"epoch": epoch, "group": group_id, "max_pair_w2": trace})
        logs.training.append({
            "epoch": epoch, "group": group_id,
            "loss_accuracy": parts.accuracy,
            "loss_penalty": parts.penalty if math.isfinite(parts.penalty) else None,
            "pair": list(pair) if pair is not None else None,
            "max_pair_w2": trace,
            "penalty_grad_norm": pen_norm,
            "penalty_event": event,
        })
    return logs


def _run_groups(table, data, groups: Mapping[int, Sequence[int]], cfg, references, boosted):
    ids = sorted(groups)
    refs = references or {}

    def job(g):
        return _train_group(table, data, g, groups[g], cfg, refs.get(g), boosted)

    if cfg.workers > 1 and len(ids) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as ex:
            results = list(ex.map(job, ids))
    else:
        results = [job(g) for g in ids]
    merged = TrainingLogs()
    for attr in ("training", "projections", "convergence"):
        rows = [r for res in results for r in getattr(res, attr)]
        rows.sort(key=lambda r: (r["epoch"], r["group"], r.get("agent", -1)))
        setattr(merged, attr, rows)
    return merged


def _check_groups(groups: Mapping[int, Sequence[int]], agents: Sequence[int]):
    seen = [a for g in groups.values() for a in g]
    if sorted(seen) != sorted(agents) or len(set(seen)) != len(seen):
        raise ValueError("groups must partition the agents")


def train_baseline_optimality(agents: Sequence[int], trajectories: Mapping[int, Sequence],
                              cfg: TrainingConfig, grid: SupportGrid, n_states: int, n_actions: int,
                              groups: Optional[Mapping[int, Sequence[int]]] = None,
                              ) -> Tuple[ParameterTable, TrainingLogs]:
    """Cross-entropy-only training from uniform logits (no penalty, no projection)."""
    agents = list(agents)
    if not agents or any(not trajectories.get(a) for a in agents):
        raise ValueError("every agent needs a nonempty trajectory set")
    groups = groups or {0: agents}
    _check_groups(groups, agents)
    data = build_agent_data({a: trajectories[a] for a in agents}, n_states, n_actions)
    table = ParameterTable(grid, agents, n_states, n_actions)
    logs = _run_groups(table, data, groups, cfg, None, boosted=False)
    return table, logs


def train_boosted(agents: Sequence[int], groups: Mapping[int, Sequence[int]],
                  trajectories: Mapping[int, Sequence], cfg: TrainingConfig,
                  references: Mapping[int, GroupReference], grid: SupportGrid,
                  n_states: int, n_actions: int,
                  initial_table: Optional[ParameterTable] = None):
    """Boosted training; returns ``(table, policy, logs)``.

    ``policy`` maps agent id to its greedy action per state. Reference
    snapshots are only read.
    """
    agents = list(agents)
    _check_groups(groups, agents)
    for g, ref in references.items():
        if g not in groups or ref.agent not in groups[g]:
            raise ValueError(f"reference for group {g} is not a member of that group")
        if ref.grid != grid:
            raise ValueError("reference grid differs from training grid")
    data = build_agent_data({a: trajectories[a] for a in agents}, n_states, n_actions)
    table = (initial_table.copy() if initial_table is not None
             else ParameterTable(grid, agents, n_states, n_actions))
    logs = _run_groups(table, data, groups, cfg, references, boosted=True)
    policy = {a: table.policy(a) for a in agents}
    return table, policy, logs


def train_q_learning(agents: Sequence[int], trajectories: Mapping[int, Sequence],
                     cfg: TrainingConfig, n_states: int, n_actions: int):
    """Batched tabular Q-learning on the same stored transitions.

    Each epoch samples a minibatch per agent and moves every sampled ``Q(s, a)``
    toward the mean of its one-step targets. Returns ``(q_tables, policy)``.
    """
    q_tables, policy = {}, {}
    for aid in agents:
        ts = [t for traj in trajectories[aid] for t in traj]
        if not ts:
            raise ValueError(f"agent {aid} has no transitions")
        arr = np.array([(t.state, t.action, t.reward, t.next_state, float(t.done)) for t in ts])
        s, a = arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64)
        r, nxt, live = arr[:, 2], arr[:, 3].astype(np.int64), 1.0 - arr[:, 4]
        sa = s * n_actions + a
        rng = np.random.default_rng([cfg.seed, 1_000_003, aid])
        q = np.zeros(n_states * n_actions)
        for _ in range(cfg.epochs):
            idx = rng.integers(len(ts), size=cfg.minibatch_size)
            q2 = q.reshape(n_states, n_actions)
            td = r[idx] + cfg.gamma * live[idx] * q2[nxt[idx]].max(axis=1) - q[sa[idx]]
            tot = np.bincount(sa[idx], weights=td, minlength=q.size)
            cnt = np.bincount(sa[idx], minlength=q.size)
            hit = cnt > 0
            q[hit] += cfg.q_learning_rate * tot[hit] / cnt[hit]
        q_tables[aid] = q.reshape(n_states, n_actions)
        policy[aid] = np.argmax(q_tables[aid], axis=1)
    return q_tables, policy

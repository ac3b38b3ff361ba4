"""Cluster-head selection with RB allocation, and capacity-constrained
vehicle-to-head matching.

Head selection is a greedy knapsack on diversity per RB. Matching is solved
exactly as a min-cost flow. Brute-force oracles for both live at the bottom
of the module and are used by the test-suite and ``cvfl verify``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .channel import greedy_prefix
from .exceptions import ConfigurationError


@dataclass(frozen=True)
class CandidateInfo:
    vehicle_id: int
    diversity: float
    cost: int | None
    rbs: tuple[int, ...] = ()
    t_train: float = 0.0
    standing_time: float = math.inf
    r_min: float = 0.0
    rates: np.ndarray | None = field(default=None, compare=False)

    @property
    def feasible(self) -> bool:
        return self.cost is not None

    def to_dict(self) -> dict:
        return {
            "vehicle_id": self.vehicle_id,
            "diversity": self.diversity,
            "cost": self.cost,
            "rbs": list(self.rbs),
            "t_train": self.t_train,
            "standing_time": None if math.isinf(self.standing_time) else self.standing_time,
            "r_min": None if math.isinf(self.r_min) else self.r_min,
            "rates": None if self.rates is None else [float(r) for r in self.rates],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CandidateInfo":
        return cls(
            vehicle_id=int(d["vehicle_id"]),
            diversity=float(d["diversity"]),
            cost=None if d["cost"] is None else int(d["cost"]),
            rbs=tuple(d.get("rbs", ())),
            t_train=float(d.get("t_train", 0.0)),
            standing_time=math.inf if d.get("standing_time") is None else float(d["standing_time"]),
            r_min=math.inf if d.get("r_min") is None else float(d["r_min"]),
            rates=None if d.get("rates") is None else np.asarray(d["rates"], dtype=float),
        )


@dataclass(frozen=True)
class HeadSelection:
    heads: tuple[int, ...]
    alpha: dict
    objective: float

    def to_dict(self) -> dict:
        return {
            "heads": list(self.heads),
            "alpha": {str(k): list(v) for k, v in self.alpha.items()},
            "objective": self.objective,
        }


@dataclass(frozen=True)
class MatchInstance:
    R: np.ndarray
    zeta: np.ndarray
    n_max: int

    def __post_init__(self):
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        zeta = np.atleast_2d(np.asarray(self.zeta, dtype=int))
        if R.size == 0:
            R = R.reshape(np.shape(self.R) if np.ndim(self.R) == 2 else (0, 0))
            zeta = zeta.reshape(R.shape)
        if R.shape != zeta.shape:
            raise ConfigurationError("R and zeta shapes differ")
        if R.size and (R.min() < 0 or R.max() > 1):
            raise ConfigurationError("relationship weights must lie in [0, 1]")
        if self.n_max < 0:
            raise ConfigurationError("n_max must be non-negative")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "zeta", zeta)

    @property
    def weights(self) -> np.ndarray:
        return self.R * self.zeta

    def to_dict(self) -> dict:
        return {"R": self.R.tolist(), "zeta": self.zeta.tolist(), "n_max": self.n_max}

    @classmethod
    def from_dict(cls, d: dict) -> "MatchInstance":
        return cls(np.asarray(d["R"], dtype=float), np.asarray(d["zeta"], dtype=int), int(d["n_max"]))


@dataclass(frozen=True)
class ClusterAssignment:
    """Selected (vehicle row, head column) pairs of a :class:`MatchInstance`."""

    pairs: tuple[tuple[int, int], ...]
    objective: float

    def members_of(self, head: int) -> list[int]:
        return [v for v, h in self.pairs if h == head]

    def to_dict(self) -> dict:
        return {"pairs": [list(p) for p in self.pairs], "objective": self.objective}


# --------------------------------------------------------------------------- head selection


def selection_order(candidates) -> list[CandidateInfo]:
    """Feasible candidates by decreasing diversity per RB, then diversity, then id."""
    feasible = [c for c in candidates if c.feasible]
    return sorted(feasible, key=lambda c: (-c.diversity / c.cost, -c.diversity, c.vehicle_id))


def select_heads(candidates, total_rbs: int) -> HeadSelection:
    """Greedy cluster-head selection with joint RB allocation.

    Candidates are scanned by decreasing diversity/cost. A candidate whose
    cost still fits the remaining pool is given the best-gain RBs left in the
    pool, recomputed against that pool; it is skipped when the remaining RBs
    cannot carry its minimum rate.
    """
    pool = set(range(total_rbs))
    heads, alpha, objective = [], {}, 0.0
    for c in selection_order(candidates):
        if not pool:
            break
        if c.cost > len(pool):
            continue
        if c.rates is None:
            # abstract instance without a channel: any `cost` RBs will do
            chosen = tuple(sorted(pool)[: c.cost])
        else:
            chosen = greedy_prefix(c.rates, c.r_min, pool)
        if chosen is None:
            continue
        heads.append(c.vehicle_id)
        alpha[c.vehicle_id] = tuple(sorted(chosen))
        pool.difference_update(chosen)
        objective += c.diversity
    return HeadSelection(tuple(heads), alpha, objective)


def selection_violations(candidates, selection: HeadSelection, total_rbs: int, model_size_bits: float, t_agg: float, delta: float) -> list[str]:
    """Check the per-head deadline and the global RB budget on a selection."""
    by_id = {c.vehicle_id: c for c in candidates}
    problems = []
    used = [q for rbs in selection.alpha.values() for q in rbs]
    if len(used) != len(set(used)):
        problems.append("an RB is assigned to more than one head")
    if len(used) > total_rbs or any(q < 0 or q >= total_rbs for q in used):
        problems.append("RB budget exceeded")
    for h in selection.heads:
        c = by_id[h]
        rbs = selection.alpha.get(h, ())
        rate = float(np.sum(c.rates[list(rbs)])) if rbs else 0.0
        t_up = model_size_bits / rate if rate > 0 else math.inf
        if c.t_train + delta + t_up + t_agg > c.standing_time * (1 + 1e-12):
            problems.append(f"head {h} misses its standing-time deadline")
    return problems


# --------------------------------------------------------------------------- matching


def compute_zeta(t_train, t_up, llt, T_h) -> np.ndarray:
    """1 where a member finishes training and upload before both the link
    lifetime and the head's deadline (inclusive), else 0.

    ``t_train`` has one entry per non-head, ``T_h`` one per head, and
    ``t_up``/``llt`` are ``(non-heads, heads)`` matrices.
    """
    t_train = np.asarray(t_train, dtype=float)
    need = t_train[:, None] + np.asarray(t_up, dtype=float)
    llt = np.asarray(llt, dtype=float)
    T_h = np.asarray(T_h, dtype=float)
    return ((need <= llt) & (need <= T_h[None, :])).astype(int)


class _FlowGraph:
    def __init__(self, n: int):
        self.n = n
        self.to, self.cap, self.cost, self.adj = [], [], [], [[] for _ in range(n)]

    def add(self, u: int, v: int, cap: int, cost: float) -> int:
        eid = len(self.to)
        self.to += [v, u]
        self.cap += [cap, 0]
        self.cost += [cost, -cost]
        self.adj[u].append(eid)
        self.adj[v].append(eid + 1)
        return eid

    def shortest_path(self, s: int):
        dist = [math.inf] * self.n
        prev = [-1] * self.n
        dist[s] = 0.0
        for _ in range(self.n - 1):
            changed = False
            for u in range(self.n):
                if dist[u] == math.inf:
                    continue
                for e in self.adj[u]:
                    if self.cap[e] > 0 and dist[u] + self.cost[e] < dist[self.to[e]] - 1e-15:
                        dist[self.to[e]] = dist[u] + self.cost[e]
                        prev[self.to[e]] = e
                        changed = True
            if not changed:
                break
        return dist, prev


def match_vehicles(inst: MatchInstance) -> ClusterAssignment:
    """Maximum-weight assignment of non-heads to heads.

    Each vehicle joins at most one head and each head takes at most
    ``n_max`` members; only pairs with positive ``R * zeta`` are eligible.
    Solved by successive shortest paths on the negated weights, stopping as
    soon as no augmenting path has negative cost.
    """
    W = inst.weights
    n_v, n_h = W.shape
    if n_v == 0 or n_h == 0 or inst.n_max == 0:
        return ClusterAssignment((), 0.0)
    src, sink = 0, 1 + n_v + n_h
    g = _FlowGraph(sink + 1)
    for v in range(n_v):
        g.add(src, 1 + v, 1, 0.0)
    pair_edges = {}
    for v in range(n_v):
        for h in range(n_h):
            if W[v, h] > 0:
                pair_edges[(v, h)] = g.add(1 + v, 1 + n_v + h, 1, -float(W[v, h]))
    for h in range(n_h):
        g.add(1 + n_v + h, sink, inst.n_max, 0.0)

    while True:
        dist, prev = g.shortest_path(src)
        if dist[sink] == math.inf or dist[sink] >= -1e-12:
            break
        node = sink
        while node != src:
            e = prev[node]
            g.cap[e] -= 1
            g.cap[e ^ 1] += 1
            node = g.to[e ^ 1]

    pairs = tuple(sorted(p for p, e in pair_edges.items() if g.cap[e] == 0))
    return ClusterAssignment(pairs, assignment_objective(inst, pairs))


def assignment_objective(inst: MatchInstance, pairs) -> float:
    return float(sum(inst.weights[v, h] for v, h in sorted(pairs)))


def assignment_violations(inst: MatchInstance, assignment: ClusterAssignment) -> list[str]:
    problems = []
    vs = [v for v, _ in assignment.pairs]
    if len(vs) != len(set(vs)):
        problems.append("a vehicle is matched to more than one head")
    for h in range(inst.R.shape[1]):
        if len(assignment.members_of(h)) > inst.n_max:
            problems.append(f"head {h} exceeds its capacity")
    for v, h in assignment.pairs:
        if inst.zeta[v, h] == 0:
            problems.append(f"pair ({v}, {h}) violates a time constraint")
    return problems


def planning_share(pool: int, n_max: int) -> float:
    """Smallest V2V share any member can receive under :func:`allocate_v2v`."""
    if n_max <= 0:
        return float(pool)
    return float(pool // n_max) if pool >= n_max else pool / n_max


def allocate_v2v(clusters: dict, v2v_rb_pool: int) -> dict:
    """Split each cluster's V2V pool evenly between its members.

    ``clusters`` maps a head id to its member ids. Shares are whole RBs with
    the remainder going to the lowest ids; clusters with more members than
    RBs time-share the pool, giving each member ``pool / members``.
    """
    shares = {}
    for members in clusters.values():
        members = sorted(members)
        m = len(members)
        if not m:
            continue
        if m > v2v_rb_pool:
            for v in members:
                shares[v] = v2v_rb_pool / m
            continue
        base, extra = divmod(v2v_rb_pool, m)
        for i, v in enumerate(members):
            shares[v] = base + (1 if i < extra else 0)
    return shares


# --------------------------------------------------------------------------- oracles


def exhaustive_knapsack(values, weights, capacity):
    """Best subset by brute force: returns ``(value, indices)``."""
    values, weights = list(values), list(weights)
    best = (0.0, ())
    for r in range(1, len(values) + 1):
        for subset in itertools.combinations(range(len(values)), r):
            if sum(weights[i] for i in subset) <= capacity:
                total = sum(values[i] for i in subset)
                if total > best[0]:
                    best = (total, subset)
    return best


def exhaustive_head_selection(candidates, total_rbs: int, max_states: int = 500_000):
    """Exact optimum of the head-selection problem.

    Enumerates every map from RBs to (candidate or unused); a candidate counts
    as a head when the rates of the RBs it holds reach its ``r_min``. Returns
    ``(objective, heads)``.
    """
    cands = [c for c in candidates if not math.isinf(c.r_min) and c.rates is not None]
    if not cands or total_rbs == 0:
        return 0.0, ()
    K, Q = len(cands), total_rbs
    if (K + 1) ** Q > max_states:
        raise ConfigurationError(f"{(K + 1) ** Q} assignments exceed the enumeration budget")
    rates = np.array([c.rates[:Q] for c in cands])
    r_min = np.array([c.r_min for c in cands])
    values = np.array([c.diversity for c in cands])
    grid = np.array(list(itertools.product(range(K + 1), repeat=Q)), dtype=int)  # K means unused
    onehot = grid[:, :, None] == np.arange(K)[None, None, :]
    held = np.einsum("aqk,kq->ak", onehot, rates)
    has_rb = onehot.any(axis=1)
    ok = has_rb & (held >= r_min[None, :])
    scores = ok @ values
    best = int(np.argmax(scores))
    heads = tuple(cands[k].vehicle_id for k in np.flatnonzero(ok[best]))
    return float(scores[best]), heads


def brute_force_matching(inst: MatchInstance, chunk: int = 200_000):
    """Exact matching optimum by enumerating every vehicle→head-or-none map.

    Returns ``(objective, pairs)``.
    """
    W = inst.weights
    n_v, n_h = W.shape
    if n_v == 0 or n_h == 0:
        return 0.0, ()
    Wpad = np.hstack([W, np.zeros((n_v, 1))])
    allowed = np.hstack([W > 0, np.ones((n_v, 1), dtype=bool)])
    total = (n_h + 1) ** n_v
    radix = (n_h + 1) ** np.arange(n_v)
    best_val, best_code = 0.0, None
    for start in range(0, total, chunk):
        codes = np.arange(start, min(start + chunk, total))
        choice = (codes[:, None] // radix[None, :]) % (n_h + 1)
        valid = allowed[np.arange(n_v)[None, :], choice].all(axis=1)
        counts = np.stack([(choice == h).sum(axis=1) for h in range(n_h)], axis=1)
        valid &= (counts <= inst.n_max).all(axis=1)
        vals = Wpad[np.arange(n_v)[None, :], choice].sum(axis=1)
        vals[~valid] = -1.0
        i = int(np.argmax(vals))
        if vals[i] > best_val:
            best_val, best_code = float(vals[i]), int(codes[i])
    if best_code is None:
        return 0.0, ()
    choice = [(best_code // int(r)) % (n_h + 1) for r in radix]
    pairs = tuple((v, int(h)) for v, h in enumerate(choice) if h < n_h)
    return assignment_objective(inst, pairs), pairs

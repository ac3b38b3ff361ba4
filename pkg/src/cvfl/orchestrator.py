"""Round-by-round simulation of clustered vehicular federated learning.

Each round refreshes the fleet and the uplink channel, elects cluster heads,
matches the remaining vehicles to heads over V2V links, trains locally and
aggregates twice: inside each cluster at the head, then per model version at
the edge server. At the clustering round a fraction of the fleet uploads raw
updates, which are grouped by cosine similarity into new model versions that
every vehicle then scores on its own data.

All randomness flows from the four seeds in :class:`~cvfl.config.Seeds`;
every stream is re-derived from ``(seed, round, ...)`` so individual
sub-systems can be held fixed across ablations.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from sklearn.metrics import adjusted_rand_score

from . import channel as ch
from . import datasets as dsets
from . import learner as ln
from . import mobility as mob
from . import scheduler as sch
from .config import ExperimentConfig
from .exceptions import ConfigurationError

logger = logging.getLogger(__name__)

WEIGHT_TOL = 1e-12


@dataclass
class VehicleState:
    id: int
    kinematics: mob.VehicleKinematics
    dataset: dsets.LabeledDataset
    group: int = 0
    last_upload: int | None = None
    preferred_version: int = 0
    scores: dict = field(default_factory=dict)

    def age(self, round_idx: int) -> int:
        if self.last_upload is None:
            return round_idx
        return round_idx - self.last_upload


@dataclass
class SimulationState:
    vehicles: list
    test_sets: list
    arch: ln.ModelArch

    def vehicle(self, vid: int) -> VehicleState:
        return self.vehicles[vid]


@dataclass
class RoundReport:
    round: int
    mode: str
    heads: list
    members: dict
    participants: int
    dropped: list
    feasible_candidates: int
    head_objective: float
    match_objective: float
    num_models: int
    versions: list
    accuracy: float | None
    loss: float | None
    weight_sums: list
    clustering: dict | None = None
    solver_seconds: float = 0.0

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {
            "round": self.round,
            "mode": self.mode,
            "heads": list(self.heads),
            "members": {str(h): list(m) for h, m in self.members.items()},
            "participants": self.participants,
            "dropped": list(self.dropped),
            "feasible_candidates": self.feasible_candidates,
            "head_objective": self.head_objective,
            "match_objective": self.match_objective,
            "num_models": self.num_models,
            "versions": self.versions,
            "accuracy": self.accuracy,
            "loss": self.loss,
            "weight_sums": self.weight_sums,
            "clustering": self.clustering,
        }
        if include_timing:
            d["solver_seconds"] = self.solver_seconds
        return d

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_dict(include_timing), sort_keys=True, allow_nan=False)


@dataclass
class ExperimentResult:
    reports: list
    models: list
    state: SimulationState


# --------------------------------------------------------------------------- setup


def load_data(config: ExperimentConfig):
    dc = config.data
    if dc.source == "idx":
        train = dsets.load_idx(dc.train_images, dc.train_labels, dc.num_classes)
        test = dsets.load_idx(dc.test_images, dc.test_labels, dc.num_classes)
    else:
        train, test = dsets.synth_train_test(
            dc.num_classes, dc.dim, dc.n_train, dc.n_test, [config.seeds.data, 0], dc.min_distance
        )
    return train, test


def build_state(config: ExperimentConfig) -> tuple[SimulationState, list]:
    """Partition the data, apply concept shift, spawn the fleet and init the global model."""
    train, test = load_data(config)
    parts = dsets.partition_shards(train, config.K, config.partition, [config.seeds.data, 1])
    parts, groups = dsets.apply_concept_shift(parts, config.shift)
    test_sets = dsets.split_test_by_group(test, config.shift)
    fleet = mob.spawn_fleet(config.mobility, config.K, [config.seeds.fleet, 0])
    vehicles = [
        VehicleState(id=i, kinematics=fleet[i], dataset=parts[i], group=int(groups[i]))
        for i in range(config.K)
    ]
    arch = ln.ModelArch((train.dim, *config.learner.hidden, train.num_classes))
    models = [ln.init_params(arch, [config.seeds.train, 0])]
    return SimulationState(vehicles, test_sets, arch), models


# --------------------------------------------------------------------------- round helpers


def _refresh_fleet(state: SimulationState, round_idx: int, config: ExperimentConfig) -> list:
    if config.persistent_fleet:
        current = [v.kinematics for v in state.vehicles]
        fleet = current if round_idx == 1 else mob.advance_fleet(current, config.round_duration, config.mobility)
    else:
        fleet = mob.spawn_fleet(config.mobility, config.K, [config.seeds.fleet, round_idx])
    for v, k in zip(state.vehicles, fleet):
        v.kinematics = k
    return fleet


def training_time(v: VehicleState, config: ExperimentConfig) -> float:
    return ch.training_time(len(v.dataset), config.learner.epochs, config.learner.per_sample_cost)


def evaluate_candidates(state: SimulationState, round_idx: int, config: ExperimentConfig) -> list:
    """Fleet refresh, channel draw, diversity index and RB cost of every vehicle."""
    fleet = _refresh_fleet(state, round_idx, config)
    realization = ch.draw_gains(
        fleet,
        config.radio,
        [config.seeds.channel, round_idx],
        bs_position=config.mobility.coverage_diameter / 2.0,
    )
    metas = [dsets.dataset_meta(v.dataset, v.age(round_idx)) for v in state.vehicles]
    diversity = dsets.diversity_index(metas, config.diversity_weights)
    candidates = []
    for v, I in zip(state.vehicles, diversity):
        t_train = training_time(v, config)
        T_k = mob.standing_time(v.kinematics, config.mobility)
        budget = ch.upload_budget(v.kinematics, t_train, config.radio, config.mobility)
        cost = ch.min_rate_and_cost(v.kinematics, budget, realization, config.radio)
        candidates.append(
            sch.CandidateInfo(
                vehicle_id=v.id,
                diversity=float(I),
                cost=cost.cost,
                rbs=cost.rbs,
                t_train=t_train,
                standing_time=T_k,
                r_min=cost.r_min,
                rates=cost.rates,
            )
        )
    return candidates


def relationship_matrix(state: SimulationState, non_heads, heads, num_models: int) -> np.ndarray:
    """Matching weights: 1 with a single model, otherwise the member's score for
    the head's model version, restricted to heads sharing the member's preference."""
    R = np.ones((len(non_heads), len(heads)))
    if num_models == 1:
        return R
    for i, vid in enumerate(non_heads):
        v = state.vehicle(vid)
        for j, hid in enumerate(heads):
            version = state.vehicle(hid).preferred_version
            R[i, j] = v.scores.get(version, 0.0) if version == v.preferred_version else 0.0
    return R


def _seed(config: ExperimentConfig, round_idx: int, *extra) -> list:
    return [config.seeds.train, round_idx, *extra]


def _evaluate(state: SimulationState, models: list):
    versions = []
    for m in models:
        accs = [ln.evaluate_accuracy(m, t) for t in state.test_sets]
        losses = [ln.evaluate_loss(m, t) for t in state.test_sets]
        sizes = np.array([len(t) for t in state.test_sets], dtype=float)
        versions.append(
            {
                "version": m.version,
                "accuracy": float(np.dot(accs, sizes) / sizes.sum()),
                "loss": float(np.dot(losses, sizes) / sizes.sum()),
                "group_accuracy": accs,
            }
        )
    # each ground-truth group is scored on the model most of its vehicles prefer
    group_ids = sorted({v.group for v in state.vehicles})
    accs, losses = [], []
    for g in group_ids:
        prefs = [v.preferred_version for v in state.vehicles if v.group == g]
        chosen = int(np.argmax(np.bincount(prefs, minlength=len(models))))
        accs.append(versions[chosen]["group_accuracy"][g])
        losses.append(ln.evaluate_loss(models[chosen], state.test_sets[g]))
    return versions, float(np.mean(accs)), float(np.mean(losses))


def _aggregate_versions(models: list, cluster_updates: dict) -> tuple[list, list]:
    """Edge-server FedAvg per model version over the cluster aggregates."""
    new_models, weight_sums = [], []
    for m in models:
        ups = cluster_updates.get(m.version, [])
        if ups:
            weight_sums.append(float(ln.aggregation_weights(ups).sum()))
        new_models.append(ln.fedavg(m, ups))
    for s in weight_sums:
        if abs(s - 1.0) > WEIGHT_TOL:
            raise AssertionError(f"aggregation weights sum to {s}")
    return new_models, weight_sums


# --------------------------------------------------------------------------- CVFL round


def run_round(state: SimulationState, models: list, round_idx: int, config: ExperimentConfig):
    """One communication round; returns ``(state, models, report)``."""
    if not models:
        raise ConfigurationError("need at least one model version")
    radio, mcfg = config.radio, config.mobility
    candidates = evaluate_candidates(state, round_idx, config)
    by_id = {c.vehicle_id: c for c in candidates}

    t0 = time.perf_counter()
    selection = sch.select_heads(candidates, radio.total_rbs)
    heads = list(selection.heads)
    non_heads = [v.id for v in state.vehicles if v.id not in selection.alpha]

    R = relationship_matrix(state, non_heads, heads, len(models))
    kin = {v.id: v.kinematics for v in state.vehicles}
    llt = mob.link_lifetime_matrix([kin[v] for v in non_heads], [kin[h] for h in heads], mcfg)
    share = sch.planning_share(radio.v2v_rbs, config.n_max)
    t_up = np.array(
        [[ch.v2v_upload_time(kin[v], kin[h], share, radio) for h in heads] for v in non_heads]
    ).reshape(len(non_heads), len(heads))
    t_train_nh = np.array([by_id[v].t_train for v in non_heads])
    T_h = np.array([by_id[h].t_train + radio.delta for h in heads])
    zeta = sch.compute_zeta(t_train_nh, t_up, llt, T_h)
    inst = sch.MatchInstance(R, zeta, config.n_max)
    assignment = sch.match_vehicles(inst)
    solver_seconds = time.perf_counter() - t0

    clusters = {h: [non_heads[i] for i in assignment.members_of(j)] for j, h in enumerate(heads)}
    shares = sch.allocate_v2v(clusters, radio.v2v_rbs)

    members, dropped = {}, []
    for j, h in enumerate(heads):
        kept = []
        for v in clusters[h]:
            i = non_heads.index(v)
            # deadline re-checked with the share actually granted
            need = by_id[v].t_train + ch.v2v_upload_time(kin[v], kin[h], shares[v], radio)
            if need <= min(llt[i, j], T_h[j]):
                kept.append(v)
            else:
                dropped.append(v)
        members[h] = kept

    uploaded = set(heads) | {v for m in members.values() for v in m}
    if set(heads) & {v for m in members.values() for v in m}:
        raise AssertionError("a vehicle is both head and member")

    weight_sums = []
    if config.train_models and heads:
        cluster_updates = {}
        for h in heads:
            version = state.vehicle(h).preferred_version
            base = models[version]
            ups = []
            for vid in [h, *members[h]]:
                v = state.vehicle(vid)
                ups.append(
                    ln.local_train(
                        base,
                        v.dataset,
                        config.learner.epochs,
                        config.learner.lr,
                        config.learner.batch_size,
                        _seed(config, round_idx, vid),
                        vehicle_id=vid,
                    )
                )
            weight_sums.append(float(ln.aggregation_weights(ups).sum()))
            agg = ln.fedavg(base, ups)
            cluster_updates.setdefault(version, []).append(
                ln.Update(h, version, agg.theta - base.theta, sum(u.num_samples for u in ups))
            )
        models, edge_sums = _aggregate_versions(models, cluster_updates)
        weight_sums += edge_sums

    for vid in uploaded:
        state.vehicle(vid).last_upload = round_idx

    versions, acc, loss = _evaluate(state, models) if config.train_models else ([], None, None)
    report = RoundReport(
        round=round_idx,
        mode="cvfl",
        heads=heads,
        members=members,
        participants=len(uploaded),
        dropped=sorted(dropped),
        feasible_candidates=sum(c.feasible for c in candidates),
        head_objective=selection.objective,
        match_objective=assignment.objective,
        num_models=len(models),
        versions=versions,
        accuracy=acc,
        loss=loss,
        weight_sums=weight_sums,
        solver_seconds=solver_seconds,
    )
    return state, models, report


# --------------------------------------------------------------------------- clustering step


def clustering_step(state: SimulationState, model: ln.ModelParams, config: ExperimentConfig, round_idx: int | None = None):
    """Collect raw updates on ``model``, cluster them and score the new models.

    Returns ``(models, info)``. ``info`` holds the contributing vehicles, the
    recovered partition and the preference table. With fewer than two
    updates ``model`` is kept as the only version.
    """
    if round_idx is None:
        round_idx = config.t_c
    rng = np.random.default_rng(_seed(config, round_idx, 2))
    per_round = max(1, math.ceil(config.clustering_fraction * config.K))
    remaining = list(range(config.K))
    contributors = []
    for _ in range(config.clustering_rounds):
        if not remaining:
            break
        take = sorted(rng.choice(remaining, size=min(per_round, len(remaining)), replace=False).tolist())
        contributors += take
        remaining = [v for v in remaining if v not in take]
    contributors.sort()

    updates = [
        ln.local_train(
            model,
            state.vehicle(vid).dataset,
            config.learner.epochs,
            config.learner.lr,
            config.learner.batch_size,
            _seed(config, round_idx, vid, 1),
            vehicle_id=vid,
        )
        for vid in contributors
    ]
    for vid in contributors:
        state.vehicle(vid).last_upload = round_idx

    if len(updates) < 2:
        logger.warning("clustering round %d got %d update(s); keeping the single model", round_idx, len(updates))
        return [model.with_version(0)], {"contributors": contributors, "assignment": [0] * len(updates), "num_models": 1}

    partition = ln.hierarchical_cluster(updates, config.max_clusters)
    models = ln.spawn_cluster_models(model, updates, partition)

    table = {}
    for v in state.vehicles:
        v.scores = {m.version: ln.evaluate_accuracy(m, v.dataset) for m in models}
        # max() keeps the first (lowest) version on ties
        v.preferred_version = max(v.scores, key=lambda ver: (v.scores[ver], -ver))
        table[str(v.id)] = [v.scores[m.version] for m in models]

    truth = [state.vehicle(vid).group for vid in contributors]
    info = {
        "contributors": contributors,
        "assignment": partition.assignment.tolist(),
        "num_models": len(models),
        "ari": float(adjusted_rand_score(truth, partition.assignment)),
        "preferences": table,
        "preferred_version": [v.preferred_version for v in state.vehicles],
    }
    return models, info


# --------------------------------------------------------------------------- baseline


def run_vanilla_round(state: SimulationState, models: list, round_idx: int, config: ExperimentConfig):
    """Plain FL on the same fleet and channel: a random feasible subset uploads
    directly to the edge server until the RB pool is spent."""
    candidates = evaluate_candidates(state, round_idx, config)
    rng = np.random.default_rng(_seed(config, round_idx, 99))
    order = [c for c in candidates if c.feasible]
    order = [order[i] for i in rng.permutation(len(order))]
    pool = set(range(config.radio.total_rbs))
    chosen = []
    for c in order:
        if not pool:
            break
        if c.cost > len(pool):
            continue
        rbs = ch.greedy_prefix(c.rates, c.r_min, pool)
        if rbs is None:
            continue
        chosen.append(c.vehicle_id)
        pool.difference_update(rbs)
    chosen.sort()

    model = models[0]
    weight_sums = []
    if config.train_models and chosen:
        ups = [
            ln.local_train(
                model,
                state.vehicle(vid).dataset,
                config.learner.epochs,
                config.learner.lr,
                config.learner.batch_size,
                _seed(config, round_idx, vid),
                vehicle_id=vid,
            )
            for vid in chosen
        ]
        models, weight_sums = _aggregate_versions([model], {model.version: ups})
    for vid in chosen:
        state.vehicle(vid).last_upload = round_idx

    versions, acc, loss = _evaluate(state, models) if config.train_models else ([], None, None)
    report = RoundReport(
        round=round_idx,
        mode="vanilla",
        heads=chosen,
        members={},
        participants=len(chosen),
        dropped=[],
        feasible_candidates=sum(c.feasible for c in candidates),
        head_objective=float(sum(c.diversity for c in candidates if c.vehicle_id in chosen)),
        match_objective=0.0,
        num_models=len(models),
        versions=versions,
        accuracy=acc,
        loss=loss,
        weight_sums=weight_sums,
    )
    return state, models, report


# --------------------------------------------------------------------------- drivers


def run_experiment(config: ExperimentConfig, on_report=None) -> ExperimentResult:
    """Run ``i_max`` CVFL rounds with the clustering step after round ``t_c``.

    ``on_report`` is called with each :class:`RoundReport` as soon as it exists.
    """
    state, models = build_state(config)
    reports = []
    for i in range(1, config.i_max + 1):
        state, models, report = run_round(state, models, i, config)
        if config.clustering and config.train_models and i == config.t_c and len(models) == 1:
            models, info = clustering_step(state, models[0], config, i)
            versions, acc, loss = _evaluate(state, models)
            report.clustering = info
            report.num_models = len(models)
            report.versions, report.accuracy, report.loss = versions, acc, loss
        reports.append(report)
        if on_report is not None:
            on_report(report)
    return ExperimentResult(reports, models, state)


def run_vanilla_baseline(config: ExperimentConfig, on_report=None) -> ExperimentResult:
    state, models = build_state(config)
    reports = []
    for i in range(1, config.i_max + 1):
        state, models, report = run_vanilla_round(state, models, i, config)
        reports.append(report)
        if on_report is not None:
            on_report(report)
    return ExperimentResult(reports, models, state)


def summarize(reports) -> dict:
    heads = np.array([len(r.heads) for r in reports], dtype=float)
    parts = np.array([r.participants for r in reports], dtype=float)
    accs = [r.accuracy for r in reports if r.accuracy is not None]
    return {
        "rounds": len(reports),
        "mean_heads": float(heads.mean()) if heads.size else 0.0,
        "mean_participants": float(parts.mean()) if parts.size else 0.0,
        "final_accuracy": accs[-1] if accs else None,
    }

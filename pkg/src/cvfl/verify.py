"""Self-contained oracle suites behind ``cvfl verify``.

Each suite draws its own seeded instances, compares a production routine
against an independent brute-force or numerical reference, and returns a
:class:`SuiteResult`. Production routines are looked up through their module
at call time so a patched implementation is what gets checked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.metrics import adjusted_rand_score

from . import learner, scheduler


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str


def random_candidates(rng: np.random.Generator, K: int, Q: int) -> list:
    """Head-selection instances with per-RB rates and a minimum rate each."""
    cands = []
    for k in range(K):
        rates = rng.uniform(0.2, 1.0, Q)
        r_min = float(rng.uniform(0.1, 1.5))
        order = np.argsort(-rates, kind="stable")
        prefix = np.cumsum(rates[order])
        hit = np.flatnonzero(prefix >= r_min)
        cost = int(hit[0]) + 1 if hit.size else None
        cands.append(
            scheduler.CandidateInfo(
                vehicle_id=k,
                diversity=float(rng.uniform(0.0, 1.0)),
                cost=cost,
                rbs=tuple(int(q) for q in order[:cost]) if cost else (),
                t_train=0.0,
                standing_time=math.inf,
                r_min=r_min,
                rates=rates,
            )
        )
    return cands


def random_match_instance(rng: np.random.Generator, max_v: int = 8, max_h: int = 4, max_cap: int = 3):
    n_v = int(rng.integers(1, max_v + 1))
    n_h = int(rng.integers(1, max_h + 1))
    R = rng.uniform(0.0, 1.0, (n_v, n_h))
    R[rng.uniform(size=R.shape) < 0.15] = 0.0
    zeta = (rng.uniform(size=R.shape) < 0.75).astype(int)
    return scheduler.MatchInstance(R, zeta, int(rng.integers(1, max_cap + 1)))


def knapsack_suite(seed: int = 0, instances: int = 200) -> SuiteResult:
    rng = np.random.default_rng(seed)
    ratios = []
    for _ in range(instances):
        Q = int(rng.integers(1, 5))
        cands = random_candidates(rng, int(rng.integers(1, 9)), Q)
        sel = scheduler.select_heads(cands, Q)
        problems = scheduler.selection_violations(cands, sel, Q, 0.0, 0.0, 0.0)
        # with zero model size and timings the deadline part is vacuous; check the rate itself
        for h, rbs in sel.alpha.items():
            c = cands[h]
            if float(np.sum(c.rates[list(rbs)])) < c.r_min:
                problems.append(f"head {h} below its minimum rate")
        if problems:
            return SuiteResult("knapsack", False, problems[0])
        order = scheduler.selection_order([c for c in cands if c.feasible and c.cost <= Q])
        single = order[0].diversity if order else 0.0
        if sel.objective + 1e-12 < single:
            return SuiteResult("knapsack", False, f"greedy {sel.objective} below the best-ratio vehicle {single}")
        best, _ = scheduler.exhaustive_head_selection(cands, Q)
        if sel.objective > best + 1e-9:
            return SuiteResult("knapsack", False, "greedy beat the exhaustive optimum")
        ratios.append(1.0 if best == 0 else sel.objective / best)
    return SuiteResult("knapsack", True, f"{instances} instances, mean greedy/optimal {np.mean(ratios):.4f}")


def matching_suite(seed: int = 0, instances: int = 200) -> SuiteResult:
    rng = np.random.default_rng(seed)
    for i in range(instances):
        inst = random_match_instance(rng)
        got = scheduler.match_vehicles(inst)
        problems = scheduler.assignment_violations(inst, got)
        if problems:
            return SuiteResult("matching", False, f"instance {i}: {problems[0]}")
        best, _ = scheduler.brute_force_matching(inst)
        if got.objective != best and abs(got.objective - best) > 1e-12:
            return SuiteResult("matching", False, f"instance {i}: {got.objective} vs optimum {best}")
    return SuiteResult("matching", True, f"{instances} instances match the enumeration optimum")


def finite_difference_error(arch: learner.ModelArch, seed: int = 0, n: int = 10, eps: float = 1e-6) -> float:
    """Largest relative error between analytic and central-difference gradients."""
    rng = np.random.default_rng(seed)
    theta = learner.init_params(arch, rng.integers(2**32)).theta.copy()
    X = rng.normal(size=(n, arch.input_dim))
    y = rng.integers(0, arch.num_classes, n)
    _, grad = learner.loss_and_grad(theta, arch, X, y)
    numeric = np.empty_like(theta)
    for i in range(theta.size):
        step = np.zeros_like(theta)
        step[i] = eps
        up, _ = learner.loss_and_grad(theta + step, arch, X, y)
        down, _ = learner.loss_and_grad(theta - step, arch, X, y)
        numeric[i] = (up - down) / (2 * eps)
    scale = np.maximum(np.abs(grad) + np.abs(numeric), 1e-8)
    return float(np.max(np.abs(grad - numeric) / scale))


def gradients_suite(seed: int = 0) -> SuiteResult:
    arch = learner.ModelArch((5, 8, 8, 4))
    err = finite_difference_error(arch, seed)
    return SuiteResult("gradients", err < 1e-4, f"{arch.size} parameters, max relative error {err:.2e}")


def clustering_suite(seed: int = 0, trials: int = 10) -> SuiteResult:
    """Noisy copies of two orthogonal directions must split back into their groups."""
    rng = np.random.default_rng(seed)
    arch = learner.ModelArch((4, 3, 3))
    base = learner.zero_params(arch)
    for t in range(trials):
        dirs = np.linalg.qr(rng.normal(size=(arch.size, 2)))[0].T
        truth = rng.permutation(np.arange(12) % 2)
        updates = [
            learner.Update(i, 0, dirs[g] + 0.05 * rng.normal(size=arch.size), 10)
            for i, g in enumerate(truth)
        ]
        part = learner.hierarchical_cluster(updates, 2)
        ari = adjusted_rand_score(truth, part.assignment)
        if ari != 1.0:
            return SuiteResult("clustering", False, f"trial {t}: ARI {ari:.3f}")
        models = learner.spawn_cluster_models(base, updates, part)
        if [m.version for m in models] != list(range(part.num_clusters)):
            return SuiteResult("clustering", False, "spawned model versions are not 0..n-1")
    return SuiteResult("clustering", True, f"{trials} trials recovered with ARI 1")


SUITES = {
    "knapsack": knapsack_suite,
    "matching": matching_suite,
    "gradients": gradients_suite,
    "clustering": clustering_suite,
}


def run_suites(names=None) -> list[SuiteResult]:
    names = list(SUITES) if not names else list(names)
    return [SUITES[n]() for n in names]

import numpy as np

from cvfl import learner, scheduler, verify


def test_all_suites_pass():
    results = verify.run_suites()
    assert [r.name for r in results] == list(verify.SUITES)
    assert all(r.passed for r in results), [r.detail for r in results if not r.passed]


def test_finite_difference_detects_wrong_gradient(monkeypatch):
    real = learner.loss_and_grad

    def scaled(theta, arch, X, y):
        loss, grad = real(theta, arch, X, y)
        return loss, grad * 1.01

    monkeypatch.setattr(learner, "loss_and_grad", scaled)
    assert not verify.gradients_suite().passed


def test_matching_suite_detects_capacity_off_by_one(monkeypatch):
    real = scheduler.match_vehicles
    monkeypatch.setattr(
        scheduler, "match_vehicles", lambda inst: real(scheduler.MatchInstance(inst.R, inst.zeta, inst.n_max + 1))
    )
    result = verify.matching_suite()
    assert not result.passed and "capacity" in result.detail


def test_knapsack_suite_detects_shared_rbs(monkeypatch):
    real = scheduler.select_heads

    def everyone_on_rb_zero(cands, total_rbs):
        sel = real(cands, total_rbs)
        return scheduler.HeadSelection(sel.heads, {h: (0,) for h in sel.heads}, sel.objective)

    monkeypatch.setattr(scheduler, "select_heads", everyone_on_rb_zero)
    assert not verify.knapsack_suite().passed


def test_random_instances_are_well_formed():
    rng = np.random.default_rng(3)
    for _ in range(20):
        inst = verify.random_match_instance(rng)
        assert inst.R.shape == inst.zeta.shape
        assert 1 <= inst.n_max <= 3
        cands = verify.random_candidates(rng, 5, 3)
        assert all(c.rates.shape == (3,) for c in cands)

import math

import numpy as np
import pytest
from scipy import stats

from slfi.flows import FitConfig, FlowTrainingError, flow_sample, make_flow
from slfi.inference import (
    JointDataset,
    head_from_dict,
    head_kind,
    head_to_dict,
    load_head,
    log_likelihood_term,
    log_normalizer,
    make_classifier,
    posterior_log_prob_at_truth,
    proposal_density,
    save_head,
    snl_flow,
    snl_loss,
    train_aalr,
    train_snl,
)
from slfi.mcmc import SamplerConfig, TargetDensity, run_chains
from slfi.simulators import get_simulator


def linear_gaussian(n, rng, lo=-2.0, hi=2.0, dim=2):
    theta = rng.uniform(lo, hi, (n, dim))
    return JointDataset.empty(dim, dim).append(theta, theta + rng.standard_normal((n, dim)), 1)


def test_dataset_append_and_validation():
    d = JointDataset.empty(2, 3)
    d = d.append(np.zeros((4, 2)), np.ones((4, 3)), 1).append(np.zeros((2, 2)), np.ones((2, 3)), 2)
    assert len(d) == 6 and d.rounds.tolist() == [1, 1, 1, 1, 2, 2]
    with pytest.raises(ValueError):
        d.append(np.zeros((2, 2)), np.zeros((3, 3)), 3)
    with pytest.raises(ValueError):
        d.append(np.zeros((2, 1)), np.zeros((2, 3)), 3)


def test_snl_learns_linear_gaussian_mean():
    rng = np.random.default_rng(0)
    data = linear_gaussian(20_000, rng)
    model = train_snl(data, FitConfig(max_epochs=40, patience_epochs=10, batch_size=200, lr=2e-3), hidden_dims=(32, 32))
    # held-out inputs away from the edge of the training box, where data thins out
    for theta in np.array([[0.5, -1.0], [-0.7, 0.8], [0.0, 0.0], [1.0, 0.3]]):
        x, _ = flow_sample(model, 10_000, context=theta, rng=np.random.default_rng(1))
        assert np.all(np.abs(x.mean(axis=0) - theta) < 0.1)


def test_snl_loss_invariant_to_duplication():
    rng = np.random.default_rng(2)
    data = linear_gaussian(200, rng)
    model = snl_flow(2, 2, data, seed=0)
    doubled = data.append(data.theta, data.x, 2)
    assert snl_loss(model, data) == pytest.approx(snl_loss(model, doubled), rel=1e-12)


def test_snl_needs_data():
    with pytest.raises(FlowTrainingError):
        train_snl(linear_gaussian(5, np.random.default_rng(0)))


def test_aalr_independent_pairs_give_flat_ratio():
    rng = np.random.default_rng(3)
    data = JointDataset.empty(2, 2).append(rng.uniform(-1, 1, (3000, 2)), rng.standard_normal((3000, 2)), 1)
    clf = train_aalr(data, FitConfig(batch_size=256, max_epochs=20, patience_epochs=5), hidden=(32, 32))
    held_t, held_x = rng.uniform(-1, 1, (2000, 2)), rng.standard_normal((2000, 2))
    assert abs(clf.logit(held_t, held_x).mean()) < 0.1


def test_aalr_separable_pairs_classified():
    rng = np.random.default_rng(4)
    theta = rng.uniform(-3, 3, (3000, 1))
    data = JointDataset.empty(1, 1).append(theta, theta.copy(), 1)
    clf = train_aalr(data, FitConfig(batch_size=128, max_epochs=40, patience_epochs=10, lr=3e-3), hidden=(64, 64))
    t = rng.uniform(-3, 3, (2000, 1))
    joint = clf.logit(t, t) > 0
    marg = clf.logit(t, rng.uniform(-3, 3, (2000, 1))) < 0
    assert np.concatenate([joint, marg]).mean() > 0.95


def test_aalr_log_ratio_matches_quadrature():
    rng = np.random.default_rng(5)
    theta = rng.uniform(-3, 3, (10_000, 1))
    data = JointDataset.empty(1, 1).append(theta, theta + rng.standard_normal((10_000, 1)), 1)
    clf = train_aalr(data, FitConfig(batch_size=256, max_epochs=60, patience_epochs=10, lr=1e-3), hidden=(64, 64))
    grid = np.linspace(-3, 3, 6001)
    marginal = np.trapezoid(stats.norm.pdf(0.0, grid, 1.0), grid) / 6.0
    exact = math.log(stats.norm.pdf(0.0) / marginal)
    assert abs(clf.logit([[0.0]], [[0.0]])[0] - exact) < 0.2


def test_proposal_support_and_first_round():
    sim = get_simulator("slcp16")
    data = JointDataset.empty(5, 50).append(sim.sample_prior(30, np.random.default_rng(0)),
                                            np.random.default_rng(1).standard_normal((30, 50)), 1)
    head = snl_flow(50, 5, data)
    prop = proposal_density(head, sim)
    assert prop(np.full(5, 3.5)) == -np.inf
    vals = prop(sim.sample_prior(500, np.random.default_rng(2)))
    assert np.all(np.isfinite(vals))
    prior = proposal_density(None, sim)
    assert np.allclose(prior(sim.sample_prior(10, np.random.default_rng(3))), -5 * math.log(6.0))


def test_offset_shifts_density_not_chains():
    sim = get_simulator("slcp-d", d=2)
    head = snl_flow(10, 2, JointDataset.empty(2, 10).append(np.zeros((1, 2)), np.zeros((1, 10)), 1))
    head = head.with_params(head.params.with_values(head.params.values + 0.05))
    a, b = proposal_density(head, sim), proposal_density(head, sim, offset=7.5)
    pts = sim.sample_prior(20, np.random.default_rng(4))
    assert np.allclose(b(pts) - a(pts), 7.5)
    cfg = SamplerConfig("mh", transitions_t=30, seed=1)
    assert np.array_equal(run_chains(a, 10, cfg).draws, run_chains(b, 10, cfg).draws)


def test_constant_head_truth_score_is_log_volume():
    sim = get_simulator("slcp16")
    head = make_flow(50, 5)  # identity flow: q(x_o | theta) does not depend on theta
    score = posterior_log_prob_at_truth(head, sim, 1000, np.random.default_rng(0))
    assert score.value == pytest.approx(16 * 5 * math.log(6.0), abs=1e-8)
    assert not score.approximate
    # a constant factor on q cancels in the normalisation
    prop = proposal_density(head, sim, offset=math.log(2.0))
    log_z, _ = log_normalizer(prop, 1000, np.random.default_rng(0))
    assert -float(np.sum(prop(sim.modes) - log_z)) == pytest.approx(score.value, abs=1e-8)


def gaussian_target(mu, sd, lo=-3.0, hi=3.0):
    mu, sd = np.asarray(mu), np.asarray(sd)
    return TargetDensity(lambda t: stats.norm.logpdf(t, mu, sd).sum(axis=1), np.full(2, lo), np.full(2, hi))


def test_normalizer_matches_closed_form():
    mu, sd = np.array([0.5, -1.0]), np.array([0.4, 0.7])
    exact = float(np.sum(np.log(stats.norm.cdf(3, mu, sd) - stats.norm.cdf(-3, mu, sd))))
    log_z, se = log_normalizer(gaussian_target(mu, sd), 100_000, np.random.default_rng(0))
    assert abs(log_z - exact) < 0.1 and se > 0
    log_z2, _ = log_normalizer(gaussian_target(mu, sd), 100_000, np.random.default_rng(1), surrogate=make_flow(2))
    assert abs(log_z2 - exact) < 0.1
    with pytest.raises(ValueError):
        log_normalizer(gaussian_target(mu, sd), 1, np.random.default_rng(0))


def test_gaussian_posterior_truth_score():
    # Monte Carlo normaliser against grid quadrature of the same trained head
    sim = get_simulator("slcp-d", d=2)
    rng = np.random.default_rng(0)
    theta = sim.sample_prior(3000, rng)
    data = JointDataset.empty(2, 10).append(theta, np.tile(theta**2, 5) + rng.standard_normal((3000, 10)), 1)
    head = train_snl(data, FitConfig(max_epochs=2), hidden_dims=(8,))
    score = posterior_log_prob_at_truth(head, sim, 20_000, np.random.default_rng(1))
    prop = proposal_density(head, sim)
    g = np.linspace(-3, 3, 401)
    grid = np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
    log_z = math.log(np.trapezoid(np.trapezoid(np.exp(prop(grid)).reshape(401, 401), g), g))
    expected = -float(np.sum(prop(sim.modes) - log_z))
    assert abs(score.value - expected) < 0.1 * sim.n_modes


@pytest.mark.parametrize("kind", ["snl", "aalr"])
def test_head_persistence(tmp_path, kind):
    rng = np.random.default_rng(6)
    data = linear_gaussian(100, rng)
    head = snl_flow(2, 2, data, seed=1) if kind == "snl" else make_classifier(2, 2, data, hidden=(8, 8), seed=1)
    head = head_from_dict(head_to_dict(head))
    assert head_kind(head) == kind
    save_head(head, tmp_path / "h.json")
    back = load_head(tmp_path / "h.json")
    th = rng.standard_normal((5, 2))
    assert np.array_equal(log_likelihood_term(head, th, np.ones(2)), log_likelihood_term(back, th, np.ones(2)))
    with pytest.raises(ValueError):
        head_from_dict({"head": "gp"})


def test_head_kind_rejects_other_types():
    with pytest.raises(TypeError):
        head_kind(object())

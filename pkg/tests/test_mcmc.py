import numpy as np
import pytest
from scipy import stats

from slfi.mcmc import (
    MCMCError,
    SamplerConfig,
    TargetDensity,
    keyed_rng,
    mh_transition,
    run_chains,
    sample_chains,
    slice_transition,
)


def normal_target(lo=-10.0, hi=10.0, dim=1):
    return TargetDensity(lambda t: -0.5 * np.sum(t * t, axis=1), np.full(dim, lo), np.full(dim, hi))


def uniform_target(dim=2):
    return TargetDensity(lambda t: np.zeros(t.shape[0]), np.zeros(dim), np.ones(dim))


def test_uniform_target_always_accepts_inside_moves():
    target = uniform_target()
    rng = np.random.default_rng(0)
    for _ in range(100):
        state = np.array([0.5, 0.5])
        new, accepted = mh_transition(state, target, 0.01, rng)
        if target.inside(new)[0] and accepted:
            continue
        # only a proposal outside the box may be refused
        assert not accepted and np.array_equal(new, state)
    run = run_chains(target, 50, SamplerConfig("mh", 1e-4, transitions_t=20))
    assert np.all(run.acceptance_rates == 1.0)


def test_minus_infinity_region_rejected():
    target = TargetDensity(lambda t: np.where(t[:, 0] > 0.5, -np.inf, 0.0), [0.0], [1.0])
    rng = np.random.default_rng(1)
    state = np.array([0.2])
    for _ in range(200):
        new, accepted = mh_transition(state, target, 0.5, rng)
        assert new[0] <= 0.5
        if not accepted:
            assert np.array_equal(new, state)
        state = new


def test_transition_rejects_outside_state():
    with pytest.raises(MCMCError):
        mh_transition(np.array([2.0, 0.0]), uniform_target(), 0.1, np.random.default_rng(0))


def test_nan_target_raises():
    target = TargetDensity(lambda t: np.full(t.shape[0], np.nan), [0.0], [1.0])
    with pytest.raises(MCMCError, match="NaN"):
        target(np.array([0.5]))


@pytest.mark.parametrize("kind", ["mh", "slice"])
def test_truncated_normal_moments(kind):
    target = normal_target()
    cfg = SamplerConfig(kind, mh_step_scale=2.4, slice_initial_width=2.0, burn_in=100, thinning=5, seed=3)
    draws = sample_chains(target, 100_000, 100, cfg)[:, 0]
    assert draws.size == 100_000
    assert abs(draws.mean()) < 0.02
    assert 0.95 <= draws.var() <= 1.05


def test_piecewise_constant_target_cell_frequencies():
    weights = np.array([0.2, 0.3, 0.5])
    heights = weights / weights.sum()
    target = TargetDensity(lambda t: np.log(heights[np.minimum(t[:, 0].astype(int), 2)]), [0.0], [3.0])
    # brute-force stationary cell masses: integrate the density cell by cell
    grid = np.linspace(0, 3, 300_001)[:-1] + 0.5e-5
    dens = np.exp(target(grid[:, None]))
    exact = np.array([dens[(grid >= i) & (grid < i + 1)].sum() for i in range(3)])
    exact /= exact.sum()
    draws = sample_chains(target, 100_000, 100, SamplerConfig("mh", 1.0, burn_in=50, thinning=5, seed=4))
    freq = np.bincount(draws[:, 0].astype(int), minlength=3) / draws.shape[0]
    assert 0.5 * np.abs(freq - exact).sum() <= 0.01


def test_slice_uniform_target_one_sweep_is_uniform():
    target = uniform_target(dim=1)
    # stationarity: a uniform state stays uniform after one sweep
    start = np.random.default_rng(0).random((10_000, 1))
    run = run_chains(target, 10_000, SamplerConfig("slice", transitions_t=1, seed=2), init=start)
    assert not np.array_equal(run.draws, start)
    assert stats.kstest(run.draws[:, 0], "uniform").pvalue > 0.01


def test_slice_stays_in_narrow_support():
    lo, hi = 0.40, 0.41
    target = TargetDensity(lambda t: np.where((t[:, 0] >= lo) & (t[:, 0] <= hi), 0.0, -np.inf), [0.0], [1.0])
    rng = np.random.default_rng(0)
    state = np.array([0.405])
    for _ in range(200):
        state = slice_transition(state, target, SamplerConfig("slice"), rng)
        assert lo <= state[0] <= hi


def test_slice_normal_variance():
    draws = sample_chains(normal_target(), 100_000, 100, SamplerConfig("slice", slice_initial_width=2.0, seed=5, thinning=2))
    assert 0.95 <= draws.var() <= 1.05


def test_zero_transitions_returns_init():
    target = normal_target(dim=3)
    run = run_chains(target, 7, SamplerConfig(transitions_t=0, seed=1))
    assert np.array_equal(run.draws, run.init)
    assert run.n_chains == 7


@pytest.mark.parametrize("kind", ["mh", "slice"])
def test_chain_paths_independent_of_chain_count(kind):
    target = normal_target(dim=2)
    cfg = SamplerConfig(kind, transitions_t=40, seed=8)
    small = run_chains(target, 5, cfg)
    big = run_chains(target, 200, cfg)
    assert np.array_equal(small.draws, big.draws[:5])


def test_repeat_runs_identical():
    target = normal_target(dim=2)
    cfg = SamplerConfig("mh", transitions_t=30, seed=11)
    assert run_chains(target, 1, cfg).draws.tobytes() == run_chains(target, 1, cfg).draws.tobytes()
    assert sample_chains(target, 50, 3, cfg).tobytes() == sample_chains(target, 50, 3, cfg).tobytes()


def test_sample_chains_time_major_layout():
    target = normal_target(dim=1)
    out = sample_chains(target, 10, 4, SamplerConfig(seed=0))
    assert out.shape == (10, 1)
    assert sample_chains(target, 0, 4, SamplerConfig()).shape == (0, 1)


def test_custom_init_shape_checked():
    with pytest.raises(ValueError):
        run_chains(normal_target(dim=2), 3, SamplerConfig(), init=np.zeros((2, 2)))
    with pytest.raises(MCMCError):
        run_chains(normal_target(dim=1), 1, SamplerConfig(), init=np.array([[20.0]]))


@pytest.mark.parametrize("kw", [{"kind": "hmc"}, {"thinning": 0}, {"transitions_t": -1}, {"mh_step_scale": -1.0},
                                {"slice_initial_width": 0.0}, {"slice_max_stepout": -2}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SamplerConfig(**kw)


def test_keyed_rng_is_pure():
    assert keyed_rng(1, 2, 3).random() == keyed_rng(1, 2, 3).random()
    assert keyed_rng(1, 2, 3).random() != keyed_rng(1, 2, 4).random()


def test_many_chains_cover_slcp256_modes():
    from slfi.metrics import ModeSet, missed_mode
    from slfi.simulators import exact_posterior, get_simulator

    sim = get_simulator("slcp256")
    target = TargetDensity(exact_posterior(sim), sim.lo, sim.hi)
    run = run_chains(target, 1000, SamplerConfig("mh", 0.1, transitions_t=300, seed=0))
    assert missed_mode(run.draws, ModeSet.for_simulator(sim)) <= 30

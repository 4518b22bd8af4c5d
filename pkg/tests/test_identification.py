import dataclasses

import numpy as np
import pytest

from feeplan.errors import ConvergenceError, InvalidInputError, NoInformationError
from feeplan.fee import PARAM_NAMES, REFERENCE_SOIL
from feeplan.identification import (
    StageSpec,
    TraceModel,
    identify,
    initial_guesses,
    run_pipeline,
    stage1_fit,
    stage1_residual,
    stage2_fit,
    stage2_residual,
    stage3_fit,
    stage3_residual,
)
from feeplan.nls import _fd_jacobian, bounded_nls_solve
from feeplan.sensitivity import make_rom
from feeplan.traces import DEFAULT_BOUNDS, DigTrace, ScenarioConfig, reference_paths, synth_trace

CFG = ScenarioConfig()
LO = np.array([DEFAULT_BOUNDS[k][0] for k in PARAM_NAMES])
HI = np.array([DEFAULT_BOUNDS[k][1] for k in PARAM_NAMES])
MID = 0.5 * (LO + HI)
TRUE = REFERENCE_SOIL.to_array()


@pytest.fixture(scope="module")
def clean():
    return synth_trace(CFG, reference_paths(CFG.pile)[0].poses, 0.01)


@pytest.fixture(scope="module")
def noisy():
    return synth_trace(dataclasses.replace(CFG, noise_rel=0.02, rng_seed=0), reference_paths(CFG.pile)[0].poses, 0.01)


def _rms(r):
    return float(np.sqrt(np.mean(r**2)))


# -- solver ---------------------------------------------------------------------------

def test_linear_residual_inside_box():
    c = np.array([0.3, -1.2, 4.0])
    x, d = bounded_nls_solve(lambda x: x - c, np.zeros(3), ([-2, -2, -5], [2, 2, 5]))
    assert d.converged
    np.testing.assert_allclose(x, c, atol=1e-9)


def test_linear_residual_projects_to_nearest_bound():
    c = np.array([3.0, -0.5, -7.0])
    x, d = bounded_nls_solve(lambda x: x - c, np.zeros(3), ([-1, -1, -1], [1, 1, 1]))
    np.testing.assert_allclose(x, [1.0, -0.5, -1.0], atol=1e-9)


def test_rosenbrock_from_ten_starts():
    def res(x):
        return np.array([10.0 * (x[1] - x[0] ** 2), 1.0 - x[0]])

    rng = np.random.default_rng(0)
    for _ in range(10):
        x0 = rng.uniform(-2.0, 2.0, 2)
        x, d = bounded_nls_solve(res, x0, ([-3, -3], [3, 3]), max_iter=2000)
        assert 0.5 * float(res(x) @ res(x)) < 1e-8


def test_cost_history_monotone_and_inside_box():
    seen = []

    def res(x):
        seen.append(x.copy())
        return np.array([np.sin(3 * x[0]) + x[1] ** 2 - 2.0, x[0] * x[1] - 0.4, x[0] - 2.5])

    x, d = bounded_nls_solve(res, np.array([0.1, 0.1]), ([0, 0], [1, 1]))
    assert np.all(np.diff(d.cost_history) <= 0)
    assert all(np.all(s >= 0) and np.all(s <= 1) for s in seen)


def test_iteration_cap_returns_best_so_far():
    def res(x):
        return np.array([10.0 * (x[1] - x[0] ** 2), 1.0 - x[0]])

    x, d = bounded_nls_solve(res, np.array([-1.5, 2.0]), ([-3, -3], [3, 3]), max_iter=2)
    assert not d.converged and d.iterations == 2
    assert d.cost == min(d.cost_history)


@pytest.mark.parametrize("x0,bounds", [
    ([2.0], ([0.0], [1.0])),
    ([0.5], ([1.0], [0.0])),
    ([0.5], ([0.0], [np.inf])),
])
def test_solver_rejects_bad_start_or_bounds(x0, bounds):
    with pytest.raises(InvalidInputError):
        bounded_nls_solve(lambda x: x, x0, bounds)


def test_fd_jacobian_one_sided_at_bounds():
    def f(u):
        return np.array([u[0] ** 2, 3 * u[1]])

    u = np.array([1.0, 0.0])
    J = _fd_jacobian(f, u, f(u), 1e-6)
    np.testing.assert_allclose(J, [[2.0, 0.0], [0.0, 3.0]], atol=1e-5)


# -- stage fixed points and recovery ----------------------------------------------------------

def test_stages_are_fixed_points_at_truth(clean):
    peak = clean.F_T.max()
    th, r = stage1_fit(clean, StageSpec.for_stage(1), CFG.tool, CFG.pile, TRUE)
    np.testing.assert_allclose(th, TRUE, rtol=1e-9)
    assert r.rmse_FT <= 1e-6 * peak
    th, r = stage2_fit(clean, StageSpec.for_stage(2), TRUE, CFG.tool, CFG.pile)
    np.testing.assert_allclose(th, TRUE, rtol=1e-9)
    th, r = stage3_fit(clean, StageSpec.for_stage(3), TRUE, CFG.tool, CFG.pile)
    np.testing.assert_allclose(th, TRUE, rtol=1e-9)


def test_truth_is_stationary_for_every_stage(clean):
    m = TraceModel(clean, CFG.tool, CFG.pile)
    for stage, res in ((1, stage1_residual(m)), (2, stage2_residual(m, TRUE[4])), (3, stage3_residual(m))):
        assert np.max(np.abs(res(TRUE))) <= 1e-6 * clean.F_T.max(), stage


def _peak_fr(tr):
    return float(np.max(np.hypot(tr.F_T, tr.F_N)))


def test_stage1_midpoint_recovery(clean, noisy):
    # noise is drawn relative to peak F_R, so that is the yardstick
    for tr, tol in ((clean, 0.01), (noisy, 0.03)):
        m = TraceModel(tr, CFG.tool, CFG.pile)
        th, _ = stage1_fit(tr, StageSpec.for_stage(1), CFG.tool, CFG.pile, MID, model=m)
        assert _rms(stage1_residual(m)(th)) <= tol * _peak_fr(tr)
        assert np.all(th >= LO) and np.all(th <= HI)


def test_stage2_midpoint_recovery(clean):
    start = TRUE.copy()
    start[[0, 1, 3]] = MID[[0, 1, 3]]
    th, r = stage2_fit(clean, StageSpec.for_stage(2), start, CFG.tool, CFG.pile)
    assert r.rmse_FT <= 0.01 * clean.F_T.max()
    assert r.rmse_FN <= 0.01 * clean.F_N.max()


def test_stage2_rom_with_gamma_at_truth_matches_full(clean):
    start = TRUE.copy()
    start[[0, 1, 3]] = MID[[0, 1, 3]]
    rom = make_rom({"gamma"}, nominal={"gamma": REFERENCE_SOIL.gamma})
    spec = StageSpec.for_stage(2, rom)
    assert len(spec.free_params) == 2
    _, full = stage2_fit(clean, StageSpec.for_stage(2), start, CFG.tool, CFG.pile)
    _, red = stage2_fit(clean, spec, start, CFG.tool, CFG.pile)
    assert red.rmse_FN <= full.rmse_FN + 1e-6 * clean.F_N.max()


def test_stage3_strictly_reduces_perturbed_bekker(clean):
    start = TRUE.copy()
    start[7] = 0.5 * (TRUE[7] + LO[7])
    m = TraceModel(clean, CFG.tool, CFG.pile)
    before = m.rmse(start)[0]
    _, r = stage3_fit(clean, StageSpec.for_stage(3), start, CFG.tool, CFG.pile, model=m)
    assert r.rmse_FT < before
    assert r.rmse_FT <= 1e-6 * clean.F_T.max()


def test_stage_objectives_monotone(noisy):
    r = identify(noisy, CFG.tool, CFG.pile, MID)
    for s in r.stages:
        assert np.all(np.diff(s.cost_history) <= 0)


def test_stage3_never_increases_ft_rmse(noisy):
    for i, theta0 in enumerate(initial_guesses(4, seed=1)):
        m = TraceModel(noisy, CFG.tool, CFG.pile)
        th, _ = stage1_fit(noisy, StageSpec.for_stage(1), CFG.tool, CFG.pile, theta0, model=m)
        th, _ = stage2_fit(noisy, StageSpec.for_stage(2), th, CFG.tool, CFG.pile, model=m)
        before = m.rmse(th)[0]
        _, r = stage3_fit(noisy, StageSpec.for_stage(3), th, CFG.tool, CFG.pile, model=m)
        assert r.rmse_FT <= before, i


def test_stage_spec_rejects_wrong_parameters():
    with pytest.raises(InvalidInputError):
        StageSpec(stage=3, free_params=("gamma",), fixed_params={}, bounds=DEFAULT_BOUNDS)
    with pytest.raises(InvalidInputError):
        StageSpec(stage=4, free_params=(), fixed_params={}, bounds=DEFAULT_BOUNDS)
    with pytest.raises(InvalidInputError):
        stage1_fit(None, StageSpec.for_stage(2), CFG.tool, CFG.pile, TRUE)


def test_unengaged_trace_has_no_information():
    n = 10
    x = np.linspace(0.1, 1.0, n)
    tr = DigTrace(t=np.arange(n) * 0.1, x_b=x, z_b=CFG.pile.height(x) + 0.5, Phi=np.zeros(n),
                  F_T=np.zeros(n), F_N=np.zeros(n))
    with pytest.raises(NoInformationError):
        run_pipeline(tr, starts=1)


# -- pipeline ---------------------------------------------------------------------------------

def test_single_start_from_truth_is_exact(clean):
    p = run_pipeline(clean, starts=1, init=REFERENCE_SOIL)
    np.testing.assert_allclose(p.best.theta_hat.to_array(), TRUE, rtol=1e-9)


def test_midpoint_pipeline_recovers_forces(clean):
    r = run_pipeline(clean, starts=1, init="midpoint").best
    assert r.rmse_FT <= 0.01 * clean.F_T.max()
    assert r.rmse_FN <= 0.01 * clean.F_N.max()
    th = r.theta_hat
    assert th.n == pytest.approx(REFERENCE_SOIL.n, rel=1e-6)
    # only k_c / b + k_phi enters the pressure law
    b = CFG.tool.b
    assert th.k_c / b + th.k_phi == pytest.approx(REFERENCE_SOIL.k_c / b + REFERENCE_SOIL.k_phi, rel=1e-6)


def test_delta_rom_inflates_stage3_rmse(clean):
    full = run_pipeline(clean, starts=1, init="midpoint").best
    red = run_pipeline(clean, make_rom({"delta"}), starts=1, init="midpoint").best
    assert red.rmse_FT > 10 * full.rmse_FT + 1.0


def test_rom_nesting_at_truth(clean):
    full = run_pipeline(clean, starts=1, init="midpoint").best
    for k in ("C_a", "gamma", "C"):
        rom = make_rom({k}, nominal={k: getattr(REFERENCE_SOIL, k)})
        red = run_pipeline(clean, rom, starts=1, init="midpoint").best
        assert red.score <= full.score + 1e-12 * clean.F_T.max() ** 2, k


def test_pipeline_is_deterministic(noisy):
    a = run_pipeline(noisy, starts=2, seed=7)
    b = run_pipeline(noisy, starts=2, seed=7)
    for ra, rb in zip(a.starts, b.starts):
        ja, jb = ra.to_json(), rb.to_json()
        ja.pop("wall_time_s"), jb.pop("wall_time_s")
        assert ja == jb


def test_best_start_minimizes_score(noisy):
    p = run_pipeline(noisy, starts=3, seed=2)
    assert p.best.score == min(r.score for r in p.starts if r.converged)
    assert p.summary()["converged_starts"] >= 1
    for r in p.starts:
        th = r.theta_hat.to_array()
        assert np.all(th >= LO) and np.all(th <= HI)


def test_random_starts_are_seeded_and_in_box():
    a, b = initial_guesses(5, seed=3), initial_guesses(5, seed=3)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert all(np.all(x >= LO) and np.all(x <= HI) for x in a)
    assert not np.array_equal(a[0], initial_guesses(5, seed=4)[0])


def test_all_starts_failing_aggregates_diagnostics(noisy):
    with pytest.raises(ConvergenceError) as exc:
        run_pipeline(noisy, starts=2, seed=0, max_iter=1)
    assert len(exc.value.diagnostics) == 2


def test_pipeline_rejects_zero_starts(clean):
    with pytest.raises(InvalidInputError):
        run_pipeline(clean, starts=0)


def test_every_random_start_recovers_noiseless_forces(clean):
    p = run_pipeline(clean, starts=12, seed=0)
    for r in p.starts:
        assert r.rmse_FT <= 1e-6 * clean.F_T.max(), r.start_index
        assert r.rmse_FN <= 1e-6 * clean.F_N.max(), r.start_index

import json
import math

import numpy as np
import pytest
from scipy.linalg import expm

from feeplan.errors import ConfigError
from feeplan.fee import G, REFERENCE_SOIL, ToolGeometry, blade_forces, engagement_from_pose
from feeplan.planner.model import (
    BucketState,
    OcpConfig,
    dynamics_jacobian,
    dynamics_rhs,
    power_demand,
    rk4_step,
    rk4_step_jacobian,
    simulate,
)
from feeplan.planner.ocp import build_nlp
from feeplan.traces import PileProfile

CFG = OcpConfig()
# below the surface, advancing and tilting
MID_DIG = np.array([120.0, 0.3, 0.1, 0.3, 0.5, 0.2])


def _inputs(N=50):
    k = np.arange(N)
    return np.stack([0.4 * np.sin(0.3 * k), -0.3 * np.cos(0.2 * k)], axis=1)


# -- dynamics ---------------------------------------------------------------------------

def test_zero_velocities_give_zero_motion():
    x = MID_DIG.copy()
    x[1] = x[2] = 0.0
    f = dynamics_rhs(x, [0.2, -0.1], CFG)
    assert f[0] == 0.0 and f[4] == 0.0 and f[5] == 0.0
    assert f[1] == 0.2 and f[2] == -0.1 and f[3] == 0.0


def test_theta_zero_collapses_to_translation():
    cfg = CFG.replace(Theta=0.0)
    x = np.array([0.0, 0.37, 0.0, 0.0, 0.2, 0.1])
    f = dynamics_rhs(x, [0.0, 0.0], cfg)
    assert f[4] == 0.37 and f[5] == 0.0


def test_mid_dig_matches_hand_evaluation():
    m, v, w, Phi, x, z = MID_DIG
    r, th = CFG.tool.r, CFG.Theta
    xd = (v + r * w * math.cos(th)) * math.cos(Phi) - r * w * math.sin(th) * math.sin(Phi)
    zd = (v + r * w * math.cos(th)) * math.sin(Phi) + r * w * math.sin(th) * math.cos(Phi)
    depth = math.tan(0.785) * x - z
    mdot = REFERENCE_SOIL.gamma * CFG.tool.w * xd * depth
    f = dynamics_rhs(MID_DIG, [0.1, 0.2], CFG)
    np.testing.assert_allclose(f, [mdot, 0.1, 0.2, w, xd, zd], rtol=1e-12, atol=1e-12)


def test_mass_rate_is_clamped():
    x = MID_DIG.copy()
    x[5] = 2.0  # above the surface
    assert dynamics_rhs(x, [0, 0], CFG)[0] == 0.0
    x = MID_DIG.copy()
    x[1], x[2] = -0.5, 0.0  # retreating
    assert dynamics_rhs(x, [0, 0], CFG)[0] == 0.0


def test_batched_rhs_matches_single():
    X = np.array([MID_DIG, MID_DIG * 0.5, MID_DIG * 1.1])
    U = np.array([[0.1, 0.2], [0.0, 0.0], [-0.3, 0.4]])
    F = dynamics_rhs(X, U, CFG)
    for i in range(3):
        np.testing.assert_array_equal(F[i], dynamics_rhs(X[i], U[i], CFG))


def test_dynamics_jacobian_matches_fd():
    u = np.array([0.1, 0.2])
    A, B = dynamics_jacobian(MID_DIG, u, CFG)
    h = 1e-6
    for j in range(6):
        e = np.zeros(6)
        e[j] = h
        col = (dynamics_rhs(MID_DIG + e, u, CFG) - dynamics_rhs(MID_DIG - e, u, CFG)) / (2 * h)
        np.testing.assert_allclose(A[:, j], col, rtol=1e-6, atol=1e-6)
    np.testing.assert_array_equal(B, [[0, 0], [1, 0], [0, 1], [0, 0], [0, 0], [0, 0]])


# -- power ---------------------------------------------------------------------------------

def test_power_zero_at_rest():
    x = MID_DIG.copy()
    x[1] = x[2] = 0.0
    assert power_demand(x, CFG) == 0.0


def test_power_zero_out_of_soil():
    x = MID_DIG.copy()
    x[5] = 1.0
    assert power_demand(x, CFG) == 0.0


def test_power_term_by_term():
    m, v, w, Phi, x, z = MID_DIG
    cfg = CFG.replace(tool=ToolGeometry(F_B=300.0))
    e = engagement_from_pose(x, z, Phi, cfg.pile, cfg.tool, cfg.soil, payload=m)
    f = blade_forces(cfg.soil, cfg.tool, e)
    assert e.W_load == pytest.approx(m * G)
    r, th, F_B = cfg.tool.r, cfg.Theta, cfg.tool.F_B
    P = (f.F_T + F_B * math.sin(Phi)) * (v + r * w * math.cos(th)) + (f.F_N + F_B * math.cos(Phi)) * r * w * math.sin(th)
    assert power_demand(MID_DIG, cfg) == pytest.approx(P, rel=1e-9)


def test_power_batched_matches_single():
    X = np.array([MID_DIG, MID_DIG * [1, 2, 1, 1, 1, 1]])
    P = power_demand(X, CFG)
    assert P[0] == power_demand(X[0], CFG) and P[1] == power_demand(X[1], CFG)


# -- integration ----------------------------------------------------------------------------

def test_rk4_zero_dynamics():
    x = np.array([1.0, 2.0, 3.0])
    assert np.array_equal(rk4_step(x, None, 0.1, CFG, rhs=lambda xx, uu: np.zeros_like(xx)), x)


def test_rk4_linear_ode_against_matrix_exponential():
    A = np.array([[0.0, 1.0], [-4.0, -0.3]])
    x0 = np.array([1.0, 0.0])

    def rhs(x, u):
        return A @ x

    one = rk4_step(x0, None, 0.05, CFG, rhs=rhs)
    # local error is O(dT^5)
    assert np.max(np.abs(one - expm(A * 0.05) @ x0)) <= 10 * 0.05**5

    def global_err(dT):
        x = x0.copy()
        for _ in range(round(2.0 / dT)):
            x = rk4_step(x, None, dT, CFG, rhs=rhs)
        return np.max(np.abs(x - expm(A * 2.0) @ x0))

    errs = [global_err(dT) for dT in (0.1, 0.05, 0.025)]
    slopes = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(np.abs(slopes - 4.0) <= 0.3)


def test_rk4_matches_fine_integrator():
    U = _inputs()
    coarse = simulate(CFG.x0, U, CFG.dT, CFG)
    fine = simulate(CFG.x0, U, CFG.dT, CFG, substeps=100)
    # the payload is in kg, so compare it relative to its range
    assert np.max(np.abs(coarse[:, 1:] - fine[:, 1:])) <= 1e-4
    assert np.max(np.abs(coarse[:, 0] - fine[:, 0])) <= 1e-4 * max(1.0, fine[-1, 0])


def test_rk4_jacobian_matches_fd():
    u = np.array([0.1, -0.2])
    _, Jx, Ju = rk4_step_jacobian(MID_DIG, u, CFG.dT, CFG)
    h = 1e-6
    for j in range(6):
        e = np.zeros(6)
        e[j] = h
        col = (rk4_step(MID_DIG + e, u, CFG.dT, CFG) - rk4_step(MID_DIG - e, u, CFG.dT, CFG)) / (2 * h)
        np.testing.assert_allclose(Jx[:, j], col, rtol=1e-5, atol=1e-5)
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        col = (rk4_step(MID_DIG, u + e, CFG.dT, CFG) - rk4_step(MID_DIG, u - e, CFG.dT, CFG)) / (2 * h)
        np.testing.assert_allclose(Ju[:, j], col, rtol=1e-5, atol=1e-5)


def test_rk4_jacobian_next_state_equals_step():
    u = np.array([0.1, -0.2])
    xn, _, _ = rk4_step_jacobian(MID_DIG, u, CFG.dT, CFG)
    np.testing.assert_allclose(xn, rk4_step(MID_DIG, u, CFG.dT, CFG), rtol=1e-15)


# -- transcription ---------------------------------------------------------------------------

def test_nlp_counts():
    nlp, y0 = build_nlp(CFG)
    assert nlp.n_var == 6 * 51 + 2 * 50 == 406
    assert nlp.n_eq == 6 * 50 + 1 + 6 == 307
    assert y0.size == 406


def test_equality_jacobian_matches_fd_and_sparsity():
    nlp, _ = build_nlp(CFG)
    rng = np.random.default_rng(0)
    Xs = simulate(MID_DIG, _inputs(), CFG.dT, CFG) + 1e-3 * rng.standard_normal((51, 6))
    z = nlp.pack(Xs, _inputs())
    J = nlp.eq_jac_z(z)
    h = 1e-7
    Jfd = np.empty_like(J)
    for j in range(z.size):
        e = np.zeros(z.size)
        e[j] = h * max(1.0, abs(z[j]))
        Jfd[:, j] = (nlp.eq_z(z + e) - nlp.eq_z(z - e)) / (2 * e[j])
    assert np.max(np.abs(J - Jfd)) <= 1e-5 * max(1.0, np.max(np.abs(J)))
    detected = np.abs(Jfd) > 1e-10
    assert not np.any(detected & ~nlp.sparsity)


def test_objective_gradient_matches_fd():
    nlp, y0 = build_nlp(CFG)
    y = y0 + 1e-3 * np.random.default_rng(1).standard_normal(y0.size)
    g = nlp.g(y)
    h = 1e-6
    for j in (0, 7, 13, 100, 250, 310, 405):
        e = np.zeros(y.size)
        e[j] = h
        fd = (nlp.f(y + e) - nlp.f(y - e)) / (2 * h)
        assert g[j] == pytest.approx(fd, rel=1e-4, abs=1e-6)


# -- config ------------------------------------------------------------------------------------

def test_config_json_round_trip():
    cfg = CFG.replace(N=20, m_min=80.0, P_ref=5000.0, pile=PileProfile.linear(0.61))
    back = OcpConfig.from_json(json.loads(json.dumps(cfg.to_json())))
    assert back.to_json() == cfg.to_json()
    assert back.x_hi[0] == math.inf


@pytest.mark.parametrize("changes", [
    {"N": 1},
    {"dT": 0.0},
    {"m_min": -1.0},
    {"x0": (0.0, 2.0, 0.0, 0.0, 0.1, 0.1)},
    {"u_lo": (2.0, -1.0)},
    {"P_ref": 0.0},
])
def test_config_rejects_inconsistent_values(changes):
    with pytest.raises(ConfigError):
        CFG.replace(**changes)


def test_config_from_json_names_bad_field():
    data = CFG.to_json()
    data["soil"]["gamma_kg_per_m3"] = "dense"
    with pytest.raises(ConfigError, match="gamma_kg_per_m3"):
        OcpConfig.from_json(data)
    with pytest.raises(ConfigError, match="bogus"):
        OcpConfig.from_json({"bogus": 1})


def test_bucket_state_round_trip():
    s = BucketState.from_array(MID_DIG)
    assert np.array_equal(s.to_array(), MID_DIG)

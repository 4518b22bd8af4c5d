import math

import numpy as np
import pytest

from feeplan.errors import ContractViolationError, InvalidInputError
from feeplan.fee import PARAM_NAMES
from feeplan.sensitivity import (
    DOMINANT,
    EXCLUDED_ROMS,
    LOW_INFLUENCE,
    ParamBox,
    ZeroVarianceError,
    default_box,
    enumerate_roms,
    identification_context,
    make_rom,
    rank_for_fr,
    saltelli_sample,
    sobol_indices,
    total_order_indices,
)

UNIT3 = ParamBox({"x1": (0.0, 1.0), "x2": (0.0, 1.0), "x3": (0.0, 1.0)})
PI3 = ParamBox({f"x{i}": (-math.pi, math.pi) for i in (1, 2, 3)})


def ishigami(x, a=7.0, b=0.1):
    return np.sin(x[:, 0]) + a * np.sin(x[:, 1]) ** 2 + b * x[:, 2] ** 4 * np.sin(x[:, 0])


def ishigami_total(a=7.0, b=0.1):
    pi4, pi8 = math.pi**4, math.pi**8
    V = a**2 / 8 + b * pi4 / 5 + b**2 * pi8 / 18 + 0.5
    V1 = 0.5 * (1 + b * pi4 / 5) ** 2
    V13 = b**2 * pi8 * (1 / 18 - 1 / 50)
    return {"x1": (V1 + V13) / V, "x2": a**2 / 8 / V, "x3": V13 / V}


@pytest.fixture(scope="module")
def ctx():
    return identification_context()


# -- design ---------------------------------------------------------------------

def test_saltelli_count_and_box():
    d = saltelli_sample(default_box(), 64, seed=0)
    X = d.stacked()
    assert d.evaluation_count == 640 == X.shape[0]
    assert np.all(X >= default_box().lower) and np.all(X <= default_box().upper)


@pytest.mark.parametrize("base_n", [0, 32, 100])
def test_saltelli_rejects_bad_base_n(base_n):
    with pytest.raises(InvalidInputError):
        saltelli_sample(UNIT3, base_n, seed=0)


def test_saltelli_radial_structure():
    d = saltelli_sample(UNIT3, 64, seed=1)
    for j in range(3):
        others = [i for i in range(3) if i != j]
        assert np.array_equal(d.AB[j][:, j], d.B[:, j])
        assert np.array_equal(d.AB[j][:, others], d.A[:, others])


def test_two_seeds_differ_with_same_marginal_coverage():
    a = saltelli_sample(UNIT3, 1024, seed=0)
    b = saltelli_sample(UNIT3, 1024, seed=1)
    assert not np.array_equal(a.A, b.A)
    edges = np.linspace(0, 1, 11)
    for j in range(3):
        ha = np.histogram(a.A[:, j], edges)[0] / 1024
        hb = np.histogram(b.A[:, j], edges)[0] / 1024
        assert np.all(np.abs(ha - hb) <= 0.05 * 0.1 + 1e-12)
        assert np.mean(a.A[:, j]) == pytest.approx(np.mean(b.A[:, j]), abs=0.05 * 0.5)


def test_degenerate_range_is_fixed_with_warning():
    box = ParamBox({"x1": (0.0, 1.0), "x2": (0.5, 0.5)})
    with pytest.warns(UserWarning, match="x2"):
        d = saltelli_sample(box, 64, seed=0)
    assert d.evaluation_count == 3 * 64
    assert np.all(d.stacked()[:, 1] == 0.5)
    res = total_order_indices(d, d.stacked()[:, 0] ** 2)
    assert res.S_T["x2"] == 0.0


# -- estimator oracles ------------------------------------------------------------------

def test_single_active_input():
    res = sobol_indices(lambda x: x[:, 0], UNIT3, 2**12, seed=0)
    assert res.S_T["x1"] == pytest.approx(1.0, abs=0.01)
    assert res.S_T["x2"] <= 0.01 and res.S_T["x3"] <= 0.01


def test_ishigami_closed_form():
    res = sobol_indices(ishigami, PI3, 2**13, seed=0)
    for k, ref in ishigami_total().items():
        assert abs(res.S_T[k] - ref) <= 0.02


def test_additive_function():
    a = np.array([1.0, 2.0, 3.0])
    res = sobol_indices(lambda x: x @ a, UNIT3, 2**13, seed=3)
    for i, k in enumerate(("x1", "x2", "x3")):
        assert abs(res.S_T[k] - a[i] ** 2 / np.sum(a**2)) <= 0.02


def test_inactive_input_within_bootstrap_noise():
    res = sobol_indices(lambda x: x[:, 0] + x[:, 1] ** 2, UNIT3, 2**10, seed=2)
    assert res.S_T["x3"] <= max(res.confidence["x3"], 1e-12)


def test_constant_function_raises():
    with pytest.raises(ZeroVarianceError):
        sobol_indices(lambda x: np.ones(len(x)), UNIT3, 64, seed=0)


def test_non_finite_evaluations_rejected():
    d = saltelli_sample(UNIT3, 64, seed=0)
    v = d.stacked()[:, 0].copy()
    v[3] = np.nan
    with pytest.raises(InvalidInputError):
        total_order_indices(d, v)


def test_seed_determinism_is_bit_exact():
    a = sobol_indices(ishigami, PI3, 256, seed=5)
    b = sobol_indices(ishigami, PI3, 256, seed=5)
    assert a.to_json() == b.to_json()


# -- F_R ranking ---------------------------------------------------------------------------

def test_ranking_top3_stable_across_seeds(ctx):
    for seed in range(5):
        res = rank_for_fr(base_n=2**10, seed=seed, ctx=ctx)
        assert res.ranking[:3] == ["n", "k_c", "k_phi"]


def test_low_influence_group_is_small(ctx):
    res = rank_for_fr(base_n=2**11, seed=0, ctx=ctx)
    for k in LOW_INFLUENCE:
        assert res.S_T[k] <= 1e-3


def test_doubling_base_n_stays_within_half_width(ctx):
    a = rank_for_fr(base_n=2**11, seed=0, ctx=ctx)
    b = rank_for_fr(base_n=2**12, seed=0, ctx=ctx)
    for k in PARAM_NAMES:
        assert abs(a.S_T[k] - b.S_T[k]) <= a.confidence[k]


def test_sample_count_structure(ctx):
    res = rank_for_fr(base_n=64, seed=0, ctx=ctx)
    assert res.sample_count == (len(PARAM_NAMES) + 2) * 64


# -- ROMs ------------------------------------------------------------------------------------

def test_make_rom_phi_gamma_at_midpoints():
    rom = make_rom({"phi", "gamma"})
    mid = default_box().midpoint()
    assert rom.fixed == {"gamma": mid["gamma"], "phi": mid["phi"]}
    assert set(rom.free) == set(PARAM_NAMES) - {"phi", "gamma"}


def test_make_rom_empty_is_full_model():
    rom = make_rom(set())
    assert rom.fixed == {} and rom.free == PARAM_NAMES and rom.label == "full"


@pytest.mark.parametrize("fix", [{"n"}, {"k_c", "phi"}, {"k_phi"}])
def test_make_rom_refuses_dominant(fix):
    with pytest.raises(ContractViolationError):
        make_rom(fix)


def test_make_rom_refuses_value_outside_box():
    with pytest.raises(ContractViolationError):
        make_rom({"gamma"}, nominal={"gamma": 5000.0})


def test_enumerate_roms_28_unique():
    roms = enumerate_roms()
    keys = [frozenset(r.fixed) for r in roms]
    assert len(roms) == 28 == len(set(keys))
    assert all(k <= set(LOW_INFLUENCE) for k in keys)
    assert not set(keys) & set(EXCLUDED_ROMS)
    assert not set(DOMINANT) & set().union(*keys)

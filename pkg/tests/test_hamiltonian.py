import dataclasses

import numpy as np
import pytest

from fbsde_nearopt import (
    FbsdeError,
    LQParams,
    MultiplierPoint,
    builtin_instance,
    check_H_convexity,
    eval_H,
    eval_H_partials,
    make_lq_instance,
    make_lq_observation_instance,
    make_scalar_nonlinear_instance,
)
from fbsde_nearopt.hamiltonian import shifted_slot
from fbsde_nearopt.model import Coefficient

from _instances import concave_control_cost_instance


def _point(spec, rng, n_pts=1):
    n, m = spec.dim_x, spec.dim_y
    return dict(
        t=float(rng.uniform(0, spec.horizon)),
        x=rng.normal(size=(n_pts, n)),
        y=rng.normal(size=(n_pts, m)),
        z1=rng.normal(size=(n_pts, m)),
        z2=rng.normal(size=(n_pts, m)),
        u=spec.control_set.sample(rng, 1)[0],
    )


def _random_mult(spec, rng):
    n, m = spec.dim_x, spec.dim_y
    return MultiplierPoint.single(
        k=rng.normal(size=m),
        p=rng.normal(size=n),
        q1=rng.normal(size=n),
        q2=rng.normal(size=n),
        R2=rng.normal(),
    )


def test_zero_multipliers_reduce_to_running_cost():
    spec = make_scalar_nonlinear_instance()
    rng = np.random.default_rng(0)
    pt = _point(spec, rng, n_pts=7)
    zero = MultiplierPoint.single(k=[0.0], p=[0.0], q1=[0.0], q2=[0.0], R2=0.0)
    h_val = eval_H(spec, pt["t"], pt["x"], pt["y"], pt["z1"], pt["z2"], pt["u"], zero)
    l_val = spec.running_l.value(pt["t"], pt["x"], pt["y"], pt["z1"], pt["z2"], pt["u"])
    assert np.allclose(h_val, l_val, atol=0.0)


def test_single_pairing():
    # b == 1, everything else zero, p = 2 -> H = 2
    spec = make_lq_instance(LQParams(a=0.0, b_coef=0.0, sigma=0.0, q=0.0, r=1.0, g=0.0))
    one_drift = Coefficient(
        value=lambda t, x, u: np.ones_like(x),
        dx=lambda t, x, u: np.zeros((x.shape[0], 1, 1)),
        du=lambda t, x, u: np.zeros((x.shape[0], 1, 1)),
    )
    spec = dataclasses.replace(spec, drift_b=one_drift)
    mult = MultiplierPoint.single(k=[0.0], p=[2.0], q1=[0.0], q2=[0.0], R2=0.0)
    val = eval_H(
        spec, 0.0, np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1)),
        np.zeros((1, 1)), np.zeros(1), mult,
    )
    assert val[0] == 2.0


def test_affinity_in_multipliers():
    spec = make_lq_observation_instance()
    rng = np.random.default_rng(1)
    pt = _point(spec, rng)
    mult = _random_mult(spec, rng)
    zero = mult.scaled(0.0)
    args = (spec, pt["t"], pt["x"], pt["y"], pt["z1"], pt["z2"], pt["u"])
    base = eval_H(*args, zero)[0]
    ref = eval_H(*args, mult)[0] - base
    for lam in (-1.0, 0.5, 2.0):
        scaled = eval_H(*args, mult.scaled(lam))[0] - base
        assert scaled == pytest.approx(lam * ref, rel=1e-12, abs=1e-12)


def test_shift_vanishes_without_sigma2_and_z2(lq_spec):
    rng = np.random.default_rng(2)
    pt = _point(lq_spec, rng)
    mult = _random_mult(lq_spec, rng)
    pt["z2"] = np.zeros_like(pt["z2"])
    slot = shifted_slot(lq_spec, pt["t"], pt["x"], pt["u"], pt["z2"], mult)
    assert slot[0] == mult.R2[0]


def test_lq_control_gradient_formula(lq_spec, lq_params):
    rng = np.random.default_rng(3)
    pt = _point(lq_spec, rng)
    mult = _random_mult(lq_spec, rng)
    parts = eval_H_partials(
        lq_spec, pt["t"], pt["x"], pt["y"], pt["z1"], pt["z2"], pt["u"], mult
    )
    expected = lq_params.r * pt["u"][0] + lq_params.b_coef * mult.p[0, 0]
    assert parts.du[0, 0] == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("name", ["lq", "lq_obs", "scalar_nonlinear", "double_well"])
def test_partials_match_finite_differences(name):
    spec = builtin_instance(name)
    rng = np.random.default_rng(4)
    step = 1e-5
    for _ in range(100):
        pt = _point(spec, rng)
        mult = _random_mult(spec, rng)
        slot = shifted_slot(spec, pt["t"], pt["x"], pt["u"], pt["z2"], mult)
        frozen = MultiplierPoint(k=mult.k, p=mult.p, q1=mult.q1, q2=mult.q2, R2=slot)
        parts = eval_H_partials(
            spec, pt["t"], pt["x"], pt["y"], pt["z1"], pt["z2"], pt["u"], mult
        )
        for slot_name, attr in (("x", "dx"), ("y", "dy"), ("z1", "dz1"), ("z2", "dz2"), ("u", "du")):
            width = pt[slot_name].shape[-1]
            for col in range(width):
                args_up = {k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in pt.items()}
                args_dn = {k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in pt.items()}
                if slot_name == "u":
                    args_up["u"][col] += step
                    args_dn["u"][col] -= step
                else:
                    args_up[slot_name][0, col] += step
                    args_dn[slot_name][0, col] -= step
                f_up = eval_H(spec, args_up["t"], args_up["x"], args_up["y"],
                              args_up["z1"], args_up["z2"], args_up["u"], frozen)[0]
                f_dn = eval_H(spec, args_dn["t"], args_dn["x"], args_dn["y"],
                              args_dn["z1"], args_dn["z2"], args_dn["u"], frozen)[0]
                fd = (f_up - f_dn) / (2 * step)
                exact = getattr(parts, attr)[0, col]
                assert abs(exact - fd) <= 1e-5 * (1.0 + abs(exact)), (name, slot_name, col)


def test_convexity_passes_on_lq(lq_spec):
    report = check_H_convexity(lq_spec, n_probes=20, seed=5)
    assert report.passed
    assert report.worst_eigenvalue >= -1e-8


def test_convexity_flags_concave_control_cost():
    report = check_H_convexity(concave_control_cost_instance(), n_probes=30, seed=6)
    assert not report.hamiltonian_ok
    assert report.worst_eigenvalue == pytest.approx(-2.0, abs=1e-3)
    assert report.witness is not None


def test_convexity_flags_double_well():
    report = check_H_convexity(builtin_instance("double_well"), n_probes=40, seed=7)
    assert not report.passed
    assert report.witness is not None
    assert "u" in report.witness


def test_quadratic_terminal_midpoint_exact(lq_spec):
    report = check_H_convexity(lq_spec, n_probes=20, seed=8)
    assert report.phi_ok
    assert report.worst_phi_violation <= 1e-9
    assert report.gamma_ok


def test_convexity_report_json(lq_spec):
    report = check_H_convexity(lq_spec, n_probes=5, seed=9)
    assert '"passed": true' in report.to_json()


def test_probe_count_validated(lq_spec):
    with pytest.raises(FbsdeError):
        check_H_convexity(lq_spec, n_probes=0)


def test_non_finite_coefficient_detected(lq_spec):
    bad = dataclasses.replace(
        lq_spec,
        drift_b=Coefficient(
            value=lambda t, x, u: np.full_like(x, np.nan),
            dx=lambda t, x, u: np.zeros((x.shape[0], 1, 1)),
            du=lambda t, x, u: np.zeros((x.shape[0], 1, 1)),
        ),
    )
    mult = MultiplierPoint.single(k=[0.0], p=[1.0], q1=[0.0], q2=[0.0], R2=0.0)
    with pytest.raises(FbsdeError, match="drift_b"):
        eval_H(bad, 0.0, np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1)),
               np.zeros((1, 1)), np.zeros(1), mult)

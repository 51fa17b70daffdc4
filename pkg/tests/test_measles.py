import dataclasses

import mpmath as mp
import numpy as np
import pytest
from scipy.integrate import solve_ivp
from scipy.special import ndtr

from blockpomp.measles import (
    CityCovariates,
    MeaslesParams,
    biweekly_times,
    build_measles_model,
    case_layout,
    force_of_infection,
    measles_graph,
    seasonal_beta,
    simulate_dataset,
    travel_matrix,
    truth_field,
)
from blockpomp.model import ParameterSwarm, is_log_zero
from blockpomp.rng import RngNode


def one_city(**param_overrides):
    cov = CityCovariates.synthetic(1)
    params = MeaslesParams.baseline(1)
    if param_overrides:
        params = dataclasses.replace(params, **param_overrides)
    return cov, params


# ---------------------------------------------------------------------------
# Seasonal forcing


def test_seasonal_beta_term_time_value():
    got = seasonal_beta(1950.0, 30.0, 52.0, 0.759, 0.5)
    expect = (1.0 + 0.5 * 0.241 / 0.759) * 30.0 * 52.0
    assert got == pytest.approx(expect, rel=1e-12)
    assert got == pytest.approx(1807.7, abs=0.05)


def test_seasonal_beta_vacation_value():
    got = seasonal_beta(1950.8, 30.0, 52.0, 0.759, 0.5)
    assert got == pytest.approx(0.5 * 30.0 * 52.0, rel=1e-12)
    assert got == pytest.approx(780.0, abs=1e-9)


def test_seasonal_beta_no_amplitude_is_flat():
    term = seasonal_beta(1950.1, 30.0, 52.0, 0.759, 0.0)
    vac = seasonal_beta(1950.9, 30.0, 52.0, 0.759, 0.0)
    assert term == vac == pytest.approx(30.0 * 52.0)


def test_seasonal_beta_yearly_average_is_preserved():
    # the boost is sized so the time average over one year stays at r0*mu_ir
    ts = 1950.0 + (np.arange(20_000) + 0.5) / 20_000
    vals = np.array([seasonal_beta(t, 30.0, 52.0, 0.759, 0.5) for t in ts])
    assert vals.mean() == pytest.approx(30.0 * 52.0, rel=1e-3)


def test_seasonal_beta_broadcasts_over_city_arrays():
    r0 = np.array([20.0, 30.0])
    got = seasonal_beta(1950.9, r0, 52.0, 0.759, 0.5)
    np.testing.assert_allclose(got, 0.5 * r0 * 52.0, rtol=1e-12)


# ---------------------------------------------------------------------------
# Gravity coupling


def test_travel_matrix_cancellation_for_symmetric_pair():
    cov = CityCovariates(("a", "b"), [1e6, 1e6], [2e4, 2e4],
                         [[0.0, 37.0], [37.0, 0.0]])
    theta = travel_matrix(cov, gravity=400.0)
    assert theta[0, 1] == pytest.approx(400.0, rel=1e-12)
    assert theta[1, 0] == pytest.approx(400.0, rel=1e-12)
    assert theta[0, 0] == theta[1, 1] == 0.0


def test_travel_matrix_linear_in_gravity():
    cov = CityCovariates.synthetic(4)
    a = travel_matrix(cov, 400.0)
    b = travel_matrix(cov, 800.0)
    np.testing.assert_allclose(b, 2.0 * a, rtol=1e-12)


def test_travel_matrix_three_city_hand_computation():
    pops = np.array([2.0, 1.0, 1.0]) * 1e5
    d = np.full((3, 3), 10.0)
    np.fill_diagonal(d, 0.0)
    cov = CityCovariates(("x", "y", "z"), pops, 0.02 * pops, d)
    theta = travel_matrix(cov, 400.0)
    # equal distances make d_bar/d cancel; p_bar = 4e5/3
    expect = 400.0 * np.outer(pops, pops) / (4e5 / 3.0) ** 2
    np.fill_diagonal(expect, 0.0)
    np.testing.assert_allclose(theta, [[0.0, 450.0, 450.0],
                                       [450.0, 0.0, 225.0],
                                       [450.0, 225.0, 0.0]], atol=1e-9)
    np.testing.assert_allclose(theta, expect, atol=1e-9)


def test_travel_matrix_is_symmetric_with_zero_diagonal():
    cov = CityCovariates.synthetic(6)
    theta = travel_matrix(cov, 400.0)
    np.testing.assert_allclose(theta, theta.T, rtol=1e-12)
    assert np.all(np.diag(theta) == 0.0)
    off = ~np.eye(6, dtype=bool)
    assert np.all(theta[off] > 0)


def test_travel_matrix_rejects_coincident_cities():
    cov = CityCovariates(("a", "b"), [1e6, 1e6], [2e4, 2e4], np.zeros((2, 2)))
    with pytest.raises(ValueError, match="distances must be positive"):
        travel_matrix(cov, 400.0)


def test_travel_matrix_single_city_has_no_coupling():
    cov = CityCovariates.synthetic(1)
    np.testing.assert_array_equal(travel_matrix(cov, 400.0), np.zeros((1, 1)))


# ---------------------------------------------------------------------------
# Force of infection


def test_force_of_infection_single_city_classical_term():
    i = np.array([[120.0]])
    lam = force_of_infection(i, np.array([1e6]), np.array([[1.0]]),
                             np.array([[1560.0]]), np.zeros((1, 1)), iota=0.0)
    assert lam[0, 0] == pytest.approx(1560.0 * 120.0 / 1e6, rel=1e-12)


def test_force_of_infection_equal_prevalence_drops_coupling():
    pops = np.array([2e6, 1e6, 5e5])
    i = np.array([[200.0, 100.0, 50.0]])  # identical I/P everywhere
    alpha = np.full((1, 3), 0.97)
    beta = np.full((1, 3), 1100.0)
    cov = CityCovariates.synthetic(3)
    cov = CityCovariates(cov.names, pops, 0.02 * pops, cov.distances)
    theta = travel_matrix(cov, 400.0)
    lam = force_of_infection(i, pops, alpha, beta, theta, iota=0.0)
    expect = beta * (i / pops) ** alpha
    np.testing.assert_allclose(lam, expect, rtol=1e-12)


def test_force_of_infection_asymmetric_high_precision():
    p = np.array([1e6, 1e6])
    i = np.array([[100.0, 400.0]])  # prevalences 1e-4 and 4e-4
    alpha = np.full((1, 2), 0.97)
    beta = np.full((1, 2), 1560.0)
    theta = np.array([[0.0, 1e4], [1e4, 0.0]])  # theta/P = 0.01
    lam = force_of_infection(i, p, alpha, beta, theta, iota=0.0)

    mp.mp.dps = 40
    q1 = mp.mpf("1e-4") ** mp.mpf("0.97")
    q2 = mp.mpf("4e-4") ** mp.mpf("0.97")
    lam1 = 1560 * (q1 + mp.mpf("0.01") * (q2 - q1))
    lam2 = 1560 * (q2 + mp.mpf("0.01") * (q1 - q2))
    assert lam[0, 0] == pytest.approx(float(lam1), rel=1e-12)
    assert lam[0, 1] == pytest.approx(float(lam2), rel=1e-12)


def test_force_of_infection_includes_imported_pressure():
    i = np.array([[0.0]])
    lam = force_of_infection(i, np.array([1e6]), np.array([[1.0]]),
                             np.array([[1560.0]]), np.zeros((1, 1)), iota=10.0)
    assert lam[0, 0] == pytest.approx(1560.0 * 10.0 / 1e6, rel=1e-12)


def test_force_of_infection_floors_negative_rates_at_zero():
    p = np.array([1e6, 1e6])
    i = np.array([[1000.0, 0.0]])
    alpha = np.ones((1, 2))
    beta = np.full((1, 2), 1560.0)
    theta = np.array([[0.0, 5e7], [5e7, 0.0]])  # absurd coupling dominates
    lam = force_of_infection(i, p, alpha, beta, theta, iota=0.0)
    assert lam[0, 0] == 0.0  # own prevalence drained by the huge outflow term
    assert lam[0, 1] > 0.0
    assert np.all(lam >= 0.0)


# ---------------------------------------------------------------------------
# Model assembly and dynamics


def test_rinit_rounds_renormalized_fractions():
    cov, params = one_city()
    params = dataclasses.replace(params, s_frac=np.array([0.3]),
                                 e_frac=np.array([0.1]), i_frac=np.array([0.1]),
                                 r_frac=np.array([0.1]))
    model = build_measles_model(params, cov, "case1")
    theta = truth_field(params, model.layout)
    swarm = ParameterSwarm.point(theta, 4)
    x = model.rinit(swarm, 4, RngNode(0))
    pop = cov.population[0]
    np.testing.assert_array_equal(x[:, 0], np.rint(0.5 * pop))
    np.testing.assert_array_equal(x[:, 1], np.rint(pop / 6.0))
    np.testing.assert_array_equal(x[:, 2], np.rint(pop / 6.0))
    np.testing.assert_array_equal(x[:, 3], 0.0)


def test_rprocess_ignores_incoming_recovery_accumulator():
    cov, params = one_city()
    model = build_measles_model(params, cov, "case1")
    theta = truth_field(params, model.layout)
    swarm = ParameterSwarm.point(theta, 8)
    base = np.tile([1e5, 200.0, 150.0, 0.0], (8, 1))
    stale = base.copy()
    stale[:, 3] = 777.0  # leftover accumulator from a previous interval
    out_a = model.rprocess(base, swarm, 1950.0, 1950.0 + 1 / 26, RngNode(1))
    out_b = model.rprocess(stale, swarm, 1950.0, 1950.0 + 1 / 26, RngNode(1))
    np.testing.assert_array_equal(out_a, out_b)


def test_compartments_stay_nonnegative_integers_below_population():
    cov, params = one_city()
    model = build_measles_model(params, cov, "case1")
    theta = truth_field(params, model.layout)
    pop = cov.population[0]
    gen = np.random.default_rng(2)
    j = 500
    for step in range(20):
        fracs = gen.dirichlet([1.0, 1.0, 1.0, 4.0], size=j)
        states = np.floor(fracs[:, :3] * pop)
        states = np.hstack([states, np.zeros((j, 1))])
        swarm = ParameterSwarm.point(theta, j)
        t0 = 1950.0 + step * 0.037
        out = model.rprocess(states, swarm, t0, t0 + 1 / 26,
                             RngNode(3, (step,)))
        assert np.all(out >= 0)
        np.testing.assert_array_equal(out, np.rint(out))
        assert np.all(out[:, 0] + out[:, 1] + out[:, 2] <= np.floor(pop))


def test_disease_free_state_is_absorbing():
    cov, params = one_city()
    params = dataclasses.replace(params, e_frac=np.zeros(1), i_frac=np.zeros(1),
                                 iota=0.0)
    data, latent = simulate_dataset(params, cov, RngNode(4), n_years=3)
    np.testing.assert_array_equal(latent[:, 1], 0.0)  # E
    np.testing.assert_array_equal(latent[:, 2], 0.0)  # I
    np.testing.assert_array_equal(latent[:, 3], 0.0)  # Z
    assert np.unique(latent[:, 0]).size > 1  # births and deaths still act


def test_expected_increments_approach_the_ode_limit_as_steps_refine():
    cov, params = one_city()
    params = dataclasses.replace(params, sigma_se=np.zeros(1))
    pop = cov.population[0]
    births = cov.birth_rate[0]
    t0, t1 = 1950.0, 1950.0 + 1 / 26
    x0 = np.array([0.032 * pop, 170.0, 136.0, 0.0])

    def rhs(t, y):
        s, e, i, z = y
        beta = seasonal_beta(t, params.basic_r0[0], params.mu_ir,
                             params.term_frac, params.theta_amp)
        lam = beta * (i / pop) ** params.alpha[0]
        mu = params.mu_death
        return [births - (lam + mu) * s,
                lam * s - (params.mu_ei + mu) * e,
                params.mu_ei * e - (params.mu_ir + mu) * i,
                params.mu_ir * i]

    ode = solve_ivp(rhs, (t0, t1), x0, rtol=1e-10, atol=1e-8).y[:, -1]

    errors = []
    j = 60_000
    for steps in (1, 2, 4):
        model = build_measles_model(params, cov, "case1", steps_per_obs=steps)
        theta = truth_field(params, model.layout)
        swarm = ParameterSwarm.point(theta, j)
        out = model.rprocess(np.tile(x0, (j, 1)), swarm, t0, t1, RngNode(5))
        mean = out.mean(axis=0)
        errors.append(np.abs(mean - ode).max())
    assert errors[1] < errors[0]
    assert errors[2] < errors[1]
    assert errors[2] < 0.6 * errors[0]


# ---------------------------------------------------------------------------
# Measurement channel


def test_dmeasure_zero_count_zero_state_reference_value():
    cov, params = one_city()
    model = build_measles_model(params, cov, "case1", v_floor=1.0)
    theta = truth_field(params, model.layout)
    swarm = ParameterSwarm.point(theta, 3)
    x_v = np.zeros((3, 4))
    ld = model.dmeasure_unit(0, np.array([0.0]), x_v, swarm)
    assert ld.shape == (3,)
    np.testing.assert_allclose(ld, np.log(ndtr(0.5)), atol=1e-12)
    assert ld[0] == pytest.approx(-0.369, abs=5e-4)


def test_dmeasure_concentrates_without_reporting_noise():
    cov, params = one_city(rho=1.0, psi=0.0)
    model = build_measles_model(params, cov, "case1", v_floor=1e-4)
    theta = truth_field(params, model.layout)
    swarm = ParameterSwarm.point(theta, 1)
    x_v = np.array([[0.0, 0.0, 0.0, 100.0]])
    exact = model.dmeasure_unit(0, np.array([100.0]), x_v, swarm)
    off = model.dmeasure_unit(0, np.array([99.0]), x_v, swarm)
    assert exact[0] == pytest.approx(0.0, abs=1e-8)
    assert is_log_zero(off[0]) or off[0] < -100.0


def test_dmeasure_survives_far_tail_observations():
    cov, params = one_city()
    model = build_measles_model(params, cov, "case1", v_floor=1.0)
    theta = truth_field(params, model.layout)
    swarm = ParameterSwarm.point(theta, 1)
    x_v = np.zeros((1, 4))
    ld = model.dmeasure_unit(0, np.array([10.0]), x_v, swarm)
    mp.mp.dps = 40
    expect = mp.log(mp.ncdf(mp.mpf("-9.5")) - mp.ncdf(mp.mpf("-10.5")))
    assert np.isfinite(ld[0])
    assert ld[0] == pytest.approx(float(expect), rel=1e-9)


def test_measurement_cells_sum_to_one():
    cov, params = one_city(rho=0.5, psi=0.15)
    model = build_measles_model(params, cov, "case1", v_floor=1.0)
    theta = truth_field(params, model.layout)
    swarm = ParameterSwarm.point(theta, 1)
    x_v = np.array([[0.0, 0.0, 0.0, 50.0]])
    ys = np.arange(0, 2000)
    cells = np.array([np.exp(model.dmeasure_unit(0, np.array([float(y)]), x_v,
                                                 swarm))[0] for y in ys])
    assert cells.sum() == pytest.approx(1.0, abs=1e-6)


def test_emeasure_moments_match_the_channel():
    cov, params = one_city(rho=0.4, psi=0.2)
    model = build_measles_model(params, cov, "case1", v_floor=2.0)
    theta = truth_field(params, model.layout)
    swarm = ParameterSwarm.point(theta, 2)
    z = np.array([30.0, 80.0])
    x_v = np.zeros((2, 4))
    x_v[:, 3] = z
    mean, var = model.emeasure_unit(0, x_v, swarm)
    np.testing.assert_allclose(mean[:, 0], 0.4 * z, rtol=1e-12)
    np.testing.assert_allclose(
        var[:, 0], 0.4 * 0.6 * z + (0.2 * 0.4 * z) ** 2 + 2.0, rtol=1e-12)


def test_rmeasure_rounds_to_nonnegative_integers():
    cov, params = one_city()
    model = build_measles_model(params, cov, "case1")
    theta = truth_field(params, model.layout)
    swarm = ParameterSwarm.point(theta, 1000)
    x_v = np.zeros((1000, 4))
    x_v[:, 3] = 3.0  # small mean, noise often drives the draw negative
    y = model.rmeasure_unit(0, x_v, swarm, RngNode(6))
    assert y.shape == (1000, 1)
    assert np.all(y >= 0)
    np.testing.assert_array_equal(y, np.rint(y))
    assert np.any(y == 0)


# ---------------------------------------------------------------------------
# Cases, layouts and the truth field


def test_case_layouts_declare_the_documented_coordinates():
    c1 = case_layout("case1")
    assert c1.unit_names == ("S_0", "E_0", "I_0", "R_0")
    assert all(s.ivp and s.transform == "logit" for s in c1.unit)
    c2 = case_layout("case2")
    assert c2.unit_names == ("S_0", "E_0", "I_0", "R_0", "R0")
    r0_spec = c2.unit[4]
    assert not r0_spec.ivp and r0_spec.transform == "log"
    c4 = case_layout("case4")
    assert set(c4.unit_names) == {"S_0", "E_0", "I_0", "R_0", "alpha",
                                  "sigma_SE", "R0"}
    assert case_layout("case1").learned_count(2) == 8
    assert case_layout("case4").learned_count(2) == 14
    with pytest.raises(ValueError, match="unknown benchmark case"):
        case_layout("case9")


def test_truth_field_reads_generating_values():
    params = MeaslesParams.synthetic(3, RngNode(7))
    fld = truth_field(params, case_layout("case4"))
    np.testing.assert_array_equal(fld.unit("S_0"), params.s_frac)
    np.testing.assert_array_equal(fld.unit("R_0"), params.r_frac)
    np.testing.assert_array_equal(fld.unit("alpha"), params.alpha)
    np.testing.assert_array_equal(fld.unit("R0"), params.basic_r0)


def test_synthetic_params_stay_in_the_scaling_bracket():
    params = MeaslesParams.synthetic(5, RngNode(8), spread=0.0355)
    again = MeaslesParams.synthetic(5, RngNode(8), spread=0.0355)
    np.testing.assert_array_equal(params.alpha, again.alpha)
    for values, base in ((params.alpha, 1.0), (params.basic_r0, 30.0),
                         (params.sigma_se, 0.15), (params.s_frac, 0.032),
                         (params.e_frac, 5e-5), (params.i_frac, 4e-5)):
        ratio = values / base
        assert np.all((ratio >= 0.99) & (ratio < 1.0355))
    np.testing.assert_allclose(
        params.r_frac, 1.0 - params.s_frac - params.e_frac - params.i_frac,
        rtol=1e-12)


def test_params_validation():
    with pytest.raises(ValueError, match="share one length"):
        MeaslesParams(alpha=[1.0, 1.0], basic_r0=[30.0], sigma_se=[0.15],
                      s_frac=[0.03], e_frac=[1e-4], i_frac=[1e-4], r_frac=[0.96])
    with pytest.raises(ValueError, match="rho"):
        MeaslesParams.baseline(1, rho=1.5)


def test_synthetic_covariates_geometry():
    cov = CityCovariates.synthetic(5)
    assert cov.population[0] == pytest.approx(3.39e6)
    assert cov.population[1] == pytest.approx(3.39e6 / 2.0)
    np.testing.assert_allclose(cov.birth_rate, 0.02 * cov.population, rtol=1e-12)
    np.testing.assert_allclose(cov.distances, cov.distances.T, atol=1e-9)
    assert np.all(np.diag(cov.distances) == 0.0)
    off = cov.distances[~np.eye(5, dtype=bool)]
    assert np.all(off > 0)
    assert len(np.unique(np.round(off, 6))) == off.size // 2  # all pairs distinct


def test_measles_graph_is_complete():
    cov = CityCovariates.synthetic(4)
    g = measles_graph(cov)
    assert g.n_vertices == 4
    assert len(g.edges) == 6
    assert g.vertices == cov.names


# ---------------------------------------------------------------------------
# Dataset simulation


def test_biweekly_grid():
    cov = CityCovariates.synthetic(1)
    times = biweekly_times(cov, n_years=2)
    assert times.shape == (52,)
    assert times[0] == pytest.approx(1950.0 + 1 / 26)
    assert times[-1] == pytest.approx(1952.0)


def test_simulated_dataset_shapes_and_types():
    cov = CityCovariates.synthetic(2)
    params = MeaslesParams.synthetic(2, RngNode(9))
    data, latent = simulate_dataset(params, cov, RngNode(10), n_years=3)
    assert data.values.shape == (78, 2, 1)
    assert latent.shape == (78, 8)
    assert data.t0 == cov.t0
    assert np.all(data.values >= 0)
    np.testing.assert_array_equal(data.values, np.rint(data.values))
    again, _ = simulate_dataset(params, cov, RngNode(10), n_years=3)
    np.testing.assert_array_equal(data.values, again.values)


def test_zero_reporting_rate_yields_all_zero_observations():
    cov, params = one_city(rho=0.0)
    data, latent = simulate_dataset(params, cov, RngNode(11), n_years=2,
                                    v_floor=0.0)
    np.testing.assert_array_equal(data.values, 0.0)
    assert latent[:, 2].max() > 0  # the epidemic itself still runs


def test_default_simulation_shows_recurrent_outbreaks():
    cov, params = one_city()
    data, _ = simulate_dataset(params, cov, RngNode(12), n_years=10)
    cases = data.values[:, 0, 0]
    assert cases.max() > 0
    window = 52  # two years of biweekly reports
    for start in range(0, cases.size - window + 1, window // 2):
        assert cases[start:start + window].max() > 0

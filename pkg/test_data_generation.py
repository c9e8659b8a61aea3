import numpy as np
import pytest

from data_generation import (IV_SIGMA, NoiseModel1D, PNorm2D, PhaseSchedule,
                             Quadratic1D, SinCos2D, amplitude_schedule,
                             corrupt, eval_scenario, frequency_schedule,
                             gen_iv, gen_iv_latent, generate_dataset,
                             iv_from_uniforms, iv_sample,
                             noise_from_dict, standard_noise_1d, standard_noise_2d,
                             scenario_from_dict, test_grid_1d, test_grid_2d,
                             train_grid_1d, train_grid_2d)
from numerics_core import (ArityMismatchError, InvalidArgumentError, SeededRng,
                           make_field)


def test_quadratic_scenario_on_training_grid():
    grid = train_grid_1d(7)
    phi = eval_scenario(Quadratic1D(), grid)
    np.testing.assert_allclose(phi.values, grid.points ** 2)


def test_pnorm_scenario():
    points = np.array([[3.0, 4.0], [-3.0, 0.0]])
    np.testing.assert_allclose(PNorm2D(2.0).evaluate(points), [5.0, 3.0])
    np.testing.assert_allclose(PNorm2D(1.0).evaluate(points), [7.0, 3.0])
    with pytest.raises(InvalidArgumentError):
        PNorm2D(0.5)


def test_sincos_scenario_at_origin():
    assert SinCos2D().evaluate(np.zeros((1, 2)))[0] == pytest.approx(1.0)
    assert SinCos2D(0.25, 1.0, 1.75, 1.0).evaluate(np.zeros((1, 2)))[0] == pytest.approx(1.75)


def test_arity_mismatch_is_reported():
    with pytest.raises(ArityMismatchError):
        eval_scenario(Quadratic1D(), train_grid_2d(5))
    with pytest.raises(ArityMismatchError):
        corrupt(eval_scenario(Quadratic1D(), train_grid_1d(5)), standard_noise_2d(), SeededRng(0))


def test_noiseless_corruption_adds_the_mean():
    phi = eval_scenario(Quadratic1D(), train_grid_1d(9))
    y = corrupt(phi, NoiseModel1D(alpha=2.0, sigma=0.0), SeededRng(1))
    np.testing.assert_allclose(y.values, phi.values + 2.0 * phi.grid.points)


def test_corruption_is_deterministic_in_the_seed():
    phi = eval_scenario(Quadratic1D(), train_grid_1d(20))
    a = corrupt(phi, standard_noise_1d(), SeededRng(5))
    b = corrupt(phi, standard_noise_1d(), SeededRng(5))
    c = corrupt(phi, standard_noise_1d(), SeededRng(6))
    np.testing.assert_array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)


def test_2d_noise_vanishes_at_the_origin():
    grid = train_grid_2d(5)
    phi = eval_scenario(PNorm2D(), grid)
    y = corrupt(phi, standard_noise_2d(), SeededRng(3))
    centre = 2 * 5 + 2
    assert y.values[centre] == pytest.approx(phi.values[centre])
    assert not np.allclose(y.values, phi.values)


def test_negative_noise_scale_is_rejected():
    with pytest.raises(InvalidArgumentError):
        NoiseModel1D(sigma=-1.0)


def test_test_grid_is_a_small_translation():
    train = train_grid_1d(50)
    test = test_grid_1d(SeededRng(0), 50)
    offset = test.start - train.start
    assert -0.5 <= offset <= 0.5
    assert test.spacing == pytest.approx(train.spacing)
    assert test_grid_1d(shift=0.3, count=50).start == pytest.approx(-2.7)


def test_test_grid_2d_shares_one_shift():
    grid = test_grid_2d(SeededRng(4), 6)
    assert grid.axis1 == grid.axis2


def test_test_grid_needs_a_shift_source():
    with pytest.raises(InvalidArgumentError):
        test_grid_1d(None, 10)


def test_instrument_recipe_on_constant_draws():
    e = np.full((3, 4), 0.5)
    iv = iv_from_uniforms(e)
    np.testing.assert_allclose(iv.entries, 0.0, atol=1e-12)
    np.testing.assert_allclose(iv.tau, 0.5)
    np.testing.assert_allclose(iv.eps, np.sqrt(2.0) / 4.0)


def test_generated_instruments_are_bounded():
    iv = gen_iv(5, 200, SeededRng(2))
    assert iv.entries.shape == (200, 5)
    assert (iv.rows, iv.columns) == (200, 5)
    assert np.all(np.abs(iv.entries) <= IV_SIGMA + 1e-12)
    with pytest.raises(InvalidArgumentError):
        gen_iv(0, 10, SeededRng(2))


def _r_squared(target, predictors):
    design = np.column_stack([np.ones(len(target)), predictors])
    coef, *_ = np.linalg.lstsq(design, target, rcond=None)
    return 1.0 - np.var(target - design @ coef) / np.var(target)


def test_latent_instruments_follow_the_recipe():
    iv, factor = gen_iv_latent(6, 300, 0.5, SeededRng(4))
    assert iv.entries.shape == (300, 6)
    assert factor.shape == (300,)
    assert np.all(np.abs(iv.entries) <= IV_SIGMA + 1e-12)
    assert np.all((iv.tau >= 0) & (iv.tau <= 1))
    # rows with a large factor carry large instruments
    assert np.corrcoef(factor, iv.entries[:, -1])[0, 1] > 0.5
    with pytest.raises(InvalidArgumentError):
        gen_iv_latent(3, 10, 1.0, SeededRng(4))


def test_more_instruments_explain_more_of_the_covariate():
    grid = train_grid_1d(1000)
    x = grid.points
    r2 = {k: _r_squared(x, iv_sample(Quadratic1D(), standard_noise_1d(), grid, k, SeededRng(5)).instruments.entries)
          for k in (2, 25)}
    assert r2[2] > 0.1
    assert r2[25] > r2[2] + 0.15
    # drawn apart from x, even 25 instruments explain next to nothing
    assert _r_squared(x, gen_iv(25, 1000, SeededRng(5)).entries) < 0.1


def test_iv_sample_noise_is_endogenous_but_not_instrumented():
    grid = train_grid_1d(1000)
    sample = iv_sample(Quadratic1D(), standard_noise_1d(), grid, 2, SeededRng(6))
    np.testing.assert_allclose(sample.phi_star.values, grid.points ** 2)
    noise = sample.y.values - sample.phi_star.values
    assert np.corrcoef(noise, grid.points)[0, 1] > 0.25
    assert _r_squared(noise, sample.instruments.entries) < 0.02


def test_iv_sample_is_deterministic_and_checks_arity():
    grid = train_grid_1d(50)
    a = iv_sample(Quadratic1D(), standard_noise_1d(), grid, 3, SeededRng(7))
    b = iv_sample(Quadratic1D(), standard_noise_1d(), grid, 3, SeededRng(7))
    np.testing.assert_array_equal(a.y.values, b.y.values)
    np.testing.assert_array_equal(a.instruments.entries, b.instruments.entries)
    with pytest.raises(ArityMismatchError):
        iv_sample(SinCos2D(), standard_noise_1d(), grid, 3, SeededRng(7))
    with pytest.raises(InvalidArgumentError):
        iv_sample(Quadratic1D(), standard_noise_1d(), grid, 3, SeededRng(7), share=0.0)


def test_corruption_mean_slope_in_1d():
    grid = train_grid_1d(1000)
    phi = eval_scenario(Quadratic1D(), grid)
    y = corrupt(phi, NoiseModel1D(alpha=2.0, sigma=1.0), SeededRng(8))
    x = grid.points
    away = np.abs(x) > 0.5
    assert np.mean((y.values - phi.values)[away] / x[away]) == pytest.approx(2.0, abs=0.15)


def test_corruption_mean_at_the_2d_corners():
    grid = train_grid_2d(2)
    phi = make_field(grid, np.zeros(grid.size))
    repeats = 4000
    rng = SeededRng(9)
    draws = np.array([corrupt(phi, standard_noise_2d(), rng.child(i)).values.ravel() for i in range(repeats)])
    # corners (-3,-3), (-3,3), (3,-3), (3,3): mean 7.8, -9, -9, 10.2 and std 4.8 everywhere
    tolerance = 4.0 * 4.8 / np.sqrt(repeats)
    np.testing.assert_allclose(np.sort(draws.mean(axis=0)), [-9.0, -9.0, 7.8, 10.2], atol=tolerance)


def test_amplitude_schedule_layout():
    schedule = amplitude_schedule(5000)
    assert len(schedule.phases) == 4
    assert schedule.total_epochs == 20000
    assert schedule.boundaries == [5000, 10000, 15000]
    assert schedule.phases[0][0] == SinCos2D(0.25, 1.0, 1.75, 1.0)


def test_frequency_schedule_scales_both_frequencies():
    schedule = frequency_schedule(10)
    assert [(s.b, s.d) for s, _ in schedule.phases] == [(1.0, 1.0), (2.0, 2.0), (3.0, 3.0), (4.0, 4.0)]


def test_schedule_validation():
    with pytest.raises(InvalidArgumentError):
        PhaseSchedule([])
    with pytest.raises(InvalidArgumentError):
        PhaseSchedule([(SinCos2D(), 0)])


def test_models_rebuild_from_their_descriptions():
    assert scenario_from_dict(PNorm2D(3.0).to_dict()) == PNorm2D(3.0)
    assert noise_from_dict(standard_noise_2d().to_dict()) == standard_noise_2d()
    with pytest.raises(InvalidArgumentError):
        scenario_from_dict({'kind': 'unknown'})


def test_generate_dataset_bundles_truth_and_observation():
    grid = train_grid_1d(15)
    dataset = generate_dataset(Quadratic1D(), standard_noise_1d(), grid, SeededRng(11))
    np.testing.assert_allclose(dataset.phi_star.values, grid.points ** 2)
    assert dataset.y.grid == grid
    assert dataset.meta() == {'scenario': {'kind': 'quadratic1d'},
                              'noise': {'kind': 'noise1d', 'alpha': 2.0, 'sigma': 1.0}, 'seed': 11}

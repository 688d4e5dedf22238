from unittest import TestCase

import numpy as np
import pandas as pd
import pytest

import pavemind.forecast as fc
from pavemind.utils import RouteSeries


def _series(pci, diseases, route_id='R', start=2013):
    years = tuple(range(start, start + len(pci)))
    return RouteSeries(route_id, years, np.asarray(pci, dtype=float),
                       {k: np.asarray(v, dtype=float) for k, v in diseases.items()})


def _ones_params(value=1.0):
    rng = np.random.default_rng(0)
    params = fc.init_params(1, 1, 1, rng)
    for name, array in params.as_dict().items():
        array[...] = value
    return params


class TestPearson(TestCase):
    def test_self_and_negation(self):
        x = np.array([1.0, 4.0, 2.0, 8.0])
        self.assertAlmostEqual(fc.pearson(x, x), 1.0)
        self.assertAlmostEqual(fc.pearson(x, -x), -1.0)

    def test_constant(self):
        with self.assertRaises(fc.UndefinedCorrelationError):
            fc.pearson(np.ones(5), np.arange(5.0))


class TestSelectFeatures(TestCase):
    def test_identical_to_pci(self):
        pci = np.array([90.0, 85.0, 83.0, 78.0, 70.0])
        selection = fc.select_features(_series(pci, {'crack_1': pci, 'noise': [1, 1, 1, 1, 1]}))
        self.assertEqual(selection.codes, ['crack_1'])
        self.assertAlmostEqual(selection.selected[0][1], 1.0)
        self.assertEqual(dict(selection.correlations)['noise'], None)
        self.assertAlmostEqual(dict(selection.correlations)['crack_1'], 1.0)

    def test_threshold_is_inclusive(self):
        rng = np.random.default_rng(0)
        y = rng.normal(size=50)
        y_c = y - y.mean()
        noise = rng.normal(size=50)
        noise -= noise.mean()
        noise -= y_c * np.dot(noise, y_c) / np.dot(y_c, y_c)
        noise *= np.linalg.norm(y_c) / np.linalg.norm(noise)

        def mix(r):
            return r * y_c + np.sqrt(1.0 - r ** 2) * noise

        series = _series(y, {'at': mix(0.70), 'below': mix(0.69)})
        assert fc.pearson(series.disease_series['at'], y) == pytest.approx(0.70, abs=1e-9)
        self.assertEqual(fc.select_features(series, 0.7).codes, ['at'])

    def test_strong_and_weak(self):
        rng = np.random.default_rng(1)
        pci = np.linspace(95, 60, 9)
        diseases = {f'strong_{i}': (100 - pci) * (i + 1) + rng.normal(0, 0.5, 9) for i in range(3)}
        diseases.update({f'weak_{i}': rng.normal(10, 3, 9) for i in range(2)})
        series = _series(pci, diseases)
        selected = fc.select_features(series).codes
        expected = [c for c in series.codes if abs(fc.pearson(series.disease_series[c], pci)) >= 0.7]
        self.assertEqual(sorted(selected), sorted(expected))
        self.assertEqual(sorted(selected), ['strong_0', 'strong_1', 'strong_2'])


class TestLstmStep(TestCase):
    def test_zero_weights(self):
        params = _ones_params(0.0)
        h, c = fc.lstm_step(params, np.array([3.0]), np.zeros(1), np.zeros(1))
        assert np.allclose(h, 0.0) and np.allclose(c, 0.0)

    def test_scalar_ones(self):
        params = _ones_params(1.0)
        h, c = fc.lstm_step(params, np.array([1.0]), np.zeros(1), np.zeros(1))
        self.assertAlmostEqual(c[0], 0.8491, places=4)
        self.assertAlmostEqual(h[0], 0.6083, places=4)

    def test_forget_gate_closed(self):
        params = _ones_params(1.0)
        params.b_f[...] = -1e3
        _, c_a = fc.lstm_step(params, np.array([1.0]), np.zeros(1), np.array([5.0]))
        _, c_b = fc.lstm_step(params, np.array([1.0]), np.zeros(1), np.array([-7.0]))
        assert np.allclose(c_a, c_b)

    def test_dimension_mismatch(self):
        with self.assertRaises(ValueError):
            fc.lstm_step(_ones_params(), np.ones(2), np.zeros(1), np.zeros(1))


def test_dense():
    params = _ones_params(0.0)
    params.b_y[...] = 1.5
    assert fc.dense(params, np.array([0.3]))[0] == pytest.approx(1.5)
    params.W_y[...] = 2.0
    params.b_y[...] = 1.0
    assert fc.dense(params, np.array([0.5]))[0] == pytest.approx(2.0)


def test_make_windows():
    inputs, targets = fc.make_windows(np.arange(9.0), 3)
    assert inputs.shape == (6, 3, 1)
    inputs, targets = fc.make_windows(np.arange(4.0), 3)
    assert inputs.shape[0] == 1 and targets[0, 0] == 3.0
    with pytest.raises(ValueError):
        fc.make_windows(np.arange(3.0), 3)


@pytest.mark.parametrize('seed', range(10))
def test_bptt_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    params = fc.init_params(2, 4, 2, rng, scale=0.5)
    inputs, targets = fc.make_windows(rng.uniform(size=(8, 2)), 3)
    _, grads = fc.loss_and_grads(params, inputs, targets)
    h = 1e-5
    for name, array in params.as_dict().items():
        numeric = np.zeros_like(array)
        for idx in np.ndindex(*array.shape):
            saved = array[idx]
            array[idx] = saved + h
            plus, _ = fc.loss_and_grads(params, inputs, targets)
            array[idx] = saved - h
            minus, _ = fc.loss_and_grads(params, inputs, targets)
            array[idx] = saved
            numeric[idx] = (plus - minus) / (2 * h)
        err = np.linalg.norm(grads[name] - numeric) / max(np.linalg.norm(grads[name]) + np.linalg.norm(numeric), 1e-12)
        assert err < 1e-4, name


class TestTrainLstm(TestCase):
    def setUp(self):
        pci = np.linspace(95, 65, 9)
        self.series = _series(pci, {'crack_1': 100 - pci, 'crack_2': 2 * (100 - pci) + 1})
        self.selection = fc.FeatureSelection('R', (('crack_1', -1.0), ('crack_2', -1.0)))
        self.config = fc.LstmConfig(hidden_size=8, epochs=200, patience=1000)

    def test_descent(self):
        model = fc.train_lstm(self.series, self.selection, self.config, seed=0)
        self.assertLess(model.loss_trace[-1], model.loss_trace[0])

    def test_deterministic(self):
        a = fc.train_lstm(self.series, self.selection, self.config, seed=3)
        b = fc.train_lstm(self.series, self.selection, self.config, seed=3)
        for name, value in a.params.as_dict().items():
            assert np.array_equal(value, getattr(b.params, name))

    def test_horizon_one_is_one_pass(self):
        model = fc.train_lstm(self.series, self.selection, self.config, seed=0)
        out = fc.forecast_diseases(model, self.series, horizon=1)
        window = model.scaler.transform(self.series.matrix(model.codes))[-3:]
        h = np.zeros(8)
        c = np.zeros(8)
        for row in window:
            h, c = fc.lstm_step(model.params, row, h, c)
        expected = np.maximum(model.scaler.inverse_transform(fc.dense(model.params, h)[None, :])[0], 0.0)
        assert np.allclose([out['crack_1'][0], out['crack_2'][0]], expected)

    def test_negative_output_clamped(self):
        model = fc.train_lstm(self.series, self.selection, self.config, seed=0)
        model.params.W_y[...] = 0.0
        model.params.b_y[...] = -3.2
        out = fc.forecast_diseases(model, self.series, horizon=3)
        assert all(np.all(v == 0.0) for v in out.values())

    def test_constant_series(self):
        series = _series(np.linspace(90, 80, 9), {'crack_1': np.full(9, 50.0)})
        selection = fc.FeatureSelection('R', (('crack_1', 1.0),))
        model = fc.train_lstm(series, selection, fc.LstmConfig(hidden_size=8, epochs=1000), seed=0)
        out = fc.forecast_diseases(model, series, horizon=5)['crack_1']
        assert np.all(np.abs(out - 50.0) <= 2.5)

    def test_empty_selection(self):
        with self.assertRaises(ValueError):
            fc.train_lstm(self.series, fc.FeatureSelection('R', ()), self.config)


class TestMlr(TestCase):
    def test_exact_line(self):
        c = np.array([0.0, 1.0, 2.0, 5.0])
        model = fc.fit_mlr(c[:, None], 2 + 3 * c, ['c1'])
        self.assertAlmostEqual(model.beta_0, 2.0)
        self.assertAlmostEqual(model.beta[0], 3.0)
        self.assertAlmostEqual(fc.ssr(model, c[:, None], 2 + 3 * c), 0.0)

    def test_duplicate_columns(self):
        c = np.arange(6.0)
        with self.assertRaisesRegex(fc.RankDeficiencyError, 'b'):
            fc.fit_mlr(np.column_stack([c, c]), c, ['a', 'b'])

    def test_too_few_rows(self):
        with self.assertRaises(ValueError):
            fc.fit_mlr(np.ones((2, 2)) + np.eye(2), np.ones(2))


@pytest.mark.parametrize('seed', range(20))
def test_mlr_optimality(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(10, 51))
    k = int(rng.integers(1, 6))
    X = rng.normal(size=(n, k))
    y = X @ rng.normal(size=k) + rng.normal(size=n)
    model = fc.fit_mlr(X, y)
    best = fc.ssr(model, X, y)
    for _ in range(1000):
        competitor = fc.MlrModel(float(rng.normal()), rng.normal(size=k))
        assert best <= fc.ssr(competitor, X, y)
    design = np.column_stack([np.ones(n), X])
    resid = model(X) - y
    grad = 2 * design.T @ resid
    assert np.linalg.norm(grad) < 1e-8 * max(1.0, np.dot(y, y))


@pytest.mark.parametrize('seed', range(5))
def test_mlr_matches_grid_search(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=20)
    y = rng.uniform(-1, 1) + rng.uniform(-1, 1) * x + rng.normal(0, 0.1, 20)
    model = fc.fit_mlr(x[:, None], y)
    grid = np.round(np.arange(-200, 201) * 0.01, 2)
    resid = grid[:, None, None] + grid[None, :, None] * x[None, None, :] - y
    sse = np.sum(resid ** 2, axis=2)
    i, j = np.unravel_index(np.argmin(sse), sse.shape)
    assert abs(grid[i] - model.beta_0) <= 0.01 + 1e-9
    assert abs(grid[j] - model.beta[0]) <= 0.01 + 1e-9
    assert fc.ssr(model, x[:, None], y) <= sse[i, j]


def test_write_correlations(tmp_path):
    pci = [90.0, 85.0, 83.0, 78.0, 70.0]
    series = _series(pci, {'crack_1': [1.0, 2.0, 2.5, 4.0, 6.0], 'noise': [1, 1, 1, 1, 1],
                           'weak': [3.0, 1.0, 4.0, 1.0, 3.0]})
    path = tmp_path / 'correlations.csv'
    fc.write_correlations({'R': fc.select_features(series)}, path)
    df = pd.read_csv(path)
    assert list(df.columns) == ['route_id', 'code', 'pearson_r', 'selected']
    assert list(df['code']) == ['crack_1', 'noise', 'weak']
    assert list(df['selected']) == [1, 0, 0]
    assert df['pearson_r'][0] < -0.9
    assert np.isnan(df['pearson_r'][1])
    assert abs(df['pearson_r'][2]) < 0.7


def test_predict_pci_clamps():
    model = fc.MlrModel(-12.4, np.array([0.0]), ('crack_1',))
    assert fc.predict_pci(model, {'crack_1': np.array([3.0])})[0] == 0.0
    model = fc.MlrModel(104.0, np.array([0.0]), ('crack_1',))
    assert fc.predict_pci(model, {'crack_1': np.array([3.0])})[0] == 100.0
    model = fc.MlrModel(73.67, np.zeros(1), ('crack_1',))
    assert np.allclose(fc.predict_pci(model, {'crack_1': np.array([1.0, 9.0])}), 73.67)
    with pytest.raises(ValueError):
        fc.predict_pci(model, {'crack_2': np.array([1.0])})


def test_forecast_route_falls_back_on_short_series():
    series = _series([90.0, 85.0, 80.0], {'crack_1': [1.0, 2.0, 3.0]})
    forecast, model = fc.forecast_route(series, fc.LstmConfig(hidden_size=4, epochs=10), horizon=2)
    assert np.allclose(forecast.pci_forecast, 80.0)
    assert forecast.horizon_years == (2016, 2017)
    assert model.lstm is None and model.warnings


def test_forecast_route_end_to_end():
    rng = np.random.default_rng(0)
    pci = np.linspace(95, 63, 9) + rng.normal(0, 0.3, 9)
    series = _series(pci, {'crack_1': 2 * (100 - pci) + rng.normal(0, 0.5, 9),
                           'repair_1': rng.normal(5, 1, 9)})
    forecast, model = fc.forecast_route(series, fc.LstmConfig(hidden_size=8, epochs=300), horizon=5)
    assert model.selection.codes[0] == 'crack_1'
    assert forecast.pci_forecast.shape == (5,)
    assert np.all((forecast.pci_forecast >= 0) & (forecast.pci_forecast <= 100))


def test_backtest_beats_naive_on_linear_decay():
    wins = 0
    config = fc.LstmConfig(hidden_size=8, epochs=1500, patience=200)
    for seed in range(10):
        rng = np.random.default_rng(seed)
        t = 12
        decay = rng.uniform(2.0, 4.0)
        pci = 95.0 - decay * np.arange(t) + rng.normal(0, 0.2, t)
        damage = 100.0 - pci
        series = _series(pci, {
            'crack_1': damage * 1.5 + rng.normal(0, 0.3, t),
            'crack_2': damage * 0.8 + rng.normal(0, 0.3, t),
        }, route_id=f'R{seed}')
        model_err, naive_err = fc.backtest(series, config, seed=seed)
        wins += model_err < naive_err
    assert wins >= 8


def test_forecast_network_is_ordered():
    pci = np.linspace(90, 70, 6)
    series = [_series(pci, {'crack_1': 100 - pci}, route_id=r) for r in ('B', 'A')]
    results = fc.forecast_network(series, fc.LstmConfig(hidden_size=4, epochs=20), workers=2)
    assert list(results) == ['A', 'B']

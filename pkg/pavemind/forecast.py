"""
Disease and PCI forecasting.

Per route: pick the disease series most correlated with PCI, forecast them with a small LSTM
trained by backpropagation through time, then map the forecast diseases to PCI with a multiple
linear regression fitted on the route's history.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
import logging
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.preprocessing import MinMaxScaler
from tqdm import tqdm

from pavemind.utils import RouteSeries, derive_seed


logger = logging.getLogger(__name__)

GATES = ('f', 'i', 'g', 'o')


class UndefinedCorrelationError(ValueError):
    pass


class RankDeficiencyError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, epoch, loss):
        super().__init__(f'Training diverged at epoch {epoch}: loss = {loss}')
        self.epoch = epoch


@dataclass(frozen=True)
class LstmConfig:
    lr: float = 0.01
    window: int = 3
    hidden_candidates: Tuple[int, ...] = (32, 64, 128)
    hidden_size: Optional[int] = None
    epochs: int = 2000
    patience: int = 100
    min_delta: float = 1e-6
    init_scale: float = 0.1


@dataclass(frozen=True)
class FeatureSelection:
    route_id: str
    selected: Tuple[Tuple[str, float], ...]
    threshold: float = 0.7
    # every code with its r, None where either series is constant
    correlations: Tuple[Tuple[str, Optional[float]], ...] = ()

    @property
    def codes(self):
        return [code for code, _ in self.selected]


@dataclass
class LstmParams:
    W_f: np.ndarray
    U_f: np.ndarray
    b_f: np.ndarray
    W_i: np.ndarray
    U_i: np.ndarray
    b_i: np.ndarray
    W_g: np.ndarray
    U_g: np.ndarray
    b_g: np.ndarray
    W_o: np.ndarray
    U_o: np.ndarray
    b_o: np.ndarray
    W_y: np.ndarray
    b_y: np.ndarray

    @property
    def hidden_size(self):
        return self.U_f.shape[0]

    @property
    def input_size(self):
        return self.W_f.shape[1]

    @property
    def output_size(self):
        return self.W_y.shape[1]

    def as_dict(self):
        return {name: getattr(self, name) for name in self.__dataclass_fields__}

    def copy(self):
        return LstmParams(**{k: v.copy() for k, v in self.as_dict().items()})

    def check(self):
        H, k = self.hidden_size, self.input_size
        for gate in GATES:
            W, U, b = (getattr(self, f'{p}_{gate}') for p in 'WUb')
            if W.shape != (H, k) or U.shape != (H, H) or b.shape != (H,):
                raise ValueError(f'Gate {gate}: inconsistent shapes {W.shape}, {U.shape}, {b.shape}')
        if self.W_y.shape[0] != H or self.b_y.shape != (self.output_size,):
            raise ValueError(f'Dense layer: inconsistent shapes {self.W_y.shape}, {self.b_y.shape}')


def init_params(input_size, hidden_size, output_size, rng, scale=0.1) -> LstmParams:
    """Uniform initialization in ``[-scale, scale]``."""
    shapes = {}
    for gate in GATES:
        shapes[f'W_{gate}'] = (hidden_size, input_size)
        shapes[f'U_{gate}'] = (hidden_size, hidden_size)
        shapes[f'b_{gate}'] = (hidden_size,)
    shapes['W_y'] = (hidden_size, output_size)
    shapes['b_y'] = (output_size,)
    # Fixed draw order keeps initialization reproducible.
    names = [n for n in LstmParams.__dataclass_fields__]
    return LstmParams(**{n: rng.uniform(-scale, scale, size=shapes[n]) for n in names})


@dataclass
class TrainedLstm:
    params: LstmParams
    codes: List[str]
    scaler: MinMaxScaler
    window: int
    loss_trace: List[float] = field(default_factory=list)


@dataclass(frozen=True)
class MlrModel:
    beta_0: float
    beta: np.ndarray
    codes: Tuple[str, ...] = ()

    def __call__(self, features):
        return self.beta_0 + np.asarray(features, dtype=np.float64) @ self.beta


@dataclass(frozen=True)
class Forecast:
    route_id: str
    horizon_years: Tuple[int, ...]
    disease_forecasts: Mapping[str, np.ndarray]
    pci_forecast: np.ndarray


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f'pearson needs two equal-length vectors, got {x.shape} and {y.shape}')
    if len(x) < 2:
        raise ValueError('pearson needs at least 2 observations')
    dx = x - x.mean()
    dy = y - y.mean()
    sx = np.sqrt(np.dot(dx, dx))
    sy = np.sqrt(np.dot(dy, dy))
    if sx == 0.0 or sy == 0.0:
        raise UndefinedCorrelationError('Correlation undefined for a constant vector.')
    return float(np.clip(np.dot(dx, dy) / (sx * sy), -1.0, 1.0))


def select_features(series: RouteSeries, threshold: float = 0.7) -> FeatureSelection:
    """Disease codes with ``|r| >= threshold`` against PCI, strongest first, ties by code."""
    scored = []
    correlations = []
    for code in series.codes:
        try:
            r = pearson(series.disease_series[code], series.pci)
        except UndefinedCorrelationError:
            logger.debug('Route %s: %s has no variance; skipped.', series.route_id, code)
            correlations.append((code, None))
            continue
        correlations.append((code, r))
        if abs(r) >= threshold - 1e-12:
            scored.append((code, r))
    scored.sort(key=lambda cr: (-abs(cr[1]), cr[0]))
    return FeatureSelection(route_id=series.route_id, selected=tuple(scored), threshold=threshold,
                            correlations=tuple(correlations))


def _check_step_dims(params, x, h, c):
    if x.shape[-1] != params.input_size:
        raise ValueError(f'Input has {x.shape[-1]} features, LSTM expects {params.input_size}')
    if h.shape[-1] != params.hidden_size or c.shape[-1] != params.hidden_size:
        raise ValueError(f'Hidden/cell state must have size {params.hidden_size}')


def _step(params, x, h_prev, c_prev):
    f = sigmoid(x @ params.W_f.T + h_prev @ params.U_f.T + params.b_f)
    i = sigmoid(x @ params.W_i.T + h_prev @ params.U_i.T + params.b_i)
    g = np.tanh(x @ params.W_g.T + h_prev @ params.U_g.T + params.b_g)
    o = sigmoid(x @ params.W_o.T + h_prev @ params.U_o.T + params.b_o)
    c = f * c_prev + i * g
    tanh_c = np.tanh(c)
    h = o * tanh_c
    return h, c, (x, h_prev, c_prev, f, i, g, o, tanh_c)


def lstm_step(params: LstmParams, x_t, h_prev, c_prev):
    """One LSTM cell update; returns ``(h_t, c_t)``. Accepts single vectors or row batches."""
    x_t, h_prev, c_prev = (np.asarray(a, dtype=np.float64) for a in (x_t, h_prev, c_prev))
    _check_step_dims(params, x_t, h_prev, c_prev)
    h, c, _ = _step(params, x_t, h_prev, c_prev)
    return h, c


def dense(params: LstmParams, h_t):
    h_t = np.asarray(h_t, dtype=np.float64)
    if h_t.shape[-1] != params.W_y.shape[0]:
        raise ValueError(f'Hidden vector has size {h_t.shape[-1]}, dense layer expects {params.W_y.shape[0]}')
    return h_t @ params.W_y + params.b_y


def make_windows(series, window: int = 3):
    """
    Sliding ``window``-row inputs paired with the following row.

    Returns
    =======
    (inputs, targets) with shapes ``(t - window, window, k)`` and ``(t - window, k)``.
    """
    series = np.asarray(series, dtype=np.float64)
    if series.ndim == 1:
        series = series[:, None]
    t = series.shape[0]
    if window < 1 or t <= window:
        raise ValueError(f'Need more rows than the window: t = {t}, window = {window}')
    inputs = np.stack([series[s:s + window] for s in range(t - window)])
    return inputs, series[window:].copy()


def forward(params: LstmParams, inputs):
    """Runs the LSTM over ``(n, window, k)`` inputs; returns predictions and the step caches."""
    n = inputs.shape[0]
    h = np.zeros((n, params.hidden_size))
    c = np.zeros((n, params.hidden_size))
    caches = []
    for s in range(inputs.shape[1]):
        h, c, cache = _step(params, inputs[:, s, :], h, c)
        caches.append(cache)
    return dense(params, h), h, caches


def loss_and_grads(params: LstmParams, inputs, targets):
    """Sum of squared residuals and its gradient by backpropagation through time."""
    preds, h_last, caches = forward(params, inputs)
    resid = preds - targets
    loss = float(np.sum(resid ** 2))

    grads = {name: np.zeros_like(value) for name, value in params.as_dict().items()}
    dy = 2.0 * resid
    grads['W_y'] = h_last.T @ dy
    grads['b_y'] = dy.sum(axis=0)
    dh = dy @ params.W_y.T
    dc = np.zeros_like(dh)
    for x, h_prev, c_prev, f, i, g, o, tanh_c in reversed(caches):
        do = dh * tanh_c
        dc = dc + dh * o * (1.0 - tanh_c ** 2)
        dz = {
            'f': dc * c_prev * f * (1.0 - f),
            'i': dc * g * i * (1.0 - i),
            'g': dc * i * (1.0 - g ** 2),
            'o': do * o * (1.0 - o),
        }
        dh = np.zeros_like(dh)
        for gate in GATES:
            grads[f'W_{gate}'] += dz[gate].T @ x
            grads[f'U_{gate}'] += dz[gate].T @ h_prev
            grads[f'b_{gate}'] += dz[gate].sum(axis=0)
            dh += dz[gate] @ getattr(params, f'U_{gate}')
        dc = dc * f
    return loss, grads


class Adam:
    """Adam updates over a dict of numpy arrays."""
    def __init__(self, params: Dict[str, np.ndarray], lr=0.01, betas=(0.9, 0.999), eps=1e-8):
        self._lr = lr
        self._b1, self._b2 = betas
        self._eps = eps
        self._m = {k: np.zeros_like(v) for k, v in params.items()}
        self._v = {k: np.zeros_like(v) for k, v in params.items()}
        self._t = 0

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]):
        self._t += 1
        for k in sorted(params):
            self._m[k] = self._b1 * self._m[k] + (1 - self._b1) * grads[k]
            self._v[k] = self._b2 * self._v[k] + (1 - self._b2) * grads[k] ** 2
            m_hat = self._m[k] / (1 - self._b1 ** self._t)
            v_hat = self._v[k] / (1 - self._b2 ** self._t)
            params[k] -= self._lr * m_hat / (np.sqrt(v_hat) + self._eps)


def _fit_params(inputs, targets, hidden_size, config, seed):
    rng = np.random.default_rng(seed)
    params = init_params(inputs.shape[2], hidden_size, targets.shape[1], rng, config.init_scale)
    arrays = params.as_dict()
    optimizer = Adam(arrays, lr=config.lr)
    trace = []
    best = np.inf
    best_history = []
    pbar = tqdm(range(config.epochs), disable=None, leave=False)
    for epoch in pbar:
        loss, grads = loss_and_grads(params, inputs, targets)
        if not np.isfinite(loss):
            raise DivergenceError(epoch, loss)
        trace.append(loss)
        best = min(best, loss)
        best_history.append(best)
        if epoch >= config.patience and best_history[-1 - config.patience] - best < config.min_delta:
            logger.debug('Early stop at epoch %d, SSR %.3e', epoch, loss)
            break
        optimizer.step(arrays, grads)
        pbar.set_description(f'SSR: {loss: 0.4e}')
    return params, trace


def train_lstm(
    series: RouteSeries,
    selection: FeatureSelection,
    config: LstmConfig = LstmConfig(),
    seed: int = 0,
) -> TrainedLstm:
    """
    Trains a multivariate LSTM on the selected disease series. Inputs are min-max scaled per
    feature; the loss is the SSR of one-step-ahead predictions on all sliding windows.
    """
    codes = selection.codes
    if not codes:
        raise ValueError(f'Route {series.route_id}: empty feature selection, nothing to train on.')
    hidden = config.hidden_size or choose_hidden_size(series, selection, config, seed)
    raw = series.matrix(codes)
    scaler = MinMaxScaler().fit(raw)
    inputs, targets = make_windows(scaler.transform(raw), config.window)
    params, trace = _fit_params(inputs, targets, hidden, config, seed)
    logger.info('Route %s: LSTM(h=%d) SSR %.4e -> %.4e over %d epochs',
                series.route_id, hidden, trace[0], trace[-1], len(trace))
    return TrainedLstm(params=params, codes=codes, scaler=scaler, window=config.window, loss_trace=trace)


def truncate(series: RouteSeries, n_years: int) -> RouteSeries:
    """The first ``n_years`` of a series."""
    return RouteSeries(
        route_id=series.route_id,
        years=series.years[:n_years],
        pci=series.pci[:n_years].copy(),
        disease_series={c: v[:n_years].copy() for c, v in series.disease_series.items()},
        interpolated_years=tuple(y for y in series.interpolated_years if y in series.years[:n_years]),
    )


def choose_hidden_size(series, selection, config: LstmConfig, seed: int = 0) -> int:
    """Picks the hidden size with the lowest leave-last-year-out SSR."""
    candidates = list(config.hidden_candidates)
    if len(candidates) == 1:
        return candidates[0]
    if len(series.years) - 1 <= config.window:
        logger.warning('Route %s: too short for hidden-size validation; using %d.',
                       series.route_id, candidates[0])
        return candidates[0]
    head = truncate(series, len(series.years) - 1)
    actual = series.matrix(selection.codes)[-1]
    scores = []
    for hidden in candidates:
        model = train_lstm(head, selection, replace(config, hidden_size=hidden), seed)
        predicted = forecast_diseases(model, head, horizon=1)
        row = np.array([predicted[c][0] for c in selection.codes])
        scores.append(float(np.sum((row - actual) ** 2)))
        logger.debug('Route %s: hidden %d validation SSR %.4e', series.route_id, hidden, scores[-1])
    return candidates[int(np.argmin(scores))]


def forecast_diseases(model: TrainedLstm, series: RouteSeries, horizon: int = 5) -> Dict[str, np.ndarray]:
    """Recursive multi-step forecast; each prediction is fed back as the newest input row."""
    if horizon < 1:
        raise ValueError(f'horizon must be >= 1, got {horizon}')
    window = model.scaler.transform(series.matrix(model.codes))[-model.window:]
    if window.shape[0] < model.window:
        raise ValueError(f'Route {series.route_id}: series shorter than the input window')
    rows = []
    for _ in range(horizon):
        scaled, _, _ = forward(model.params, window[None, :, :])
        row = np.maximum(model.scaler.inverse_transform(scaled)[0], 0.0)
        rows.append(row)
        window = np.vstack([window[1:], model.scaler.transform(row[None, :])])
    rows = np.array(rows)
    return {code: rows[:, j] for j, code in enumerate(model.codes)}


def _design(features):
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[:, None]
    return np.column_stack([np.ones(features.shape[0]), features])


def collinear_columns(features, names=None, tol=1e-10) -> List[str]:
    """Columns (intercept included) that add no rank to the ones before them."""
    design = _design(features)
    names = ['intercept'] + list(names or [f'c{j + 1}' for j in range(design.shape[1] - 1)])
    scale = np.linalg.norm(design, axis=0)
    scale[scale == 0] = 1.0
    design = design / scale
    out = []
    rank = 0
    for j in range(design.shape[1]):
        r = np.linalg.matrix_rank(design[:, :j + 1], tol=tol * max(design.shape))
        if r == rank:
            out.append(names[j])
        rank = r
    return out


def fit_mlr(features, targets, names: Optional[Sequence[str]] = None) -> MlrModel:
    """Least-squares fit of ``y = beta_0 + C beta`` by the normal equations."""
    design = _design(features)
    targets = np.asarray(targets, dtype=np.float64)
    n, p = design.shape
    if n <= p - 1:
        raise ValueError(f'Need more observations than features: n = {n}, k = {p - 1}')
    bad = collinear_columns(design[:, 1:], names)
    if bad:
        raise RankDeficiencyError(f'Design matrix is rank deficient; collinear columns: {", ".join(bad)}')
    coef = np.linalg.solve(design.T @ design, design.T @ targets)
    return MlrModel(beta_0=float(coef[0]), beta=coef[1:], codes=tuple(names or ()))


def ssr(model: MlrModel, features, targets) -> float:
    return float(np.sum((model(features) - np.asarray(targets)) ** 2))


def predict_pci(model: MlrModel, disease_forecasts: Mapping[str, np.ndarray]) -> np.ndarray:
    if set(disease_forecasts) != set(model.codes):
        raise ValueError(f'Forecast codes {sorted(disease_forecasts)} do not match model features {list(model.codes)}')
    features = np.column_stack([disease_forecasts[c] for c in model.codes]) if model.codes else None
    if features is None:
        return np.array([float(np.clip(model.beta_0, 0.0, 100.0))])
    return np.clip(model(features), 0.0, 100.0)


@dataclass
class RouteModel:
    selection: FeatureSelection
    lstm: Optional[TrainedLstm]
    mlr: Optional[MlrModel]
    warnings: List[str] = field(default_factory=list)


def _usable_codes(series, selection):
    """Selected codes, trimmed so the MLR design stays full rank with n > k."""
    warnings = []
    scored_codes = list(selection.selected)
    if not scored_codes:
        scored = []
        for code in series.codes:
            try:
                scored.append((code, pearson(series.disease_series[code], series.pci)))
            except UndefinedCorrelationError:
                continue
        if scored:
            best = sorted(scored, key=lambda s: (-abs(s[1]), s[0]))[0]
            warnings.append(f'route {series.route_id}: no disease reaches |r| >= {selection.threshold}; '
                            f'falling back to {best[0]}')
            scored_codes = [best]
    kept = []
    for code, r in scored_codes:
        trial = [c for c, _ in kept] + [code]
        if len(trial) >= len(series.years) - 1:
            break
        if not collinear_columns(series.matrix(trial), trial):
            kept.append((code, r))
    if len(kept) < len(scored_codes):
        dropped = sorted({c for c, _ in scored_codes} - {c for c, _ in kept})
        warnings.append(f'route {series.route_id}: dropped collinear or excess features {dropped}')
    return kept, warnings


def forecast_route(series: RouteSeries, config: LstmConfig = LstmConfig(), threshold: float = 0.7,
                   horizon: int = 5, seed: int = 0) -> Tuple[Forecast, RouteModel]:
    """Feature selection, LSTM disease forecast and MLR PCI prediction for one route."""
    selection = select_features(series, threshold)
    kept, warnings = _usable_codes(series, selection)
    for w in warnings:
        logger.warning(w)
    horizon_years = tuple(series.years[-1] + s for s in range(1, horizon + 1))
    if not kept or len(series.years) <= config.window:
        warnings.append(f'route {series.route_id}: no usable disease series; carrying last PCI forward')
        logger.warning(warnings[-1])
        forecast = Forecast(series.route_id, horizon_years, {}, naive_forecast(series, horizon))
        return forecast, RouteModel(selection, None, None, warnings)

    used = FeatureSelection(series.route_id, tuple(kept), selection.threshold, selection.correlations)
    codes = used.codes
    lstm = train_lstm(series, used, config, seed)
    diseases = forecast_diseases(lstm, series, horizon)
    mlr = fit_mlr(series.matrix(codes), series.pci, codes)
    pci = predict_pci(mlr, diseases)
    forecast = Forecast(series.route_id, horizon_years, diseases, pci)
    return forecast, RouteModel(used, lstm, mlr, warnings)


def forecast_network(series_list: Sequence[RouteSeries], config: LstmConfig = LstmConfig(),
                     threshold: float = 0.7, horizon: int = 5, seed: int = 0, workers: int = 1):
    """Forecasts every route; results are keyed and ordered by route id."""
    def run(series):
        return series.route_id, forecast_route(series, config, threshold, horizon,
                                               derive_seed(seed, f'forecast:{series.route_id}'))
    ordered = sorted(series_list, key=lambda s: s.route_id)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, ordered))
    else:
        results = [run(s) for s in ordered]
    return dict(sorted(results))


def naive_forecast(series: RouteSeries, horizon: int = 1) -> np.ndarray:
    """Last value carried forward."""
    return np.full(horizon, series.pci[-1])


def backtest(series: RouteSeries, config: LstmConfig = LstmConfig(), threshold: float = 0.7,
             seed: int = 0) -> Tuple[float, float]:
    """One-step holdout of the last year: absolute PCI error of the model and of the naive baseline."""
    head = truncate(series, len(series.years) - 1)
    forecast, _ = forecast_route(head, config, threshold, horizon=1, seed=seed)
    actual = series.pci[-1]
    model_err = abs(float(forecast.pci_forecast[0]) - actual)
    naive_err = abs(float(naive_forecast(head)[0]) - actual)
    return model_err, naive_err


def write_forecasts(forecasts: Mapping[str, Forecast], path):
    rows = []
    for route_id in sorted(forecasts):
        f = forecasts[route_id]
        for step, year in enumerate(f.horizon_years):
            for code in sorted(f.disease_forecasts):
                rows.append((route_id, year, 'disease', code, float(f.disease_forecasts[code][step])))
            rows.append((route_id, year, 'pci', 'PCI', float(f.pci_forecast[step])))
    pd.DataFrame(rows, columns=['route_id', 'year', 'kind', 'code', 'value']).to_csv(
        path, index=False, float_format='%.6f')


def write_correlations(selections: Mapping[str, FeatureSelection], path):
    """Pearson r of every disease code against PCI per route; r is empty for constant series."""
    rows = []
    for route_id in sorted(selections):
        selection = selections[route_id]
        for code, r in sorted(selection.correlations):
            selected = r is not None and abs(r) >= selection.threshold - 1e-12
            rows.append((route_id, code, r, int(selected)))
    pd.DataFrame(rows, columns=['route_id', 'code', 'pearson_r', 'selected']).to_csv(
        path, index=False, float_format='%.6f')

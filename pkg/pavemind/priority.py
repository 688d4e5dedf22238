"""
Route and segment maintenance priorities.

Routes are ranked by combining how bad their predicted PCI is relative to the network with how
unlikely their segments are to be assigned a project already. Segments are scored with a logistic
model fitted to past assignment decisions and cut at the budget.
"""
from dataclasses import dataclass, field
import logging
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple
import warnings

import numpy as np
import pandas as pd
from scipy.stats import norm
from sklearn.gaussian_process import GaussianProcessRegressor
from sklearn.gaussian_process.kernels import RBF, ConstantKernel
from tqdm import tqdm

from pavemind.bayesnet import BayesNet, Dag, NodeSpec, domain_of, star
from pavemind.utils import (
    Budget, DetectionRecord, MaintenanceRecord, RouteMeta, SegmentKey, segment_history
)


logger = logging.getLogger(__name__)

FACTORS = ('BT', 'PT', 'RG', 'DD', 'HTR', 'AG', 'A', 'SS')
MP_DOMAIN = ('unassigned', 'assigned')
DD_LABELS = ('Q1', 'Q2', 'Q3', 'Q4')
HTR_LABELS = ('no', 'yes')
SS_LABELS = ('0', '1')
_ROUTE_FIELDS = {
    'BT': 'base_type', 'PT': 'pavement_type', 'RG': 'road_grade',
    'AG': 'admin_grade', 'A': 'area', 'SS': 'special_section',
}


class SingleClassError(ValueError):
    pass


def assign_probabilities(values) -> np.ndarray:
    """
    Assigns each predicted value a probability by walking the values in ascending order:
    the first gets ``1 - CDF(x)``, every later one ``1 - (CDF(x) - CDF(previous))``, with
    ``CDF(x) = (x - min) / (max - min)``. Results are returned in input order.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError('Cannot assign probabilities to an empty vector.')
    if not np.all(np.isfinite(values)):
        raise ValueError('Values must be finite.')
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.ones_like(values)
    order = np.argsort(values, kind='stable')
    cdf = (values[order] - lo) / (hi - lo)
    previous = np.concatenate([[0.0], cdf[:-1]])
    out = np.empty_like(values)
    out[order] = 1.0 - (cdf - previous)
    return out


def route_priority(p_route: float, p_segment_assign: float) -> float:
    return float(p_route) * (1.0 - float(p_segment_assign))


@dataclass(frozen=True)
class RoutePriority:
    route_id: str
    predicted_pci: float
    p_route: float
    p_segment_assign: float
    priority: float


def rank_routes(predicted_pci: Mapping[str, float], p_segment_assign: Mapping[str, float]) -> List[RoutePriority]:
    """Ranks routes by ``P(x_n) * (1 - P(x_n,m))``, highest first, ties by route id."""
    route_ids = sorted(predicted_pci)
    p_route = assign_probabilities([predicted_pci[r] for r in route_ids])
    rows = [
        RoutePriority(r, float(predicted_pci[r]), float(p), float(p_segment_assign[r]),
                      route_priority(p, p_segment_assign[r]))
        for r, p in zip(route_ids, p_route)
    ]
    rows.sort(key=lambda rp: (-rp.priority, rp.route_id))
    return rows


@dataclass(frozen=True)
class SegmentFeatures:
    """The eight factors a maintenance-project assignment is conditioned on."""
    BT: Optional[str] = None
    PT: Optional[str] = None
    RG: Optional[str] = None
    DD: Optional[str] = None
    HTR: Optional[str] = None
    AG: Optional[str] = None
    A: Optional[str] = None
    SS: Optional[str] = None

    def as_evidence(self):
        return {f: getattr(self, f) for f in FACTORS if getattr(self, f) is not None}


class DiseaseDegreeBins:
    """Quartile bins of total disease quantity per km."""
    def __init__(self, edges):
        self.edges = np.asarray(edges, dtype=np.float64)

    @classmethod
    def fit(cls, densities):
        densities = np.asarray(list(densities), dtype=np.float64)
        if densities.size == 0:
            return cls([0.0, 0.0, 0.0])
        return cls(np.quantile(densities, [0.25, 0.5, 0.75]))

    def label(self, density: float):
        return DD_LABELS[int(np.searchsorted(self.edges, density, side='right'))]


def disease_density(record: DetectionRecord) -> float:
    return record.total_disease / (record.length_m / 1000.0)


def history_treated(maintenance: Sequence[MaintenanceRecord], segment: SegmentKey, year: int) -> bool:
    """Whether the segment received any treatment before ``year``."""
    return any(m.year < year and m.covers(segment) for m in maintenance)


def assigned(maintenance: Sequence[MaintenanceRecord], segment: SegmentKey, year: int) -> bool:
    return any(m.year == year and m.covers(segment) for m in maintenance)


def segment_features(record: DetectionRecord, route: Optional[RouteMeta],
                     maintenance: Sequence[MaintenanceRecord], dd_bins: DiseaseDegreeBins) -> SegmentFeatures:
    values = {}
    for factor, attr in _ROUTE_FIELDS.items():
        values[factor] = str(getattr(route, attr)) if route is not None else 'unknown'
    values['DD'] = dd_bins.label(disease_density(record))
    values['HTR'] = HTR_LABELS[history_treated(maintenance, record.segment, record.year)]
    return SegmentFeatures(**values)


def history_rows(units: Sequence[DetectionRecord], maintenance: Sequence[MaintenanceRecord],
                 routes: Mapping[str, RouteMeta], dd_bins: DiseaseDegreeBins):
    """One ``(segment, year, features, decision)`` row per segment-year of detection history."""
    rows = []
    for segment, by_year in sorted(segment_history(units).items()):
        for year in sorted(by_year):
            record = by_year[year]
            features = segment_features(record, routes.get(segment.route_id), maintenance, dd_bins)
            rows.append((segment, year, features, int(assigned(maintenance, segment, year))))
    return rows


def factor_domains(features: Sequence[SegmentFeatures]) -> Dict[str, Tuple[str, ...]]:
    declared = {'DD': DD_LABELS, 'HTR': HTR_LABELS, 'SS': SS_LABELS}
    return {f: domain_of((getattr(x, f) for x in features), declared.get(f, ())) for f in FACTORS}


def rank_model_dag(domains: Mapping[str, Sequence[str]]) -> Dag:
    """Default structure: MP is the sole parent of each of the eight factors."""
    return star(NodeSpec('MP', MP_DOMAIN), [NodeSpec(f, tuple(domains[f])) for f in FACTORS])


def fit_rank_network(features: Sequence[SegmentFeatures], decisions: Sequence[int],
                     domains: Mapping[str, Sequence[str]], alpha: float = 1.0,
                     structure: Optional[Dag] = None) -> BayesNet:
    records = []
    for x, d in zip(features, decisions):
        row = x.as_evidence()
        row['MP'] = MP_DOMAIN[int(d)]
        records.append(row)
    return BayesNet.fit(structure or rank_model_dag(domains), records, alpha)


def segment_maintenance_prob(net: BayesNet, seg: SegmentFeatures) -> float:
    """Posterior probability that the segment is assigned a maintenance project."""
    evidence = {k: v for k, v in seg.as_evidence().items() if k in net.dag.names}
    return float(net.posterior('MP', evidence)['assigned'])


def encode(features: SegmentFeatures, domains: Mapping[str, Sequence[str]]) -> np.ndarray:
    """Ordinal encoding: each factor becomes its label's index in the factor domain."""
    out = []
    for f in FACTORS:
        value = getattr(features, f)
        domain = list(domains[f])
        out.append(float(domain.index(value)) if value in domain else 0.0)
    return np.array(out)


@dataclass(frozen=True)
class LogisticModel:
    weights: np.ndarray
    intercept: float
    loss_trace: Tuple[float, ...] = ()

    def decision_function(self, features):
        return np.asarray(features, dtype=np.float64) @ self.weights + self.intercept

    def predict_proba(self, features):
        return 1.0 / (1.0 + np.exp(-self.decision_function(features)))


def log_loss(weights, intercept, features, decisions) -> float:
    z = np.asarray(features, dtype=np.float64) @ weights + intercept
    return float(np.mean(np.logaddexp(0.0, z) - decisions * z))


def log_loss_grad(weights, intercept, features, decisions) -> Tuple[np.ndarray, float]:
    features = np.asarray(features, dtype=np.float64)
    z = features @ weights + intercept
    p = 0.5 * (1.0 + np.tanh(0.5 * z))
    err = (p - decisions) / len(decisions)
    return features.T @ err, float(err.sum())


def fit_logistic(features, decisions, lr: float = 0.1, iterations: int = 1000, seed: int = 0,
                 batch_size: Optional[int] = None) -> LogisticModel:
    """
    Logistic regression by gradient descent on the mean log-loss. Features are standardized for
    the descent and the returned weights are mapped back to the raw feature scale. With
    ``batch_size`` set, each iteration visits seeded mini-batches instead of the full data.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(decisions, dtype=np.float64)
    if not (np.any(y == 1) and np.any(y == 0)):
        raise SingleClassError('Logistic regression needs at least one positive and one negative decision.')
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std[std == 0] = 1.0
    Z = (X - mean) / std

    rng = np.random.default_rng(seed)
    w = np.zeros(Z.shape[1])
    b = 0.0
    trace = []
    for _ in range(iterations):
        if batch_size is None:
            batches = [np.arange(len(y))]
        else:
            perm = rng.permutation(len(y))
            batches = [perm[s:s + batch_size] for s in range(0, len(y), batch_size)]
        for idx in batches:
            gw, gb = log_loss_grad(w, b, Z[idx], y[idx])
            w = w - lr * gw
            b = b - lr * gb
        trace.append(log_loss(w, b, Z, y))
    weights = w / std
    intercept = float(b - np.dot(weights, mean))
    return LogisticModel(weights=weights, intercept=intercept, loss_trace=tuple(trace))


@dataclass
class BayesOptResult:
    x: np.ndarray
    value: float
    X: np.ndarray
    y: np.ndarray


def expected_improvement(mean, std, best, xi=0.01):
    std = np.maximum(std, 1e-12)
    improvement = mean - best - xi
    z = improvement / std
    return improvement * norm.cdf(z) + std * norm.pdf(z)


def bayes_opt(objective: Callable[[np.ndarray], float], bounds, iterations: int = 50, seed: int = 0,
              n_initial: int = 5, n_candidates: int = 2000) -> BayesOptResult:
    """
    Maximizes ``objective`` over a box with a Gaussian-process surrogate (squared-exponential
    kernel) and the expected-improvement acquisition. ``iterations`` counts all evaluations,
    the random initial design included. Returns the best evaluated point.
    """
    bounds = np.atleast_2d(np.asarray(bounds, dtype=np.float64))
    if bounds.size == 0:
        raise ValueError('Search space is empty.')
    lo, hi = bounds[:, 0], bounds[:, 1]
    rng = np.random.default_rng(seed)

    def to_space(u):
        return lo + u * (hi - lo)

    U = list(rng.uniform(size=(min(n_initial, iterations), len(lo))))
    y = [float(objective(to_space(u))) for u in U]
    kernel = ConstantKernel(1.0, (1e-3, 1e3)) * RBF(length_scale=0.2, length_scale_bounds=(1e-2, 1e1))
    pbar = tqdm(range(len(U), iterations), disable=None, leave=False)
    for _ in pbar:
        gp = GaussianProcessRegressor(kernel=kernel, alpha=1e-6, normalize_y=True, random_state=seed)
        with warnings.catch_warnings():
            warnings.simplefilter('ignore')
            gp.fit(np.array(U), np.array(y))
            candidates = rng.uniform(size=(n_candidates, len(lo)))
            mean, std = gp.predict(candidates, return_std=True)
        u = candidates[int(np.argmax(expected_improvement(mean, std, max(y))))]
        U.append(u)
        y.append(float(objective(to_space(u))))
        pbar.set_description(f'best: {max(y): 0.4f}')
    X = np.array([to_space(u) for u in U])
    y = np.array(y)
    best = int(np.argmax(y))
    logger.debug("Bayesian optimization: best %.6f after %d evaluations", y[best], len(y))
    return BayesOptResult(x=X[best], value=float(y[best]), X=X, y=y)


@dataclass(frozen=True)
class PriorityEntry:
    segment: SegmentKey
    score: float
    cost: float
    cumulative_cost: float
    selected: bool


@dataclass
class PriorityList:
    entries: List[PriorityEntry]
    selected_prefix_len: int
    budget: Budget = field(default_factory=lambda: Budget(0.0))

    @property
    def selected_cost(self):
        return float(sum(e.cost for e in self.entries if e.selected))


def _prefix_len(costs, amount):
    if amount <= 0:
        return 0
    cumulative = np.cumsum(costs)
    return int(np.searchsorted(cumulative, amount + 1e-9, side='right'))


def priority_list(segments: Sequence[Tuple[SegmentKey, np.ndarray, float]], model: LogisticModel,
                  budget: Budget) -> PriorityList:
    """
    Scores every segment with the logistic decision function, sorts descending (ties by segment),
    and selects the longest top prefix whose cumulative cost fits the budget. With a per-route
    budget every route gets its own prefix of ``budget.amount``.
    """
    scored = [(float(model.decision_function(x[None, :])[0]), key, float(cost)) for key, x, cost in segments]
    scored.sort(key=lambda s: (-s[0], s[1]))
    costs = [c for _, _, c in scored]
    cumulative = np.cumsum(costs) if costs else np.array([])

    if budget.scope == 'network':
        prefix = _prefix_len(costs, budget.amount)
        selected = [i < prefix for i in range(len(scored))]
    else:
        selected = []
        spent: Dict[str, float] = {}
        closed = set()
        for _, key, cost in scored:
            route_spent = spent.get(key.route_id, 0.0)
            ok = budget.amount > 0 and key.route_id not in closed and route_spent + cost <= budget.amount + 1e-9
            if ok:
                spent[key.route_id] = route_spent + cost
            else:
                closed.add(key.route_id)
            selected.append(ok)
        prefix = sum(selected)

    entries = [
        PriorityEntry(key, score, cost, float(cum), sel)
        for (score, key, cost), cum, sel in zip(scored, cumulative, selected)
    ]
    return PriorityList(entries=entries, selected_prefix_len=prefix, budget=budget)


def anchor_check(model: LogisticModel, encoded: np.ndarray, iterations: int = 50, seed: int = 0,
                 ratio: float = 0.99) -> Tuple[float, float, bool]:
    """
    Compares the best real segment probability with the optimum the Bayesian optimizer finds
    over the box spanned by the encoded segments. Returns ``(top, anchor, within_ratio)``.
    """
    bounds = np.column_stack([encoded.min(axis=0), encoded.max(axis=0)])
    result = bayes_opt(lambda x: float(model.predict_proba(x[None, :])[0]), bounds, iterations, seed)
    top = float(model.predict_proba(encoded).max())
    ok = top >= ratio * result.value
    if not ok:
        logger.warning('Top segment probability %.4f is below %.0f%% of the relaxed optimum %.4f.',
                       top, 100 * ratio, result.value)
    return top, result.value, ok


def write_priority_list(plist: PriorityList, path):
    rows = [
        (rank, e.segment.route_id, e.segment.start_m, e.segment.end_m, e.score, e.cost, e.cumulative_cost,
         int(e.selected))
        for rank, e in enumerate(plist.entries, start=1)
    ]
    columns = ['rank', 'route_id', 'segment_start_m', 'segment_end_m', 'score', 'cost', 'cumulative_cost', 'selected']
    pd.DataFrame(rows, columns=columns).to_csv(path, index=False, float_format='%.6f')


def write_route_priorities(rows: Sequence[RoutePriority], path):
    data = [(rank, r.route_id, r.predicted_pci, r.p_route, r.p_segment_assign, r.priority)
            for rank, r in enumerate(rows, start=1)]
    columns = ['rank', 'route_id', 'predicted_pci', 'p_route', 'p_segment_assign', 'priority']
    pd.DataFrame(data, columns=columns).to_csv(path, index=False, float_format='%.6f')

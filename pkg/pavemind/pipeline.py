"""
End-to-end run: forecast, route ranking, treatment recommendation and budgeted segment ranking.
Every stage writes its artifacts under the output directory.
"""
from dataclasses import asdict, dataclass, field, replace
import json
import logging
from pathlib import Path
import time
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from pavemind.bayesnet import load_structure
from pavemind.forecast import LstmConfig, forecast_network, write_correlations, write_forecasts
from pavemind.priority import (
    DiseaseDegreeBins, LogisticModel, SingleClassError, anchor_check, disease_density, encode, factor_domains,
    fit_logistic, fit_rank_network, history_rows, history_treated, priority_list, rank_routes, segment_features,
    segment_maintenance_prob, write_priority_list, write_route_priorities
)
from pavemind.recommend import (
    CostBands, DqnConfig, GainBins, MdpState, PlanEntry, RoadEnv, build_actions, dqn_train,
    fit_recommend_network, greedy_plan, treatment_history_rows, write_plan
)
from pavemind.utils import (
    Budget, DataError, SegmentKey, build_series, derive_seed, load_detection, load_maintenance, load_routes,
    rebucket, segment_history, set_seed, validate
)


logger = logging.getLogger(__name__)

STAGES = ('predict', 'rank-routes', 'recommend', 'plan')


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f'Stage {stage} failed: {cause}')
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class PriorityConfig:
    bo_iterations: int = 50
    lr: float = 0.1
    iterations: int = 1000


@dataclass(frozen=True)
class BudgetConfig:
    amount: float = 1.0
    scope: str = 'network'

    def budget(self):
        return Budget(self.amount, self.scope)


@dataclass(frozen=True)
class PipelineConfig:
    detection: Optional[Path] = None
    maintenance: Optional[Path] = None
    routes: Optional[Path] = None
    out_dir: Path = Path('out')
    rank_structure: Optional[Path] = None
    recommend_structure: Optional[Path] = None
    corr_threshold: float = 0.7
    horizon: int = 5
    alpha: float = 1.0
    segment_unit_m: float = 10.0
    seed: int = 0
    workers: int = 1
    plot: bool = False
    lstm: LstmConfig = field(default_factory=LstmConfig)
    dqn: DqnConfig = field(default_factory=DqnConfig)
    priority: PriorityConfig = field(default_factory=PriorityConfig)
    budget: BudgetConfig = field(default_factory=BudgetConfig)

    def __post_init__(self):
        checks = [
            (self.lstm.lr > 0, f'lstm.lr must be positive, got {self.lstm.lr}'),
            (self.dqn.lr > 0, f'dqn.lr must be positive, got {self.dqn.lr}'),
            (self.priority.lr > 0, f'priority.lr must be positive, got {self.priority.lr}'),
            (self.lstm.epochs >= 1, f'lstm.epochs must be at least 1, got {self.lstm.epochs}'),
            (self.dqn.epochs >= 1, f'dqn.epochs must be at least 1, got {self.dqn.epochs}'),
            (self.priority.iterations >= 1, f'priority.iterations must be at least 1, got {self.priority.iterations}'),
            (self.lstm.window >= 1, f'lstm.window must be at least 1, got {self.lstm.window}'),
            (0.0 <= self.dqn.gamma < 1.0, f'dqn.gamma must be in [0, 1), got {self.dqn.gamma}'),
            (self.dqn.batch_size >= 1, f'dqn.batch_size must be at least 1, got {self.dqn.batch_size}'),
            (self.dqn.buffer_size >= self.dqn.batch_size,
             f'dqn.buffer_size ({self.dqn.buffer_size}) must be at least dqn.batch_size ({self.dqn.batch_size})'),
            (self.dqn.target_sync >= 1, f'dqn.target_sync must be at least 1, got {self.dqn.target_sync}'),
            (0 <= self.seed < 2**64, f'seed must be in [0, 2**64), got {self.seed}'),
            (self.dqn.start_year <= self.dqn.end_year, 'dqn.start_year must not be after dqn.end_year'),
            (0.0 <= self.corr_threshold <= 1.0, f'corr_threshold must be in [0, 1], got {self.corr_threshold}'),
            (self.horizon >= 1, f'forecast.horizon must be at least 1, got {self.horizon}'),
            (self.alpha >= 0, f'bayes.alpha must be non-negative, got {self.alpha}'),
            (self.segment_unit_m > 0, f'segment_unit_m must be positive, got {self.segment_unit_m}'),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        try:
            self.budget.budget()
        except ValueError as e:
            raise ConfigError(str(e)) from None


def _ints(value):
    return tuple(int(v) for v in value.split(',') if v.strip())


def _optional(convert):
    def parse(value):
        return None if value.lower() in ('', 'none') else convert(value)
    return parse


def _bool(value):
    if value.lower() in ('1', 'true', 'yes', 'on'):
        return True
    if value.lower() in ('0', 'false', 'no', 'off'):
        return False
    raise ValueError(value)


# key -> (nested config or None, field name, parser)
_KEYS = {
    'input.detection': (None, 'detection', _optional(Path)),
    'input.maintenance': (None, 'maintenance', _optional(Path)),
    'input.routes': (None, 'routes', _optional(Path)),
    'output.dir': (None, 'out_dir', Path),
    'output.plot': (None, 'plot', _bool),
    'bayes.rank_structure': (None, 'rank_structure', _optional(Path)),
    'bayes.recommend_structure': (None, 'recommend_structure', _optional(Path)),
    'bayes.alpha': (None, 'alpha', float),
    'corr_threshold': (None, 'corr_threshold', float),
    'forecast.horizon': (None, 'horizon', int),
    'segment_unit_m': (None, 'segment_unit_m', float),
    'seed': (None, 'seed', int),
    'workers': (None, 'workers', int),
    'lstm.lr': ('lstm', 'lr', float),
    'lstm.window': ('lstm', 'window', int),
    'lstm.hidden_candidates': ('lstm', 'hidden_candidates', _ints),
    'lstm.hidden_size': ('lstm', 'hidden_size', _optional(int)),
    'lstm.epochs': ('lstm', 'epochs', int),
    'lstm.patience': ('lstm', 'patience', int),
    'lstm.min_delta': ('lstm', 'min_delta', float),
    'lstm.init_scale': ('lstm', 'init_scale', float),
    'dqn.gamma': ('dqn', 'gamma', float),
    'dqn.lr': ('dqn', 'lr', float),
    'dqn.epochs': ('dqn', 'epochs', int),
    'dqn.start_year': ('dqn', 'start_year', int),
    'dqn.end_year': ('dqn', 'end_year', int),
    'dqn.batch_size': ('dqn', 'batch_size', int),
    'dqn.buffer_size': ('dqn', 'buffer_size', int),
    'dqn.target_sync': ('dqn', 'target_sync', int),
    'dqn.epsilon_start': ('dqn', 'epsilon_start', float),
    'dqn.epsilon_end': ('dqn', 'epsilon_end', float),
    'dqn.epsilon_fraction': ('dqn', 'epsilon_fraction', float),
    'dqn.hidden_sizes': ('dqn', 'hidden_sizes', _optional(_ints)),
    'dqn.target_params': ('dqn', 'target_params', int),
    'dqn.grad_clip': ('dqn', 'grad_clip', float),
    'priority.bo_iterations': ('priority', 'bo_iterations', int),
    'priority.lr': ('priority', 'lr', float),
    'priority.iterations': ('priority', 'iterations', int),
    'budget.amount': ('budget', 'amount', float),
    'budget.scope': ('budget', 'scope', str),
}


def parse_config(text: str, base: Optional[PipelineConfig] = None) -> PipelineConfig:
    """
    Parses flat ``key = value`` lines with dotted keys on top of ``base``. Blank lines and ``#``
    comments are ignored; unknown keys and unparsable values raise ``ConfigError`` with the line.
    """
    base = base or PipelineConfig()
    top: Dict[str, object] = {}
    nested: Dict[str, Dict[str, object]] = {'lstm': {}, 'dqn': {}, 'priority': {}, 'budget': {}}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(f'line {lineno}: expected "key = value", got {line!r}')
        key, value = (s.strip() for s in line.split('=', 1))
        if key not in _KEYS:
            raise ConfigError(f'line {lineno}: unknown key {key!r}')
        section, name, convert = _KEYS[key]
        try:
            parsed = convert(value)
        except ValueError:
            raise ConfigError(f'line {lineno}: bad value for {key}: {value!r}') from None
        (top if section is None else nested[section])[name] = parsed
    for section, values in nested.items():
        if values:
            top[section] = replace(getattr(base, section), **values)
    return replace(base, **top)


def load_config(path, base: Optional[PipelineConfig] = None) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f'No such file: {path}')
    return parse_config(path.read_text(encoding='utf-8'), base)


@dataclass
class RunReport:
    stages: List[str] = field(default_factory=list)
    timings: Dict[str, float] = field(default_factory=dict)
    selected_features: Dict[str, List[Tuple[str, float]]] = field(default_factory=dict)
    route_priorities: List[Dict] = field(default_factory=list)
    plan_summary: Dict = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)

    def to_dict(self):
        """Everything except timings, which vary between runs."""
        out = asdict(self)
        del out['timings']
        return out

    def write(self, out_dir):
        out_dir = Path(out_dir)
        with open(out_dir / 'report.json', 'w') as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
        with open(out_dir / 'timings.json', 'w') as f:
            json.dump(self.timings, f, indent=2, sort_keys=True)


def emit_plot_data(entries: Sequence, plan: Mapping[SegmentKey, PlanEntry], current_pci: Mapping[SegmentKey, float],
                   actual_pci: Mapping[SegmentKey, float], year: int, out_dir) -> Tuple[List[Path], List[str]]:
    """
    One ``plot_<route>.csv`` per route with the route's segments in priority order: priority index,
    PCI in ``year``, the observed PCI of ``year + 1`` when available and the recommended effectiveness.
    """
    out_dir = Path(out_dir)
    warnings = []
    with_actual = bool(actual_pci)
    if not with_actual:
        warnings.append(f'no detection data for {year + 1}; plot data omits the actual column')
        logger.warning(warnings[-1])
    columns = ['priority_index', f'pci_{year}'] + ([f'pci_{year + 1}_actual'] if with_actual else [])
    columns.append('recommended_effectiveness')

    by_route: Dict[str, List] = {}
    for index, e in enumerate(entries, start=1):
        by_route.setdefault(e.segment.route_id, []).append((index, e.segment))
    paths = []
    for route_id in sorted(by_route):
        rows = []
        for index, segment in by_route[route_id]:
            row = [index, current_pci[segment]]
            if with_actual:
                row.append(actual_pci.get(segment, np.nan))
            row.append(plan[segment].expected_effectiveness)
            rows.append(row)
        path = out_dir / f'plot_{route_id}.csv'
        pd.DataFrame(rows, columns=columns).to_csv(path, index=False, float_format='%.6f')
        paths.append(path)
    return paths, warnings


def render_plots(out_dir):
    """Draws the DQN loss curve and the per-route effectiveness lines as PNG files."""
    import matplotlib
    matplotlib.use('Agg')
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    trace = out_dir / 'loss_trace.csv'
    if trace.exists():
        df = pd.read_csv(trace)
        fig, ax = plt.subplots()
        ax.plot(df['epoch'], df['loss'])
        ax.set_xlabel('epoch')
        ax.set_ylabel('loss')
        fig.savefig(out_dir / 'loss_trace.png')
        plt.close(fig)
    for path in sorted(out_dir.glob('plot_*.csv')):
        df = pd.read_csv(path)
        fig, ax = plt.subplots()
        for column in df.columns[1:]:
            ax.plot(df['priority_index'], df[column], marker='o', label=column)
        ax.set_xlabel('priority index')
        ax.legend()
        fig.savefig(path.with_suffix('.png'))
        plt.close(fig)


class Pipeline:
    """Holds the inputs and intermediate results of one run."""
    def __init__(self, config: PipelineConfig):
        self.config = config
        self.out_dir = Path(config.out_dir)
        self.report = RunReport()

    def load(self):
        cfg = self.config
        if cfg.detection is None:
            raise DataError('No detection file configured.')
        detections = load_detection(cfg.detection)
        maintenance = load_maintenance(cfg.maintenance) if cfg.maintenance is not None else []
        routes = load_routes(cfg.routes) if cfg.routes is not None else []
        self.report.warnings += validate(detections, maintenance, routes if routes else None).entries()

        end = cfg.dqn.end_year
        history = [r for r in detections if r.year <= end]
        if not history:
            raise DataError(f'No detection records up to {end}.')
        self.units = rebucket(history, cfg.segment_unit_m)
        self.maintenance = [m for m in maintenance if m.year <= end]
        self.routes = {r.route_id: r for r in routes}
        self.history = segment_history(self.units)
        self.actual = {
            u.segment: u.pci for u in rebucket([r for r in detections if r.year == end + 1], cfg.segment_unit_m)
        }
        route_ids = sorted({u.route_id for u in self.units})
        self.series = [build_series(self.units, rid) for rid in route_ids]
        for s in self.series:
            if s.interpolated_years:
                self.report.warnings.append(f'route {s.route_id}: interpolated years {list(s.interpolated_years)}')
        logger.info('Loaded %d routes, %d evaluation units, %d maintenance records',
                    len(route_ids), len(self.history), len(self.maintenance))

    def latest(self, segment: SegmentKey, year: int):
        by_year = self.history[segment]
        years = [y for y in by_year if y <= year]
        return by_year[max(years)] if years else by_year[min(by_year)]

    def predict(self):
        cfg = self.config
        results = forecast_network(self.series, cfg.lstm, cfg.corr_threshold, cfg.horizon,
                                   derive_seed(cfg.seed, 'predict'), cfg.workers)
        self.forecasts = {rid: f for rid, (f, _) in results.items()}
        for rid, (_, model) in results.items():
            self.report.selected_features[rid] = [(c, round(float(r), 6)) for c, r in model.selection.selected]
            self.report.warnings += model.warnings
        self.drops = {
            s.route_id: max(0.0, float(s.pci[-1] - self.forecasts[s.route_id].pci_forecast[0])) for s in self.series
        }
        write_forecasts(self.forecasts, self.out_dir / 'forecasts.csv')
        write_correlations({rid: model.selection for rid, (_, model) in results.items()},
                           self.out_dir / 'correlations.csv')

    def rank_routes(self):
        cfg = self.config
        self.dd_bins = DiseaseDegreeBins.fit(disease_density(u) for u in self.units)
        self.rank_history = history_rows(self.units, self.maintenance, self.routes, self.dd_bins)
        self.current = {
            seg: segment_features(self.latest(seg, cfg.dqn.end_year), self.routes.get(seg.route_id),
                                  self.maintenance, self.dd_bins)
            for seg in sorted(self.history)
        }
        features = [f for _, _, f, _ in self.rank_history]
        self.rank_domains = factor_domains(features + list(self.current.values()))
        structure = load_structure(cfg.rank_structure) if cfg.rank_structure is not None else None
        self.rank_net = fit_rank_network(features, [d for *_, d in self.rank_history], self.rank_domains,
                                         cfg.alpha, structure)
        self.p_segment = {seg: segment_maintenance_prob(self.rank_net, f) for seg, f in self.current.items()}

        per_route: Dict[str, List[float]] = {}
        for seg, p in self.p_segment.items():
            per_route.setdefault(seg.route_id, []).append(p)
        predicted = {rid: float(f.pci_forecast[0]) for rid, f in self.forecasts.items()}
        rows = rank_routes(predicted, {rid: float(np.mean(ps)) for rid, ps in per_route.items()})
        write_route_priorities(rows, self.out_dir / 'route_priorities.csv')
        self.report.route_priorities = [{k: (round(v, 6) if isinstance(v, float) else v) for k, v in asdict(r).items()}
                                        for r in rows]

    def state(self, segment: SegmentKey, year: int, cost_bands: CostBands):
        record = self.latest(segment, year)
        route = self.routes.get(segment.route_id)
        earlier = [m for m in self.maintenance if m.year < year and m.covers(segment)]
        return MdpState(
            segment=segment,
            year=year,
            pci=record.pci,
            predicted_next_pci=float(np.clip(record.pci - self.drops[segment.route_id], 0.0, 100.0)),
            HTR='yes' if history_treated(self.maintenance, segment, year) else 'no',
            PT=route.pavement_type if route is not None else 'unknown',
            BT=route.base_type if route is not None else 'unknown',
            DD=self.dd_bins.label(disease_density(record)),
            CO=cost_bands.label(max(earlier, key=lambda m: m.year).cost_per_km) if earlier else 'low',
        )

    def recommend(self):
        cfg = self.config
        gain_bins = GainBins()
        cost_bands = CostBands.fit(m.cost_per_km for m in self.maintenance)
        self.actions = build_actions(self.maintenance, cost_bands)
        rows = treatment_history_rows(self.maintenance, self.units, self.routes, self.dd_bins, cost_bands, gain_bins)

        segments = sorted(self.history)
        initial = [self.state(seg, cfg.dqn.start_year, cost_bands) for seg in segments]
        planning = [self.state(seg, cfg.dqn.end_year, cost_bands) for seg in segments]
        extra = {'PT': [s.PT for s in initial], 'BT': [s.BT for s in initial]}
        structure = load_structure(cfg.recommend_structure) if cfg.recommend_structure is not None else None
        net = fit_recommend_network(rows, gain_bins, cfg.alpha, structure, extra)

        domains = {n.name: n.domain for n in net.dag.nodes}
        network_km = sum(seg.length_km for seg in segments)
        env = RoadEnv(initial, self.actions, net, self.forecasts, network_km, cfg.dqn.start_year,
                      cfg.dqn.end_year, domains, gain_bins)
        result = dqn_train(env, cfg.dqn, derive_seed(cfg.seed, 'recommend'))
        self.loss_trace = result.loss_trace
        pd.DataFrame({'epoch': np.arange(len(result.loss_trace)), 'loss': result.loss_trace}).to_csv(
            self.out_dir / 'loss_trace.csv', index=False, float_format='%.6f')
        self.plan = {e.segment: e for e in greedy_plan(result.q_network, planning, env)}

    def plan_segments(self):
        cfg = self.config
        decisions = [d for *_, d in self.rank_history]
        segments = sorted(self.current)
        try:
            X = np.stack([encode(f, self.rank_domains) for _, _, f, _ in self.rank_history])
            model = fit_logistic(X, decisions, cfg.priority.lr, cfg.priority.iterations,
                                 derive_seed(cfg.seed, 'plan'))
            encoded = [encode(self.current[seg], self.rank_domains) for seg in segments]
        except SingleClassError as e:
            self.report.warnings.append(f'segment ranking falls back to network posteriors: {e}')
            logger.warning(self.report.warnings[-1])
            model = LogisticModel(np.ones(1), 0.0)
            encoded = None

        costs = [self.plan[seg].action.cost_per_km * seg.length_km for seg in segments]
        if encoded is None:
            items = [(seg, np.array([self.p_segment[seg]]), c) for seg, c in zip(segments, costs)]
        else:
            items = list(zip(segments, encoded, costs))
            _, _, ok = anchor_check(model, np.stack(encoded), cfg.priority.bo_iterations,
                                    derive_seed(cfg.seed, 'bayes_opt'))
            if not ok:
                self.report.warnings.append('top segment score is below 99% of the relaxed optimum')
        plist = priority_list(items, model, cfg.budget.budget())

        write_priority_list(plist, self.out_dir / 'priority.csv')
        write_plan([(i, self.plan[e.segment], e.cost, e.selected) for i, e in enumerate(plist.entries, start=1)],
                   self.out_dir / 'plan.csv')
        current_pci = {seg: self.latest(seg, cfg.dqn.end_year).pci for seg in segments}
        _, warnings = emit_plot_data(plist.entries, self.plan, current_pci, self.actual, cfg.dqn.end_year,
                                     self.out_dir)
        self.report.warnings += warnings

        actions: Dict[str, int] = {}
        for e in self.plan.values():
            actions[e.action.code] = actions.get(e.action.code, 0) + 1
        self.report.plan_summary = {
            'segments': len(plist.entries),
            'selected': sum(e.selected for e in plist.entries),
            'selected_cost': round(plist.selected_cost, 6),
            'budget': cfg.budget.amount,
            'scope': cfg.budget.scope,
            'actions': dict(sorted(actions.items())),
        }
        if cfg.plot:
            render_plots(self.out_dir)

    def run(self, until: str = 'plan'):
        if until not in STAGES:
            raise ValueError(f'Unknown stage {until!r}; expected one of {STAGES}')
        set_seed(self.config.seed)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.load()
        steps = {
            'predict': self.predict,
            'rank-routes': self.rank_routes,
            'recommend': self.recommend,
            'plan': self.plan_segments,
        }
        for name in STAGES[:STAGES.index(until) + 1]:
            logger.info('Stage %s', name)
            start = time.perf_counter()
            try:
                steps[name]()
            except Exception as e:
                raise StageError(name, e) from e
            self.report.timings[name] = round(time.perf_counter() - start, 3)
            self.report.stages.append(name)
        self.report.write(self.out_dir)
        return self.report


def run_pipeline(config: PipelineConfig, until: str = 'plan') -> RunReport:
    return Pipeline(config).run(until)

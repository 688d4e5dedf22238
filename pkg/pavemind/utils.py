import hashlib
import logging
import random
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch


logger = logging.getLogger(__name__)


EVALUATION_UNIT_M = 10.0

DETECTION_COLUMNS = ['route_id', 'segment_start_m', 'segment_end_m', 'year', 'pci']
MAINTENANCE_COLUMNS = [
    'route_id', 'segment_start_m', 'segment_end_m', 'year', 'treatment_code', 'measure',
    'location', 'cost_per_km', 'pre_pci', 'post_pci', 'next_year_pci'
]
ROUTE_COLUMNS = [
    'route_id', 'road_grade', 'pavement_type', 'base_type', 'traffic_volume', 'department',
    'unit', 'area', 'special_section', 'admin_grade'
]
TRAFFIC_VOLUMES = ('H', 'M', 'L')

# Lower edges of the five condition grades, best first.
PCI_BANDS = (('excellent', 90.0), ('good', 80.0), ('fair', 70.0), ('poor', 60.0), ('bad', 0.0))


class DataError(ValueError):
    """Raised when an input file or record violates its schema."""


class SegmentKey(NamedTuple):
    route_id: str
    start_m: float
    end_m: float

    @property
    def length_km(self):
        return (self.end_m - self.start_m) / 1000.0

    def __str__(self):
        return f'{self.route_id}:{self.start_m:g}-{self.end_m:g}'


@dataclass(frozen=True)
class RouteMeta:
    route_id: str
    road_grade: str
    pavement_type: str
    base_type: str
    traffic_volume: str
    department: str
    unit: str
    area: str
    special_section: int
    admin_grade: str


@dataclass(frozen=True)
class DetectionRecord:
    route_id: str
    segment_start_m: float
    segment_end_m: float
    year: int
    pci: float
    diseases: Mapping[str, float] = field(default_factory=dict)

    @property
    def segment(self):
        return SegmentKey(self.route_id, self.segment_start_m, self.segment_end_m)

    @property
    def length_m(self):
        return self.segment_end_m - self.segment_start_m

    @property
    def total_disease(self):
        return float(sum(self.diseases.values()))


@dataclass(frozen=True)
class MaintenanceRecord:
    route_id: str
    segment_start_m: float
    segment_end_m: float
    year: int
    treatment_code: str
    measure: str
    location: str
    cost_per_km: float
    pre_pci: float
    post_pci: float
    next_year_pci: Optional[float] = None

    @property
    def segment(self):
        return SegmentKey(self.route_id, self.segment_start_m, self.segment_end_m)

    def covers(self, segment: SegmentKey):
        """Whether the treated stretch overlaps ``segment``."""
        return (
            segment.route_id == self.route_id
            and segment.start_m < self.segment_end_m
            and self.segment_start_m < segment.end_m
        )


@dataclass(frozen=True)
class RouteSeries:
    """
    Route-level annual series: ``pci`` is the target sequence and ``disease_series`` holds one
    candidate feature sequence per disease code, all aligned on ``years``.
    """
    route_id: str
    years: Tuple[int, ...]
    pci: np.ndarray
    disease_series: Mapping[str, np.ndarray]
    interpolated_years: Tuple[int, ...] = ()

    def __post_init__(self):
        t = len(self.years)
        if t < 2:
            raise DataError(f'Route {self.route_id}: series needs at least 2 years, got {t}.')
        if any(b <= a for a, b in zip(self.years, self.years[1:])):
            raise DataError(f'Route {self.route_id}: years must be strictly increasing.')
        if len(self.pci) != t or any(len(v) != t for v in self.disease_series.values()):
            raise DataError(f'Route {self.route_id}: series vectors have unequal lengths.')

    @property
    def codes(self):
        return sorted(self.disease_series)

    def matrix(self, codes: Sequence[str]):
        """Stacks the named disease series into a ``t x k`` matrix."""
        return np.column_stack([self.disease_series[c] for c in codes]).astype(np.float64)


@dataclass(frozen=True)
class Budget:
    amount: float
    scope: str = 'network'

    def __post_init__(self):
        if self.amount < 0:
            raise ValueError(f'Budget must be non-negative, got {self.amount}.')
        if self.scope not in ('network', 'route'):
            raise ValueError(f'Budget scope must be "network" or "route", got {self.scope!r}.')


@dataclass
class ValidationReport:
    gaps: List[Tuple[str, int]] = field(default_factory=list)
    overlaps: List[Tuple[str, int, SegmentKey, SegmentKey]] = field(default_factory=list)
    orphans: List[Tuple[int, str]] = field(default_factory=list)
    unknown_routes: List[str] = field(default_factory=list)

    @property
    def is_empty(self):
        return not (self.gaps or self.overlaps or self.orphans or self.unknown_routes)

    def entries(self):
        out = [f'route {r}: missing year {y}' for r, y in self.gaps]
        out += [f'route {r}: overlapping segments {a} and {b} in {y}' for r, y, a, b in self.overlaps]
        out += [f'maintenance row {i}: orphan record on unknown route {r}' for i, r in self.orphans]
        out += [f'route {r}: detections without route metadata' for r in self.unknown_routes]
        return out


def set_seed(seed: int):
    """Sets the relevant random seeds."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.random.manual_seed(seed)


def derive_seed(seed: int, name: str) -> int:
    """Stable child seed for a named stage."""
    digest = hashlib.sha256(f'{seed}:{name}'.encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'little') & 0x7FFFFFFF


class ExponentialMovingAverage:
    def __init__(self, weight=0.3):
        self._weight = weight
        self.reset()

    def update(self, x):
        if self._x is None:
            self._x = x
        else:
            self._x = self._weight * x + (1 - self._weight) * self._x

    def reset(self):
        self._x = None

    def get_metric(self):
        return 0.0 if self._x is None else self._x


def pci_band(pci: float) -> str:
    for label, lower in PCI_BANDS:
        if pci >= lower:
            return label
    return PCI_BANDS[-1][0]


def _read_csv(path, required):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f'No such file: {path}')
    df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding='utf-8')
    header = list(df.columns)
    if header[:len(required)] != required:
        raise DataError(f'{path}: header must start with {",".join(required)}; got {",".join(header)}')
    return df


def _number(value, row, column, allow_empty=False, default=None):
    value = value.strip()
    if value == '':
        if allow_empty:
            return default
        raise DataError(f'row {row}: column {column}: empty value')
    try:
        number = float(value)
    except ValueError:
        raise DataError(f'row {row}: column {column}: not a number: {value!r}') from None
    if not np.isfinite(number):
        raise DataError(f'row {row}: column {column}: not finite: {value!r}')
    return number


def _check_pci(value, row, column):
    if value is not None and not 0.0 <= value <= 100.0:
        raise DataError(f'row {row}: column {column}: PCI {value} outside [0, 100]')
    return value


def _segment_bounds(raw, row):
    start = _number(raw['segment_start_m'], row, 'segment_start_m')
    end = _number(raw['segment_end_m'], row, 'segment_end_m')
    if start < 0:
        raise DataError(f'row {row}: column segment_start_m: negative start {start}')
    if end <= start:
        raise DataError(f'row {row}: column segment_end_m: end {end} not after start {start}')
    return start, end


def _year(raw, row):
    year = _number(raw['year'], row, 'year')
    if year != int(year):
        raise DataError(f'row {row}: column year: not a calendar year: {raw["year"]!r}')
    return int(year)


def load_detection(path, disease_codes: Optional[Iterable[str]] = None) -> List[DetectionRecord]:
    """
    Loads a detection CSV. Rows are numbered from 1 (the first data row) in error messages.

    Parameters
    ==========
    path : str or Path
        CSV with header ``route_id,segment_start_m,segment_end_m,year,pci,<disease codes...>``.
    disease_codes : iterable of str, optional
        Declared disease vocabulary. Codes outside it are kept, with a warning.
    """
    df = _read_csv(path, DETECTION_COLUMNS)
    codes = list(df.columns[len(DETECTION_COLUMNS):])
    if disease_codes is not None:
        unknown = sorted(set(codes) - set(disease_codes))
        if unknown:
            logger.warning('Passing through undeclared disease codes: %s', ', '.join(unknown))
    records = []
    for i, raw in enumerate(df.to_dict('records'), start=1):
        start, end = _segment_bounds(raw, i)
        pci = _check_pci(_number(raw['pci'], i, 'pci'), i, 'pci')
        diseases = {}
        for code in codes:
            quantity = _number(raw[code], i, code, allow_empty=True, default=0.0)
            if quantity < 0:
                raise DataError(f'row {i}: column {code}: negative quantity {quantity}')
            diseases[code] = quantity
        records.append(DetectionRecord(
            route_id=raw['route_id'].strip(),
            segment_start_m=start,
            segment_end_m=end,
            year=_year(raw, i),
            pci=pci,
            diseases=diseases,
        ))
    records.sort(key=lambda r: (r.route_id, r.segment_start_m, r.segment_end_m, r.year))
    logger.info('Loaded %d detection records from %s', len(records), path)
    return records


def load_maintenance(path, treatment_codes: Optional[Iterable[str]] = None) -> List[MaintenanceRecord]:
    """Loads a maintenance-history CSV; ``next_year_pci`` may be empty."""
    df = _read_csv(path, MAINTENANCE_COLUMNS)
    vocab = set(treatment_codes) if treatment_codes is not None else None
    records = []
    for i, raw in enumerate(df.to_dict('records'), start=1):
        start, end = _segment_bounds(raw, i)
        cost = _number(raw['cost_per_km'], i, 'cost_per_km')
        if cost < 0:
            raise DataError(f'row {i}: column cost_per_km: negative cost {cost}')
        code = raw['treatment_code'].strip()
        if not code:
            raise DataError(f'row {i}: column treatment_code: empty value')
        if vocab is not None and code not in vocab:
            logger.warning('row %d: treatment code %r not in the configured vocabulary; keeping it.', i, code)
        records.append(MaintenanceRecord(
            route_id=raw['route_id'].strip(),
            segment_start_m=start,
            segment_end_m=end,
            year=_year(raw, i),
            treatment_code=code,
            measure=raw['measure'].strip(),
            location=raw['location'].strip(),
            cost_per_km=cost,
            pre_pci=_check_pci(_number(raw['pre_pci'], i, 'pre_pci'), i, 'pre_pci'),
            post_pci=_check_pci(_number(raw['post_pci'], i, 'post_pci'), i, 'post_pci'),
            next_year_pci=_check_pci(
                _number(raw['next_year_pci'], i, 'next_year_pci', allow_empty=True), i, 'next_year_pci'
            ),
        ))
    records.sort(key=lambda r: (r.route_id, r.segment_start_m, r.segment_end_m, r.year, r.treatment_code))
    logger.info('Loaded %d maintenance records from %s', len(records), path)
    return records


def load_routes(path) -> List[RouteMeta]:
    """Loads route metadata (one row per route)."""
    df = _read_csv(path, ROUTE_COLUMNS)
    routes = []
    seen = set()
    for i, raw in enumerate(df.to_dict('records'), start=1):
        raw = {k: v.strip() for k, v in raw.items()}
        if raw['route_id'] in seen:
            raise DataError(f'row {i}: column route_id: duplicate route {raw["route_id"]!r}')
        seen.add(raw['route_id'])
        if raw['traffic_volume'] not in TRAFFIC_VOLUMES:
            raise DataError(f'row {i}: column traffic_volume: {raw["traffic_volume"]!r} not in H/M/L')
        if raw['special_section'] not in ('0', '1'):
            raise DataError(f'row {i}: column special_section: {raw["special_section"]!r} not in 0/1')
        routes.append(RouteMeta(**{**{c: raw[c] for c in ROUTE_COLUMNS},
                                   'special_section': int(raw['special_section'])}))
    routes.sort(key=lambda r: r.route_id)
    return routes


def _fmt(value):
    if value is None:
        return ''
    value = float(value)
    return str(int(value)) if value.is_integer() else repr(value)


def write_detection(records: Sequence[DetectionRecord], path):
    codes = sorted({c for r in records for c in r.diseases})
    rows = []
    for r in sorted(records, key=lambda r: (r.route_id, r.segment_start_m, r.segment_end_m, r.year)):
        row = {
            'route_id': r.route_id,
            'segment_start_m': _fmt(r.segment_start_m),
            'segment_end_m': _fmt(r.segment_end_m),
            'year': str(r.year),
            'pci': _fmt(r.pci),
        }
        row.update({c: _fmt(r.diseases.get(c, 0.0)) for c in codes})
        rows.append(row)
    pd.DataFrame(rows, columns=DETECTION_COLUMNS + codes).to_csv(path, index=False)


def write_maintenance(records: Sequence[MaintenanceRecord], path):
    rows = []
    for r in sorted(records, key=lambda r: (r.route_id, r.segment_start_m, r.segment_end_m, r.year, r.treatment_code)):
        rows.append({
            'route_id': r.route_id,
            'segment_start_m': _fmt(r.segment_start_m),
            'segment_end_m': _fmt(r.segment_end_m),
            'year': str(r.year),
            'treatment_code': r.treatment_code,
            'measure': r.measure,
            'location': r.location,
            'cost_per_km': _fmt(r.cost_per_km),
            'pre_pci': _fmt(r.pre_pci),
            'post_pci': _fmt(r.post_pci),
            'next_year_pci': _fmt(r.next_year_pci),
        })
    pd.DataFrame(rows, columns=MAINTENANCE_COLUMNS).to_csv(path, index=False)


def write_routes(routes: Sequence[RouteMeta], path):
    rows = [{c: str(getattr(r, c)) for c in ROUTE_COLUMNS} for r in sorted(routes, key=lambda r: r.route_id)]
    pd.DataFrame(rows, columns=ROUTE_COLUMNS).to_csv(path, index=False)


def rebucket(records: Sequence[DetectionRecord], unit_m: float = EVALUATION_UNIT_M) -> List[DetectionRecord]:
    """
    Splits detection records into fixed evaluation units. Units start at multiples of ``unit_m``;
    partial units at segment ends are kept. Disease quantities are apportioned by length.
    """
    if unit_m <= 0:
        raise ValueError(f'unit_m must be positive, got {unit_m}')
    out = []
    for r in records:
        start = r.segment_start_m
        while start < r.segment_end_m:
            end = min(r.segment_end_m, (np.floor(start / unit_m + 1e-9) + 1) * unit_m)
            share = (end - start) / r.length_m
            out.append(DetectionRecord(
                route_id=r.route_id,
                segment_start_m=float(start),
                segment_end_m=float(end),
                year=r.year,
                pci=r.pci,
                diseases={c: q * share for c, q in r.diseases.items()},
            ))
            start = end
    out.sort(key=lambda r: (r.route_id, r.segment_start_m, r.segment_end_m, r.year))
    return out


def build_series(records: Sequence[DetectionRecord], route_id: str, fill_gaps: bool = True) -> RouteSeries:
    """
    Aggregates a route's segment records to one value per year: length-weighted mean PCI and
    summed disease quantities. Missing years inside the span are linearly interpolated when
    ``fill_gaps`` is set.
    """
    rows = [r for r in records if r.route_id == route_id]
    if not rows:
        raise DataError(f'Route {route_id!r} has no detection records.')
    codes = sorted({c for r in rows for c in r.diseases})
    by_year = defaultdict(list)
    for r in rows:
        by_year[r.year].append(r)
    years = sorted(by_year)
    if len(years) < 2:
        raise DataError(f'Route {route_id!r}: need at least 2 years of data, got {len(years)}.')

    pci = []
    diseases = {c: [] for c in codes}
    for year in years:
        group = by_year[year]
        lengths = np.array([r.length_m for r in group])
        pci.append(float(np.dot(lengths, [r.pci for r in group]) / lengths.sum()))
        for c in codes:
            diseases[c].append(float(sum(r.diseases.get(c, 0.0) for r in group)))

    interpolated = ()
    if fill_gaps:
        full = list(range(years[0], years[-1] + 1))
        interpolated = tuple(y for y in full if y not in by_year)
        if interpolated:
            logger.warning('Route %s: interpolating missing years %s', route_id, list(interpolated))
            pci = list(np.interp(full, years, pci))
            diseases = {c: list(np.interp(full, years, v)) for c, v in diseases.items()}
            years = full

    return RouteSeries(
        route_id=route_id,
        years=tuple(years),
        pci=np.asarray(pci, dtype=np.float64),
        disease_series={c: np.asarray(v, dtype=np.float64) for c, v in diseases.items()},
        interpolated_years=interpolated,
    )


def validate(
    detections: Sequence[DetectionRecord],
    maintenance: Sequence[MaintenanceRecord] = (),
    routes: Optional[Sequence[RouteMeta]] = None,
) -> ValidationReport:
    """Reports year gaps, overlapping segments and orphan maintenance records. Never raises."""
    report = ValidationReport()
    by_route = defaultdict(list)
    for r in detections:
        by_route[r.route_id].append(r)

    for route_id in sorted(by_route):
        rows = by_route[route_id]
        years = sorted({r.year for r in rows})
        for a, b in zip(years, years[1:]):
            report.gaps.extend((route_id, y) for y in range(a + 1, b))
        by_year = defaultdict(list)
        for r in rows:
            by_year[r.year].append(r)
        for year in sorted(by_year):
            spans = sorted(by_year[year], key=lambda r: (r.segment_start_m, r.segment_end_m))
            for a, b in zip(spans, spans[1:]):
                if b.segment_start_m < a.segment_end_m:
                    report.overlaps.append((route_id, year, a.segment, b.segment))

    known = set(by_route)
    if routes is not None:
        known |= {r.route_id for r in routes}
        meta = {r.route_id for r in routes}
        report.unknown_routes.extend(sorted(set(by_route) - meta))
    for i, m in enumerate(maintenance, start=1):
        if m.route_id not in known:
            report.orphans.append((i, m.route_id))

    for entry in report.entries():
        logger.debug('Validation: %s', entry)
    return report


def segment_history(records: Sequence[DetectionRecord]) -> Dict[SegmentKey, Dict[int, DetectionRecord]]:
    """Indexes records by segment, then year."""
    out = defaultdict(dict)
    for r in records:
        out[r.segment][r.year] = r
    return dict(out)

"""
Synthetic detection, maintenance and route files with the same schema as the real inputs.

PCI decays along a per-route trend; treatments lift it and are written to the maintenance history
with the pre, post and next-year values the detection series shows.
"""
import argparse
import logging
from pathlib import Path

import numpy as np

from pavemind.utils import (
    DetectionRecord, EVALUATION_UNIT_M, MaintenanceRecord, RouteMeta, TRAFFIC_VOLUMES,
    write_detection, write_maintenance, write_routes
)


logger = logging.getLogger(__name__)

DISEASE_CODES = ('crack_1', 'crack_2', 'crack_3', 'repair_1', 'repair_2')
MEASURES = ('preventive', 'functional', 'structural')
FIRST_YEAR = 2013


def _treatment_vocab(size, rng):
    vocab = []
    for i in range(size):
        measure = MEASURES[i % len(MEASURES)]
        level = MEASURES.index(measure)
        vocab.append({
            'code': f'T{i + 1:02d}',
            'measure': measure,
            'location': 'base' if measure == 'structural' else 'surface',
            'cost_per_km': float(np.round(rng.uniform(5.0, 20.0) + 20.0 * level, 2)),
            'gain': float(rng.uniform(8.0, 16.0) + 12.0 * level),
            'attenuation': float(rng.uniform(0.01, 0.06)),
        })
    return vocab


def _diseases(pci, rng):
    damage = 100.0 - pci
    out = {}
    for k, code in enumerate(DISEASE_CODES[:3]):
        out[code] = float(np.round(max(0.0, damage * (0.5 + 0.3 * k) + rng.normal(0.0, 1.0)), 3))
    for code in DISEASE_CODES[3:]:
        out[code] = float(np.round(rng.gamma(2.0, 2.0), 3))
    return out


def gen_synthetic(seed: int, n_routes: int = 3, n_segments: int = 5, years: int = 9,
                  treatment_vocab_size: int = 6, out_dir=None):
    """
    Returns ``(detections, maintenance, routes)`` and writes ``detection.csv``,
    ``maintenance.csv`` and ``routes.csv`` under ``out_dir`` when given.
    """
    if years < 2:
        raise ValueError(f'years must be at least 2, got {years}')
    for name, value in (('n_routes', n_routes), ('n_segments', n_segments),
                        ('treatment_vocab_size', treatment_vocab_size)):
        if value < 1:
            raise ValueError(f'{name} must be at least 1, got {value}')

    rng = np.random.default_rng(seed)
    vocab = _treatment_vocab(treatment_vocab_size, rng)
    detections, maintenance, routes = [], [], []
    for r in range(n_routes):
        route_id = f'R{r:03d}'
        routes.append(RouteMeta(
            route_id=route_id,
            road_grade=str(rng.choice(['A', 'B'])),
            pavement_type=str(rng.choice(['A', 'C'])),
            base_type=str(rng.choice(['A', 'B'])),
            traffic_volume=str(rng.choice(TRAFFIC_VOLUMES)),
            department=f'{chr(ord("A") + r % 26)}00',
            unit=f'U{r % 4:03d}',
            area=str(rng.choice(['A', 'B', 'C'])),
            special_section=int(rng.integers(0, 2)),
            admin_grade=str(rng.choice(['A', 'B'])),
        ))
        decay = rng.uniform(2.0, 5.0)
        for s in range(n_segments):
            start = s * EVALUATION_UNIT_M
            end = start + EVALUATION_UNIT_M
            pci = float(rng.uniform(75.0, 95.0))
            for t in range(years):
                year = FIRST_YEAR + t
                detections.append(DetectionRecord(route_id, start, end, year, round(pci, 2), _diseases(pci, rng)))
                if t == years - 1:
                    break
                treat_p = 0.4 if pci < 70.0 else 0.05
                if rng.random() < treat_p:
                    treatment = vocab[int(rng.integers(len(vocab)))]
                    post = float(min(100.0, pci + treatment['gain'] + rng.normal(0.0, 1.0)))
                    nxt = float(np.clip(post * (1.0 - treatment['attenuation']), 0.0, 100.0))
                    maintenance.append(MaintenanceRecord(
                        route_id=route_id,
                        segment_start_m=start,
                        segment_end_m=end,
                        year=year,
                        treatment_code=treatment['code'],
                        measure=treatment['measure'],
                        location=treatment['location'],
                        cost_per_km=treatment['cost_per_km'],
                        pre_pci=round(pci, 2),
                        post_pci=round(post, 2),
                        next_year_pci=round(nxt, 2),
                    ))
                    pci = nxt
                else:
                    pci = float(np.clip(pci - decay + rng.normal(0.0, 0.5), 0.0, 100.0))

    logger.info('Generated %d routes, %d detection rows, %d maintenance rows',
                len(routes), len(detections), len(maintenance))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_detection(detections, out_dir / 'detection.csv')
        write_maintenance(maintenance, out_dir / 'maintenance.csv')
        write_routes(routes, out_dir / 'routes.csv')
    return detections, maintenance, routes


if __name__ == '__main__':
    parser = argparse.ArgumentParser()
    parser.add_argument('--out', type=Path, required=True)
    parser.add_argument('--seed', type=int, default=0)
    parser.add_argument('--routes', type=int, default=3)
    parser.add_argument('--segments', type=int, default=5)
    parser.add_argument('--years', type=int, default=9)
    parser.add_argument('--treatments', type=int, default=6)
    parser.add_argument('--debug', action='store_true')
    args = parser.parse_args()

    if args.debug:
        level = logging.DEBUG
    else:
        level = logging.INFO
    logging.basicConfig(level=level)

    gen_synthetic(args.seed, args.routes, args.segments, args.years, args.treatments, args.out)

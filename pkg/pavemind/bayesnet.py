"""
Discrete Bayesian networks: structure, CPT estimation with additive smoothing, and exact
inference by summing the joint over every unobserved node.
"""
from dataclasses import dataclass, field
import logging
from pathlib import Path
import re
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd


logger = logging.getLogger(__name__)


class StructureError(ValueError):
    pass


@dataclass(frozen=True)
class NodeSpec:
    name: str
    domain: Tuple[str, ...]

    def __post_init__(self):
        if len(self.domain) < 2:
            raise StructureError(f'Node {self.name}: domain needs at least 2 labels, got {list(self.domain)}')
        if len(set(self.domain)) != len(self.domain):
            raise StructureError(f'Node {self.name}: duplicate labels in {list(self.domain)}')

    def index(self, label):
        try:
            return self.domain.index(label)
        except ValueError:
            raise ValueError(f'Node {self.name}: unknown category {label!r}; domain is {list(self.domain)}') from None


@dataclass
class Dag:
    nodes: Tuple[NodeSpec, ...]
    parents: Dict[str, Tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        self.nodes = tuple(self.nodes)
        declared = {n.name: () for n in self.nodes}
        declared.update({k: tuple(v) for k, v in self.parents.items()})
        self.parents = declared
        self._by_name = {n.name: n for n in self.nodes}

    @property
    def names(self):
        return [n.name for n in self.nodes]

    def node(self, name):
        try:
            return self._by_name[name]
        except KeyError:
            raise ValueError(f'Unknown node {name!r}') from None


def validate_structure(dag: Dag) -> Dag:
    """Raises ``StructureError`` on undeclared parents or cycles; returns the dag otherwise."""
    declared = set(dag.names)
    if len(declared) != len(dag.nodes):
        raise StructureError('Duplicate node names.')
    for child, ps in dag.parents.items():
        if child not in declared:
            raise StructureError(f'Edges into undeclared node {child!r}')
        for p in ps:
            if p not in declared:
                raise StructureError(f'Node {child!r} has undeclared parent {p!r}')

    state = {}

    def visit(name, path):
        state[name] = 'active'
        for p in dag.parents[name]:
            if state.get(p) == 'active':
                cycle = path[path.index(p):] + [p]
                raise StructureError(f'Cycle: {" -> ".join(reversed(cycle))}')
            if p not in state:
                visit(p, path + [p])
        state[name] = 'done'

    for name in dag.names:
        if name not in state:
            visit(name, [name])
    return dag


def topological_order(dag: Dag) -> List[str]:
    validate_structure(dag)
    order = []
    placed = set()
    while len(order) < len(dag.nodes):
        for name in dag.names:
            if name not in placed and all(p in placed for p in dag.parents[name]):
                order.append(name)
                placed.add(name)
    return order


@dataclass
class Cpt:
    """
    P(node | parents). ``table`` has one axis per parent (in ``parents`` order) followed by the
    node's own axis.
    """
    node: str
    parents: Tuple[str, ...]
    table: np.ndarray

    def row(self, dag: Dag, parent_values: Sequence[str]):
        idx = tuple(dag.node(p).index(v) for p, v in zip(self.parents, parent_values))
        return self.table[idx]

    def as_dict(self, dag: Dag):
        """Maps each parent assignment tuple to its probability vector."""
        domains = [dag.node(p).domain for p in self.parents]
        out = {}
        for idx in np.ndindex(*self.table.shape[:-1]):
            out[tuple(d[i] for d, i in zip(domains, idx))] = self.table[idx]
        return out


@dataclass(frozen=True)
class Query:
    target: str
    evidence: Mapping[str, str] = field(default_factory=dict)


def uniform_cpts(dag: Dag) -> Dict[str, Cpt]:
    out = {}
    for n in dag.nodes:
        shape = tuple(len(dag.node(p).domain) for p in dag.parents[n.name]) + (len(n.domain),)
        out[n.name] = Cpt(n.name, dag.parents[n.name], np.full(shape, 1.0 / len(n.domain)))
    return out


def _rows(records):
    if isinstance(records, pd.DataFrame):
        return records.to_dict('records')
    return list(records)


def learn_cpts(dag: Dag, records, alpha: float = 1.0) -> Dict[str, Cpt]:
    """
    Maximum-likelihood CPTs with additive smoothing:
    ``P(v | pa) = (count + alpha) / (N_pa + alpha * |domain|)``.

    Records are mappings from node name to label. A record missing any label of a node's family
    does not count toward that node's CPT.
    """
    validate_structure(dag)
    rows = _rows(records)
    if alpha < 0:
        raise ValueError(f'alpha must be non-negative, got {alpha}')
    if not rows and alpha == 0:
        raise ValueError('Cannot estimate CPTs from no records without smoothing.')

    cpts = {}
    for n in dag.nodes:
        family = list(dag.parents[n.name]) + [n.name]
        shape = tuple(len(dag.node(v).domain) for v in family)
        counts = np.zeros(shape)
        for r in rows:
            if any(r.get(v) is None for v in family):
                continue
            counts[tuple(dag.node(v).index(r[v]) for v in family)] += 1.0
        smoothed = counts + alpha
        totals = smoothed.sum(axis=-1, keepdims=True)
        empty = (totals == 0)
        if empty.any():
            logger.debug('Node %s: %d unobserved parent configurations; using uniform rows.',
                         n.name, int(empty.sum()))
        table = np.where(empty, 1.0 / shape[-1], smoothed / np.where(empty, 1.0, totals))
        cpts[n.name] = Cpt(n.name, dag.parents[n.name], table)
    return cpts


def query(dag: Dag, cpts: Mapping[str, Cpt], q: Query) -> np.ndarray:
    """Exact posterior ``P(target | evidence)`` as a vector over the target's domain."""
    target = dag.node(q.target)
    evidence = {name: dag.node(name).index(value) for name, value in q.evidence.items()}
    if q.target in evidence:
        out = np.zeros(len(target.domain))
        out[evidence[q.target]] = 1.0
        return out
    for name in dag.names:
        if name not in cpts:
            raise ValueError(f'Missing CPT for node {name!r}')

    axis_id = {name: i for i, name in enumerate(dag.names)}
    operands = []
    constant = 1.0
    for name in dag.names:
        cpt = cpts[name]
        family = list(cpt.parents) + [name]
        factor = cpt.table[tuple(evidence.get(v, slice(None)) for v in family)]
        free = [axis_id[v] for v in family if v not in evidence]
        if not free:
            constant *= float(factor)
            continue
        operands += [factor, free]
    joint = constant * np.einsum(*operands, [axis_id[q.target]], optimize='greedy')
    total = joint.sum()
    if total <= 0:
        raise ValueError(f'Evidence {dict(q.evidence)} has zero probability.')
    return joint / total


class BayesNet:
    """A dag with learned CPTs."""
    def __init__(self, dag: Dag, cpts: Optional[Mapping[str, Cpt]] = None):
        self.dag = validate_structure(dag)
        self.cpts = dict(cpts) if cpts is not None else uniform_cpts(dag)

    @classmethod
    def fit(cls, dag: Dag, records, alpha: float = 1.0):
        return cls(dag, learn_cpts(dag, records, alpha))

    def query(self, target: str, evidence: Optional[Mapping[str, str]] = None):
        evidence = {k: v for k, v in (evidence or {}).items() if v is not None}
        return query(self.dag, self.cpts, Query(target, evidence))

    def posterior(self, target: str, evidence: Optional[Mapping[str, str]] = None):
        probs = self.query(target, evidence)
        return dict(zip(self.dag.node(target).domain, probs.tolist()))


_NODE_RE = re.compile(r'^node\s+(\S+)\s*:\s*(.+)$')
_EDGE_RE = re.compile(r'^edge\s+(\S+)\s*->\s*(\S+)$')


def parse_structure(text: str) -> Dag:
    """
    Parses ``node <name> : <label1>|<label2>|...`` and ``edge <parent> -> <child>`` lines.
    Blank lines and ``#`` comments are ignored.
    """
    nodes = []
    parents: Dict[str, List[str]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        m = _NODE_RE.match(line)
        if m:
            labels = tuple(label.strip() for label in m.group(2).split('|'))
            nodes.append(NodeSpec(m.group(1), labels))
            continue
        m = _EDGE_RE.match(line)
        if m:
            parents.setdefault(m.group(2), []).append(m.group(1))
            continue
        raise StructureError(f'line {lineno}: cannot parse {line!r}')
    return validate_structure(Dag(tuple(nodes), {k: tuple(v) for k, v in parents.items()}))


def load_structure(path) -> Dag:
    return parse_structure(Path(path).read_text(encoding='utf-8'))


def format_structure(dag: Dag) -> str:
    lines = [f'node {n.name} : {"|".join(n.domain)}' for n in dag.nodes]
    for child in dag.names:
        lines += [f'edge {p} -> {child}' for p in dag.parents[child]]
    return '\n'.join(lines) + '\n'


def star(target: NodeSpec, factors: Iterable[NodeSpec]) -> Dag:
    """Naive-Bayes structure: ``target`` is the only parent of every factor."""
    factors = tuple(factors)
    return Dag((target,) + factors, {f.name: (target.name,) for f in factors})


def domain_of(values: Iterable[str], declared: Sequence[str] = ()) -> Tuple[str, ...]:
    """Declared labels followed by any other observed labels, padded to at least two."""
    labels = list(declared)
    for v in sorted(set(values) - set(labels)):
        labels.append(v)
    while len(labels) < 2:
        labels.append('other' if 'other' not in labels else f'other{len(labels)}')
    return tuple(labels)

"""
Treatment recommendation as a Markov decision process.

The transition model comes from a discrete Bayesian network over road factors, treatment
attributes and realized effectiveness; the policy is learned by deep Q-learning. An exact
value-iteration solver covers small finite MDPs.
"""
import copy
from collections import deque
from dataclasses import dataclass, field
import logging
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from pavemind.bayesnet import BayesNet, Dag, NodeSpec, domain_of
from pavemind.forecast import DivergenceError, Forecast
from pavemind.priority import DiseaseDegreeBins, history_treated
from pavemind.utils import (
    DetectionRecord, ExponentialMovingAverage, MaintenanceRecord, PCI_BANDS, RouteMeta, SegmentKey, pci_band
)


logger = logging.getLogger(__name__)

NO_ACTION_CODE = 'NONE'
PI_LABELS = tuple(label for label, _ in PCI_BANDS)
SD_LABELS = ('light', 'moderate', 'severe')
CO_LABELS = ('low', 'mid', 'high')
HTR_LABELS = ('no', 'yes')
DD_LABELS = ('Q1', 'Q2', 'Q3', 'Q4')
STATE_FACTORS = ('HTR', 'PT', 'BT', 'PI', 'DD', 'SD', 'CO')


@dataclass(frozen=True)
class TreatmentAction:
    code: str
    measure: str
    location: str
    cost_per_km: float
    attenuation: float = 0.0
    cost_band: str = 'low'

    @property
    def is_no_action(self):
        return self.code == NO_ACTION_CODE


NO_ACTION = TreatmentAction(NO_ACTION_CODE, 'none', 'none', 0.0, 0.0, 'low')


def attenuation_rate(samples: Sequence[Tuple[float, float]]) -> float:
    """Mean relative one-year decay ``(I_t - I_t+1) / I_t`` over post-treatment samples."""
    samples = list(samples)
    if not samples:
        raise ValueError('attenuation_rate needs at least one sample.')
    rates = []
    for before, after in samples:
        if before == 0:
            raise ValueError('attenuation_rate: zero performance index in a sample.')
        rates.append((before - after) / before)
    return float(np.mean(rates))


def reward(d: float, D: float, cost: float, lambda_a: float, Y: float) -> float:
    """
    ``R = (1 - d/D) C + lambda_a C - Y``, with ``d`` the treated length, ``D`` the network length
    (both km), ``C`` the cost per km of the action and ``Y`` the predicted next-year PCI.
    """
    if D <= 0:
        raise ValueError(f'Network length must be positive, got {D}')
    if d < 0 or d > D:
        raise ValueError(f'Segment length {d} outside [0, {D}]')
    return (1.0 - d / D) * cost + lambda_a * cost - Y


def severity(pci: float) -> str:
    if pci >= 85.0:
        return 'light'
    if pci >= 70.0:
        return 'moderate'
    return 'severe'


class CostBands:
    """Tercile bins of treatment cost per km."""
    def __init__(self, edges):
        self.edges = np.asarray(edges, dtype=np.float64)

    @classmethod
    def fit(cls, costs):
        costs = np.asarray(list(costs), dtype=np.float64)
        if costs.size == 0:
            return cls([0.0, 0.0])
        return cls(np.quantile(costs, [1 / 3, 2 / 3]))

    def label(self, cost: float):
        return CO_LABELS[int(np.searchsorted(self.edges, cost, side='right'))]


@dataclass(frozen=True)
class GainBins:
    """PCI gain bins of fixed width; the last bin is open-ended."""
    width: float = 10.0
    count: int = 6

    @property
    def labels(self):
        return tuple(f'E{i}' for i in range(self.count))

    def label(self, gain: float):
        i = int(np.clip(np.floor(max(gain, 0.0) / self.width), 0, self.count - 1))
        return self.labels[i]

    def midpoint(self, label: str):
        return (self.labels.index(label) + 0.5) * self.width


def build_actions(maintenance: Sequence[MaintenanceRecord], cost_bands: Optional[CostBands] = None) -> List[TreatmentAction]:
    """
    ``NO_ACTION`` followed by one action per distinct treatment code (sorted). Cost is the mean
    cost per km of the code's records; measure and location are the most frequent ones.
    """
    cost_bands = cost_bands or CostBands.fit(m.cost_per_km for m in maintenance)
    by_code: Dict[str, List[MaintenanceRecord]] = {}
    for m in maintenance:
        by_code.setdefault(m.treatment_code, []).append(m)
    actions = [NO_ACTION]
    for code in sorted(by_code):
        records = by_code[code]
        cost = float(np.mean([m.cost_per_km for m in records]))
        samples = [(m.post_pci, m.next_year_pci) for m in records if m.next_year_pci is not None and m.post_pci > 0]
        attenuation = attenuation_rate(samples) if samples else 0.0
        measure = pd.Series([m.measure for m in records]).mode().sort_values().iloc[0]
        location = pd.Series([m.location for m in records]).mode().sort_values().iloc[0]
        actions.append(TreatmentAction(code, measure, location, cost, attenuation, cost_bands.label(cost)))
    logger.info('Action set: %d treatments plus no action', len(actions) - 1)
    return actions


def recommend_dag(domains: Mapping[str, Sequence[str]]) -> Dag:
    """
    Measure depends on HTR, PT, BT, PI and DD; location on DD and SD; treatment on location,
    measure and cost band; effectiveness on treatment.
    """
    names = ('HTR', 'PT', 'BT', 'PI', 'DD', 'SD', 'CO', 'M', 'L', 'T', 'Effective')
    nodes = tuple(NodeSpec(n, tuple(domains[n])) for n in names)
    parents = {
        'M': ('HTR', 'PT', 'BT', 'PI', 'DD'),
        'L': ('DD', 'SD'),
        'T': ('L', 'M', 'CO'),
        'Effective': ('T',),
    }
    return Dag(nodes, parents)


def recommend_domains(rows: Sequence[Mapping[str, str]], gain_bins: GainBins = GainBins(),
                      extra: Optional[Mapping[str, Sequence[str]]] = None) -> Dict[str, Tuple[str, ...]]:
    """Node domains: declared label sets where they exist, observed labels otherwise."""
    declared = {
        'HTR': HTR_LABELS, 'PI': PI_LABELS, 'DD': DD_LABELS, 'SD': SD_LABELS, 'CO': CO_LABELS,
        'Effective': gain_bins.labels,
    }
    extra = extra or {}
    out = {}
    for name in ('HTR', 'PT', 'BT', 'PI', 'DD', 'SD', 'CO', 'M', 'L', 'T', 'Effective'):
        seen = [r[name] for r in rows if r.get(name) is not None] + list(extra.get(name, ()))
        out[name] = domain_of(seen, declared.get(name, ()))
    return out


def treatment_history_rows(maintenance: Sequence[MaintenanceRecord], units: Sequence[DetectionRecord],
                           routes: Mapping[str, RouteMeta], dd_bins: DiseaseDegreeBins, cost_bands: CostBands,
                           gain_bins: GainBins = GainBins()) -> List[Dict[str, Optional[str]]]:
    """
    One training row per maintenance record. DD comes from the evaluation units the treatment
    covers in its year and is left unset when none were inspected that year.
    """
    by_year: Dict[int, List[DetectionRecord]] = {}
    for u in units:
        by_year.setdefault(u.year, []).append(u)
    rows = []
    for m in maintenance:
        covered = [u for u in by_year.get(m.year, []) if m.covers(u.segment)]
        dd = None
        if covered:
            km = sum(u.length_m for u in covered) / 1000.0
            dd = dd_bins.label(sum(u.total_disease for u in covered) / km)
        route = routes.get(m.route_id)
        rows.append({
            'HTR': HTR_LABELS[history_treated(maintenance, m.segment, m.year)],
            'PT': route.pavement_type if route is not None else 'unknown',
            'BT': route.base_type if route is not None else 'unknown',
            'PI': pci_band(m.pre_pci),
            'DD': dd,
            'SD': severity(m.pre_pci),
            'CO': cost_bands.label(m.cost_per_km),
            'M': m.measure,
            'L': m.location,
            'T': m.treatment_code,
            'Effective': gain_bins.label(m.post_pci - m.pre_pci),
        })
    return rows


def fit_recommend_network(rows: Sequence[Mapping[str, str]], gain_bins: GainBins = GainBins(),
                          alpha: float = 1.0, structure: Optional[Dag] = None,
                          extra_domains: Optional[Mapping[str, Sequence[str]]] = None) -> BayesNet:
    dag = structure or recommend_dag(recommend_domains(rows, gain_bins, extra_domains))
    return BayesNet.fit(dag, rows, alpha)


def measure_prob(net: BayesNet, evidence: Mapping[str, str]) -> Dict[str, float]:
    """Distribution over measures given HTR, PT, BT, PI and DD."""
    return net.posterior('M', {k: evidence.get(k) for k in ('HTR', 'PT', 'BT', 'PI', 'DD')})


def location_prob(net: BayesNet, evidence: Mapping[str, str]) -> Dict[str, float]:
    """Distribution over treatment locations given DD and SD."""
    return net.posterior('L', {k: evidence.get(k) for k in ('DD', 'SD')})


def treatment_prob(net: BayesNet, evidence: Mapping[str, str]) -> Dict[str, float]:
    """Distribution over treatment codes given L, M and CO."""
    return net.posterior('T', {k: evidence.get(k) for k in ('L', 'M', 'CO')})


@dataclass(frozen=True)
class MdpState:
    segment: SegmentKey
    year: int
    pci: float
    predicted_next_pci: float
    HTR: str = 'no'
    PT: str = 'unknown'
    BT: str = 'unknown'
    DD: str = 'Q1'
    CO: str = 'low'

    @property
    def pci_band(self):
        return pci_band(self.pci)

    @property
    def PI(self):
        return self.pci_band

    @property
    def SD(self):
        return severity(self.pci)

    def factor(self, name):
        return getattr(self, name)


def _forecast_drop(state, forecast):
    """One-year PCI drop expected after next year, from the route forecast when it reaches that far."""
    years = list(forecast.horizon_years)
    if state.year + 2 in years and state.year + 1 in years:
        a = forecast.pci_forecast[years.index(state.year + 1)]
        b = forecast.pci_forecast[years.index(state.year + 2)]
        return max(0.0, float(a - b))
    return max(0.0, state.pci - state.predicted_next_pci)


def transition(state: MdpState, action: TreatmentAction, net: Optional[BayesNet],
               forecast: Optional[Forecast], gain_bins: GainBins = GainBins()) -> List[Tuple[float, MdpState]]:
    """
    Next-state distribution. Without treatment the segment moves to its forecast PCI. A treatment
    adds the midpoint gain of each effectiveness level on top of the forecast, weighted by
    ``P(Effective | T)``; the treated segment then decays at the action's attenuation rate.
    """
    if forecast is None or forecast.route_id != state.segment.route_id:
        raise ValueError(f'Missing forecast for route {state.segment.route_id}')
    year = state.year + 1
    if action.is_no_action:
        pci = state.predicted_next_pci
        nxt = MdpState(state.segment, year, pci, float(np.clip(pci - _forecast_drop(state, forecast), 0, 100)),
                       state.HTR, state.PT, state.BT, state.DD, state.CO)
        return [(1.0, nxt)]

    effect = net.posterior('Effective', {'T': action.code})
    merged: Dict[MdpState, float] = {}
    for label, p in effect.items():
        pci = float(min(100.0, state.predicted_next_pci + gain_bins.midpoint(label)))
        nxt = MdpState(state.segment, year, pci, float(np.clip(pci * (1.0 - action.attenuation), 0, 100)),
                       'yes', state.PT, state.BT, DD_LABELS[0], action.cost_band)
        merged[nxt] = merged.get(nxt, 0.0) + p
    total = sum(merged.values())
    return [(p / total, s) for s, p in merged.items()]


def expected_utility(outcomes: Sequence[Tuple[float, float]]) -> float:
    probs = np.array([p for p, _ in outcomes], dtype=np.float64)
    if abs(probs.sum() - 1.0) > 1e-9:
        raise ValueError(f'Outcome probabilities sum to {probs.sum()}, not 1.')
    return float(np.dot(probs, [u for _, u in outcomes]))


@dataclass
class FiniteMdp:
    """``transitions[s, a, s']`` probabilities and expected immediate ``rewards[s, a]``."""
    transitions: np.ndarray
    rewards: np.ndarray

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        S, A, S2 = self.transitions.shape
        if S != S2 or self.rewards.shape != (S, A):
            raise ValueError(f'Inconsistent MDP shapes {self.transitions.shape} and {self.rewards.shape}')
        if not np.allclose(self.transitions.sum(axis=2), 1.0, atol=1e-9):
            raise ValueError('Transition rows must sum to 1.')

    @property
    def n_states(self):
        return self.transitions.shape[0]

    @property
    def n_actions(self):
        return self.transitions.shape[1]


def random_mdp(n_states: int, n_actions: int, rng: np.random.Generator, sparsity: int = 3) -> FiniteMdp:
    """Random MDP where each state-action reaches at most ``sparsity`` successors."""
    P = np.zeros((n_states, n_actions, n_states))
    for s in range(n_states):
        for a in range(n_actions):
            succ = rng.choice(n_states, size=min(sparsity, n_states), replace=False)
            P[s, a, succ] = rng.dirichlet(np.ones(len(succ)))
    return FiniteMdp(P, rng.uniform(0.0, 1.0, size=(n_states, n_actions)))


def bellman_backup(mdp: FiniteMdp, utilities: np.ndarray, gamma: float) -> np.ndarray:
    """Action values ``Q(s, a) = R(s, a) + gamma * sum_s' P(s'|s, a) U(s')``."""
    return mdp.rewards + gamma * mdp.transitions @ utilities


def value_iteration(mdp: FiniteMdp, gamma: float = 0.9, epsilon: float = 1e-8,
                    max_iterations: int = 1_000_000) -> Tuple[np.ndarray, np.ndarray]:
    """Utilities with sup-norm Bellman residual below ``epsilon`` and the greedy policy."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f'gamma must be in [0, 1), got {gamma}')
    U = np.zeros(mdp.n_states)
    for it in range(max_iterations):
        U_new = bellman_backup(mdp, U, gamma).max(axis=1)
        residual = np.max(np.abs(U_new - U))
        U = U_new
        if residual < epsilon:
            logger.debug('Value iteration converged after %d sweeps', it + 1)
            break
    policy = np.argmax(bellman_backup(mdp, U, gamma), axis=1)
    return U, policy


def evaluate_policy(mdp: FiniteMdp, policy: Sequence[int], gamma: float = 0.9) -> np.ndarray:
    """Solves ``U = R_pi + gamma P_pi U`` for a deterministic policy."""
    idx = np.arange(mdp.n_states)
    policy = np.asarray(policy)
    P = mdp.transitions[idx, policy]
    R = mdp.rewards[idx, policy]
    return np.linalg.solve(np.eye(mdp.n_states) - gamma * P, R)


def policy_agreement(mdp: FiniteMdp, policy: Sequence[int], gamma: float = 0.9, tol: float = 1e-6) -> float:
    """Fraction of states where ``policy`` picks an action whose optimal value ties the best."""
    U, _ = value_iteration(mdp, gamma, epsilon=1e-10)
    Q = bellman_backup(mdp, U, gamma)
    chosen = Q[np.arange(mdp.n_states), np.asarray(policy)]
    return float(np.mean(chosen >= Q.max(axis=1) - tol))


@dataclass(frozen=True)
class DqnConfig:
    gamma: float = 0.9
    lr: float = 0.001
    epochs: int = 5000
    start_year: int = 2019
    end_year: int = 2020
    batch_size: int = 32
    buffer_size: int = 10000
    target_sync: int = 100
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_fraction: float = 0.5
    hidden_sizes: Optional[Tuple[int, ...]] = None
    target_params: int = 75589
    grad_clip: float = 1.0


class QNetwork(nn.Module):
    """Fully connected Q-network: input, three hidden ReLU layers, one output per action."""
    def __init__(self, input_size: int, output_size: int, hidden_sizes: Sequence[int]):
        super().__init__()
        sizes = [input_size] + list(hidden_sizes) + [output_size]
        self.layer_sizes = tuple(sizes)
        layers = []
        for a, b in zip(sizes[:-1], sizes[1:]):
            layers += [nn.Linear(a, b), nn.ReLU()]
        self.net = nn.Sequential(*layers[:-1])

    def forward(self, x):
        return self.net(x)

    @property
    def num_parameters(self):
        return sum(p.numel() for p in self.parameters())


def hidden_size_for_budget(input_size: int, output_size: int, target: int = 75589, layers: int = 3) -> int:
    """Width of ``layers`` equal hidden layers whose total parameter count is closest to ``target``."""
    def count(h):
        return (input_size + 1) * h + (layers - 1) * (h + 1) * h + (h + 1) * output_size
    best = min(range(1, 2048), key=lambda h: (abs(count(h) - target), h))
    return best


def build_q_network(input_size: int, output_size: int, config: DqnConfig) -> QNetwork:
    hidden = config.hidden_sizes
    if hidden is None:
        h = hidden_size_for_budget(input_size, output_size, config.target_params)
        hidden = (h, h, h)
    return QNetwork(input_size, output_size, hidden)


class ReplayBuffer:
    def __init__(self, capacity):
        self._memory = deque(maxlen=capacity)

    def __len__(self):
        return len(self._memory)

    def add(self, state, action, reward, next_state, terminal):
        self._memory.append((state, action, reward, next_state, terminal))

    def sample(self, batch_size: int, rng: np.random.Generator):
        idx = rng.integers(0, len(self._memory), size=batch_size)
        states, actions, rewards, next_states, terminals = zip(*(self._memory[i] for i in idx))
        return (
            torch.as_tensor(np.array(states), dtype=torch.float32),
            torch.as_tensor(actions, dtype=torch.int64),
            torch.as_tensor(rewards, dtype=torch.float32),
            torch.as_tensor(np.array(next_states), dtype=torch.float32),
            torch.as_tensor(terminals, dtype=torch.float32),
        )


class FiniteMdpEnv:
    """Episodic view of a finite MDP with one-hot states and uniformly random start states."""
    def __init__(self, mdp: FiniteMdp, episode_length: int = 20):
        self.mdp = mdp
        self.episode_length = episode_length
        self._state = 0
        self._t = 0

    @property
    def state_size(self):
        return self.mdp.n_states

    @property
    def n_actions(self):
        return self.mdp.n_actions

    def one_hot(self, s: int):
        v = np.zeros(self.mdp.n_states, dtype=np.float32)
        v[s] = 1.0
        return v

    def reset(self, rng: np.random.Generator):
        self._state = int(rng.integers(self.mdp.n_states))
        self._t = 0
        return self.one_hot(self._state)

    def step(self, action: int, rng: np.random.Generator):
        """Returns ``(next_state, reward, terminal, truncated)``."""
        r = float(self.mdp.rewards[self._state, action])
        self._state = int(rng.choice(self.mdp.n_states, p=self.mdp.transitions[self._state, action]))
        self._t += 1
        return self.one_hot(self._state), r, False, self._t >= self.episode_length


class RoadEnv:
    """
    Segment-level treatment environment: one decision per segment per year from ``start_year`` to
    ``end_year``. Episodes start from a uniformly chosen segment.
    """
    def __init__(self, initial_states: Sequence[MdpState], actions: Sequence[TreatmentAction], net: BayesNet,
                 forecasts: Mapping[str, Forecast], network_km: float, start_year: int, end_year: int,
                 domains: Mapping[str, Sequence[str]], gain_bins: GainBins = GainBins()):
        if not actions:
            raise ValueError('RoadEnv needs a non-empty action set.')
        if not initial_states:
            raise ValueError('RoadEnv needs at least one segment.')
        self.initial_states = list(initial_states)
        self.actions = list(actions)
        self.net = net
        self.forecasts = forecasts
        self.network_km = network_km
        self.start_year = start_year
        self.end_year = end_year
        self.domains = {k: tuple(domains[k]) for k in STATE_FACTORS}
        self.gain_bins = gain_bins
        self._state = None

    @property
    def n_actions(self):
        return len(self.actions)

    @property
    def state_size(self):
        return sum(len(d) for d in self.domains.values()) + 3

    def encode(self, state: MdpState):
        parts = []
        for name in STATE_FACTORS:
            domain = self.domains[name]
            v = np.zeros(len(domain), dtype=np.float32)
            value = state.factor(name)
            if value in domain:
                v[domain.index(value)] = 1.0
            parts.append(v)
        span = max(1, self.end_year - self.start_year)
        parts.append(np.array([state.pci / 100.0, state.predicted_next_pci / 100.0,
                               (state.year - self.start_year) / span], dtype=np.float32))
        return np.concatenate(parts)

    def transition(self, state: MdpState, action: TreatmentAction):
        return transition(state, action, self.net, self.forecasts.get(state.segment.route_id), self.gain_bins)

    def reward(self, state: MdpState, action: TreatmentAction):
        d = min(state.segment.length_km, self.network_km)
        return reward(d, self.network_km, action.cost_per_km, action.attenuation, state.predicted_next_pci)

    def reset(self, rng: np.random.Generator):
        self._state = self.initial_states[int(rng.integers(len(self.initial_states)))]
        return self.encode(self._state)

    def step(self, action: int, rng: np.random.Generator):
        a = self.actions[action]
        r = self.reward(self._state, a)
        outcomes = self.transition(self._state, a)
        pick = int(rng.choice(len(outcomes), p=np.array([p for p, _ in outcomes])))
        self._state = outcomes[pick][1]
        terminal = self._state.year > self.end_year
        return self.encode(self._state), r, terminal, False


@dataclass
class DqnResult:
    q_network: QNetwork
    loss_trace: List[float] = field(default_factory=list)


def _epsilon(epoch, config):
    horizon = max(1, int(config.epochs * config.epsilon_fraction))
    frac = min(1.0, epoch / horizon)
    return config.epsilon_start + frac * (config.epsilon_end - config.epsilon_start)


def _greedy(q, state):
    with torch.no_grad():
        return int(torch.argmax(q(torch.as_tensor(state[None, :], dtype=torch.float32))[0]).item())


def dqn_train(env, config: DqnConfig = DqnConfig(), seed: int = 0) -> DqnResult:
    """
    Deep Q-learning with experience replay and a target network synced every
    ``config.target_sync`` updates. Exploration is epsilon-greedy with epsilon annealed linearly
    over the first ``epsilon_fraction`` of the epochs. One epoch is one episode; the loss trace
    holds the mean TD loss of each epoch.
    """
    if config.batch_size < 1 or config.buffer_size < config.batch_size:
        raise ValueError(f'Replay buffer of {config.buffer_size} cannot fill a batch of {config.batch_size}.')
    if config.target_sync < 1:
        raise ValueError(f'target_sync must be at least 1, got {config.target_sync}.')
    rng = np.random.default_rng(seed)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        q = build_q_network(env.state_size, env.n_actions, config)
    target = copy.deepcopy(q)
    logger.info('Q-network layers %s, %d parameters', q.layer_sizes, q.num_parameters)
    optimizer = torch.optim.Adam(q.parameters(), lr=config.lr)
    buffer = ReplayBuffer(config.buffer_size)

    while len(buffer) < config.batch_size:
        s = env.reset(rng)
        done = False
        while not done and len(buffer) < config.batch_size:
            a = int(rng.integers(env.n_actions))
            s2, r, terminal, truncated = env.step(a, rng)
            buffer.add(s, a, r, s2, terminal)
            s, done = s2, terminal or truncated

    trace = []
    updates = 0
    avg_loss = ExponentialMovingAverage()
    pbar = tqdm(range(config.epochs), disable=None, leave=False)
    for epoch in pbar:
        eps = _epsilon(epoch, config)
        s = env.reset(rng)
        losses = []
        done = False
        while not done:
            explore = rng.random() < eps
            a = int(rng.integers(env.n_actions)) if explore else _greedy(q, s)
            s2, r, terminal, truncated = env.step(a, rng)
            buffer.add(s, a, r, s2, terminal)

            states, actions, rewards, next_states, terminals = buffer.sample(config.batch_size, rng)
            q_values = q(states).gather(1, actions.unsqueeze(1)).squeeze(1)
            with torch.no_grad():
                targets = rewards + config.gamma * target(next_states).max(dim=1).values * (1.0 - terminals)
            loss = F.mse_loss(q_values, targets)
            optimizer.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(q.parameters(), max_norm=config.grad_clip)
            optimizer.step()
            updates += 1
            if updates % config.target_sync == 0:
                target.load_state_dict(q.state_dict())
            losses.append(loss.item())
            s, done = s2, terminal or truncated

        epoch_loss = float(np.mean(losses))
        if not np.isfinite(epoch_loss):
            raise DivergenceError(epoch, epoch_loss)
        trace.append(epoch_loss)
        avg_loss.update(epoch_loss)
        pbar.set_description(f'loss: {avg_loss.get_metric(): 0.4f}, eps: {eps: 0.3f}')
    logger.info('DQN loss %.4e -> %.4e over %d epochs', trace[0], trace[-1], len(trace))
    return DqnResult(q_network=q, loss_trace=trace)


def greedy_actions(q: Callable, states: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Argmax action (first index on ties) and its Q-value for each encoded state."""
    with torch.no_grad():
        values = q(torch.as_tensor(np.asarray(states), dtype=torch.float32)).numpy()
    actions = np.argmax(values, axis=1)
    return actions, values[np.arange(len(actions)), actions]


@dataclass(frozen=True)
class PlanEntry:
    segment: SegmentKey
    action: TreatmentAction
    expected_effectiveness: float
    q_value: float


def greedy_plan(q: Callable, states: Sequence[MdpState], env: RoadEnv) -> List[PlanEntry]:
    """Q-greedy action per state; effectiveness is the expected PCI gain over doing nothing."""
    if not states:
        return []
    actions, values = greedy_actions(q, np.stack([env.encode(s) for s in states]))
    plan = []
    for state, a, value in zip(states, actions, values):
        action = env.actions[int(a)]
        if action.is_no_action:
            gain = 0.0
        else:
            gain = sum(p * (nxt.pci - state.predicted_next_pci) for p, nxt in env.transition(state, action))
        plan.append(PlanEntry(state.segment, action, float(gain), float(value)))
    return plan


PLAN_COLUMNS = [
    'priority_index', 'route_id', 'segment_start_m', 'segment_end_m', 'action_code', 'measure', 'location',
    'cost_per_km', 'q_value', 'expected_effectiveness', 'cost', 'selected',
]


def write_plan(rows: Sequence[Tuple[int, PlanEntry, float, bool]], path):
    """Rows of ``(priority_index, entry, cost, selected)``."""
    data = [
        (i, e.segment.route_id, e.segment.start_m, e.segment.end_m, e.action.code, e.action.measure,
         e.action.location, e.action.cost_per_km, e.q_value, e.expected_effectiveness, cost, int(selected))
        for i, e, cost, selected in rows
    ]
    pd.DataFrame(data, columns=PLAN_COLUMNS).to_csv(path, index=False, float_format='%.6f')

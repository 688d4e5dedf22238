import itertools
from pathlib import Path
from unittest import TestCase

import numpy as np
import pytest
import torch

import pavemind.recommend as rc
from pavemind.bayesnet import BayesNet, Cpt, Dag, NodeSpec
from pavemind.forecast import Forecast
from pavemind.utils import SegmentKey, load_maintenance


FIXTURE = Path(__file__).resolve().parent.parent / 'data' / 'fixture'
SEGMENT = SegmentKey('R', 0.0, 10.0)
T1 = rc.TreatmentAction('T1', 'preventive', 'surface', 10.0, 0.1, 'low')


def _forecast(route_id='R'):
    return Forecast(route_id, (2020, 2021), {}, np.array([70.0, 65.0]))


def _state(pci=75.0, predicted=70.0, year=2019):
    return rc.MdpState(SEGMENT, year, pci, predicted, 'no', 'asphalt', 'granular', 'Q2', 'low')


def _effect_net(table, labels):
    dag = Dag((NodeSpec('T', ('T1', 'T2')), NodeSpec('Effective', labels)), {'Effective': ('T',)})
    cpts = {'T': Cpt('T', (), np.array([0.5, 0.5])), 'Effective': Cpt('Effective', ('T',), np.asarray(table))}
    return BayesNet(dag, cpts)


class TestAttenuationRate(TestCase):
    def test_examples(self):
        self.assertEqual(rc.attenuation_rate([(80, 80), (80, 80)]), 0.0)
        self.assertAlmostEqual(rc.attenuation_rate([(80, 72)]), 0.1)
        self.assertAlmostEqual(rc.attenuation_rate([(100, 90), (50, 45)]), 0.1)

    def test_errors(self):
        with self.assertRaises(ValueError):
            rc.attenuation_rate([])
        with self.assertRaises(ValueError):
            rc.attenuation_rate([(0, 10)])


class TestReward(TestCase):
    def test_examples(self):
        self.assertAlmostEqual(rc.reward(10, 100, 50, 0.1, 73.67), -23.67)
        self.assertAlmostEqual(rc.reward(100, 100, 42, 0.0, 73.67), -73.67)
        self.assertAlmostEqual(rc.reward(10, 100, 0.0, 0.3, 61.0), -61.0)

    def test_derivatives(self):
        h = 1e-3
        for d, D, C, lam, Y in [(1, 5, 20, 0.05, 80), (0, 3, 7.5, 0.2, 40), (2.5, 2.5, 13, 0.0, 99)]:
            dY = (rc.reward(d, D, C, lam, Y + h) - rc.reward(d, D, C, lam, Y - h)) / (2 * h)
            self.assertAlmostEqual(dY, -1.0, places=9)
            dC = (rc.reward(d, D, C + h, lam, Y) - rc.reward(d, D, C - h, lam, Y)) / (2 * h)
            self.assertAlmostEqual(dC, 1 - d / D + lam, places=9)

    def test_errors(self):
        with self.assertRaises(ValueError):
            rc.reward(0, 0, 1, 0, 50)
        with self.assertRaises(ValueError):
            rc.reward(11, 10, 1, 0, 50)


def test_build_actions_fixture():
    actions = rc.build_actions(load_maintenance(FIXTURE / 'maintenance.csv'))
    assert actions[0] == rc.NO_ACTION
    assert [a.code for a in actions[1:]] == ['T01', 'T02', 'T03']
    assert [a.cost_per_km for a in actions[1:]] == [12.5, 28.0, 52.0]
    assert actions[3].location == 'base'
    expected = np.mean([(92.1 - 89.96) / 92.1, (81.4 - 78.86) / 81.4, (91.8 - 90.57) / 91.8, (64.2 - 44.96) / 64.2])
    assert actions[1].attenuation == pytest.approx(expected)
    assert all(a.cost_band in rc.CO_LABELS for a in actions)


def test_gain_bins():
    bins = rc.GainBins()
    assert bins.label(-3.0) == 'E0'
    assert bins.label(14.9) == 'E1'
    assert bins.label(250.0) == 'E5'
    assert bins.midpoint('E2') == 25.0


def test_severity():
    assert rc.severity(85.0) == 'light'
    assert rc.severity(70.0) == 'moderate'
    assert rc.severity(69.9) == 'severe'


def _rows():
    base = dict(HTR='no', PT='asphalt', BT='granular', PI='fair', DD='Q2', CO='low', M='preventive', Effective='E1')
    rows = [dict(base, SD='severe', L='base', T='T3') for _ in range(4)]
    rows += [dict(base, SD=sd, L='surface', T='T1') for sd in ('light', 'moderate') for _ in range(6)]
    return rows


class TestTreatmentChain(TestCase):
    def test_uniform(self):
        net = BayesNet(rc.recommend_dag(rc.recommend_domains([])))
        for dist in (rc.measure_prob(net, {}), rc.location_prob(net, {}), rc.treatment_prob(net, {})):
            assert np.allclose(list(dist.values()), 1.0 / len(dist))

    def test_base_location_after_severe(self):
        net = rc.fit_recommend_network(_rows())
        marginal = rc.location_prob(net, {})['base']
        severe = rc.location_prob(net, {'SD': 'severe'})['base']
        self.assertGreater(severe, marginal)

    def test_location_chain_oracle(self):
        net = rc.fit_recommend_network(_rows())
        dag = net.dag
        p_dd = net.cpts['DD'].table
        expected = sum(p_dd[i] * net.cpts['L'].row(dag, [dd, 'light']) for i, dd in enumerate(dag.node('DD').domain))
        got = rc.location_prob(net, {'SD': 'light'})
        assert np.allclose(list(got.values()), expected, atol=1e-12, rtol=0)

    def test_treatment_given_parents(self):
        net = rc.fit_recommend_network(_rows())
        got = rc.treatment_prob(net, {'L': 'base', 'M': 'preventive', 'CO': 'low'})
        assert np.allclose(list(got.values()), net.cpts['T'].row(net.dag, ['base', 'preventive', 'low']))
        assert sum(got.values()) == pytest.approx(1.0)

    def test_unknown_category(self):
        net = rc.fit_recommend_network(_rows())
        with self.assertRaisesRegex(ValueError, 'unknown category'):
            rc.location_prob(net, {'SD': 'catastrophic'})


class TestTransition(TestCase):
    def test_no_action(self):
        (p, nxt), = rc.transition(_state(), rc.NO_ACTION, None, _forecast())
        self.assertEqual(p, 1.0)
        self.assertEqual((nxt.year, nxt.pci, nxt.predicted_next_pci), (2020, 70.0, 65.0))
        self.assertEqual(nxt.pci_band, 'fair')

    def test_uniform_three_bins(self):
        bins = rc.GainBins(10.0, 3)
        net = BayesNet(Dag((NodeSpec('T', ('T1', 'T2')), NodeSpec('Effective', bins.labels)), {'Effective': ('T',)}))
        out = rc.transition(_state(predicted=60.0), T1, net, _forecast(), bins)
        self.assertEqual(sorted(s.pci for _, s in out), [65.0, 75.0, 85.0])
        assert np.allclose([p for p, _ in out], 1 / 3)
        assert all(s.HTR == 'yes' for _, s in out)

    def test_two_bin_mixture(self):
        bins = rc.GainBins(10.0, 2)
        net = _effect_net([[0.25, 0.75], [0.6, 0.4]], bins.labels)
        out = {s.pci: (p, s) for p, s in rc.transition(_state(predicted=60.0), T1, net, _forecast(), bins)}
        self.assertAlmostEqual(out[65.0][0], 0.25)
        self.assertAlmostEqual(out[75.0][0], 0.75)
        self.assertAlmostEqual(out[65.0][1].predicted_next_pci, 58.5)
        self.assertAlmostEqual(out[75.0][1].predicted_next_pci, 67.5)

    def test_capped_outcomes_merge(self):
        bins = rc.GainBins(10.0, 2)
        net = _effect_net([[0.25, 0.75], [0.6, 0.4]], bins.labels)
        out = rc.transition(_state(predicted=98.0), T1, net, _forecast(), bins)
        self.assertEqual(len(out), 1)
        self.assertAlmostEqual(out[0][0], 1.0)
        self.assertEqual(out[0][1].pci, 100.0)

    def test_missing_forecast(self):
        with self.assertRaisesRegex(ValueError, 'Missing forecast'):
            rc.transition(_state(), rc.NO_ACTION, None, None)
        with self.assertRaisesRegex(ValueError, 'Missing forecast'):
            rc.transition(_state(), rc.NO_ACTION, None, _forecast('Q'))


class TestExpectedUtility(TestCase):
    def test_examples(self):
        self.assertEqual(rc.expected_utility([(0.5, 10), (0.5, 0)]), 5.0)
        self.assertEqual(rc.expected_utility([(1.0, 7.25)]), 7.25)
        self.assertAlmostEqual(rc.expected_utility([(0.2, 1), (0.3, 2), (0.5, 4)]), 2.8)

    def test_not_normalized(self):
        with self.assertRaises(ValueError):
            rc.expected_utility([(0.5, 1), (0.4, 2)])

    def test_linear(self):
        a = [(0.2, 1.0), (0.8, 3.0)]
        b = [(0.5, -2.0), (0.5, 6.0)]
        w = 0.3
        mixed = [(w * p, u) for p, u in a] + [((1 - w) * p, u) for p, u in b]
        self.assertAlmostEqual(rc.expected_utility(mixed),
                               w * rc.expected_utility(a) + (1 - w) * rc.expected_utility(b))


class TestValueIteration(TestCase):
    def test_myopic(self):
        mdp = rc.random_mdp(6, 3, np.random.default_rng(0))
        U, policy = rc.value_iteration(mdp, gamma=0.0)
        assert np.allclose(U, mdp.rewards.max(axis=1))
        assert np.array_equal(policy, mdp.rewards.argmax(axis=1))

    def test_self_loop(self):
        U, policy = rc.value_iteration(rc.FiniteMdp([[[1.0]]], [[1.0]]), gamma=0.9)
        self.assertAlmostEqual(U[0], 10.0, places=6)
        self.assertEqual(policy[0], 0)

    def test_fixed_point(self):
        mdp = rc.random_mdp(12, 4, np.random.default_rng(1))
        U, _ = rc.value_iteration(mdp, gamma=0.9, epsilon=1e-8)
        backed_up = rc.bellman_backup(mdp, U, 0.9).max(axis=1)
        assert np.max(np.abs(backed_up - U)) < 1e-8

    def test_gamma_one(self):
        with self.assertRaises(ValueError):
            rc.value_iteration(rc.FiniteMdp([[[1.0]]], [[1.0]]), gamma=1.0)

    def test_bad_shapes(self):
        with self.assertRaises(ValueError):
            rc.FiniteMdp(np.ones((2, 1, 3)) / 3, np.zeros((2, 1)))
        with self.assertRaises(ValueError):
            rc.FiniteMdp(np.ones((2, 1, 2)), np.zeros((2, 1)))


def test_value_iteration_matches_policy_enumeration():
    mdp = rc.random_mdp(10, 3, np.random.default_rng(7))
    gamma = 0.9
    U, policy = rc.value_iteration(mdp, gamma, epsilon=1e-12)

    policies = np.array(list(itertools.product(range(3), repeat=10)))
    idx = np.arange(10)
    P = mdp.transitions[idx, policies]
    R = mdp.rewards[idx, policies]
    values = np.linalg.solve(np.eye(10) - gamma * P, R[..., None])[..., 0]
    best = policies[int(np.argmax(values.sum(axis=1)))]

    assert np.array_equal(policy, best)
    assert np.allclose(rc.evaluate_policy(mdp, policy, gamma), values.max(axis=0), atol=1e-8)
    assert np.allclose(U, values.max(axis=0), atol=1e-8)


def grid_mdp(rows, cols, goal):
    """Deterministic gridworld with an absorbing goal paying 1 per step; actions up, down, left, right."""
    n = rows * cols
    P = np.zeros((n, 4, n))
    R = np.zeros((n, 4))
    moves = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    for s in range(n):
        r, c = divmod(s, cols)
        for a, (dr, dc) in enumerate(moves):
            if s == goal:
                P[s, a, s] = 1.0
                R[s, a] = 1.0
                continue
            nr = min(max(r + dr, 0), rows - 1)
            nc = min(max(c + dc, 0), cols - 1)
            P[s, a, nr * cols + nc] = 1.0
    return rc.FiniteMdp(P, R)


class TestQNetwork(TestCase):
    def test_layer_count_and_budget(self):
        for inputs, outputs in [(30, 4), (41, 8), (60, 61)]:
            q = rc.build_q_network(inputs, outputs, rc.DqnConfig())
            self.assertEqual(len(q.layer_sizes), 5)
            self.assertEqual(q.layer_sizes[0], inputs)
            self.assertEqual(q.layer_sizes[-1], outputs)
            self.assertLessEqual(abs(q.num_parameters - 75589), 0.1 * 75589)

    def test_forward_shape(self):
        q = rc.QNetwork(6, 3, (8, 8, 8))
        self.assertEqual(tuple(q(torch.zeros(5, 6)).shape), (5, 3))


def test_dqn_deterministic():
    env = rc.FiniteMdpEnv(rc.random_mdp(5, 2, np.random.default_rng(0)), episode_length=10)
    config = rc.DqnConfig(epochs=20, hidden_sizes=(16, 16, 16), batch_size=8)
    a = rc.dqn_train(env, config, seed=3)
    b = rc.dqn_train(env, config, seed=3)
    assert a.loss_trace == b.loss_trace
    assert len(a.loss_trace) == 20
    for pa, pb in zip(a.q_network.parameters(), b.q_network.parameters()):
        assert torch.equal(pa, pb)


def test_dqn_rejects_unfillable_buffer():
    env = rc.FiniteMdpEnv(rc.random_mdp(3, 2, np.random.default_rng(0)), episode_length=5)
    with pytest.raises(ValueError, match='cannot fill'):
        rc.dqn_train(env, rc.DqnConfig(epochs=2, batch_size=8, buffer_size=4, hidden_sizes=(4, 4, 4)))
    with pytest.raises(ValueError, match='cannot fill'):
        rc.dqn_train(env, rc.DqnConfig(epochs=2, batch_size=0, hidden_sizes=(4, 4, 4)))
    with pytest.raises(ValueError, match='target_sync'):
        rc.dqn_train(env, rc.DqnConfig(epochs=2, batch_size=4, target_sync=0, hidden_sizes=(4, 4, 4)))


@pytest.mark.slow
def test_dqn_loss_descends():
    mdp = rc.random_mdp(5, 2, np.random.default_rng(1))
    env = rc.FiniteMdpEnv(rc.FiniteMdp(mdp.transitions, 10.0 * mdp.rewards), episode_length=20)
    config = rc.DqnConfig(gamma=0.5, epochs=500, hidden_sizes=(32, 32, 32))
    trace = rc.dqn_train(env, config, seed=0).loss_trace
    tenth = len(trace) // 10
    assert np.mean(trace[-tenth:]) < np.mean(trace[:tenth])


@pytest.mark.slow
@pytest.mark.parametrize('seed', range(5))
def test_dqn_matches_value_iteration(seed):
    rng = np.random.default_rng(seed)
    mdp = grid_mdp(4, 5, goal=int(rng.integers(20)))
    env = rc.FiniteMdpEnv(mdp, episode_length=20)
    config = rc.DqnConfig(epochs=900, hidden_sizes=(64, 64, 64))
    q = rc.dqn_train(env, config, seed=seed).q_network
    policy, _ = rc.greedy_actions(q, np.eye(mdp.n_states, dtype=np.float32))
    assert rc.policy_agreement(mdp, policy, gamma=config.gamma, tol=1e-6) >= 0.9


def _road_env():
    rows = [dict(HTR='no', PT='asphalt', BT='granular', PI='fair', DD='Q2', SD='moderate', CO='low',
                 M='preventive', L='surface', T='T1', Effective='E1') for _ in range(4)]
    net = rc.fit_recommend_network(rows)
    domains = {n.name: n.domain for n in net.dag.nodes}
    action = rc.TreatmentAction('T1', 'preventive', 'surface', 10.0, 0.0, 'low')
    return rc.RoadEnv([_state()], [rc.NO_ACTION, action], net, {'R': _forecast()}, 1.0, 2019, 2020, domains)


def _pci_q(x):
    pci = x[:, -3]
    return torch.stack([pci, 1.0 - pci], dim=1)


class TestGreedyPlan(TestCase):
    def test_no_action_dominates(self):
        env = _road_env()
        states = [_state(pci=p, predicted=p - 5) for p in (90.0, 60.0, 30.0)]
        plan = rc.greedy_plan(lambda x: torch.tensor([[10.0, 0.0]]).repeat(len(x), 1), states, env)
        assert all(e.action.is_no_action for e in plan)
        assert all(e.expected_effectiveness == 0.0 for e in plan)

    def test_hand_set_q(self):
        env = _road_env()
        states = [_state(pci=80.0, predicted=75.0), _state(pci=30.0, predicted=60.0)]
        plan = rc.greedy_plan(_pci_q, states, env)
        self.assertEqual([e.action.code for e in plan], [rc.NO_ACTION_CODE, 'T1'])
        # P(Effective | T1) is 0.5 on E1 and 0.1 elsewhere; the two top bins are capped at 100.
        self.assertAlmostEqual(plan[1].expected_effectiveness, 22.0)
        self.assertAlmostEqual(plan[1].q_value, 0.7)

    def test_scaling_invariance(self):
        env = _road_env()
        states = [_state(pci=p, predicted=p) for p in (95.0, 55.0, 45.0, 10.0)]
        plan = rc.greedy_plan(_pci_q, states, env)
        scaled = rc.greedy_plan(lambda x: 3.5 * _pci_q(x), states, env)
        self.assertEqual([e.action for e in plan], [e.action for e in scaled])

    def test_empty(self):
        self.assertEqual(rc.greedy_plan(_pci_q, [], _road_env()), [])


def test_road_env_episode():
    env = _road_env()
    rng = np.random.default_rng(0)
    s = env.reset(rng)
    assert s.shape == (env.state_size,)
    s, r, terminal, truncated = env.step(0, rng)
    assert r == pytest.approx(-70.0)
    assert not terminal
    s, r, terminal, truncated = env.step(1, rng)
    assert terminal

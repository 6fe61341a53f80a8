import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mgdefense.dynamics import ConfigError
from mgdefense.game import (GameConfig, MicrogridGame, UtilityBreakdown, attacker_utility,
                            count_oscillations, defender_utility, env_step, link_counts,
                            relative_error)
from mgdefense.threat import AttackSchedule, AttackStage, activate_stage, inject

RHO = 0.001


# -- pure scoring helpers ------------------------------------------------------

def test_relative_error_examples():
    assert relative_error(2.0, 2.0) == 0
    assert relative_error(1.05 * 3.0, 3.0) == pytest.approx(0.05)
    assert relative_error(0.0, 7.0) == 1.0
    with pytest.raises(ConfigError):
        relative_error(1.0, 0.0)


def test_oscillations_constant_and_ramp():
    assert count_oscillations(np.full(200, 3.0)) == (0, 0.0)
    z, _ = count_oscillations(np.linspace(0, 5, 200))
    assert z == 0


@pytest.mark.parametrize("A", [0.01, 1.0, 250.0])
def test_oscillations_sinusoid(A):
    t = np.linspace(0, 3, 3001)
    z, p_a = count_oscillations(10.0 + A * np.sin(2 * np.pi * t))
    assert z == 3
    assert p_a == pytest.approx(2 * A, rel=0.05)


def test_oscillations_on_ramp_plus_sinusoid():
    t = np.linspace(0, 3, 3001)
    z, p_a = count_oscillations(4 * t + 0.5 * np.sin(2 * np.pi * t))
    assert z == 3
    assert p_a == pytest.approx(1.0, rel=0.05)


def test_oscillations_rejects_empty():
    with pytest.raises(ValueError):
        count_oscillations([])


def test_link_counts(system):
    _, topos = system
    N_l, N_c, C_c = link_counts(topos[0], [0, 0, 0, 0])
    assert (N_l, N_c, C_c) == (6, 0, 0)
    assert link_counts(topos[7], [1, 0, 1, 0]) == (6, 2, 6)
    assert 4 * 4 - 4 == 12
    for t in topos:
        assert link_counts(t, [1, 1, 1, 1])[0] <= 12


Z0 = np.zeros((4, 3))
PN = np.ones((4, 3))


def test_quiescent_utilities():
    assert attacker_utility(0, Z0, Z0, PN, Z0, 6, 0, RHO) == pytest.approx(RHO * 6)
    assert attacker_utility(0, Z0, Z0, PN, Z0, 6, 1.0, RHO) == pytest.approx(RHO * 6 - 1)
    assert defender_utility(0, Z0, Z0, PN, Z0, 6, 0, RHO) == pytest.approx(-RHO * 6)


def test_relative_error_term_lowers_defender_utility():
    p_r = Z0.copy()
    p_r[0, 1] = 0.05
    base = defender_utility(0, Z0, Z0, PN, Z0, 6, 0, RHO)
    assert defender_utility(0, Z0, Z0, PN, p_r, 6, 0, RHO) == pytest.approx(base - 0.05)


finite = st.floats(-1e3, 1e3, allow_nan=False)
mat = arrays(float, (4, 3), elements=st.floats(0, 10))


@given(finite, arrays(np.int64, (4, 3), elements=st.integers(0, 20)), mat, mat,
       st.integers(0, 12), st.floats(0, 5), st.floats(1e-6, 0.5))
def test_zero_sum(sum_delta, z, p_a, p_r, N_l, sigma, rho):
    U_R = attacker_utility(sum_delta, z, p_a, PN, p_r, N_l, sigma, rho)
    U_D = defender_utility(sum_delta, z, p_a, PN, p_r, N_l, sigma, rho)
    assert U_R + U_D == 0.0


@given(finite, mat, st.integers(0, 12), st.floats(0.01, 5))
def test_reveal_strictly_lowers_attacker_utility(sum_delta, p_r, N_l, sigma):
    a = attacker_utility(sum_delta, Z0, Z0, PN, p_r, N_l, 0.0, RHO)
    b = attacker_utility(sum_delta, Z0, Z0, PN, p_r, N_l, sigma, RHO)
    assert b < a


def test_breakdown_compute():
    p_c = PN * 1.02
    b = UtilityBreakdown.compute(0.1, Z0, Z0, PN, p_c, 6, 1, 3, 0.0, RHO)
    assert b.U_R + b.U_D == 0
    assert np.allclose(b.p_r, 0.02)
    assert b.U_R == pytest.approx(0.1 + 12 * 0.02 + 6 * RHO)
    assert set(b.to_dict()) >= {"U_R", "U_D", "p_r", "N_l", "C_c"}


def test_game_config_validation():
    for kw in ({"gamma": 1.0}, {"rho": 0.0}, {"n_P": 4}, {"sigma_unit": -1},
               {"stealth_fraction": 1.5}, {"scan_after": 0}, {"osc_window": 0}):
        with pytest.raises(ConfigError):
            GameConfig(**kw)


# -- environment ------------------------------------------------------------------

def make_game(system, stages=(), **cfg):
    grid, topos = system
    return MicrogridGame(grid, topos, AttackSchedule(stages=tuple(stages)), GameConfig(**cfg))


def dg1_attack(game, t=0.0):
    return AttackStage(dgs=(0,), offsets=game.offsets_from_fractions([0.0008, -0.049, 0.0]), time=t)


def test_quiescent_epoch(system):
    game = make_game(system)
    res = game.step(0)
    assert not res.state.flags.any()
    assert res.U_D == pytest.approx(-RHO * 6, abs=1e-4)
    assert res.breakdown.U_R + res.breakdown.U_D == 0


def test_quiescent_on_every_tree_raises_no_flags(system):
    game = make_game(system)
    for a in range(game.n_actions):
        s, U_D, b = env_step(game, game.initial_state(), a)
        assert not s.flags.any()
        assert U_D + b.U_R == 0
        assert b.N_l == 6 and b.C_c == b.N_c * 3


def test_invalid_action(system):
    game = make_game(system)
    with pytest.raises(ConfigError):
        game.step(16)
    with pytest.raises(ConfigError):
        game.step(-1)


def test_markov_determinism(system):
    game = make_game(system)
    game.set_schedule(AttackSchedule(stages=(dg1_attack(game),)))
    s0 = game.initial_state()
    a = env_step(game, s0, 3)
    b = env_step(game, s0, 3)
    assert a[0].to_dict() == b[0].to_dict()
    assert a[1] == b[1]


def test_snapshot_replay_is_bitwise(system):
    game = make_game(system)
    game.set_schedule(AttackSchedule(stages=(dg1_attack(game, 0.1),)))
    game.reset()
    for a in (0, 2):
        game.step(a)
    blob = game.snapshot()
    first = [game.step(a).state.to_dict() for a in (5, 5, 1)]
    game.restore(blob)
    second = [game.step(a).state.to_dict() for a in (5, 5, 1)]
    assert first == second


def test_leaf_attacker_only_reaches_its_neighbour(system):
    grid, topos = system
    leaf = next(t for t in topos if t.edges == ((0, 1), (1, 2), (1, 3)))
    game = make_game(system)
    st_ = dg1_attack(game)
    attack = activate_stage(game.initial_state().attack, st_, leaf.S)
    sv = grid.shared_values(game.reference)
    recv = inject(sv, attack)
    changed = np.any(recv != sv[None], axis=(1, 2))
    assert changed.tolist() == [False, True, False, False]


def test_scan_burns_persistent_attacker(system):
    game = make_game(system)
    game.set_schedule(AttackSchedule(stages=(dg1_attack(game, 0.0),)))
    game.reset()
    seen_scan = None
    for i in range(6):
        res = game.step(0)
        for e in res.events:
            if e["type"] == "scan":
                seen_scan = (i, e)
        assert not np.any(res.state.Theta & res.state.burned)
    assert seen_scan is not None
    i, e = seen_scan
    assert e["dg"] == 1 and e["compromised"]
    assert i <= game.config.scan_after
    assert game.state.burned.tolist() == [1, 0, 0, 0]
    assert not game.state.Theta.any()


def test_reveal_cost_charged_once(system):
    game = make_game(system)
    game.set_schedule(AttackSchedule(stages=(dg1_attack(game, 0.0),)))
    game.reset()
    r1 = game.step(0)
    r2 = game.step(0)
    assert r1.breakdown.sigma == 1.0
    assert r2.breakdown.sigma == 0.0


def test_static_detector_drops_links_without_scanning(system):
    from mgdefense.defense import StaticDetectorConfig, static_detect
    grid, topos = system
    cfg = StaticDetectorConfig(thresholds=(0.0005, 0.04, 0.06))
    game = MicrogridGame(grid, topos, AttackSchedule(), GameConfig(auto_scan=False),
                         detector=lambda recv, nom: static_detect(recv, nom, cfg))
    game.set_schedule(AttackSchedule(stages=(dg1_attack(game, 0.0),)))
    game.reset()
    for _ in range(4):
        res = game.step(0)
        assert not any(e["type"] == "scan" for e in res.events)
    assert game.state.Theta.tolist() == [1, 0, 0, 0]


@settings(max_examples=10, deadline=None)
@given(st.lists(st.integers(0, 15), min_size=1, max_size=4))
def test_zero_sum_and_link_bound_along_runs(system, actions):
    game = make_game(system)
    game.set_schedule(AttackSchedule(stages=(dg1_attack(game, 0.1),)))
    game.reset()
    for a in actions:
        res = game.step(a)
        b = res.breakdown
        assert b.U_R + b.U_D == 0
        assert b.N_l <= 12 and b.C_c == b.N_c * 3
    assert game.state.cum_U_D == pytest.approx(-game.state.cum_U_R)

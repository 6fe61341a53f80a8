import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mgdefense.consensus import enumerate_topologies
from mgdefense.dynamics import ConfigError
from mgdefense.threat import (AttackSchedule, AttackStage, AttackState, activate_stage,
                              clamp_to_bounds, effective_links, inject, is_neutralized,
                              is_stealthy, remove_malware)

W_N = 2 * np.pi * 50
NOMINAL = np.array([W_N, 1.0, 1.0])
BOUNDS = np.column_stack([-0.05 * NOMINAL, 0.05 * NOMINAL])
TOPOS = enumerate_topologies(4)
STAR = TOPOS[0].S


def fresh():
    return AttackState.initial(4, BOUNDS)


def stage(dgs, offsets=(0.3, 0.0, 0.0)):
    return AttackStage(dgs=tuple(dgs), offsets=offsets)


def x_nominal():
    return np.tile(NOMINAL, (4, 1)) * np.array([[1.0], [1.001], [0.999], [1.002]])


def test_initial_state_is_clean():
    s = fresh()
    assert s.Theta.tolist() == [0, 0, 0, 0]
    assert not s.Xi.any() and not s.burned.any()


def test_stage_one_activates_dg1():
    s = activate_stage(fresh(), stage([0]), STAR)
    assert s.Theta.tolist() == [1, 0, 0, 0]
    assert s.Xi[0].tolist() == [0, 1, 1, 1]
    s.check()


def test_second_stage_after_removal():
    s = activate_stage(fresh(), stage([0]), STAR)
    s = remove_malware(s, 0)
    s = activate_stage(s, stage([1, 2, 3]), STAR)
    assert s.Theta.tolist() == [0, 1, 1, 1]
    s.check()


def test_xi_follows_topology_at_activation():
    path = next(t for t in TOPOS if t.edges == ((0, 1), (1, 2), (2, 3)))
    s = activate_stage(fresh(), stage([1]), path.S)
    assert s.Xi[1].tolist() == [1, 0, 1, 0]


def test_inject_identity_when_clean():
    x = x_nominal()
    out = inject(x, fresh())
    for l in range(4):
        assert np.array_equal(out[l], x)


def test_inject_single_link_offset():
    x = x_nominal()
    s = activate_stage(fresh(), stage([0]), TOPOS[0].S)
    Xi = np.zeros((4, 4), dtype=np.int8)
    Xi[0, 2] = 1
    from dataclasses import replace
    s = replace(s, Xi=Xi)
    out = inject(x, s)
    assert out[2, 0, 0] == pytest.approx(x[0, 0] + 0.3, abs=1e-12)
    assert out[2, 0, 1] == x[0, 1]
    assert out[1, 0, 0] == x[0, 0]
    assert np.array_equal(out[3], x)


def test_effective_only_on_intersection():
    path = next(t for t in TOPOS if t.edges == ((0, 1), (1, 2), (2, 3)))
    s = activate_stage(fresh(), stage([3]), path.S)
    assert effective_links(s, path.S).any()
    assert not effective_links(s, STAR).any()
    assert is_neutralized(s, [3], STAR)
    assert not is_neutralized(s, [3], path.S)


def test_stealth_examples():
    assert is_stealthy(np.zeros(3), BOUNDS)
    assert not is_stealthy(BOUNDS[:, 1], BOUNDS)
    assert not is_stealthy(BOUNDS[:, 0] - 1, BOUNDS)


def test_out_of_bounds_offsets_are_clamped_and_logged(caplog):
    with caplog.at_level(logging.WARNING, logger="mgdefense.threat"):
        s = activate_stage(fresh(), stage([0], (100.0, 0.0, -5.0)), STAR)
    assert "clamped" in caplog.text
    assert is_stealthy(s.x_a[0], BOUNDS)
    y, clamped = clamp_to_bounds([np.nan, 0.0, 0.0], BOUNDS)
    assert clamped and y[0] == 0.0


def test_remove_malware_examples():
    s = activate_stage(fresh(), stage([0]), STAR)
    r = remove_malware(s, 0)
    assert r.Theta.tolist() == [0, 0, 0, 0]
    assert r.burned.tolist() == [1, 0, 0, 0]
    assert not r.Xi[0].any() and not r.Xi[:, 0].any()
    rr = remove_malware(r, 0)
    assert rr.to_dict() == r.to_dict()
    again = activate_stage(r, stage([0]), STAR)
    assert again.to_dict() == r.to_dict()


def test_dg_activated_at_most_once():
    s = activate_stage(fresh(), stage([1]), STAR)
    s2 = activate_stage(s, stage([1], (-0.1, 0.0, 0.0)), TOPOS[5].S)
    assert s2.to_dict() == s.to_dict()


def test_state_roundtrip():
    s = activate_stage(fresh(), stage([0, 2]), STAR)
    assert AttackState.from_dict(s.to_dict()).to_dict() == s.to_dict()


def test_schedule_validation():
    with pytest.raises(ConfigError):
        AttackSchedule(stages=(AttackStage((0,), (0, 0, 0), 4.0), AttackStage((1,), (0, 0, 0), 2.0)))
    with pytest.raises(ConfigError):
        AttackSchedule(stages=(AttackStage((0,), (0, 0, 0), 1.0), AttackStage((0,), (0, 0, 0), 2.0)))
    with pytest.raises(ConfigError):
        AttackStage((0,), (0, 0, 0), trigger="later")
    with pytest.raises(ConfigError):
        AttackStage((), (0, 0, 0))
    with pytest.raises(ConfigError):
        AttackState.initial(4, [[1, 2], [-1, 1], [-1, 1]])


@given(st.lists(st.tuples(st.sampled_from(["act", "rm"]), st.integers(0, 3), st.integers(0, 15),
                          st.floats(-50, 50)), max_size=20))
def test_invariants_hold_under_any_sequence(ops):
    s = fresh()
    burned_before = s.burned.copy()
    for op, dg, tid, off in ops:
        if op == "act":
            s = activate_stage(s, stage([dg], (off, 0.0, 0.0)), TOPOS[tid].S)
        else:
            s = remove_malware(s, dg)
        s.check()
        assert np.all(s.burned >= burned_before)
        burned_before = s.burned.copy()
        assert not np.any(s.Theta & s.burned)
        assert is_stealthy(s.x_a, BOUNDS)
        out = inject(x_nominal(), s)
        lo = x_nominal()[None] + BOUNDS[:, 0]
        hi = x_nominal()[None] + BOUNDS[:, 1]
        # the offset itself is strictly inside; adding it to the value may round onto the edge
        assert np.all((out >= lo) & (out <= hi))
    assert s.activated.sum() <= 4

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from phasevsr.errors import ConfigError
from phasevsr.phase import CardiacCycleSpec, phase_at, phase_sequence


def eq1_single_cycle(t, ed, es, T):
    # literal two-branch formula for ED < ES and ED <= t < ED + T
    if ed < t <= es:
        return math.cos(math.pi * (t - ed) / (es - ed))
    return math.cos(math.pi * (1 + ((t - es) % T) / (T - (es - ed))))


@st.composite
def cycles(draw):
    T = draw(st.integers(2, 60))
    ed = draw(st.integers(0, T - 1))
    es = draw(st.integers(0, T - 1).filter(lambda v: v != ed))
    return CardiacCycleSpec(ed=ed, es=es, t_cycle=T)


def test_es_is_minus_one():
    spec = CardiacCycleSpec(ed=0, es=10, t_cycle=30)
    assert phase_at(10, spec) == -1.0


def test_wrap_to_ed_is_plus_one():
    spec = CardiacCycleSpec(ed=4, es=15, t_cycle=30)
    assert phase_at(4 + 30, spec) == 1.0
    assert phase_at(4, spec) == 1.0


def test_quarter_systole_is_zero():
    spec = CardiacCycleSpec(ed=0, es=10, t_cycle=30)
    assert abs(phase_at(5, spec)) < 1e-12


def test_diastolic_branch_hand_value():
    spec = CardiacCycleSpec(ed=0, es=10, t_cycle=30)
    expected = math.cos(math.pi * (1 + 10 / 20))
    assert abs(expected) < 1e-12
    assert abs(phase_at(20, spec) - expected) < 1e-12


@pytest.mark.parametrize("ed,es,T", [(0, 10, 30), (3, 14, 30), (5, 6, 9), (0, 1, 2), (2, 27, 30)])
def test_matches_literal_formula_on_one_cycle(ed, es, T):
    spec = CardiacCycleSpec(ed=ed, es=es, t_cycle=T)
    for t in range(ed, ed + T):
        assert abs(phase_at(t, spec) - eq1_single_cycle(t, ed, es, T)) < 1e-12


def test_wrapped_ordering_uses_cycle_offsets():
    # ES numerically before ED: systole runs across the cycle boundary
    spec = CardiacCycleSpec(ed=25, es=5, t_cycle=30)
    assert spec.systole_length == 10
    assert phase_at(5, spec) == -1.0
    assert abs(phase_at(0, spec)) < 1e-12  # halfway through systole
    shifted = CardiacCycleSpec(ed=0, es=10, t_cycle=30)
    for t in range(60):
        assert abs(phase_at(t, spec) - phase_at(t - 25, shifted)) < 1e-12


def test_sequence_single_value():
    spec = CardiacCycleSpec(ed=2, es=9, t_cycle=20)
    seq = phase_sequence(spec, 7, 1)
    assert len(seq) == 1 and seq[0] == phase_at(7, spec)


def test_sequence_monotone_runs_over_one_cycle():
    spec = CardiacCycleSpec(ed=3, es=14, t_cycle=30)
    seq = phase_sequence(spec, spec.ed + 1, spec.t_cycle).as_array()
    systole = spec.systole_length
    assert np.all(np.diff(seq[:systole]) < 0)
    assert np.all(np.diff(seq[systole - 1:]) > 0)


def test_sequence_two_cycles_repeat():
    spec = CardiacCycleSpec(ed=1, es=12, t_cycle=25)
    seq = phase_sequence(spec, 0, 50).as_array()
    assert np.array_equal(seq[:25], seq[25:])


@given(cycles(), st.integers(0, 500))
def test_periodic_and_bounded(spec, t):
    v = phase_at(t, spec)
    assert -1.0 <= v <= 1.0
    assert v == phase_at(t + spec.t_cycle, spec)


@given(cycles())
def test_anchor_values_and_monotonicity(spec):
    assert abs(phase_at(spec.es, spec) + 1.0) < 1e-12
    assert abs(phase_at(spec.ed + spec.t_cycle, spec) - 1.0) < 1e-12
    vals = [phase_at(spec.ed + d, spec) for d in range(spec.t_cycle + 1)]
    s = spec.systole_length
    assert all(b < a for a, b in zip(vals[:s], vals[1:s + 1]))
    assert all(b > a for a, b in zip(vals[s:], vals[s + 1:]))


@pytest.mark.parametrize("kwargs,fragment", [
    (dict(ed=0, es=0, t_cycle=10), "differ"),
    (dict(ed=10, es=2, t_cycle=10), "ed"),
    (dict(ed=0, es=12, t_cycle=10), "es"),
    (dict(ed=0, es=1, t_cycle=1), "t_cycle"),
    (dict(ed=0.5, es=1, t_cycle=10), "integer"),
])
def test_invalid_specs_name_the_violation(kwargs, fragment):
    with pytest.raises(ConfigError, match=fragment):
        CardiacCycleSpec(**kwargs)


def test_sequence_rejects_empty():
    with pytest.raises(ConfigError):
        phase_sequence(CardiacCycleSpec(0, 5, 10), 0, 0)

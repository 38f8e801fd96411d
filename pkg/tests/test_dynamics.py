"""Pulse-loop protocols, state preparation, and stroboscopic evolution."""

import warnings

import numpy as np
import pytest

from tkrotor.angular import LatticeSpec, PulseVector
from tkrotor.dynamics import (
    EvolutionTrace,
    Protocol,
    RotorState,
    edge_state,
    evolve,
    observables,
    protocol_preset,
    thermal_state,
)
from tkrotor.errors import ConfigError, NotTopologicalError, TruncationError
from tkrotor.floquet import TWO_PI, build_u_tkr_real

ADS_PULSES = PulseVector(0.0, 1.6, 6.0, 0.0)

# Thermal-profile <L^2> at theta = 0.17; independent of l_max once the
# profile clears the cutoff.
THERMAL_L2 = 1.2205882353363424


# ---------------------------------------------------------------------------
# Protocols
# ---------------------------------------------------------------------------


def test_protocol_alpha_schedule():
    p = protocol_preset("ads", n_gamma=40, cycles=2)
    assert p.n_steps == 80
    assert p.alpha(0) == 0.0
    assert p.alpha(10) == TWO_PI * 10 / 40
    for n in (1, 7, 39, 40, 53):
        assert p.alpha(n + 40) == p.alpha(n)


def test_protocol_validation():
    with pytest.raises(ConfigError):
        protocol_preset("ads", n_gamma=0)
    with pytest.raises(ConfigError):
        protocol_preset("ads", cycles=0)
    with pytest.raises(ConfigError):
        protocol_preset("fig3_family")
    with pytest.raises(ConfigError):
        protocol_preset("banana")


def test_preset_pulse_formulas():
    alphas = TWO_PI * np.arange(7) / 7
    circle = protocol_preset("fig1_circle")
    for a in alphas:
        pv = circle.pulses(a)
        assert pv == PulseVector(0.0, 1.6 + np.sin(a) / 2, 6.0 - np.cos(a) / 2, 0.0)
    braid = protocol_preset("fig3_family", beta=0.21)
    for a in alphas:
        pv = braid.pulses(a)
        x, y = np.cos(a), np.sin(a)
        assert pv == PulseVector(
            1.0 + 5.0 * 0.21 * (x + 1.0),
            0.4 + 2.0 * 0.21 * (x + 1.0),
            0.7 + (3.0 * 0.21 / 4.0) * (y + 1.0),
            0.7 + (3.0 * 0.21 / 2.0) * (y + 1.0),
        )
    assert protocol_preset("ads").pulses(0.3) == ADS_PULSES
    assert protocol_preset("free").pulses(1.1) == PulseVector()

    # array evaluation agrees with pointwise
    arrs = circle.pulse_arrays(alphas)
    for i, a in enumerate(alphas):
        assert tuple(arr[i] for arr in arrs) == (
            circle.pulses(a).p1, circle.pulses(a).p2,
            circle.pulses(a).p3, circle.pulses(a).p4,
        )


# ---------------------------------------------------------------------------
# States
# ---------------------------------------------------------------------------


def test_rotor_state_validation():
    spec = LatticeSpec(12)
    with pytest.raises(ValueError, match="shape"):
        RotorState(np.zeros(5, dtype=complex), spec)
    with pytest.raises(ValueError, match="norm"):
        RotorState(np.full(13, 0.5 + 0j), spec)
    with pytest.raises(ValueError, match="zero vector"):
        RotorState.from_amplitudes(np.zeros(13), spec)
    s = RotorState.from_amplitudes(np.ones(13), spec)
    assert abs(np.linalg.norm(s.amplitudes) - 1.0) < 1e-15
    with pytest.raises(ValueError):
        s.amplitudes[0] = 1.0  # frozen buffer


def test_rotor_state_observables():
    spec = LatticeSpec(12)
    amps = np.zeros(13)
    amps[:3] = 1.0
    s = RotorState.from_amplitudes(amps, spec)
    l2, pops = observables(s)
    # equal weight on l = 0, 1, 2: <L^2> = (0 + 2 + 6) / 3
    assert abs(l2 - 8.0 / 3.0) < 1e-14
    assert abs(pops[:3].sum() - 1.0) < 1e-14
    top = RotorState.from_amplitudes(np.eye(13)[-1], spec)
    assert top.tail_mass() == 1.0


def test_thermal_state_profile():
    spec = LatticeSpec(256)
    s = thermal_state(0.17, spec)
    assert np.all(s.amplitudes.imag == 0.0)
    assert abs(s.l2_expectation() - THERMAL_L2) < 1e-12
    # cutoff-independent once the tail is clear
    s2 = thermal_state(0.17, LatticeSpec(301))
    assert abs(s2.l2_expectation() - THERMAL_L2) < 1e-12
    # deep-frozen ensemble collapses onto l = 0
    cold = thermal_state(50.0, LatticeSpec(12))
    assert cold.populations()[0] == 1.0
    assert cold.l2_expectation() < 1e-80


def test_thermal_state_errors():
    with pytest.raises(ValueError, match="positive"):
        thermal_state(0.0, LatticeSpec(12))
    with pytest.raises(TruncationError, match="enlarge l_max"):
        thermal_state(0.01, LatticeSpec(33))


# ---------------------------------------------------------------------------
# Edge states
# ---------------------------------------------------------------------------


def test_edge_state_at_the_anomalous_point():
    spec = LatticeSpec(201)
    # exact matrix elements: gaps 2 and 3 bind an l = 0 mode ...
    e2 = edge_state(ADS_PULSES, spec, 2)
    e3 = edge_state(ADS_PULSES, spec, 3)
    assert abs(e2.l2_expectation() - 17.1876) < 1e-3
    assert abs(e3.l2_expectation() - 33.6592) < 1e-3
    assert np.sum(e2.populations()[:9]) > 0.97
    assert np.sum(e3.populations()[:9]) > 0.92
    # ... while the gap 1 branch dissolves into the bulk continuum: the
    # low-l corrections push it out of the window near its edge.
    with pytest.raises(NotTopologicalError, match="weight near l = 0"):
        edge_state(ADS_PULSES, spec, 1)
    # homogeneous elements bind all three
    for gap, l2_ref in ((2, 17.1759), (3, 17.5163)):
        e = edge_state(ADS_PULSES, spec, gap, mode="asymptotic")
        assert abs(e.l2_expectation() - l2_ref) < 1e-3
        assert np.sum(e.populations()[:9]) > 0.96
    e1 = edge_state(ADS_PULSES, spec, 1, mode="asymptotic")
    assert np.sum(e1.populations()[:9]) > 0.55

    lead = e3.amplitudes[np.argmax(np.abs(e3.amplitudes))]
    assert lead.real > 0 and abs(lead.imag) < 1e-12


def test_edge_state_validation_and_free_rotor():
    spec = LatticeSpec(60)
    with pytest.raises(ValueError, match="gap index"):
        edge_state(ADS_PULSES, spec, 0)
    with pytest.raises(ValueError, match="gap index"):
        edge_state(ADS_PULSES, spec, 4)
    # free rotor: bands 1 and 3 merge, so gap 2 is closed; the open gaps
    # hold no states at all (the operator is diagonal in l).
    with pytest.raises(NotTopologicalError, match="closed"):
        edge_state(PulseVector(), spec, 2)
    with pytest.raises(NotTopologicalError, match="no eigenstate inside"):
        edge_state(PulseVector(), spec, 1)


def test_edge_state_trivial_phase():
    spec = LatticeSpec(60)
    weak = PulseVector(0.0, 0.5, 0.2, 0.0)
    for gap in (1, 2, 3):
        with pytest.raises(NotTopologicalError):
            edge_state(weak, spec, gap, mode="asymptotic")
    # exact elements still bind a surface (Tamm) state in gap 3 here:
    # boundary binding by the inhomogeneous low-l elements, not topology.
    tamm = edge_state(weak, spec, 3)
    assert np.sum(tamm.populations()[:9]) > 0.99


def test_edge_state_needs_inequivalent_chain_ends():
    """With n_sites divisible by the cell the homogeneous chain's two ends
    are equivalent: the boundary pair hybridizes into even/odd cat states
    and neither clears the single-end weight cut."""
    with pytest.raises(NotTopologicalError, match="weight near l = 0"):
        edge_state(ADS_PULSES, LatticeSpec(101), 3, mode="asymptotic")
    edge_state(ADS_PULSES, LatticeSpec(102), 3, mode="asymptotic")


# ---------------------------------------------------------------------------
# Evolution
# ---------------------------------------------------------------------------


def test_free_protocol_preserves_populations():
    spec = LatticeSpec(30)
    amps = np.zeros(31)
    amps[:5] = 2.0, 1.0, 1.0, 0.5, 0.25
    s = RotorState.from_amplitudes(amps, spec)
    tr = evolve(s, protocol_preset("free", n_gamma=6))
    assert np.abs(tr.populations - tr.populations[0]).max() < 1e-14
    np.testing.assert_allclose(tr.l2_expectation, tr.l2_expectation[0], rtol=1e-12)
    np.testing.assert_allclose(tr.norms, 1.0, atol=1e-13)
    assert not tr.tail_exceeded


def test_constant_protocol_is_a_matrix_power():
    spec = LatticeSpec(60)
    s = thermal_state(0.9, spec)
    tr = evolve(s, protocol_preset("ads", n_gamma=4))
    u = build_u_tkr_real(spec, ADS_PULSES)
    expected = np.linalg.matrix_power(u, 4) @ s.amplitudes
    np.testing.assert_allclose(tr.final_state.amplitudes, expected, atol=1e-13)
    assert not tr.tail_exceeded


def test_trace_layout_and_cycle_periodicity():
    spec = LatticeSpec(160)
    s = thermal_state(0.9, spec)
    tr = evolve(s, protocol_preset("ads", n_gamma=6, cycles=3))
    assert isinstance(tr, EvolutionTrace)
    assert list(tr.periods) == list(range(19))
    assert tr.alphas[0] == 0.0
    np.testing.assert_array_equal(tr.alphas[1:7], tr.alphas[7:13])
    assert tr.l2_expectation[0] == s.l2_expectation()
    assert tr.populations.shape == (19, 161)


def test_trace_csv_schema_and_determinism(tmp_path):
    spec = LatticeSpec(110)
    proto = protocol_preset("fig1_circle", n_gamma=10)
    paths = []
    for run in (0, 1):
        tr = evolve(thermal_state(0.9, spec), proto, mode="asymptotic")
        p = tmp_path / f"trace{run}.csv"
        tr.to_csv(p)
        paths.append(p)
    data = paths[0].read_bytes()
    assert data == paths[1].read_bytes()
    lines = data.decode().splitlines()
    assert lines[0] == "period,alpha,l2_expectation,norm,tail_mass"
    assert len(lines) == 12
    # floats are written round-trip exact
    row = lines[3].split(",")
    assert float(row[1]) == tr.alphas[2]
    assert float(row[2]) == tr.l2_expectation[2]

    pp = tmp_path / "pops.csv"
    tr.populations_to_csv(pp)
    head = pp.read_text().splitlines()[0].split(",")
    assert head[:3] == ["period", "pop_0", "pop_1"] and head[-1] == "pop_110"


def test_tail_flag_on_a_short_lattice():
    s = thermal_state(0.17, LatticeSpec(33))
    with pytest.warns(UserWarning, match="tail mass reached"):
        tr = evolve(s, protocol_preset("ads", n_gamma=8), mode="asymptotic")
    assert tr.tail_exceeded
    assert tr.tail_mass.max() > tr.tail_threshold
    # raising the threshold silences the flag for the same run
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        tr2 = evolve(s, protocol_preset("ads", n_gamma=8), mode="asymptotic",
                     tail_threshold=1.0)
    assert not tr2.tail_exceeded


def test_edge_pumping_exact_vs_asymptotic():
    """One circle around the anomalous point: with homogeneous elements the
    pi-gap edge mode survives the loop near l = 0, while exact low-l
    elements let it leak an order of magnitude more energy."""
    spec = LatticeSpec(256)
    proto = protocol_preset("fig1_circle")
    start = proto.pulses(0.0)
    finals = {}
    for mode in ("exact", "asymptotic"):
        e = edge_state(start, spec, 3, mode=mode)
        tr = evolve(e, proto, mode=mode)
        assert not tr.tail_exceeded
        assert np.abs(tr.norms - 1.0).max() < 1e-12
        finals[mode] = tr.l2_expectation[-1]
    assert abs(finals["asymptotic"] - 192.70) < 2.0
    assert abs(finals["exact"] - 1443.78) < 15.0
    assert finals["exact"] > 5 * finals["asymptotic"]

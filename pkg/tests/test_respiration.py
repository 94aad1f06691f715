import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings as hsettings, strategies as st

from src.core.errors import DegenerateSignalError, DomainError
from src.services.respiration import (
    BreathingSignal,
    amplitude_sort,
    amsterdam_shroud,
    phase_amplitudes,
    phase_sort,
    read_signal_csv,
    shroud_shift,
    synth_breathing,
    write_signal_csv,
)
from src.services.scanner import ProjectionSet, ScanGeometry


@pytest.fixture
def regular():
    return synth_breathing(60.0, 4.0, 0.0, 0.0, 25.0, seed=0)


def test_regular_signal_has_fifteen_cycles(regular):
    assert regular.n_cycles == 15
    np.testing.assert_allclose(regular.peak_times, np.arange(16) * 4.0, atol=1e-9)
    np.testing.assert_allclose(regular.amplitudes[regular.cycle_starts], 1.0)
    assert regular.amplitudes.min() >= 0.0 and regular.amplitudes.max() <= 1.0


def test_regular_signal_is_periodic(regular):
    a = regular.amplitudes
    np.testing.assert_allclose(a[:-100], a[100:], atol=1e-9)


def test_synthesis_is_deterministic():
    a = synth_breathing(30.0, 4.0, 0.1, 0.1, 25.0, seed=5)
    b = synth_breathing(30.0, 4.0, 0.1, 0.1, 25.0, seed=5)
    c = synth_breathing(30.0, 4.0, 0.1, 0.1, 25.0, seed=6)
    assert a.amplitudes.tobytes() == b.amplitudes.tobytes()
    assert not np.array_equal(a.amplitudes, c.amplitudes)


def test_synthesis_rejects_bad_arguments():
    with pytest.raises(DomainError):
        synth_breathing(0.0, 4.0, 0.0, 0.0, 25.0, seed=0)
    with pytest.raises(DomainError):
        synth_breathing(60.0, 4.0, -0.1, 0.0, 25.0, seed=0)


def test_phase_amplitudes():
    amps = phase_amplitudes(10)
    assert amps[0] == pytest.approx(1.0)
    assert amps[5] == pytest.approx(0.0)
    assert phase_amplitudes(1).tolist() == [1.0]


def test_phase_sort_two_seconds_after_peak(regular):
    pm = phase_sort(regular, [4.0, 6.0, 7.99], 10)
    assert pm.phase_of_view.tolist() == [0, 5, 9]


def test_phase_sort_equal_counts():
    signal = synth_breathing(60.0, 5.0, 0.0, 0.0, 25.0, seed=0)
    view_times = np.arange(240) * 0.25
    pm = phase_sort(signal, view_times, 10)
    assert pm.counts().tolist() == [24] * 10


def test_phase_sort_counts_balanced(regular):
    view_times = np.arange(680) * 60.0 / 680
    counts = phase_sort(regular, view_times, 10).counts()
    assert counts.sum() == 680
    assert counts.max() - counts.min() <= regular.n_cycles


@hsettings(max_examples=30, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(
    times=st.lists(st.floats(min_value=0.0, max_value=60.0), min_size=1, max_size=50),
    n=st.integers(min_value=2, max_value=12),
)
def test_phase_sort_is_total(regular, times, n):
    pm = phase_sort(regular, times, n)
    assert pm.phase_of_view.size == len(times)
    assert np.all((pm.phase_of_view >= 0) & (pm.phase_of_view < n))


@hsettings(max_examples=25, deadline=None)
@given(dt=st.floats(min_value=-100.0, max_value=100.0))
def test_phase_sort_time_shift_invariant(dt):
    signal = synth_breathing(60.0, 4.0, 0.15, 0.0, 25.0, seed=2)
    views = signal.times[3::7]
    base = phase_sort(signal, views, 10)
    moved = phase_sort(signal.shifted(dt), views + dt, 10)
    np.testing.assert_array_equal(base.phase_of_view, moved.phase_of_view)


def test_phase_sort_errors(regular):
    with pytest.raises(DomainError):
        phase_sort(regular, [1.0], 1)
    with pytest.raises(DomainError):
        phase_sort(regular, [61.0], 10)
    flat = BreathingSignal(times=np.arange(10.0), amplitudes=np.full(10, 0.5), cycle_starts=[])
    with pytest.raises(DegenerateSignalError):
        phase_sort(flat, [1.0], 10)


def test_amplitude_sort_agrees_with_phase_sort(regular):
    views = regular.times[::3]
    by_phase = phase_sort(regular, views, 10)
    by_amp = amplitude_sort(regular, views, 10)
    assert np.mean(by_phase.phase_of_view == by_amp.phase_of_view) >= 0.9


def test_amplitude_sort_top_bin_is_phase_zero_when_exhaling(regular):
    # Convención: la espiración ocupa las fases 0..N/2-1 con amplitud descendente
    # y la inspiración N/2..N-1 con amplitud ascendente, igual que phase_sort.
    # 0.95 de amplitud poco después del pico de t = 4 s (espiración)
    t = 4.0 + 4.0 * np.arccos(0.9) / (2 * np.pi)
    assert regular.amplitude_at(t) == pytest.approx(0.95, abs=1e-3)
    assert amplitude_sort(regular, [t], 10).phase_of_view.tolist() == [0]
    # El mismo nivel antes del pico (inspiración) cae en la última fase, como en phase_sort
    assert amplitude_sort(regular, [8.0 - (t - 4.0)], 10).phase_of_view.tolist() == [9]


@pytest.mark.parametrize("power", [2, 3])
def test_amplitude_sort_invariant_to_monotone_remap(regular, power):
    # Amplitudes diádicas: la potencia entera es exacta y estrictamente creciente
    dyadic = np.round(regular.amplitudes * 1024) / 1024
    base = BreathingSignal(regular.times, dyadic, regular.cycle_starts)
    remapped = BreathingSignal(regular.times, dyadic**power, regular.cycle_starts)
    views = regular.times[::2]
    np.testing.assert_array_equal(
        amplitude_sort(base, views, 10).phase_of_view, amplitude_sort(remapped, views, 10).phase_of_view
    )


def test_amplitude_sort_requires_even_phases(regular):
    with pytest.raises(DomainError):
        amplitude_sort(regular, [1.0], 5)


def test_amplitude_sort_constant_signal_is_degenerate(caplog):
    flat = BreathingSignal(times=np.arange(10.0), amplitudes=np.full(10, 0.5), cycle_starts=[])
    pm = amplitude_sort(flat, [1.0, 2.0, 3.0], 4)
    assert pm.degenerate
    assert pm.phase_of_view.tolist() == [0, 0, 0]
    assert "Señal sin movimiento" in caplog.text


def _bump(center: float, rows: int = 64) -> np.ndarray:
    r = np.arange(rows)
    return np.exp(-0.5 * ((r - center) / 3.0) ** 2)


def test_shroud_shift_identity_and_translation():
    p = _bump(30.0)
    assert shroud_shift(p, p, 8) == 0
    assert shroud_shift(np.roll(p, 3), p, 8) == pytest.approx(3.0, abs=0.05)
    assert shroud_shift(np.roll(p, -2), p, 8) == pytest.approx(-2.0, abs=0.05)


@pytest.mark.parametrize("delta", [0.25, 0.4, -0.3, 1.6])
def test_shroud_shift_resolves_fractional_rows(delta):
    assert shroud_shift(_bump(30.0 + delta), _bump(30.0), 8) == pytest.approx(delta, abs=0.05)


def test_shroud_shift_is_exactly_zero_for_identical_views():
    p = _bump(27.0) + 0.3 * _bump(41.0)
    assert shroud_shift(p, p, 8) == 0.0


def _shroud_scan(amplitudes: np.ndarray) -> ProjectionSet:
    geometry = ScanGeometry(
        sad=1000.0, sdd=1500.0, detector_size=(8.0, 64.0), detector_channels=(8, 64),
        views_per_turn=amplitudes.size, rotation_time=amplitudes.size * 0.25,
    )
    centers = 40 - np.round(6 * amplitudes)
    data = np.stack([np.repeat(_bump(c)[:, None], 8, axis=1) for c in centers]).astype(np.float32)
    return ProjectionSet(geometry, geometry.view_angles(), geometry.view_times(), data)


def test_amsterdam_shroud_recovers_breathing():
    truth = synth_breathing(60.0, 4.0, 0.0, 0.0, 4.0, seed=0)
    scan = _shroud_scan(truth.amplitudes[:240])
    est = amsterdam_shroud(scan, max_shift=8)
    assert np.corrcoef(est.amplitudes, truth.amplitudes[:240])[0, 1] > 0.9
    assert est.amplitudes.min() == 0.0 and est.amplitudes.max() == 1.0
    assert est.n_cycles >= 12


def test_amsterdam_shroud_static_is_degenerate():
    scan = _shroud_scan(np.zeros(20))
    with pytest.raises(DegenerateSignalError):
        amsterdam_shroud(scan, max_shift=8)


def test_amsterdam_shroud_flat_projections():
    scan = _shroud_scan(np.zeros(20))
    with pytest.raises(DegenerateSignalError):
        amsterdam_shroud(scan.with_data(np.ones_like(scan.data)), max_shift=8)


def test_amsterdam_shroud_needs_rows():
    geometry = ScanGeometry(
        sad=1000.0, sdd=1500.0, detector_size=(8.0, 4.0), detector_channels=(8, 4), views_per_turn=4, rotation_time=1.0
    )
    scan = ProjectionSet(geometry, geometry.view_angles(), geometry.view_times(), np.zeros((4, 4, 8)))
    with pytest.raises(DomainError):
        amsterdam_shroud(scan)


def test_signal_csv_round_trip(tmp_path):
    signal = synth_breathing(20.0, 4.0, 0.1, 0.1, 25.0, seed=4)
    path = write_signal_csv(signal, tmp_path / "signal.csv")
    back = read_signal_csv(path)
    np.testing.assert_array_equal(back.times, signal.times)
    np.testing.assert_array_equal(back.amplitudes, signal.amplitudes)
    np.testing.assert_array_equal(back.cycle_starts, signal.cycle_starts)

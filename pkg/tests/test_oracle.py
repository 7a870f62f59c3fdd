import numpy as np
import pytest

from perk.errors import ConvergenceError, DataError
from perk.oracle import IsochromatConfig, oracle_grid_check, simulate_steady_state, support_grid
from perk.signals import (
    Acquisition,
    KnownParams,
    LatentParams,
    ScanKind,
    ScanSpec,
    dess_signals,
    reference_acquisition,
    spgr_signal,
)

WM = LatentParams(0.77, 832.0, 79.6)
ONE = KnownParams(1.0)
DESS = reference_acquisition().scans[2]


def test_spgr_matches_ernst_single_spin():
    sc = reference_acquisition().scans[1]
    sim = simulate_steady_state(WM, ONE, sc, IsochromatConfig(n_spins=1, n_reps=2000))
    assert sim[0] == pytest.approx(float(spgr_signal(WM, ONE, sc)), rel=1e-3)


def test_no_relaxation_is_finite():
    sc = ScanSpec(ScanKind.SPGR, flip_deg=90.0, tr_ms=10.0, te_ms=0.0)
    x = LatentParams(1.0, 1e12, 1e12)
    sim = simulate_steady_state(x, ONE, sc, IsochromatConfig(n_spins=1, n_reps=5))
    assert np.all(np.isfinite(sim))
    # without recovery the spoiled steady state is (numerically) empty, as the Ernst formula says
    assert sim[0] == pytest.approx(float(spgr_signal(x, ONE, sc)), abs=1e-9)


def test_dess_second_echo_decays_with_t2():
    x = LatentParams(1.0, 800.0, DESS.tr_ms / 20)
    e = simulate_steady_state(x, ONE, DESS, IsochromatConfig(n_spins=256))
    assert e[1] < 1e-8 * e[0]


def test_spin_count_converged():
    a = simulate_steady_state(WM, ONE, DESS, IsochromatConfig(n_spins=128))
    b = simulate_steady_state(WM, ONE, DESS, IsochromatConfig(n_spins=256))
    np.testing.assert_allclose(a, b, rtol=1e-4)


def test_global_phase_invariance():
    a = simulate_steady_state(WM, ONE, DESS, IsochromatConfig(n_spins=256))
    b = simulate_steady_state(WM, ONE, DESS, IsochromatConfig(n_spins=256, phase_offset=0.7))
    np.testing.assert_allclose(a, b, rtol=1e-10)


def test_linear_in_m0():
    a = simulate_steady_state(WM, ONE, DESS, IsochromatConfig(n_spins=128))
    b = simulate_steady_state(WM.replace(m0=2 * 0.77), ONE, DESS, IsochromatConfig(n_spins=128))
    np.testing.assert_allclose(b, 2 * a, rtol=1e-10)


def test_deterministic_with_jitter_seed():
    cfg = IsochromatConfig(n_spins=64, jitter=True)
    a = simulate_steady_state(WM, ONE, DESS, cfg, seed=3)
    b = simulate_steady_state(WM, ONE, DESS, cfg, seed=3)
    np.testing.assert_array_equal(a, b)


def test_non_convergence_raises():
    with pytest.raises(ConvergenceError):
        simulate_steady_state(WM, ONE, DESS, IsochromatConfig(n_spins=64, n_reps=3))


def test_dess_matches_closed_form_at_wm():
    sim = simulate_steady_state(WM, ONE, DESS, IsochromatConfig(n_spins=4096))
    np.testing.assert_allclose(sim, np.array(dess_signals(WM, ONE, DESS)).ravel(), rtol=1e-8)


def test_toy_grid_is_exact():
    acq = Acquisition((ScanSpec(ScanKind.MONOEXP, te_ms=7.0),))
    res = oracle_grid_check(acq, [(WM, ONE)])
    assert res.max_rel_err < 1e-15


def test_empty_grid():
    with pytest.raises(DataError):
        oracle_grid_check(reference_acquisition(), [])


def test_support_grid_shape():
    g = support_grid()
    assert len(g) == 75
    t1 = sorted({float(x.t1) for x, _ in g})
    assert t1[0] == pytest.approx(400.0) and t1[-1] == pytest.approx(2000.0)

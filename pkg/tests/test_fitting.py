import itertools

import numpy as np
import pytest

from nvsd.decomposition import GaussianDecomposition, dip_spectrum
from nvsd.detection import CPMGLineFit, LineCandidate
from nvsd.exceptions import DomainError
from nvsd.fitting import (
    SpinEstimate,
    beam_select,
    brute_force_select,
    error_metric,
    filtered_rmse,
    in_confidence_region,
    initial_estimate,
    match_spins,
    refine,
    window_mask,
)
from nvsd.physics import (
    FieldConfig,
    SpinParams,
    dip_frequency,
    params_from_slope_sigma,
    sigma_from_params,
    slope_from_params,
)
from nvsd.pipeline import SpinDetector

from conftest import region_spins, synth

N = 32
SHORT = np.arange(1, 4001) * 5e-9  # 20 us keeps the fitting tests quick


def _line(slope, sigmas):
    n = len(sigmas)
    return LineCandidate(slope, list(range(n)), list(range(1, n + 1)), 0.0, (1, slope / 2), list(sigmas), [0.2] * n)


# -- initial estimate ------------------------------------------------------------


def test_initial_estimate_uses_median_sigma(field):
    spin = SpinParams(20e3, 30e3)
    slope = slope_from_params(spin, field)
    s12 = 12e-9
    got = initial_estimate(_line(slope, [10e-9, s12, 40e-9]), field)
    assert got == params_from_slope_sigma(slope, s12, field)


def test_initial_estimate_from_synthetic_line(field, tau):
    """Closed-form guess from a real decomposed line lands within 10% of truth.

    Fails narrowly (about 10.4%): the fitted dip widths sit near 11 ns for most
    spins because the pulse count sets the dip shape, so B from the width is
    biased. Refinement removes the bias (see the decisions ledger).
    """
    spin = SpinParams(20e3, 30e3)
    comps = GaussianDecomposition().fit(tau, dip_spectrum(synth([spin], field, tau))).components_
    lines = CPMGLineFit(period=field.period, k_max=43).fit(comps).lines_
    slope = slope_from_params(spin, field)
    line = min(lines, key=lambda ln: abs(ln.slope - slope))
    assert error_metric(spin, initial_estimate(line, field)) < 0.10


def test_initial_estimate_zero_slope_gives_small_A(field):
    sigma = sigma_from_params(SpinParams(0.0, 20e3), field)
    got = initial_estimate(_line(0.0, [sigma] * 3), field)
    w_l = field.omega_L
    expected_A = (np.sqrt(w_l**2 - (2 * np.pi * got.B) ** 2) - w_l) / (2 * np.pi)
    assert got.A == pytest.approx(expected_A, abs=1e-6)
    assert abs(got.A) < 1e3


def test_initial_estimate_without_widths_raises(field):
    with pytest.raises(DomainError):
        initial_estimate(_line(1e-9, []), field)


# -- filtered RMSE ---------------------------------------------------------------


def test_filtered_rmse_identity_and_self_reconstruction(field):
    spin = SpinParams(30e3, 40e3)
    p = synth([spin], field, SHORT)
    assert filtered_rmse(SHORT, p, [spin], field, N) < 1e-10
    mask = np.ones(SHORT.size, dtype=bool)
    assert filtered_rmse(SHORT, p, [spin], field, N, mask=mask) == pytest.approx(0.0, abs=1e-12)


def test_filtered_rmse_empty_support_raises(field):
    tau = np.arange(1, 6) * 5e-9  # far before the first dip
    with pytest.raises(DomainError):
        filtered_rmse(tau, np.ones(5), [SpinParams(30e3, 40e3)], field, N)
    with pytest.raises(DomainError):
        filtered_rmse(SHORT, np.ones(SHORT.size), [], field, N)


def test_filtered_rmse_ignores_samples_outside_windows(field):
    spin = SpinParams(30e3, 40e3)
    p = synth([spin], field, SHORT)
    m = window_mask(SHORT, [spin], field)
    q = p.copy()
    q[~m] = 0.0
    assert filtered_rmse(SHORT, q, [spin], field, N) == pytest.approx(filtered_rmse(SHORT, p, [spin], field, N))


# -- refinement ------------------------------------------------------------------


def start_within(truth, rng, rel=0.10):
    """A random start at error-metric distance below ``rel`` from ``truth``."""
    while True:
        d = rng.normal(size=2)
        d *= rng.uniform(0.5, 1.0) * rel * np.hypot(truth.A, truth.B) / np.hypot(*d)
        if truth.B + d[1] > 0:
            return SpinParams(truth.A + d[0], truth.B + d[1])


@pytest.mark.parametrize("seed", range(12))
def test_refine_from_ten_percent_off(field, seed):
    rng = np.random.default_rng(seed)
    truth = region_spins(1, 300 + seed)[0]
    p = synth([truth], field, SHORT)
    start = start_within(truth, rng)
    assert error_metric(truth, start) < 0.10
    got, rmse, _ = refine(SHORT, p, start, field, N)
    assert error_metric(truth, got) < 0.01, (truth, start, got)


def test_refine_fixed_dip_frequency_keeps_line(field):
    truth = SpinParams(30e3, 40e3)
    start = SpinParams(30e3, 36e3)
    got, _, _ = refine(SHORT, synth([truth], field, SHORT), start, field, N, fp_halfwidth=0.0)
    assert error_metric(truth, got) < 0.01


def test_refine_exact_start_is_noop(field):
    truth = SpinParams(30e3, 40e3)
    got, rmse, _ = refine(SHORT, synth([truth], field, SHORT), truth, field, N)
    assert abs(got.A - truth.A) < 1.0 and abs(got.B - truth.B) < 1.0
    assert rmse < 1e-10


@pytest.mark.parametrize("seed", range(6))
def test_refine_never_increases_rmse(field, seed):
    rng = np.random.default_rng(seed)
    truth = region_spins(2, seed)
    p = synth(truth, field, SHORT)
    start = SpinParams(truth[0].A * rng.uniform(0.7, 1.3), truth[0].B * rng.uniform(0.7, 1.3))
    mask0 = window_mask(SHORT, [start], field)
    rmse0 = filtered_rmse(SHORT, p, [start], field, N, mask=mask0)
    got, rmse, _ = refine(SHORT, p, start, field, N, max_evals=60)
    assert rmse <= rmse0 + 1e-15


def test_refine_rejects_out_of_bounds_start(field):
    with pytest.raises(DomainError):
        refine(SHORT, np.ones(SHORT.size), SpinParams(300e3, 40e3), field, N)


# -- beam search -----------------------------------------------------------------


def _estimate(params, line_id, dips=5):
    line = LineCandidate(0.0, list(range(dips)), list(range(1, dips + 1)), 0.0, (1, 0.0), [1e-8] * dips, [0.2] * dips)
    return SpinEstimate(params, params, line, line_id, 0.0, True)


def test_beam_includes_single_helpful_candidate(field):
    spin = SpinParams(30e3, 40e3)
    conf = beam_select([_estimate(spin, 0)], SHORT, synth([spin], field, SHORT), field, N)
    assert [c.params for c in conf.members] == [spin]
    assert conf.rmse < 1e-10 and conf.excluded == []


def test_beam_duplicate_line_keeps_one(field):
    spin = SpinParams(30e3, 40e3)
    cands = [_estimate(spin, 0), _estimate(SpinParams(30.5e3, 40e3), 0)]
    conf = beam_select(cands, SHORT, synth([spin], field, SHORT), field, N)
    assert len(conf.members) == 1 and conf.members[0].params == spin
    assert len(conf.excluded) == 1 and conf.excluded[0][1] >= 0


def test_beam_rmse_is_joint(field):
    spins = [SpinParams(30e3, 40e3), SpinParams(-20e3, 35e3)]
    cands = [_estimate(s, i) for i, s in enumerate(spins)]
    p = synth(spins, field, SHORT)
    conf = beam_select(cands, SHORT, p, field, N)
    mask = window_mask(SHORT, spins, field)
    assert conf.rmse == pytest.approx(filtered_rmse(SHORT, p, [c.params for c in conf.members], field, N, mask=mask))


def beam_oracle_case(seed, field=FieldConfig()):
    """Random candidate pool (true spins, perturbed copies, decoys) for the exhaustive check."""
    rng = np.random.default_rng(seed)
    truth = region_spins(int(rng.integers(1, 4)), 1000 + seed)
    n = int(rng.integers(2, 11))
    cands, line_id = [], 0
    for i in range(n):
        kind = rng.integers(3)
        # every candidate is distinct so the optimum is unique
        if kind == 0:
            t = truth[int(rng.integers(len(truth)))]
            params = SpinParams(t.A * rng.uniform(0.97, 1.03), t.B * rng.uniform(0.97, 1.03))
        elif kind == 1:
            t = truth[i % len(truth)]
            params = SpinParams(t.A * rng.uniform(0.995, 1.005), t.B * rng.uniform(0.995, 1.005))
        else:
            params = region_spins(1, 5000 + 31 * seed + i)[0]
        # some candidates share a line with the previous one
        if i and rng.random() < 0.25:
            line_id -= 1
        cands.append(_estimate(params, line_id, dips=int(rng.integers(3, 40))))
        line_id += 1
    p = synth(truth, field, SHORT)
    beam = beam_select(cands, SHORT, p, field, N, beam_width=2**n)
    brute = brute_force_select(cands, SHORT, p, field, N)
    same = {id(c) for c in beam.members} == {id(c) for c in brute.members}
    # the two searches multiply factors in different orders; allow for rounding only
    return same and abs(beam.rmse - brute.rmse) <= 1e-12 * max(brute.rmse, 1e-300), (beam, brute)


@pytest.mark.parametrize("seed", range(20))
def test_beam_equals_brute_force(seed):
    ok, (beam, brute) = beam_oracle_case(seed)
    assert ok, (beam.rmse, brute.rmse, [c.line_id for c in beam.members], [c.line_id for c in brute.members])


def test_beam_width_validation(field):
    with pytest.raises(DomainError):
        beam_select([_estimate(SpinParams(30e3, 40e3), 0)], SHORT, np.ones(SHORT.size), field, N, beam_width=0)


# -- error metric and matching ---------------------------------------------------


def test_error_metric_examples():
    a = SpinParams(50e3, 50e3)
    assert error_metric(a, a) == 0.0
    assert error_metric(a, SpinParams(50e3, 55e3)) == pytest.approx(5 / np.sqrt(5000), rel=1e-12)
    with pytest.raises(DomainError):
        error_metric(SpinParams(0.0, 0.0), a)


@pytest.mark.parametrize("seed", range(10))
def test_error_metric_sign_flip_and_scale(seed):
    rng = np.random.default_rng(seed)
    a = SpinParams(rng.uniform(-1e5, 1e5), rng.uniform(0, 1e5))
    b = SpinParams(rng.uniform(-1e5, 1e5), rng.uniform(0, 1e5))
    e = error_metric(a, b)
    assert error_metric(SpinParams(-a.A, a.B), SpinParams(-b.A, b.B)) == pytest.approx(e, rel=1e-12)
    c = rng.uniform(0.1, 10)
    assert error_metric(SpinParams(c * a.A, c * a.B), SpinParams(c * b.A, c * b.B)) == pytest.approx(e, rel=1e-12)


def test_match_identity_any_order():
    truth = region_spins(5, 3)
    perm = [truth[i] for i in (3, 0, 4, 1, 2)]
    m = match_spins(truth, perm)
    assert m.misses == [] and m.extras == []
    assert all(e == 0 for _, _, e in m.pairs)
    assert [perm[j] for _, j, _ in m.pairs] == truth


def test_match_empty_estimates():
    m = match_spins([SpinParams(30e3, 40e3)], [])
    assert m.pairs == [] and m.misses == [0]
    assert list(m.errors()) == [1.0] and list(m.errors(None)) == []


@pytest.mark.parametrize("seed", range(10))
def test_match_equals_permutation_oracle(seed):
    rng = np.random.default_rng(seed)
    truth = region_spins(3, 200 + seed)
    est = [SpinParams(t.A * rng.uniform(0.8, 1.2), t.B * rng.uniform(0.8, 1.2)) for t in truth]
    est = [est[i] for i in rng.permutation(3)]
    best = min(itertools.permutations(range(3)), key=lambda p: sum(error_metric(t, est[j]) for t, j in zip(truth, p)))
    m = match_spins(truth, est)
    assert [j for _, j, _ in m.pairs] == list(best)


def test_match_miss_cost_declines_gross_pairs():
    truth = [SpinParams(30e3, 40e3)]
    far = [SpinParams(-80e3, 90e3)]
    assert len(match_spins(truth, far).pairs) == 1
    m = match_spins(truth, far, miss_cost=1.0)
    assert m.pairs == [] and m.misses == [0] and m.extras == [0]


def test_match_fp_gate(field):
    t = SpinParams(30e3, 40e3)
    near = SpinParams(31e3, 40e3)
    assert abs(dip_frequency(t, field) - dip_frequency(near, field)) < 2e3
    assert len(match_spins([t], [near], max_fp_diff=2e3, field=field).pairs) == 1
    off = SpinParams(45e3, 40e3)
    assert match_spins([t], [off], max_fp_diff=2e3, field=field).pairs == []


@pytest.mark.parametrize(
    "A,B,inside",
    [(5e3, 40e3, False), (-5e3, 40e3, False), (5.001e3, 40e3, True), (70e3, 40e3, False), (-69.999e3, 40e3, True),
     (30e3, 15e3, False), (30e3, 15.001e3, True), (30e3, 80e3, False), (30e3, 79.999e3, True), (0.0, 40e3, False)],
)
def test_confidence_region_boundaries(A, B, inside):
    assert in_confidence_region(SpinParams(A, B)) is inside


# -- end to end ------------------------------------------------------------------


@pytest.mark.slow
def test_dip_frequency_accuracy_single_spins(field, tau, default_bath):
    """|f_p(truth) - f_p(estimate)| <= 2 kHz on at least 90 of 100 in-region single spins."""
    good = 0
    for spin in region_spins(100, 77):
        det = SpinDetector().fit(tau, synth([spin], field, tau, bath=default_bath))
        ft = dip_frequency(spin, field)
        errs = [abs(ft - dip_frequency(s, field)) for s in det.spin_params()]
        good += bool(errs) and min(errs) <= 2e3
    assert good >= 90, f"{good}/100 within 2 kHz"

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nvsd.decomposition import (
    GaussianComponent,
    GaussianDecomposition,
    dip_spectrum,
    em_decompose,
    prune,
    reconstruct,
    split_fragments,
)
from nvsd.physics import SpinParams

from conftest import synth

STEP = 5e-9
GRID = np.arange(1, 2001) * STEP  # 10 us


def gauss(tau, a, mu, sigma):
    return a * np.exp(-0.5 * ((tau - mu) / sigma) ** 2)


def test_flat_signal_has_no_fragments():
    assert split_fragments(np.zeros(100), 0.01) == []


def test_single_gaussian_one_fragment():
    y = gauss(GRID, 0.5, 3e-6, 20e-9)
    frags = split_fragments(y, 0.01)
    assert len(frags) == 1
    peak = int(np.argmax(y))
    assert frags[0].start <= peak < frags[0].stop


def test_two_separated_gaussians_two_fragments():
    y = gauss(GRID, 0.5, 3e-6, 20e-9) + gauss(GRID, 0.3, 3e-6 + 8 * 20e-9, 20e-9)
    assert len(split_fragments(y, 0.01)) == 2


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(0.02, 0.6), st.integers(50, 1950), st.floats(1.0, 8.0)), max_size=6),
       st.floats(0.005, 0.1))
def test_fragment_coverage_and_order(peaks, floor):
    y = np.zeros_like(GRID)
    for a, i, s in peaks:
        y += gauss(GRID, a, GRID[i], s * STEP)
    frags = split_fragments(y, floor)
    covered = np.zeros(len(y), dtype=int)
    for f in frags:
        covered[f.start:f.stop] += 1
    assert np.all(covered[y > floor] == 1)
    assert np.all(covered <= 1)
    assert all(a.stop <= b.start for a, b in zip(frags, frags[1:]))


def test_em_single_gaussian_within_1pct():
    tau = np.arange(-100, 101) * STEP + 2e-6
    y = gauss(tau, 0.4, 2e-6 + 1.3e-9, 18e-9)
    fit = em_decompose(tau, y)
    assert len(fit.components) == 1
    c = fit.components[0]
    assert c.a == pytest.approx(0.4, rel=0.01)
    assert c.mu == pytest.approx(2e-6 + 1.3e-9, abs=0.01 * 18e-9)
    assert c.sigma == pytest.approx(18e-9, rel=0.01)


def test_em_two_gaussians_4_sigma_apart():
    s = 15e-9
    tau = np.arange(-120, 121) * STEP + 2e-6
    y = gauss(tau, 0.3, 2e-6 - 2 * s, s) + gauss(tau, 0.3, 2e-6 + 2 * s, s)
    comps = sorted(em_decompose(tau, y).components, key=lambda c: c.mu)
    assert len(comps) == 2
    assert abs(comps[0].mu - (2e-6 - 2 * s)) < 0.5 * s
    assert abs(comps[1].mu - (2e-6 + 2 * s)) < 0.5 * s


def test_em_zero_fragment():
    tau = np.arange(10) * STEP
    assert em_decompose(tau, np.zeros(10)).components == []
    assert em_decompose(tau, -np.ones(10)).components == []  # negatives clamp to zero


def test_prune_rules():
    comps = [GaussianComponent(0.04, 1e-6, 1e-8), GaussianComponent(0.06, 2e-6, 1e-8)]
    assert prune(comps, 0.05) == [comps[1]]
    edge = [GaussianComponent(0.05, 1e-6, 1e-8)]
    assert prune(edge, 0.05) == edge
    big = [GaussianComponent(0.2, 1e-6, 1e-8), GaussianComponent(0.1, 2e-6, 1e-8)]
    assert prune(big, 0.05) == big


@given(st.lists(st.floats(0.0, 1.0), max_size=20), st.floats(0.0, 1.0))
def test_prune_idempotent(amps, t):
    comps = [GaussianComponent(a, i * 1e-7, 1e-8) for i, a in enumerate(amps)]
    once = prune(comps, t)
    assert prune(once, t) == once
    assert all(c.a >= t for c in once)


def test_reconstruct_basics():
    assert np.all(reconstruct([], GRID) == 0)
    c = GaussianComponent(0.3, GRID[100], 12e-9)
    assert reconstruct([c], np.array([c.mu]))[0] == pytest.approx(0.3, rel=1e-15)


def test_three_spin_reconstruction_rmse(field):
    tau = np.arange(1, 4001) * STEP
    spins = [SpinParams(20e3, 30e3), SpinParams(-35e3, 45e3), SpinParams(55e3, 25e3)]
    y = dip_spectrum(synth(spins, field, tau))
    d = GaussianDecomposition().fit(tau, y)
    assert np.sqrt(np.mean((d.predict(tau) - y) ** 2)) < 0.02


def test_mass_conservation_on_clean_fragments(field):
    tau = np.arange(1, 4001) * STEP
    y = dip_spectrum(synth([SpinParams(20e3, 30e3), SpinParams(-35e3, 45e3)], field, tau))
    d = GaussianDecomposition().fit(tau, y)
    checked = 0
    for frag, fit in zip(d.fragments_, d.fragment_fits_):
        sl = slice(frag.start, frag.stop)
        if not fit.components or fit.residual_rmse >= 0.02:
            continue
        rec = reconstruct(fit.components, tau[sl])
        assert rec.sum() == pytest.approx(np.clip(y[sl], 0, None).sum(), rel=0.05)
        checked += 1
    assert checked > 5


def test_seeded_determinism(field, tmp_path):
    tau = np.arange(1, 4001) * STEP
    y = dip_spectrum(synth([SpinParams(20e3, 30e3), SpinParams(-35e3, 45e3)], field, tau))
    paths = []
    for i in range(2):
        d = GaussianDecomposition(random_state=3).fit(tau, y)
        p = tmp_path / f"d{i}.csv"
        d.write_debug_csv(p)
        paths.append(p)
    assert paths[0].read_bytes() == paths[1].read_bytes()
    header = paths[0].read_text().splitlines()[0]
    assert header == "fragment_id,a,mu_s,sigma_s,bic,converged"


def test_estimator_params_roundtrip():
    d = GaussianDecomposition(threshold=0.1, max_components=2)
    assert d.get_params()["threshold"] == 0.1
    assert d.set_params(max_components=3).max_components == 3


def test_components_respect_threshold_and_fragments(field):
    tau = np.arange(1, 4001) * STEP
    y = dip_spectrum(synth([SpinParams(40e3, 20e3)], field, tau))
    d = GaussianDecomposition().fit(tau, y)
    assert all(c.a >= 0.05 and c.sigma > 0 for c in d.components_)
    for c in d.components_:
        assert any(tau[f.start] <= c.mu <= tau[f.stop - 1] for f in d.fragments_)


def random_mixture(rng, n):
    """1-3 Gaussians separated by at least 4 of the wider sigma."""
    while True:
        sig = rng.uniform(8e-9, 30e-9, n)
        mu = np.sort(rng.uniform(0.6e-6, 1.4e-6, n))
        ok = all(mu[i + 1] - mu[i] >= 4 * max(sig[i], sig[i + 1]) for i in range(n - 1))
        if ok:
            return rng.uniform(0.1, 0.6, n), mu, sig


def check_mixture_recovery(seed):
    """Centre error < 0.5 sigma and amplitude error < 5% for every true Gaussian."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 4))
    a, mu, sig = random_mixture(rng, n)
    tau = np.arange(0, 400) * STEP
    y = sum(gauss(tau, *p) for p in zip(a, mu, sig))
    comps = GaussianDecomposition(threshold=0.05).fit(tau, y).components_
    if len(comps) != n:
        return False, f"seed {seed}: {len(comps)} components for {n} Gaussians"
    for (ta, tm, ts), c in zip(zip(a, mu, sig), sorted(comps, key=lambda c: c.mu)):
        if abs(c.mu - tm) >= 0.5 * ts or abs(c.a - ta) >= 0.05 * ta:
            return False, f"seed {seed}: truth {(ta, tm, ts)} got {c}"
    return True, ""


@pytest.mark.parametrize("seed", range(30))
def test_mixture_recovery(seed):
    ok, msg = check_mixture_recovery(seed)
    assert ok, msg

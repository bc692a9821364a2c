import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from avsparse.martingales import (
    EmConfig,
    GridPrior,
    MixtureMartingale,
    MixtureScratch,
    OracleMartingale,
    ParamPair,
    PluginMartingale,
    PluginState,
    build_grid,
    em_fit,
    grid_size,
    log_lr,
    log_lr_batch,
    log_lr_stream,
    log_max_martingale,
    log_mixture,
    log_mixture_batch,
    plugin_step,
)
from avsparse.model import DomainError, ModelParams, StreamState, advance, generate_path

mpmath.mp.dps = 50


def mp_log_lr_stream(eps, delta, S, t):
    a = mpmath.mpf(delta) * mpmath.mpf(S) - mpmath.mpf(t) * mpmath.mpf(delta) ** 2 / 2
    return mpmath.log(1 - mpmath.mpf(eps) + mpmath.mpf(eps) * mpmath.exp(a))


def linear_space_lr(eps, delta, sums, t):
    prod = 1.0
    for s in sums:
        prod *= (1 - eps) + eps * math.exp(delta * s - t * delta**2 / 2)
    return prod


# -- per-stream and product likelihood ratios ------------------------------------

def test_log_lr_stream_examples():
    pair = ParamPair(0.3, 0.8)
    t = 5
    assert log_lr_stream(pair, t * pair.delta / 2, t) == pytest.approx(0.0, abs=1e-15)
    assert log_lr_stream(ParamPair(1.0, 0.8), 2.5, 3) == pytest.approx(0.8 * 2.5 - 3 * 0.32, rel=1e-14)
    got = log_lr_stream(ParamPair(0.1, 2.0), 30.0, 1)
    assert got == pytest.approx(float(mp_log_lr_stream(0.1, 2.0, 30.0, 1)), rel=1e-14)
    assert got == pytest.approx(58 - 2.302585, abs=1e-6)


@settings(max_examples=300, deadline=None)
@given(eps=st.floats(1e-6, 1.0), delta=st.floats(0.01, 10.0), a=st.floats(-1e4, 1e4), t=st.integers(1, 100))
def test_log_lr_stream_matches_extended_precision(eps, delta, a, t):
    # choose S so the exponent is a
    S = (a + t * delta * delta / 2) / delta
    got = log_lr_stream(ParamPair(eps, delta), S, t)
    ref = float(mp_log_lr_stream(eps, delta, S, t))
    assert math.isfinite(got)
    assert got == pytest.approx(ref, rel=1e-9, abs=1e-12)


def test_log_lr_examples():
    pair = ParamPair(0.2, 0.7)
    t = 3
    state = StreamState(t, np.full(6, t * pair.delta / 2))
    assert log_lr(pair, state) == pytest.approx(0.0, abs=1e-14)
    one = StreamState(2, np.array([1.3]))
    assert log_lr(pair, one) == pytest.approx(log_lr_stream(pair, 1.3, 2), rel=1e-15)
    rng = np.random.default_rng(0)
    s = rng.normal(size=3) * 2
    st3 = StreamState(4, s)
    assert log_lr(pair, st3) == pytest.approx(sum(log_lr_stream(pair, x, 4) for x in s), rel=1e-13)


def test_log_lr_matches_linear_space_product():
    rng = np.random.default_rng(1)
    for _ in range(300):
        K = int(rng.integers(1, 11))
        t = int(rng.integers(1, 6))
        eps = float(rng.uniform(0.01, 1.0))
        delta = float(rng.uniform(0.05, 2.0))
        sums = rng.normal(size=K) * math.sqrt(t) + rng.integers(0, 2, K) * delta * t
        got = log_lr(ParamPair(eps, delta), StreamState(t, sums))
        assert got == pytest.approx(math.log(linear_space_lr(eps, delta, sums, t)), abs=1e-10)


def test_param_pair_validation():
    for e, d in [(0.0, 1.0), (1.1, 1.0), (0.5, 0.0), (0.5, -1.0)]:
        with pytest.raises(DomainError):
            ParamPair(e, d)


def test_log_lr_requires_positive_t():
    with pytest.raises(ValueError):
        log_lr(ParamPair(0.1, 1.0), StreamState.initial(3))


# -- grid ----------------------------------------------------------------------

def brute_force_grid(K, C):
    n_eps = math.ceil(math.log(K) ** 2)
    out = []
    for i in range(1, n_eps + 1):
        eps = K ** -(0.5 + i / (2 * n_eps))
        n_e = math.ceil(eps * K)
        for j in range(1, n_e * math.ceil(math.log(C)) + 1):
            out.append((eps, math.sqrt(2 * math.log(K) / math.exp(j / n_e))))
    return out


def test_grid_K100_eps_levels():
    g = build_grid(100, 200)
    assert math.ceil(math.log(100) ** 2) == 22
    betas = sorted(set(g.betas))
    assert len(betas) == 22
    assert betas == pytest.approx([0.5 + i / 44 for i in range(1, 23)], rel=1e-15)
    for p, b in zip(g.pairs, g.betas):
        assert p.eps == pytest.approx(100.0 ** -b, rel=1e-15)
        assert 0.5 < b <= 1.0


def test_grid_K1000_count():
    g = build_grid(1000, 200)
    assert math.ceil(math.log(1000) ** 2) == 48
    assert math.ceil(math.log(200)) == 6
    expected = sum(math.ceil(1000 ** (1 - (0.5 + i / 96))) * 6 for i in range(1, 49))
    assert len(g) == expected == grid_size(1000, 200)
    assert g.log_weight == pytest.approx(-math.log(expected), rel=1e-15)


@pytest.mark.parametrize("K", [100, 1000, 10_000])
def test_grid_cardinality_matches_brute_force(K):
    g = build_grid(K, 200)
    ref = brute_force_grid(K, 200)
    assert len(g) == len(ref) == grid_size(K, 200)
    assert len(set((p.eps, p.delta) for p in g.pairs)) == len(g)
    assert [(p.eps, p.delta) for p in g.pairs] == ref
    ratio = len(g) / (math.sqrt(K) * math.log(K))
    assert 1 < ratio < 20


def test_grid_delta_bound():
    for K in (100, 1000):
        g = build_grid(K, 200)
        for p in g.pairs:
            n_e = math.ceil(p.eps * K)
            assert p.delta <= math.sqrt(2 * math.log(K) / math.exp(1 / n_e)) * (1 + 1e-15)
            assert p.delta < math.sqrt(2 * math.log(K))


def test_grid_domain():
    with pytest.raises(DomainError):
        build_grid(100, 1.0)
    with pytest.raises(DomainError):
        build_grid(1, 200)


def test_grid_csv():
    import io
    g = build_grid(100, 200)
    buf = io.StringIO()
    g.to_csv(buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "beta_i,eps,delta,T"
    assert len(lines) == len(g) + 1
    b, e, d, T = map(float, lines[1].split(","))
    assert T == pytest.approx(2 * math.log(100) / d**2)


def test_from_pairs_drops_duplicates():
    g = GridPrior.from_pairs(5, [ParamPair(0.1, 1.0), ParamPair(0.1, 1.0), ParamPair(0.2, 1.0)])
    assert len(g) == 2
    assert g.log_weight == pytest.approx(-math.log(2))


# -- mixture -------------------------------------------------------------------

def brute_mixture(grid, state):
    logs = np.array([log_lr(p, state) for p in grid.pairs])
    m = logs.max()
    return m + math.log(np.mean(np.exp(logs - m))), logs


def test_single_pair_mixture_is_log_lr():
    rng = np.random.default_rng(2)
    for eps in (0.05, 0.5, 1.0):
        pair = ParamPair(eps, 0.9)
        g = GridPrior.from_pairs(7, [pair])
        for t in (1, 4, 30):
            state = StreamState(t, rng.normal(size=7) * math.sqrt(t) + 2.0)
            assert log_mixture(g, state) == pytest.approx(log_lr(pair, state), abs=1e-12)


def test_mixture_of_equal_logs():
    g = GridPrior.from_pairs(4, [ParamPair(0.1, 1.0), ParamPair(0.3, 1.0)])
    state = StreamState(1, np.full(4, 0.5))  # exponent 0 for delta = 1, t = 1
    assert log_mixture(g, state) == pytest.approx(0.0, abs=1e-15)


def test_log_mean_exp_three_values():
    from avsparse._kernels import log_mean_exp
    got = log_mean_exp(np.array([0.0, math.log(2), math.log(4)]), -math.log(3))
    assert got == pytest.approx(math.log(7 / 3), rel=1e-15)


@pytest.mark.parametrize("K", [100, 1000])
def test_mixture_matches_brute_force(K):
    g = build_grid(K, 200)
    rng = np.random.default_rng(K)
    p = ModelParams(K, 0.55, 40)
    path = generate_path(p, 80, int(rng.integers(1 << 30)))
    sums = path.cumulative_sums()
    scratch = MixtureScratch(g)
    for t in (1, 2, 10, 40, 80):
        state = StreamState(t, sums[t - 1])
        ref, ref_logs = brute_mixture(g, state)
        got = log_mixture(g, state, scratch)
        assert got == pytest.approx(ref, abs=1e-9)
        assert np.max(np.abs(scratch.pair_logs(g) - ref_logs)) < 1e-9


def test_mixture_handles_huge_exponents():
    g = build_grid(100, 200)
    sums = np.zeros(100)
    sums[:3] = 400.0
    state = StreamState(5, sums)
    ref, _ = brute_mixture(g, state)
    assert log_mixture(g, state) == pytest.approx(ref, rel=1e-12)


def test_mixture_batch_matches_single():
    g = build_grid(100, 200)
    rng = np.random.default_rng(3)
    sums = rng.normal(size=(5, 100)) * 3
    batch = log_mixture_batch(g, sums, 9)
    single = [log_mixture(g, StreamState(9, s)) for s in sums]
    assert np.array_equal(batch, np.array(single))


def test_pathwise_mixture_bound():
    g = build_grid(100, 200)
    scratch = MixtureScratch(g)
    for seed in range(30):
        path = generate_path(ModelParams(100, 0.6, 40), 20, seed)
        for state in path.states():
            lm = log_mixture(g, state, scratch)
            assert np.all(lm >= scratch.pair_logs(g) + g.log_weight)


def test_mixture_rejects_wrong_shape():
    g = build_grid(100, 200)
    with pytest.raises(ValueError):
        log_mixture(g, StreamState(1, np.zeros(50)))
    with pytest.raises(ValueError):
        log_mixture(g, StreamState.initial(100))


# -- max martingale --------------------------------------------------------------

def test_max_martingale_examples():
    assert log_max_martingale(ParamPair(1.0, 1.0), StreamState(1, np.array([0.5]))) == pytest.approx(0.0)
    pair = ParamPair(0.4, 0.9)
    st1 = StreamState(3, np.array([2.2]))
    assert log_max_martingale(pair, st1) == pytest.approx(log_lr_stream(pair, 2.2, 3), rel=1e-14)
    # K=2, exponents (0, ln 3), eps = 0.5 with delta = 1, t = 2: a = S - 1
    st2 = StreamState(2, np.array([1.0, 1.0 + math.log(3)]))
    assert log_max_martingale(ParamPair(0.5, 1.0), st2) == pytest.approx(math.log(1.5), rel=1e-14)


def test_max_martingale_eps_zero():
    from avsparse.martingales import log_max_batch
    assert np.all(log_max_batch(0.0, 1.0, np.ones((3, 4)), 2) == 0.0)


# -- EM and plug-in --------------------------------------------------------------

def test_em_two_points():
    e, d = em_fit(np.array([0.0, 10.0]), 0.5, 10.0)
    assert e == pytest.approx(0.5, abs=1e-6)
    assert d == pytest.approx(10.0, abs=1e-6)


def test_em_hand_iteration_first_step():
    # one iteration by hand from (0.5, 10): pi_1 = 1/(1+exp(50)), pi_2 = 1/(1+exp(-50))
    from avsparse import _kernels
    z = np.array([0.0, 10.0])
    buf = lambda: np.empty(2)
    e, d, ok, it = _kernels.em_fit_kernel(z, 0.5, 10.0, 1, 1e-4, True, buf(), buf(), np.empty(2, np.int64))
    pi1, pi2 = 1 / (1 + math.exp(50)), 1 / (1 + math.exp(-50))
    assert e == pytest.approx((pi1 + pi2) / 2, rel=1e-14)
    assert d == pytest.approx(10 * pi2 / (pi1 + pi2), rel=1e-14)


def test_em_literal_mstep_differs():
    z = np.array([0.0, 0.0, 0.0, 4.0, 4.2])
    en, dn = em_fit(z, 0.2, 3.0, normalized_mstep=True)
    assert dn == pytest.approx(4.1, abs=0.05)
    out = em_fit(z, 0.2, 3.0, normalized_mstep=False)
    assert out != (en, dn)


def test_em_absorbing_zero():
    from avsparse import _kernels
    z = np.array([-1.0, 0.5, 2.0])
    for normalized, d_expected in ((False, 0.0), (True, 1.0)):
        e, d, ok, it = _kernels.em_fit_kernel(z, 0.0, 1.0, 10, 1e-4, normalized, np.empty(3), np.empty(3),
                                              np.empty(3, np.int64))
        assert ok and it == 1 and e == 0.0 and d == d_expected


def test_em_nonconvergence_returns_default():
    rng = np.random.default_rng(5)
    z = rng.normal(size=200)
    assert em_fit(z, 0.01, 3.0, m_max=1) == (0.0, 1.0)


def test_em_deterministic():
    z = np.random.default_rng(6).normal(size=100) + 0.3
    assert em_fit(z, 0.01, 3.0) == em_fit(z, 0.01, 3.0)


def test_em_validation():
    with pytest.raises(ValueError):
        em_fit(np.zeros(3), 0.1, 1.0, m_max=0)
    with pytest.raises(DomainError):
        em_fit(np.zeros(3), 0.0, 1.0)


def test_plugin_first_increment_zero():
    row = np.array([5.0, -1.0, 3.0])
    s0 = StreamState.initial(3)
    s1 = advance(s0, row)
    ps = plugin_step(PluginState(), s0, s1, EmConfig())
    assert ps.log_M == 0.0 and (ps.eps_hat, ps.delta_hat) == (0.0, 1.0)


def test_plugin_telescopes_at_fixed_estimate(monkeypatch):
    import avsparse.martingales as mod
    monkeypatch.setattr(mod, "em_fit", lambda *a, **k: (0.2, 0.7))
    cfg = EmConfig(per_step_delta=False)
    path = generate_path(ModelParams(6, 0.5, 10), 8, 4)
    ps = PluginState()
    prev = StreamState.initial(6)
    states = list(path.states())
    for st_ in states:
        ps = plugin_step(ps, prev, st_, cfg)
        prev = st_
    # step 1 uses (0, 1), so the telescoping sum starts at t = 1
    assert ps.log_M == pytest.approx(log_lr(ParamPair(0.2, 0.7), states[-1])
                                     - log_lr(ParamPair(0.2, 0.7), states[0]), abs=1e-12)


def test_plugin_zero_estimate_gives_zero_increment(monkeypatch):
    import avsparse.martingales as mod
    monkeypatch.setattr(mod, "em_fit", lambda *a, **k: (0.0, 1.0))
    path = generate_path(ModelParams(6, 0.5, 10), 5, 4)
    m = PluginMartingale()
    vals = [m.update(s) for s in path.states()]
    assert vals == [0.0] * 5


def test_plugin_predictable():
    # the estimate used at step t only sees data up to t-1
    p = ModelParams(50, 0.5, 10)
    path = generate_path(p, 6, 9)
    states = list(path.states())
    base = plugin_step(PluginState(), states[3], states[4], EmConfig())
    perm = np.random.default_rng(0).permutation(50)
    other = StreamState(5, states[3].sums + path.increments[4][perm])
    alt = plugin_step(PluginState(), states[3], other, EmConfig())
    assert (base.eps_hat, base.delta_hat) == (alt.eps_hat, alt.delta_hat)


def test_plugin_batch_matches_sequential():
    p = ModelParams(40, 0.5, 10)
    paths = [generate_path(p, 6, s) for s in range(4)]
    m = PluginMartingale()
    seq = []
    for path in paths:
        m.reset()
        seq.append([m.update(s) for s in path.states()])
    cums = np.stack([pa.cumulative_sums() for pa in paths])
    acc = np.zeros(4)
    for t in range(1, 7):
        before = np.zeros((4, 40)) if t == 1 else cums[:, t - 2]
        acc += m.batch_increment(before, cums[:, t - 1], t)
        assert acc == pytest.approx(np.array(seq)[:, t - 1], abs=1e-10)


def test_plugin_per_step_delta_scaling(monkeypatch):
    import avsparse.martingales as mod
    monkeypatch.setattr(mod, "em_fit", lambda *a, **k: (0.2, 2.0))
    s0, s1, s2 = StreamState(3, np.ones(3)), StreamState(4, np.ones(3) * 2), None
    ps = plugin_step(PluginState(), s0, s1, EmConfig())
    assert ps.delta_hat == pytest.approx(2.0 / math.sqrt(3))
    ps = plugin_step(PluginState(), s0, s1, EmConfig(per_step_delta=False))
    assert ps.delta_hat == 2.0


# -- sequential evaluators -------------------------------------------------------

def test_oracle_and_mixture_sequential_equal_batch():
    p = ModelParams(100, 0.6, 40)
    path = generate_path(p, 10, 1)
    orc = OracleMartingale(ParamPair(p.eps, p.delta))
    mix = MixtureMartingale(build_grid(100, 200))
    for st_ in path.states():
        assert orc.update(st_) == pytest.approx(log_lr_batch(p.eps, p.delta, st_.sums[None], st_.t)[0])
        assert mix.update(st_) == log_mixture(mix.grid, st_)

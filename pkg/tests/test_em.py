import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lfdse.em import (
    EmConfig,
    PatternCounts,
    aggregate_pairs,
    e_step,
    fit_em,
    fit_em_batch,
    fit_report_fields,
    format_pattern_counts,
    format_report,
    log_likelihood,
    m_step,
    params_from_report,
    parse_pattern_counts,
    parse_report,
)
from lfdse.errors import EmptyInputError, ParseError, ShapeError
from lfdse.patterns import LinkageParams, enumerate_patterns, joint_prob, pattern_matrix, pattern_probs
from lfdse.simulation import generate_capture, generate_patterns, keyed_rng

CLAMP = 1e-6


def per_pair_em(pairs, init, tol=1e-7, max_iter=1000, clamp=CLAMP):
    """Reference EM over the exploded pair list, in plain probability space."""
    x = np.asarray(pairs, dtype=float)
    m, u, p = np.array(init.m), np.array(init.u), init.p
    for it in range(1, max_iter + 1):
        pm = np.prod(m ** x * (1 - m) ** (1 - x), axis=1)
        pu = np.prod(u ** x * (1 - u) ** (1 - x), axis=1)
        g = p * pm / (p * pm + (1 - p) * pu)
        m_new = np.clip((g[:, None] * x).sum(0) / g.sum(), clamp, 1 - clamp)
        u_new = np.clip(((1 - g)[:, None] * x).sum(0) / (1 - g).sum(), clamp, 1 - clamp)
        p_new = float(np.clip(g.mean(), clamp, 1 - clamp))
        delta = max(np.abs(m_new - m).max(), np.abs(u_new - u).max(), abs(p_new - p))
        m, u, p = m_new, u_new, p_new
        if delta < tol:
            break
    if m.sum() < u.sum():
        m, u, p = u, m, 1 - p
    return m, u, p, it


def expected_counts(params, total):
    """Deterministic table c_g = total * (p m_g + (1 - p) u_g), rounded."""
    phi = params.p * pattern_probs(params.m, clamp=0.0) + (1 - params.p) * pattern_probs(params.u, clamp=0.0)
    return PatternCounts.from_dense(params.k, np.rint(total * phi).astype(np.int64))


class TestPatternCounts:
    def test_empty(self):
        c = aggregate_pairs([])
        assert c.total == 0 and len(c) == 0

    def test_counting(self):
        c = aggregate_pairs([(1, 0), (1, 0), (0, 0)])
        assert c.as_dict() == {(0, 0): 1, (1, 0): 2}
        assert c.total == 3

    def test_mixed_lengths(self):
        with pytest.raises(ShapeError):
            aggregate_pairs([(1, 0), (1,)])

    def test_total_matches_simulated_pair_count(self):
        rng = keyed_rng(5)
        draw = generate_capture(200, 0.6, 0.8, rng)
        counts = generate_patterns(draw, (0.9, 0.8), (0.1, 0.2), rng)
        assert counts.total == draw.counts.n1p * draw.counts.np1

    def test_dense_roundtrip(self):
        c = PatternCounts.from_mapping({(1, 1): 3, (0, 1): 2})
        assert list(c.dense()) == [0, 2, 0, 3]
        assert PatternCounts.from_dense(2, c.dense()) == c

    def test_text_roundtrip(self):
        c = PatternCounts.from_mapping({(1, 0, 1): 4, (0, 0, 0): 10})
        assert parse_pattern_counts(format_pattern_counts(c)) == c

    def test_text_comments_and_errors(self):
        text = "# header\n1,0,5\n\n0,0,7\n"
        assert parse_pattern_counts(text).as_dict() == {(1, 0): 5, (0, 0): 7}
        with pytest.raises(ParseError) as info:
            parse_pattern_counts("1,0,5\n1,2,3\n")
        assert info.value.line == 2
        with pytest.raises(ParseError):
            parse_pattern_counts("1,0,5\n1,0,0,3\n")
        with pytest.raises(ParseError):
            parse_pattern_counts("1,0,x\n")


class TestEStep:
    def test_symmetric_components(self):
        params = LinkageParams((0.3, 0.7), (0.3, 0.7), 0.2)
        counts = aggregate_pairs(enumerate_patterns(2))
        assert all(g == pytest.approx(0.2, rel=1e-12) for g in e_step(counts, params).values())

    def test_hand_value(self):
        counts = aggregate_pairs([(1,)])
        assert e_step(counts, LinkageParams((0.9,), (0.1,), 0.5))[(1,)] == pytest.approx(0.9, rel=1e-12)

    def test_vanishing_prior(self):
        counts = aggregate_pairs(enumerate_patterns(3))
        post = e_step(counts, LinkageParams((0.9,) * 3, (0.1,) * 3, 1e-9))
        assert max(post.values()) < 1e-5


class TestMStep:
    counts = aggregate_pairs([(1, 0)] * 3 + [(1, 1)] * 2 + [(0, 0)] * 5)

    def test_all_matches(self):
        post = {g: 1.0 for g in self.counts.as_dict()}
        params = m_step(self.counts, post, clamp=CLAMP)
        assert params.p == pytest.approx(1 - CLAMP)
        np.testing.assert_allclose(params.m, [0.5, 0.2], rtol=1e-12)

    def test_two_pattern_toy(self):
        counts = PatternCounts.from_mapping({(1,): 6, (0,): 4})
        params = m_step(counts, {(1,): 1.0, (0,): 0.0}, clamp=CLAMP)
        assert params.p == pytest.approx(0.6, rel=1e-12)
        assert params.m == (1 - CLAMP,)
        assert params.u == (CLAMP,)

    def test_uniform_posterior(self):
        post = {g: 0.5 for g in self.counts.as_dict()}
        params = m_step(self.counts, post)
        np.testing.assert_allclose(params.m, [0.5, 0.2], rtol=1e-12)
        np.testing.assert_allclose(params.u, [0.5, 0.2], rtol=1e-12)
        assert params.p == pytest.approx(0.5)

    def test_missing_pattern(self):
        with pytest.raises(ShapeError):
            m_step(self.counts, {(1, 0): 0.5})


class TestLogLikelihood:
    def test_single_pattern(self):
        counts = aggregate_pairs([(1,)])
        ll = log_likelihood(counts, LinkageParams((0.5,), (0.5,), 0.5))
        assert ll == pytest.approx(np.log(0.5), rel=1e-14)

    def test_empty(self):
        assert log_likelihood(aggregate_pairs([]), LinkageParams((0.5,), (0.5,), 0.5)) == 0.0

    def test_one_step_does_not_decrease(self):
        counts = expected_counts(LinkageParams((0.8, 0.7, 0.9), (0.2, 0.1, 0.3), 0.1), 1000)
        params = LinkageParams((0.6, 0.6, 0.6), (0.4, 0.4, 0.4), 0.3)
        nxt = m_step(counts, e_step(counts, params))
        assert log_likelihood(counts, nxt) >= log_likelihood(counts, params)

    def test_matches_direct_formula(self):
        params = LinkageParams((0.8, 0.6), (0.3, 0.1), 0.25)
        counts = PatternCounts.from_mapping({(1, 1): 3, (0, 1): 2, (0, 0): 7})
        direct = sum(
            c * np.log(params.p * joint_prob(params.m, g) + (1 - params.p) * joint_prob(params.u, g))
            for g, c in counts.as_dict().items()
        )
        assert log_likelihood(counts, params) == pytest.approx(direct, rel=1e-13)


@st.composite
def small_instances(draw):
    k = draw(st.integers(1, 3))
    n = draw(st.integers(20, 500))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    m = rng.uniform(0.6, 0.95, size=k)
    u = rng.uniform(0.05, 0.4, size=k)
    p = rng.uniform(0.05, 0.5)
    labels = rng.random(n) < p
    probs = np.where(labels[:, None], m, u)
    return (rng.random((n, k)) < probs).astype(int)


class TestFitEm:
    def test_empty_input(self):
        with pytest.raises(EmptyInputError):
            fit_em(aggregate_pairs([]))

    def test_expected_counts_recover_truth(self):
        truth = LinkageParams((0.95,) * 6, (0.005,) * 6, 0.01)
        fit = fit_em(expected_counts(truth, 10**6))
        assert fit.converged
        np.testing.assert_allclose(fit.params.m, truth.m, atol=0.01)
        np.testing.assert_allclose(fit.params.u, truth.u, atol=0.01)
        assert fit.params.p == pytest.approx(truth.p, abs=0.01)

    def test_restart_at_stationary_point(self):
        counts = expected_counts(LinkageParams((0.9, 0.8, 0.7), (0.1, 0.2, 0.3), 0.2), 10**5)
        first = fit_em(counts)
        again = fit_em(counts, EmConfig(init=first.params))
        assert again.converged and again.iterations <= 2
        np.testing.assert_allclose(again.params.m, first.params.m, atol=1e-7)
        assert again.params.p == pytest.approx(first.params.p, abs=1e-7)

    @settings(max_examples=50, deadline=None)
    @given(small_instances())
    def test_aggregated_equals_per_pair(self, pairs):
        counts = aggregate_pairs(map(tuple, pairs))
        k = pairs.shape[1]
        init = LinkageParams((0.9,) * k, (0.1,) * k, min(1 / np.sqrt(len(pairs)), 0.5))
        fit = fit_em(counts, EmConfig(init=init))
        m, u, p, _ = per_pair_em(pairs, init)
        np.testing.assert_allclose(fit.params.m, m, atol=1e-10, rtol=0)
        np.testing.assert_allclose(fit.params.u, u, atol=1e-10, rtol=0)
        assert abs(fit.params.p - p) <= 1e-10

    @settings(max_examples=30, deadline=None)
    @given(small_instances())
    def test_monotone_ascent_and_posterior(self, pairs):
        counts = aggregate_pairs(map(tuple, pairs))
        fit = fit_em(counts)
        trace = np.array(fit.loglik_trace)
        slack = 1e-9 * np.maximum(1.0, np.abs(trace[:-1]))
        assert np.all(np.diff(trace) >= -slack)
        post = np.array([fit.posterior[g] for g in counts.as_dict()])
        assert np.all((post >= 0) & (post <= 1))
        mass = float((counts.counts * post).sum())
        if CLAMP < fit.params.p < 1 - CLAMP:
            assert mass == pytest.approx(fit.params.p * counts.total, rel=1e-12)

    def test_permutation_invariance(self):
        truth = LinkageParams((0.9, 0.75, 0.95, 0.8), (0.05, 0.2, 0.1, 0.01), 0.02)
        counts = expected_counts(truth, 10**5)
        order = [2, 0, 3, 1]
        a = fit_em(counts)
        b = fit_em(counts.permuted(order))
        np.testing.assert_allclose(b.params.m, [a.params.m[i] for i in order], atol=1e-9)
        np.testing.assert_allclose(b.params.u, [a.params.u[i] for i in order], atol=1e-9)
        assert b.params.p == pytest.approx(a.params.p, abs=1e-12)

    def test_label_switching_is_resolved(self):
        truth = LinkageParams((0.9, 0.85, 0.8), (0.1, 0.2, 0.15), 0.1)
        counts = expected_counts(truth, 10**5)
        flipped = LinkageParams(truth.u, truth.m, 0.9)
        fit = fit_em(counts, EmConfig(init=flipped))
        assert fit.swapped
        assert sum(fit.params.m) > sum(fit.params.u)
        assert fit.params.p == pytest.approx(0.1, abs=1e-3)

    def test_supervised_estimates_are_stationary_when_separated(self):
        # matches always agree on everything, non-matches never do
        pairs = [(1, 1, 1)] * 40 + [(0, 0, 0)] * 960
        labels = np.array([1] * 40 + [0] * 960)
        x = np.array(pairs)
        sup = LinkageParams(
            tuple(np.clip(x[labels == 1].mean(0), CLAMP, 1 - CLAMP)),
            tuple(np.clip(x[labels == 0].mean(0), CLAMP, 1 - CLAMP)),
            labels.mean(),
        )
        fit = fit_em(aggregate_pairs(pairs), EmConfig(init=sup))
        np.testing.assert_allclose(fit.params.m, sup.m, atol=1e-7)
        np.testing.assert_allclose(fit.params.u, sup.u, atol=1e-7)
        assert fit.params.p == pytest.approx(sup.p, abs=1e-7)

    def test_supervised_estimates_near_stationary_with_noise(self):
        rng = np.random.default_rng(11)
        m = np.array([0.95, 0.9, 0.97, 0.92, 0.9, 0.94])
        u = np.full(6, 0.005)
        labels = rng.random(20000) < 0.02
        x = (rng.random((20000, 6)) < np.where(labels[:, None], m, u)).astype(int)
        sup = LinkageParams(tuple(x[labels].mean(0)), tuple(x[~labels].mean(0)), labels.mean())
        fit = fit_em(aggregate_pairs(map(tuple, x)), EmConfig(init=sup))
        np.testing.assert_allclose(fit.params.m, sup.m, atol=5e-3)
        np.testing.assert_allclose(fit.params.u, sup.u, atol=5e-4)
        assert fit.params.p == pytest.approx(sup.p, abs=5e-4)

    def test_k_mismatch(self):
        counts = aggregate_pairs([(1, 0)])
        with pytest.raises(ShapeError):
            fit_em(counts, EmConfig(init=LinkageParams((0.9,), (0.1,), 0.1)))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            EmConfig(tol=0)
        with pytest.raises(ValueError):
            EmConfig(max_iter=0)
        with pytest.raises(ValueError):
            EmConfig(clamp=0.5)


class TestBatch:
    def test_rows_are_independent(self):
        rng = np.random.default_rng(3)
        k = 4
        truth_m = rng.uniform(0.7, 0.95, k)
        truth_u = rng.uniform(0.01, 0.2, k)
        rows = []
        for _ in range(6):
            n_m, n_u = rng.integers(20, 80), rng.integers(2000, 5000)
            rows.append(rng.multinomial(n_m, pattern_probs(truth_m)) + rng.multinomial(n_u, pattern_probs(truth_u)))
        counts = np.array(rows)
        init = (np.full((6, k), 0.9), np.full((6, k), 0.1), np.full(6, 0.01))
        together = fit_em_batch(pattern_matrix(k), counts, *init)
        for i in range(6):
            alone = fit_em_batch(pattern_matrix(k), counts[i:i + 1], init[0][:1], init[1][:1], init[2][:1])
            assert alone.iterations[0] == together.iterations[i]
            np.testing.assert_allclose(alone.p[0], together.p[i], rtol=1e-12)
            np.testing.assert_allclose(alone.m[0], together.m[i], rtol=1e-12)

    def test_single_fit_agrees_with_dense_batch(self):
        counts = expected_counts(LinkageParams((0.9, 0.8, 0.7), (0.1, 0.2, 0.3), 0.2), 10**4)
        fit = fit_em(counts)
        k = counts.k
        res = fit_em_batch(pattern_matrix(k), counts.dense()[None, :],
                           np.full((1, k), 0.9), np.full((1, k), 0.1), np.array([0.01]))
        # different start, same optimum
        assert res.p[0] == pytest.approx(fit.params.p, abs=1e-5)


class TestReport:
    def test_roundtrip(self):
        counts = expected_counts(LinkageParams((0.9, 0.8), (0.1, 0.2), 0.2), 10**4)
        fit = fit_em(counts)
        text = format_report(fit_report_fields(fit))
        parsed = parse_report(text)
        assert set(parsed) == {"p_hat", "m_1", "m_2", "u_1", "u_2", "iterations", "converged", "final_loglik"}
        assert params_from_report(parsed) == fit.params

    def test_incomplete(self):
        with pytest.raises(ParseError):
            params_from_report({"m_1": "0.9"})
        with pytest.raises(ParseError):
            parse_report("no equals sign\n")

"""Adaptive patch selection against independently written brute-force oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from efficientmil import aps
from efficientmil.errors import DomainError, EmptyBagError
from efficientmil.numeric import sigmoid


# --- oracles: straight-line reimplementations, no shared code paths ---------

def oracle_relevance(logits):
    n, c = logits.shape
    out = np.empty(n)
    for i in range(n):
        if c == 1:
            out[i] = 1.0 / (1.0 + math.exp(-logits[i, 0]))
        else:
            e = np.exp(logits[i] - logits[i].max())
            out[i] = float((e / e.sum()).max())
    return out


def oracle_diversity(features):
    n = features.shape[0]
    if n == 1:
        return np.ones(1)
    norms = np.linalg.norm(features, axis=1)
    out = np.empty(n)
    for i in range(n):
        total = 0.0
        for j in range(n):
            if j == i:
                continue
            if norms[i] == 0.0 or norms[j] == 0.0:
                total += 0.0
            else:
                total += float(features[i] @ features[j]) / (norms[i] * norms[j])
        out[i] = 1.0 - total / (n - 1)
    return out


def oracle_uncertainty(logits):
    n, c = logits.shape
    out = np.empty(n)
    for i in range(n):
        if c == 1:
            p = 1.0 / (1.0 + math.exp(-logits[i, 0]))
            dist = [p, 1.0 - p]
        else:
            e = np.exp(logits[i] - logits[i].max())
            dist = (e / e.sum()).tolist()
        out[i] = -sum(q * math.log(q + 1e-8) for q in dist)
    return out


def oracle_select(s_final, lam):
    order = sorted(range(len(s_final)), key=lambda i: (-s_final[i], i))
    return order[: min(lam, len(s_final))]


# --- examples ----------------------------------------------------------------

class TestRelevance:
    def test_binary_logit_zero(self):
        assert aps.relevance_scores(np.array([[0.0]]))[0] == 0.5

    def test_binary_closed_form(self):
        assert abs(aps.relevance_scores(np.array([[np.log(3.0)]]))[0] - 0.75) < 1e-12

    def test_two_class_uniform(self):
        assert abs(aps.relevance_scores(np.array([[2.0, 2.0]]))[0] - 0.5) < 1e-12

    def test_zero_classes_rejected(self):
        with pytest.raises(DomainError):
            aps.relevance_scores(np.zeros((3, 0)))


class TestDiversity:
    def test_orthonormal_construction(self):
        e1 = [1.0, 0.0, 0.0]
        e2 = [0.0, 1.0, 0.0]
        s = aps.diversity_scores(np.array([e1, e2, e1]))
        assert np.allclose(s, [0.5, 1.0, 0.5], atol=1e-12)

    def test_identical_rows(self):
        s = aps.diversity_scores(np.array([[1.0, 2.0], [1.0, 2.0]]))
        assert np.allclose(s, [0.0, 0.0], atol=1e-12)

    def test_matches_bruteforce(self, rng):
        f = rng.standard_normal((8, 5))
        assert np.max(np.abs(aps.diversity_scores(f) - oracle_diversity(f))) < 1e-6

    def test_scale_invariance(self, rng):
        f = rng.standard_normal((7, 4))
        for c in (0.5, 3.0, 117.0):
            assert np.max(np.abs(aps.diversity_scores(f) - aps.diversity_scores(f * c))) < 1e-6

    def test_range(self, rng):
        s = aps.diversity_scores(rng.standard_normal((30, 6)))
        assert (s >= 0.0).all() and (s <= 2.0).all()


class TestUncertainty:
    def test_binary_balanced_is_ln2(self):
        s = aps.uncertainty_scores(np.array([[0.0]]))
        assert abs(s[0] - 0.693147) < 1e-5

    def test_degenerate_distribution(self):
        # p = (1, 0): only the epsilon inside the log keeps this off exactly 0
        p = np.array([[50.0, 0.0]])  # softmax -> (1, ~0)
        s = aps.uncertainty_scores(p)
        assert abs(s[0]) < 1e-7

    def test_three_class_matches_direct_formula(self, rng):
        logits = rng.standard_normal((10, 3))
        assert np.max(np.abs(aps.uncertainty_scores(logits) - oracle_uncertainty(logits))) < 1e-9

    def test_binary_maximal_at_zero_and_decreasing(self):
        grid = np.linspace(0.0, 6.0, 25)
        ent = aps.uncertainty_scores(grid.reshape(-1, 1))
        assert abs(ent[0] - math.log(2.0)) < 1e-6
        assert np.all(np.diff(ent) < 0)
        neg = aps.uncertainty_scores(-grid.reshape(-1, 1))
        assert np.allclose(ent, neg, atol=1e-12)


class TestSelect:
    def test_weighted_sum_example(self):
        s = aps.final_scores(np.array([0.75]), np.array([0.5]), np.array([0.693147]),
                             aps.APSWeights(1.0, 0.3, 0.3))
        assert abs(s[0] - 1.1079441) < 1e-7

    def test_tie_breaks_to_lower_index(self):
        result = aps.APSResult(
            s_rel=np.zeros(4), s_div=np.zeros(4), s_unc=np.zeros(4),
            s_final=np.array([0.9, 1.2, 0.9, 0.3]),
            selected=aps._top_lambda(np.array([0.9, 1.2, 0.9, 0.3]), 2),
            attention=np.zeros(4))
        assert result.selected == [1, 0]

    def test_random_bag_matches_full_sort_oracle(self, rng):
        feats = rng.standard_normal((64, 16))
        logits = rng.standard_normal((64, 1))
        result = aps.select(feats, logits, big_lambda=16)
        assert result.selected == oracle_select(result.s_final, 16)
        assert abs(result.attention.sum() - 1.0) < 1e-9
        assert min(result.s_final[result.selected]) >= max(
            np.delete(result.s_final, result.selected))

    def test_lambda_zero_rejected(self):
        with pytest.raises(DomainError):
            aps.select(np.ones((2, 2)), np.zeros((2, 1)), big_lambda=0)

    def test_empty_bag_rejected(self):
        with pytest.raises(EmptyBagError):
            aps.select(np.ones((0, 2)), np.zeros((0, 1)), big_lambda=1)

    def test_lambda_at_least_n_selects_everything(self, rng):
        feats = rng.standard_normal((5, 3))
        logits = rng.standard_normal((5, 1))
        result = aps.select(feats, logits, big_lambda=12)
        assert sorted(result.selected) == list(range(5))
        # still ordered by score
        assert list(result.s_final[result.selected]) == sorted(result.s_final, reverse=True)


class TestProperties:
    def test_permutation_equivariance(self, rng):
        feats = rng.standard_normal((20, 6))
        logits = rng.standard_normal((20, 1))
        base = aps.select(feats, logits, big_lambda=7)
        perm = rng.permutation(20)
        permuted = aps.select(feats[perm], logits[perm], big_lambda=7)
        for field in ("s_rel", "s_div", "s_unc", "s_final"):
            assert np.allclose(getattr(base, field)[perm], getattr(permuted, field), atol=1e-12)
        inverse = np.argsort(perm)
        assert {int(inverse[i]) for i in base.selected} == set(permuted.selected)

    def test_relevance_weight_monotonicity(self, rng):
        s_rel = rng.random(12)
        s_div = rng.random(12)
        s_unc = rng.random(12)
        lo = aps.final_scores(s_rel, s_div, s_unc, aps.APSWeights(1.0, 0.3, 0.3))
        hi = aps.final_scores(s_rel, s_div, s_unc, aps.APSWeights(2.5, 0.3, 0.3))
        for i in range(12):
            for j in range(12):
                if s_rel[i] > s_rel[j] and lo[i] >= lo[j]:
                    assert hi[i] > hi[j]

    @given(st.integers(0, 2 ** 31 - 1), st.integers(1, 3))
    @settings(max_examples=30, deadline=None)
    def test_oracle_equivalence_randomized(self, seed, c_kind):
        r = np.random.default_rng(seed)
        n = int(r.integers(1, 24))
        c = 1 if c_kind == 1 else int(c_kind)
        feats = r.standard_normal((n, int(r.integers(2, 9))))
        logits = r.standard_normal((n, c))
        lam = int(r.integers(1, n + 1))
        result = aps.select(feats, logits, big_lambda=lam)
        assert np.max(np.abs(result.s_rel - oracle_relevance(logits))) < 1e-6
        assert np.max(np.abs(result.s_div - oracle_diversity(feats))) < 1e-6
        assert np.max(np.abs(result.s_unc - oracle_uncertainty(logits))) < 1e-6
        assert result.selected == oracle_select(result.s_final, lam)


class TestStrategies:
    def test_topk_ranks_by_relevance_only(self, rng):
        feats = rng.standard_normal((10, 4))
        logits = rng.standard_normal((10, 1))
        result = aps.select_with_strategy(feats, logits, aps.APSWeights(), 4, "topk_relevance")
        expected = sorted(range(10), key=lambda i: (-result.s_rel[i], i))[:4]
        assert result.selected == expected

    def test_random_k_is_seeded_and_uniform_subset(self, rng):
        feats = rng.standard_normal((10, 4))
        logits = rng.standard_normal((10, 1))
        a = aps.select_with_strategy(feats, logits, aps.APSWeights(), 4, "random_k",
                                     np.random.default_rng(9))
        b = aps.select_with_strategy(feats, logits, aps.APSWeights(), 4, "random_k",
                                     np.random.default_rng(9))
        assert a.selected == b.selected and len(set(a.selected)) == 4

    def test_random_k_requires_rng(self, rng):
        with pytest.raises(DomainError):
            aps.select_with_strategy(np.ones((3, 2)), np.zeros((3, 1)), aps.APSWeights(),
                                     2, "random_k")


class TestCsv:
    def test_csv_shape_and_flags(self, rng):
        feats = rng.standard_normal((6, 3))
        result = aps.select(feats, rng.standard_normal((6, 1)), big_lambda=2)
        coords = np.arange(12).reshape(6, 2)
        text = aps.to_csv(result, coords)
        lines = text.strip().splitlines()
        assert lines[0] == "index,x,y,s_rel,s_div,s_unc,s_final,attention,selected"
        assert len(lines) == 7
        assert sum(int(line.split(",")[-1]) for line in lines[1:]) == 2

    def test_csv_without_coords(self, rng):
        feats = rng.standard_normal((3, 3))
        result = aps.select(feats, rng.standard_normal((3, 1)), big_lambda=1)
        header = aps.to_csv(result).splitlines()[0]
        assert header == "index,s_rel,s_div,s_unc,s_final,attention,selected"

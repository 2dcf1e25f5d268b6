import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from v2xdg import losses as L
from v2xdg.errors import EmptyBatch, NonFiniteInput, NonUnitEmbedding, ShapeMismatch
from v2xdg.gradcheck import grad_check

TAU = 0.07
LOG2 = 0.6931471805599453
NEG_LOG_1_5 = -0.4054651081081644
ORTHO_GROUP = 14.97886146627423        # log 2 + 1 / 0.07
# golden value: duplicated-entry batch below, cross-checked with scalar_aca_agent
DUPLICATED_GOLDEN = 1.4067012922143836


def unit_rows(rng, n, d):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def scalar_aca_agent(ids, S, A, tau):
    """Loop transcription of the agent-level formula, independent of the vectorized kernel."""
    def dot(u, v):
        return sum(a * b for a, b in zip(u, v))

    B = len(ids)
    total = 0.0
    for i in range(B):
        den = sum(math.exp(dot(S[i], S[j]) / tau) for j in range(B))
        den += sum(math.exp(dot(A[i], A[k]) / tau) for k in range(B))
        for p in range(B):
            if ids[p] != ids[i]:
                continue
            num = (math.exp(dot(S[i], S[p]) / tau) + math.exp(dot(S[i], A[p]) / tau)
                   + math.exp(dot(A[i], A[p]) / tau))
            total += math.log(num) - math.log(den)
    return -total / B


def scalar_aca_group(S, A, tau):
    def dot(u, v):
        return sum(a * b for a, b in zip(u, v))

    B = len(S)
    total = 0.0
    for i in range(B):
        den = sum(math.exp(dot(S[i], S[j]) / tau) for j in range(B))
        den += sum(math.exp(dot(A[i], A[k]) / tau) for k in range(B))
        total += dot(S[i], A[i]) / tau - math.log(den)
    return -total / B


class TestTwa:
    def test_identical_is_zero(self, rng):
        x = rng.standard_normal((4, 3, 3))
        assert L.l_pat(x, x.copy(), np.ones((3, 3))).value == 0.0
        assert L.l_ffa(x, x.copy()).value == 0.0

    def test_empty_trust_region(self, rng):
        r = L.l_pat(rng.standard_normal((4, 3, 3)), rng.standard_normal((4, 3, 3)), np.zeros((3, 3)))
        assert r.value == 0.0 and not r.grads["I_s"].any()

    def test_l_pat_brute_force(self, rng):
        a, b = rng.standard_normal((2, 4, 3, 3))
        T = (rng.random((3, 3)) < 0.5).astype(float)
        ref = 0.0
        for h in range(3):
            for w in range(3):
                for c in range(4):
                    ref += T[h, w] * abs(a[c, h, w] - b[c, h, w])
        assert L.l_pat(a, b, T).value == pytest.approx(ref, abs=1e-12)

    def test_l_ffa_unit_differences(self):
        assert L.l_ffa(np.ones((2, 2, 2)), np.zeros((2, 2, 2))).value == 8.0

    def test_subgradient_zero_at_kink(self):
        r = L.l_ffa(np.array([1.0, 2.0]), np.array([1.0, 0.0]))
        np.testing.assert_array_equal(r.grads["F_s"], [0.0, 1.0])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            L.l_ffa(np.zeros((2, 2)), np.zeros((2, 3)))
        with pytest.raises(ShapeMismatch):
            L.l_pat(np.zeros((2, 3, 3)), np.zeros((2, 3, 3)), np.zeros((2, 2)))

    def test_order_independent_sum(self, rng):
        x = rng.standard_normal(5000) * 10.0 ** rng.integers(-8, 8, 5000)
        y = np.zeros_like(x)
        perm = rng.permutation(x.size)
        assert L.l_ffa(x, y).value == L.l_ffa(x[perm], y[perm]).value


class TestEmbed:
    def test_constant_tensor(self):
        np.testing.assert_allclose(L.embed(np.full((4, 3, 3), 3.0)), [0.5] * 4, atol=1e-15)

    def test_unit_vector_unchanged(self):
        v = np.array([0.6, 0.8, 0.0])
        np.testing.assert_array_equal(L.embed(v), v)

    def test_scale_invariant(self, rng):
        x = rng.standard_normal((3, 2, 2))
        np.testing.assert_allclose(L.embed(10.0 * x), L.embed(x), atol=1e-15)

    def test_zero_maps_to_e1(self):
        np.testing.assert_array_equal(L.embed(np.zeros((3, 2, 2))), [1.0, 0.0, 0.0])


class TestAcaAgent:
    def test_single_entry_closed_form(self):
        e1 = np.array([[1.0, 0.0, 0.0]])
        r = L.aca_agent(L.AgentBatch(["a"], e1, e1), TAU)
        assert r.value == pytest.approx(NEG_LOG_1_5, abs=1e-12)

    def test_matches_scalar_reimplementation(self, rng):
        for _ in range(10):
            S, A = unit_rows(rng, 5, 4), unit_rows(rng, 5, 4)
            ids = list(rng.choice(["a", "b", "c"], size=5))
            got = L.aca_agent(L.AgentBatch(ids, S, A), TAU).value
            assert got == pytest.approx(scalar_aca_agent(ids, S.tolist(), A.tolist(), TAU), abs=1e-10)

    def test_duplicated_entries_golden(self):
        r = np.random.default_rng(7)
        v, w = unit_rows(r, 3, 5), unit_rows(r, 3, 5)
        ids = ["a", "b", "c"] * 2
        S, A = np.vstack([v, v]), np.vstack([w, w])
        got = L.aca_agent(L.AgentBatch(ids, S, A), TAU).value
        assert math.isfinite(got)
        assert got == pytest.approx(DUPLICATED_GOLDEN, abs=1e-12)
        assert got == pytest.approx(scalar_aca_agent(ids, S.tolist(), A.tolist(), TAU), abs=1e-10)

    def test_from_entries(self):
        e = np.array([1.0, 0.0])
        b = L.AgentBatch.from_entries([("x", e, e), ("y", e, e)])
        assert b.ids == ("x", "y") and b.positives() == [[0], [1]]

    def test_errors(self):
        with pytest.raises(EmptyBatch):
            L.AgentBatch.from_entries([])
        with pytest.raises(NonUnitEmbedding):
            L.aca_agent(L.AgentBatch(["a"], [[2.0, 0.0]], [[1.0, 0.0]]), TAU)

    def test_permutation_invariant(self, rng):
        S, A = unit_rows(rng, 6, 4), unit_rows(rng, 6, 4)
        ids = ["a", "b", "a", "c", "b", "d"]
        perm = rng.permutation(6)
        v1 = L.aca_agent(L.AgentBatch(ids, S, A), TAU).value
        v2 = L.aca_agent(L.AgentBatch([ids[i] for i in perm], S[perm], A[perm]), TAU).value
        assert v1 == pytest.approx(v2, abs=1e-10)

    def test_cross_terms_raise_loss(self, rng):
        S, A = unit_rows(rng, 4, 4), unit_rows(rng, 4, 4)
        ids = ["a", "b", "c", "d"]
        plain = L.aca_agent_arrays(ids, S, A, TAU).value
        crossed = L.aca_agent_arrays(ids, S, A, TAU, cross_terms=True).value
        assert crossed > plain


class TestAcaGroup:
    def test_identical_single_group(self):
        for tau in (0.07, 0.5, 3.0):
            e = np.array([[0.6, 0.8]])
            assert abs(L.aca_group(L.GroupBatch(e, e), tau).value - LOG2) < 1e-12

    def test_orthogonal_single_group(self):
        r = L.aca_group(L.GroupBatch([[1.0, 0.0]], [[0.0, 1.0]]), TAU)
        assert r.value == pytest.approx(ORTHO_GROUP, abs=1e-12)

    def test_matches_scalar(self, rng):
        S, A = unit_rows(rng, 4, 6), unit_rows(rng, 4, 6)
        got = L.aca_group(L.GroupBatch(S, A), TAU).value
        assert got == pytest.approx(scalar_aca_group(S.tolist(), A.tolist(), TAU), abs=1e-10)

    def test_permutation_invariant(self, rng):
        S, A = unit_rows(rng, 5, 3), unit_rows(rng, 5, 3)
        perm = rng.permutation(5)
        v1 = L.aca_group(L.GroupBatch(S, A), TAU).value
        v2 = L.aca_group(L.GroupBatch(S[perm], A[perm]), TAU).value
        assert v1 == pytest.approx(v2, abs=1e-10)

    def test_empty(self):
        with pytest.raises(EmptyBatch):
            L.GroupBatch(np.zeros((0, 3)), np.zeros((0, 3)))


def _bce(x, t):
    return float(np.sum(np.logaddexp(0.0, x) - t * x))


class TestDetectionLosses:
    def test_confident_correct(self):
        assert L.focal_loss(np.array([30.0]), np.array([1.0])).value < 1e-9

    def test_gamma0_alpha1_is_bce_on_positives(self, rng):
        x = rng.standard_normal(20)
        t = np.ones(20)
        assert L.focal_loss(x, t, 1.0, 0.0).value == pytest.approx(_bce(x, t), rel=1e-12)

    def test_gamma0_alpha_half_is_half_bce(self, rng):
        x = rng.standard_normal(30) * 3
        t = (rng.random(30) < 0.5).astype(float)
        assert L.focal_loss(x, t, 0.5, 0.0).value == pytest.approx(0.5 * _bce(x, t), rel=1e-12)

    def test_focal_mean_reduction(self, rng):
        x, t = rng.standard_normal(10), (rng.random(10) < 0.5).astype(float)
        s = L.focal_loss(x, t).value
        assert L.focal_loss(x, t, reduction="mean").value == pytest.approx(s / 10)

    def test_smooth_l1_values(self):
        assert L.smooth_l1(np.array([3.0]), np.array([1.0]), 1.0).value == 1.5
        assert L.smooth_l1(np.ones(4), np.ones(4)).value == 0.0

    def test_smooth_l1_continuous_gradient_at_beta(self):
        for d in (1.0, -1.0):
            left = L.smooth_l1(np.array([d * (1 - 1e-12)]), np.zeros(1)).grads["pred"][0]
            at = L.smooth_l1(np.array([d]), np.zeros(1)).grads["pred"][0]
            assert left == pytest.approx(np.sign(d), abs=1e-11)
            assert at == np.sign(d)


class TestTotal:
    def test_zero(self):
        assert L.total_loss({k: 0.0 for k in L.PART_NAMES}, L.LossCoefficients()) == 0.0

    def test_unit_parts(self):
        assert abs(L.total_loss({k: 1.0 for k in L.PART_NAMES}, L.LossCoefficients()) - 3.12) < 1e-12

    def test_non_finite(self):
        with pytest.raises(NonFiniteInput):
            L.total_loss({"pat": math.nan}, L.LossCoefficients())

    @settings(max_examples=50)
    @given(st.lists(st.floats(-1e6, 1e6), min_size=6, max_size=6))
    def test_linear(self, vals):
        c = L.LossCoefficients()
        parts = dict(zip(L.PART_NAMES, vals))
        doubled = {k: 2 * v for k, v in parts.items()}
        assert L.total_loss(doubled, c) == pytest.approx(2 * L.total_loss(parts, c), rel=1e-12, abs=1e-9)


@pytest.mark.parametrize("target", ["l_pat", "l_ffa", "aca_agent", "aca_group", "focal_loss", "smooth_l1", "embed"])
def test_kernel_gradients(target):
    res = grad_check(target, trials=20, seed=3)
    assert res.max_rel_err < 1e-5, res

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flora.adapters import conv_weight_to_matrix
from flora.analysis import (amplification_factor, budget_csv, budget_table, locality_dispersion,
                            matched_lora_rank, optimal_core)


def test_amp_diagonal_examples():
    d = np.diag([3.0, 4.0])
    assert amplification_factor(d, d, 2).factor == 1.0
    assert amplification_factor(d, d, 1).factor == 1.25


def test_amp_zero_delta_and_zero_projection():
    rep = amplification_factor(np.zeros((3, 3)), np.eye(3), 2)
    assert (rep.delta_frob, rep.factor) == (0.0, 0.0)
    delta = np.zeros((2, 2))
    delta[0, 0] = 1.0
    frozen = np.zeros((2, 2))
    frozen[1, 1] = 1.0
    rep = amplification_factor(delta, frozen, 1)
    assert rep.infinite and rep.to_dict()["factor"] is None


def test_amp_matches_dense_reference():
    rng = np.random.default_rng(0)
    w = rng.standard_normal((6, 6))
    delta = rng.standard_normal((6, 2)) @ rng.standard_normal((2, 6))
    u, _, vt = np.linalg.svd(delta)
    expected = np.linalg.norm(delta) / np.linalg.norm(u[:, :2].T @ w @ vt[:2].T)
    assert amplification_factor(delta, w, 2).factor == pytest.approx(expected, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), c=st.floats(0.01, 100) | st.floats(-100, -0.01),
       r=st.integers(1, 5))
def test_amp_scale_law(seed, c, r):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((5, 6))
    delta = rng.standard_normal((5, 6))
    base = amplification_factor(delta, w, r).factor
    assert amplification_factor(c * delta, w, r).factor == pytest.approx(abs(c) * base, rel=1e-9)


def test_optimal_core_identity_and_exact_fit():
    target = np.random.default_rng(1).standard_normal((3, 4))
    np.testing.assert_allclose(optimal_core(np.eye(3), np.eye(4), target), target, atol=1e-14)
    rng = np.random.default_rng(2)
    a, _ = np.linalg.qr(rng.standard_normal((7, 3)))
    b, _ = np.linalg.qr(rng.standard_normal((5, 2)))
    g = rng.standard_normal((3, 2))
    np.testing.assert_allclose(optimal_core(a, b, a @ g @ b.T), g, atol=1e-10)


def test_optimal_core_is_local_minimum():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((6, 2)), rng.standard_normal((5, 3))
    target = rng.standard_normal((6, 5))
    g = optimal_core(a, b, target)
    best = np.linalg.norm(a @ g @ b.T - target)
    for _ in range(1000):
        d = rng.standard_normal(g.shape)
        d *= 1e-3 / np.linalg.norm(d)
        assert best <= np.linalg.norm(a @ (g + d) @ b.T - target)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_optimal_core_residual_orthogonality(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((6, 3)), rng.standard_normal((5, 2))
    target = rng.standard_normal((6, 5))
    resid = a @ optimal_core(a, b, target) @ b.T - target
    for _ in range(5):
        probe = a @ rng.standard_normal((3, 2)) @ b.T
        assert abs(np.sum(resid * probe)) <= 1e-9


def enumerate_positions(d_in, d_out, k):
    # locate every weight entry in the reshaped matrix by tagging it with a unique id
    ids = np.arange(d_in * d_out * k * k, dtype=float).reshape(d_in, d_out, k, k)
    m = conv_weight_to_matrix(ids)
    where = {}
    for r in range(m.shape[0]):
        for c in range(m.shape[1]):
            where[int(m[r, c])] = (r, c)
    return ids.astype(int), where, m.shape[1]


@pytest.mark.parametrize("d_in,d_out,k", [(1, 1, 3), (2, 2, 3), (2, 3, 2), (3, 1, 1)])
def test_locality_against_enumeration(d_in, d_out, k):
    ids, where, ncols = enumerate_positions(d_in, d_out, k)
    expected = []
    for i in range(d_in):
        for o in range(d_out):
            for p in range(k):
                for q in range(k):
                    for p2, q2 in ((p + 1, q), (p, q + 1)):
                        if p2 < k and q2 < k:
                            (r1, c1), (r2, c2) = where[ids[i, o, p, q]], where[ids[i, o, p2, q2]]
                            expected.append((abs(r2 - r1) + abs(c2 - c1),
                                             abs(r2 * ncols + c2 - r1 * ncols - c1)))
    rep = locality_dispersion(d_in, d_out, k)
    assert [(p["manhattan"], p["flat"]) for p in rep.pairs] == expected
    assert rep.max_separation == max((e[0] for e in expected), default=0)
    assert rep.max_flat_separation == max((e[1] for e in expected), default=0)


def test_locality_small_cases():
    assert locality_dispersion(4, 5, 1).pairs == []
    rep = locality_dispersion(1, 1, 3)
    assert len(rep.pairs) == 12
    assert rep.max_separation == 1 and rep.mean_flat_separation == 2.0
    rep = locality_dispersion(2, 2, 3)
    assert len(rep.pairs) == 48 and rep.max_flat_separation == 6


def test_budget_table_examples():
    rows = budget_table([{"shape": (64, 64, 3, 3), "r": 4, "r3": 2}])
    flora, lora = rows
    assert (flora.count, lora.count, flora.ratio_vs_lora) == (588, 1536, 0.3828125)
    flora, lora = budget_table([{"shape": (128, 128), "r": 8}])
    assert flora.ratio_vs_lora == 2112 / 2048 > 1
    text = budget_csv(rows)
    assert text.splitlines()[1] == "conv,64x64x3x3,4x4x2,flora,588,0.3828125"


def test_degenerate_budget_allowed():
    flora, lora = budget_table([{"shape": (4, 4, 3, 3), "r": 4, "r3": 3}])
    assert flora.count >= lora.count


def test_matched_lora_rank():
    assert matched_lora_rank((8, 8, 3, 3), 42) == 1
    assert matched_lora_rank((64, 64, 3, 3), 1536) == 4
    assert matched_lora_rank((128, 128), 2112) == 8

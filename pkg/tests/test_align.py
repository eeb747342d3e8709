import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from dtts import align


def random_attention(rng, n_frames, n_tokens):
    logits = rng.standard_normal((n_frames, n_tokens)) * 2
    return torch.log_softmax(torch.from_numpy(logits), dim=-1)


def test_soft_alignment_singleton_and_identical_keys():
    q = torch.randn(1, 5, 4, dtype=torch.float64)
    one = align.soft_alignment(q, torch.randn(1, 1, 4, dtype=torch.float64))
    assert torch.all(one.exp() == 1.0)
    k = torch.randn(1, 1, 4, dtype=torch.float64).repeat(1, 3, 1)
    uniform = align.soft_alignment(q, k).exp()
    assert torch.allclose(uniform, torch.full_like(uniform, 1 / 3), atol=1e-15)


def test_soft_alignment_matches_direct_computation():
    rng = np.random.default_rng(0)
    q, k = rng.standard_normal((6, 3)), rng.standard_normal((4, 3))
    got = align.soft_alignment(torch.from_numpy(q)[None], torch.from_numpy(k)[None])[0].exp().numpy()
    for t in range(6):
        e = np.array([-np.sum((q[t] - k[i]) ** 2) for i in range(4)])
        np.testing.assert_allclose(got[t], np.exp(e) / np.exp(e).sum(), atol=1e-12)
    assert np.allclose(got.sum(1), 1.0)


def test_soft_alignment_masks_padding():
    q = torch.randn(1, 4, 3, dtype=torch.float64)
    k = torch.randn(1, 3, 3, dtype=torch.float64)
    mask = torch.tensor([[True, True, False]])
    full = align.soft_alignment(q, k[:, :2])
    padded = align.soft_alignment(q, k, mask)
    assert torch.allclose(full, padded[..., :2])
    assert torch.all(padded[..., 2] == align.NEG)


# -- forward sum -------------------------------------------------------------

def test_forward_sum_trivial_cases():
    assert float(align.forward_sum_loss(torch.zeros(1, 1, 1), [1], [1])[0]) == 0.0
    a = torch.tensor([[[0.6], [0.3]]], dtype=torch.float64)
    got = float(align.forward_sum_loss(a.log(), [2], [1])[0])
    assert got == pytest.approx(-math.log(0.6 * 0.3) / 2, abs=1e-15)


def test_forward_sum_three_by_two():
    rng = np.random.default_rng(1)
    la = random_attention(rng, 3, 2)
    got = float(align.forward_sum_loss(la[None], [3], [2])[0])
    assert got == pytest.approx(oracles.forward_sum_oracle(la.exp().numpy()), abs=1e-12)


def test_forward_sum_all_small_instances():
    rng = np.random.default_rng(2)
    for t in range(1, 7):
        for n in range(1, min(t, 3) + 1):
            for _ in range(3):
                la = random_attention(rng, t, n)
                got = float(align.forward_sum_loss(la[None], [t], [n])[0])
                assert abs(got - oracles.forward_sum_oracle(la.exp().numpy())) < 1e-8


def test_forward_sum_batched_padding_invariant():
    rng = np.random.default_rng(3)
    items = [random_attention(rng, 6, 3), random_attention(rng, 4, 2), random_attention(rng, 5, 1)]
    batch = torch.full((3, 6, 3), align.NEG, dtype=torch.float64)
    for b, la in enumerate(items):
        batch[b, :la.shape[0], :la.shape[1]] = la
    got = align.forward_sum_loss(batch, [6, 4, 5], [3, 2, 1])
    for b, la in enumerate(items):
        single = align.forward_sum_loss(la[None], [la.shape[0]], [la.shape[1]])[0]
        assert abs(float(got[b]) - float(single)) < 1e-12


def test_forward_sum_nonnegative_and_zero_for_certain_path():
    la = torch.full((4, 2), -1e4, dtype=torch.float64)
    la[:2, 0] = 0.0
    la[2:, 1] = 0.0
    assert float(align.forward_sum_loss(la[None], [4], [2])[0]) == pytest.approx(0.0, abs=1e-12)
    rng = np.random.default_rng(4)
    for _ in range(20):
        assert float(align.forward_sum_loss(random_attention(rng, 5, 3)[None], [5], [3])[0]) >= 0


def test_forward_sum_infeasible():
    with pytest.raises(align.InfeasibleAlignmentError):
        align.forward_sum_loss(torch.zeros(1, 2, 3), [2], [3])


# -- viterbi -----------------------------------------------------------------

def test_viterbi_block_diagonal():
    a = np.full((7, 3), 1e-6)
    a[:2, 0] = a[2:5, 1] = a[5:, 2] = 1.0
    assert align.viterbi_durations(np.log(a)).tolist() == [2, 3, 2]


def test_viterbi_square_is_all_ones():
    rng = np.random.default_rng(5)
    assert align.viterbi_durations(random_attention(rng, 4, 4).numpy()).tolist() == [1, 1, 1, 1]


def test_viterbi_infeasible():
    with pytest.raises(align.InfeasibleAlignmentError):
        align.viterbi_durations(np.zeros((2, 3)))


def test_viterbi_matches_exhaustive_search():
    rng = np.random.default_rng(6)
    for t in range(1, 7):
        for n in range(1, min(t, 3) + 1):
            for _ in range(4):
                la = random_attention(rng, t, n).numpy()
                d = align.viterbi_durations(la)
                score = oracles.path_log_score(la, align.durations_to_path(d))
                assert abs(score - oracles.best_path_score(la)) < 1e-8


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 20), st.integers(1, 8), st.integers(0, 10_000))
def test_viterbi_durations_cover_frames(t, n, seed):
    if n > t:
        t, n = n, t
    la = random_attention(np.random.default_rng(seed), t, n).numpy()
    d = align.viterbi_durations(la)
    assert d.sum() == t and np.all(d >= 1) and len(d) == n
    assert np.array_equal(d, align.viterbi_durations(la.copy()))


# -- binarization ------------------------------------------------------------

def test_binarization_one_hot_is_zero():
    d = [2, 1, 3]
    path = align.durations_to_path(d)
    la = torch.full((6, 3), -1e4, dtype=torch.float64)
    la[torch.arange(6), torch.as_tensor(path)] = 0.0
    assert float(align.binarization_loss(la[None], [d], [6])[0]) == 0.0


def test_binarization_uniform_two_tokens():
    la = torch.full((1, 5, 2), math.log(0.5), dtype=torch.float64)
    assert float(align.binarization_loss(la, [[3, 2]], [5])[0]) == pytest.approx(math.log(2), abs=1e-15)


def test_binarization_matches_direct_sum():
    rng = np.random.default_rng(7)
    la = random_attention(rng, 6, 3)
    d = [1, 3, 2]
    expected = -sum(float(la[t, i]) for t, i in enumerate([0, 1, 1, 1, 2, 2])) / 6
    assert float(align.binarization_loss(la[None], [d], [6])[0]) == pytest.approx(expected, abs=1e-14)


def test_diagonal_prior_peaks_on_diagonal():
    prior = align.diagonal_log_prior(12, 4)
    assert prior.shape == (12, 4)
    assert align.viterbi_durations(prior).tolist() == [3, 3, 3, 3]

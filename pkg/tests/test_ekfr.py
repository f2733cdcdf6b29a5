import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fdcheck import fd_relative_errors
from textreid.ekfr import (
    DegenerateInputError,
    EkfrProjection,
    cosine_sim,
    ekfr_image,
    ekfr_text,
    similarity_matrix,
)


def _identity_proj(d):
    proj = EkfrProjection(d).double()
    with torch.no_grad():
        for lin in (proj.w_q, proj.w_k, proj.w_v):
            lin.weight.copy_(torch.eye(d))
    return proj


def brute_force(tokens, labels, proj, text, renormalize=False):
    """Loop oracle: cosine similarities, masked softmax weights, residual aggregation."""
    wq, wk, wv = (lin.weight.detach().numpy() for lin in (proj.w_q, proj.w_k, proj.w_v))
    f = tokens.detach().numpy()
    n = len(f)
    out = np.zeros_like(f)
    alpha = np.zeros((n, n))
    for j in range(n):
        s = np.empty(n)
        for i in range(n):
            q, k = wq @ f[j], wk @ f[i]
            s[i] = q @ k / (np.linalg.norm(q) * np.linalg.norm(k))
        if text and renormalize:
            keep = np.array([labels[i] == labels[j] for i in range(n)])
            e = np.where(keep, np.exp(s - s.max()), 0.0)
            a = e / e.sum()
        else:
            e = np.exp(s - s.max())
            a = e / e.sum()
            if text:
                a = a * np.array([labels[i] == labels[j] for i in range(n)])
        alpha[j] = a
        out[j] = f[j] + sum(a[i] * (wv @ f[i]) for i in range(n) if i != j)
    return out, alpha


def test_cosine_example():
    proj = _identity_proj(2)
    a = torch.tensor([1.0, 0.0], dtype=torch.float64)
    b = torch.tensor([1.0, 1.0], dtype=torch.float64)
    assert float(cosine_sim(a, b, proj).detach()) == pytest.approx(2**-0.5, abs=1e-12)


def test_two_captions_same_identity():
    proj = _identity_proj(2)
    t = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    out, alpha = ekfr_text(t, torch.tensor([3, 3]), proj, return_weights=True)
    # equal off-diagonal cosine (0) and self-cosine (1): alpha_01 = 1 / (1 + e)
    a = 1.0 / (1.0 + np.e)
    assert float(alpha[0, 1].detach()) == pytest.approx(a, abs=1e-12)
    assert torch.allclose(out[0], torch.tensor([1.0, a], dtype=torch.float64), atol=1e-12)


def test_different_identities_receive_nothing():
    torch.manual_seed(0)
    proj = EkfrProjection(5).double()
    t = torch.randn(4, 5, dtype=torch.float64)
    out = ekfr_text(t, torch.tensor([0, 1, 2, 3]), proj)
    assert torch.equal(out, t)


def test_text_matches_brute_force():
    torch.manual_seed(1)
    proj = EkfrProjection(6).double()
    t = torch.randn(8, 6, dtype=torch.float64)
    labels = torch.tensor([0, 0, 1, 1, 1, 2, 3, 3])
    for renorm in (False, True):
        out, alpha = ekfr_text(t, labels, proj, renormalize=renorm, return_weights=True)
        ref, ref_alpha = brute_force(t, labels.tolist(), proj, text=True, renormalize=renorm)
        np.testing.assert_allclose(out.detach().numpy(), ref, atol=1e-10)
        np.testing.assert_allclose(alpha.detach().numpy(), ref_alpha, atol=1e-12)


def test_renormalized_rows_sum_to_one_within_identity():
    torch.manual_seed(2)
    proj = EkfrProjection(4).double()
    labels = torch.tensor([0, 0, 0, 1, 1])
    _, alpha = ekfr_text(torch.randn(5, 4, dtype=torch.float64), labels, proj, True, True)
    assert torch.allclose(alpha.sum(1), torch.ones(5, dtype=torch.float64), atol=1e-12)
    _, alpha = ekfr_text(torch.randn(5, 4, dtype=torch.float64), labels, proj, False, True)
    assert bool((alpha.sum(1) < 1).all())


def test_image_matches_brute_force_and_row_sums():
    torch.manual_seed(3)
    proj = EkfrProjection(6).double()
    t = torch.randn(7, 6, dtype=torch.float64)
    out, alpha = ekfr_image(t, proj, return_weights=True)
    ref, _ = brute_force(t, None, proj, text=False)
    np.testing.assert_allclose(out.detach().numpy(), ref, atol=1e-10)
    assert torch.allclose(alpha.sum(1), torch.ones(7, dtype=torch.float64), atol=1e-12)


def test_image_path_ignores_labels_and_needs_two():
    proj = EkfrProjection(3)
    with pytest.raises(ValueError):
        ekfr_image(torch.randn(1, 3), proj)


def test_zero_vector_rejected():
    proj = _identity_proj(3)
    t = torch.tensor([[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]], dtype=torch.float64)
    with pytest.raises(DegenerateInputError):
        ekfr_text(t, torch.tensor([0, 0]), proj)
    with pytest.raises(DegenerateInputError):
        ekfr_image(t, proj)


def test_permutation_equivariance():
    torch.manual_seed(4)
    proj = EkfrProjection(5).double()
    t = torch.randn(6, 5, dtype=torch.float64)
    labels = torch.tensor([0, 1, 0, 1, 2, 2])
    perm = torch.randperm(6)
    assert torch.allclose(ekfr_text(t, labels, proj)[perm], ekfr_text(t[perm], labels[perm], proj), atol=1e-12)
    assert torch.allclose(ekfr_image(t, proj)[perm], ekfr_image(t[perm], proj), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(2, 10), ids=st.integers(1, 5), seed=st.integers(0, 10_000))
def test_similarity_bounded(n, ids, seed):
    g = torch.Generator().manual_seed(seed)
    proj = EkfrProjection(4).double()
    t = torch.randn(n, 4, generator=g, dtype=torch.float64)
    s = similarity_matrix(t, proj)
    assert bool((s.abs() <= 1 + 1e-12).all())
    labels = torch.randint(0, ids, (n,), generator=g)
    _, alpha = ekfr_text(t, labels, proj, return_weights=True)
    assert bool((alpha[labels[:, None] != labels[None, :]] == 0).all())


def test_gradients_match_finite_differences(f64):
    torch.manual_seed(5)
    proj = EkfrProjection(4)
    t = torch.randn(4, 4)
    labels = torch.tensor([0, 0, 1, 1])
    w = torch.randn(4, 4)
    loss = lambda: ((ekfr_text(t, labels, proj) + ekfr_image(t, proj)) * w).sum()  # noqa: E731
    errs = fd_relative_errors(loss, proj.named_parameters())
    assert max(errs.values()) <= 1e-4, errs

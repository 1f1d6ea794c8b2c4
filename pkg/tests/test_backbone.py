from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from driftlm.backbone import (
    CorruptionKind,
    base_loss,
    corrupt,
    denoise_backward,
    denoise_forward,
    forward_tokens,
    init_params,
    param_items,
    params_from_vector,
    params_to_vector,
    sample,
    sample_batch,
)
from driftlm.numcore import InvalidInputError, finite_diff_grad, softmax_rows

from conftest import SMALL_MODEL, rel_err


# ---------------------------------------------------------------------------
# corruption


def test_corrupt_masked_t_to_one(rng):
    clean = rng.integers(0, 31, size=16)
    rec = corrupt(clean, 1.0 - 1e-12, CorruptionKind.MASKED, np.random.default_rng(1))
    assert np.all(rec.corrupted == 31)
    assert rec.predicted_positions.tolist() == list(range(16))


def test_corrupt_masked_t_to_zero(rng):
    clean = rng.integers(0, 31, size=16)
    rec = corrupt(clean, 1e-12, CorruptionKind.MASKED, np.random.default_rng(1))
    assert np.array_equal(rec.corrupted, clean)
    assert rec.predicted_positions.size == 0


def test_corrupt_masked_count_binomial():
    clean = np.arange(16) % 31
    counts = [
        corrupt(clean, 0.5, CorruptionKind.MASKED, rng).predicted_positions.size
        for rng in [np.random.default_rng(s) for s in range(10_000)]
    ]
    mean = float(np.mean(counts))
    sigma = math.sqrt(16 * 0.25 / 10_000)
    assert abs(mean - 8.0) <= 3 * sigma


def test_corrupt_masked_never_alters_unmasked(rng):
    clean = rng.integers(0, 31, size=16)
    for seed in range(50):
        rec = corrupt(clean, 0.5, CorruptionKind.MASKED, np.random.default_rng(seed))
        untouched = rec.corrupted != 31
        assert np.array_equal(rec.corrupted[untouched], clean[untouched])


def test_corrupt_uniform_predicts_everything(rng):
    clean = rng.integers(0, 31, size=16)
    rec = corrupt(clean, 0.3, CorruptionKind.UNIFORM, np.random.default_rng(0))
    assert rec.predicted_positions.tolist() == list(range(16))
    assert np.all(rec.corrupted < 31)


def test_corrupt_uniform_resample_marginal_is_uniform():
    # chi-square over resampled values at t ~ 1
    clean = np.zeros(16, dtype=np.int64)
    rng = np.random.default_rng(7)
    draws = []
    while len(draws) < 100_000:
        rec = corrupt(clean, 1.0 - 1e-12, CorruptionKind.UNIFORM, rng)
        draws.extend(rec.corrupted.tolist())
    counts = np.bincount(np.asarray(draws[:100_000]), minlength=31)
    expected = 100_000 / 31
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    # dof = 30; p > 0.001 corresponds to chi2 < 59.7
    assert chi2 < 59.7


def test_corrupt_rejects_bad_level(rng):
    clean = rng.integers(0, 31, size=16)
    for t in (0.0, 1.0, -0.5, 2.0):
        with pytest.raises(InvalidInputError):
            corrupt(clean, t, CorruptionKind.MASKED, np.random.default_rng(0))


def test_corrupt_rejects_mask_in_clean():
    with pytest.raises(InvalidInputError):
        corrupt(np.array([0, 31]), 0.5, CorruptionKind.MASKED, np.random.default_rng(0), 32)


# ---------------------------------------------------------------------------
# denoiser forward


def test_zero_params_give_uniform_predictions():
    cfg = SMALL_MODEL
    zeros = init_params(cfg, np.random.default_rng(0), init_std=0.0)
    fwd = denoise_forward(zeros, np.zeros(cfg.length, dtype=np.int64))
    assert np.all(fwd.logits == 0.0)
    assert np.allclose(softmax_rows(fwd.logits), 1.0 / cfg.vocab_size)


def test_tied_position_rows_commute_with_permutation(rng):
    cfg = SMALL_MODEL
    params = init_params(cfg, np.random.default_rng(5))
    tied = params_from_vector(params, params_to_vector(params))
    tied.pos_embed[:] = tied.pos_embed[0]
    tokens = rng.integers(0, cfg.vocab_size, size=cfg.length)
    perm = rng.permutation(cfg.length)
    direct = denoise_forward(tied, tokens[perm])
    permuted = denoise_forward(tied, tokens)
    assert np.allclose(direct.hidden2, permuted.hidden2[perm], atol=1e-12)
    assert np.allclose(direct.logits, permuted.logits[perm], atol=1e-12)


def test_forward_is_pure(small_params, rng):
    tokens = rng.integers(0, SMALL_MODEL.vocab_size, size=SMALL_MODEL.length)
    a = denoise_forward(small_params, tokens)
    b = denoise_forward(small_params, tokens)
    assert np.array_equal(a.logits, b.logits)
    assert np.array_equal(a.hidden1, b.hidden1)


def test_forward_batch_agrees_with_single(small_params, rng):
    tokens = rng.integers(0, SMALL_MODEL.vocab_size, size=(4, SMALL_MODEL.length))
    logits, _ = forward_tokens(small_params, tokens)
    for i in range(4):
        single = denoise_forward(small_params, tokens[i])
        assert np.allclose(logits[i], single.logits, atol=1e-12)


def test_forward_gradient_matches_finite_differences(small_params, rng):
    cfg = SMALL_MODEL
    tokens = rng.integers(0, cfg.vocab_size, size=cfg.length)
    fwd = denoise_forward(small_params, tokens)
    upstream = rng.normal(size=fwd.logits.shape)
    grads = denoise_backward(small_params, fwd, upstream)
    analytic = np.concatenate([grads[name].ravel() for name, _ in param_items(small_params)])

    def f(vec):
        p = params_from_vector(small_params, vec)
        return float(np.sum(upstream * denoise_forward(p, tokens).logits))

    fd = finite_diff_grad(f, params_to_vector(small_params), step=1e-5)
    assert rel_err(analytic, fd) <= 1e-5


# ---------------------------------------------------------------------------
# base loss


def test_base_loss_uniform_logits(small_params):
    cfg = SMALL_MODEL
    logits = np.zeros((cfg.length, cfg.vocab_size))
    clean = np.arange(cfg.length) % cfg.clean_vocab
    loss, _ = base_loss(logits, clean, np.arange(cfg.length))
    assert abs(loss - math.log(cfg.vocab_size)) < 1e-12


def test_base_loss_confident_prediction_is_tiny(rng):
    cfg = SMALL_MODEL
    clean = rng.integers(0, cfg.clean_vocab, size=cfg.length)
    logits = np.zeros((cfg.length, cfg.vocab_size))
    logits[np.arange(cfg.length), clean] = 1e4
    loss, grad = base_loss(logits, clean, np.arange(cfg.length))
    assert loss < 1e-8
    assert np.max(np.abs(grad)) < 1e-4


def test_base_loss_empty_positions():
    loss, grad = base_loss(np.ones((4, 6)), np.zeros(4, dtype=int), np.array([], dtype=int))
    assert loss == 0.0 and np.all(grad == 0.0)


def test_base_loss_gradient_matches_finite_differences(rng):
    cfg = SMALL_MODEL
    clean = rng.integers(0, cfg.clean_vocab, size=cfg.length)
    positions = np.array([0, 2, 3])
    logits = rng.normal(size=(cfg.length, cfg.vocab_size))
    _, grad = base_loss(logits, clean, positions)
    fd = finite_diff_grad(lambda l: base_loss(l, clean, positions)[0], logits, step=1e-5)
    assert rel_err(grad, fd) <= 1e-5


def test_base_loss_grad_zero_off_positions(rng):
    cfg = SMALL_MODEL
    clean = rng.integers(0, cfg.clean_vocab, size=cfg.length)
    positions = np.array([1, 4])
    _, grad = base_loss(rng.normal(size=(cfg.length, cfg.vocab_size)), clean, positions)
    off = np.setdiff1d(np.arange(cfg.length), positions)
    assert np.all(grad[off] == 0.0)


# ---------------------------------------------------------------------------
# sampler


def test_masked_sampler_full_nfe_commits_one_per_step(small_params):
    length = SMALL_MODEL.length
    counts = []
    seq = sample(
        small_params,
        CorruptionKind.MASKED,
        length,
        np.random.default_rng(0),
        on_forward=counts.append,
    )
    assert len(counts) == length
    assert np.all(seq < SMALL_MODEL.mask_index)


def test_masked_sampler_single_step(small_params):
    seq = sample(small_params, CorruptionKind.MASKED, 1, np.random.default_rng(0))
    assert np.all(seq < SMALL_MODEL.mask_index)


@pytest.mark.parametrize("kind", [CorruptionKind.MASKED, CorruptionKind.UNIFORM])
@pytest.mark.parametrize("nfe", [1, 2, 5])
def test_sampler_exact_nfe_and_mask_free(small_params, kind, nfe):
    calls = []
    seqs = sample_batch(
        small_params, kind, nfe, 3, np.random.default_rng(4), on_forward=calls.append
    )
    assert len(calls) == nfe
    assert np.all(seqs < SMALL_MODEL.mask_index)
    assert seqs.shape == (3, SMALL_MODEL.length)


def test_sampler_rejects_bad_nfe(small_params):
    with pytest.raises(InvalidInputError):
        sample(small_params, CorruptionKind.MASKED, 0, np.random.default_rng(0))
    with pytest.raises(InvalidInputError):
        sample(small_params, CorruptionKind.MASKED, SMALL_MODEL.length + 1, np.random.default_rng(0))


def test_sampler_deterministic_given_seed(small_params):
    a = sample_batch(small_params, CorruptionKind.UNIFORM, 3, 4, np.random.default_rng(11))
    b = sample_batch(small_params, CorruptionKind.UNIFORM, 3, 4, np.random.default_rng(11))
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# parameter plumbing


def test_params_vector_roundtrip(small_params):
    vec = params_to_vector(small_params)
    rebuilt = params_from_vector(small_params, vec)
    for (name_a, a), (name_b, b) in zip(param_items(small_params), param_items(rebuilt)):
        assert name_a == name_b
        assert np.array_equal(a, b)


@given(st.integers(min_value=0, max_value=2**32 - 1))
def test_init_params_finite(seed):
    params = init_params(SMALL_MODEL, np.random.default_rng(seed))
    for _, arr in param_items(params):
        assert np.all(np.isfinite(arr))

"""Tests for CTC, contrastive, diversity, the mixed objective, and diagnostics."""

from __future__ import annotations

import math
from itertools import product

import numpy as np
import pytest
import torch

from mixasr.acoustic import AcousticModel, EncoderConfig
from mixasr.errors import ConfigError, DataError, InfeasibleTargetError
from mixasr.objectives import (
    CodebookStats,
    LossWeights,
    codebook_stats,
    contrastive_loss,
    contrastive_step_losses,
    ctc_loss,
    diversity_loss,
    m2ds2_loss,
    min_frames_for_target,
    sample_distractors,
    self_supervised_loss,
)
from mixasr.seeding import derive_rng


def make_model(seed: int = 0, **overrides) -> AcousticModel:
    base = dict(
        vocab_size=5, feature_mode="features", feature_dim=6, model_dim=8,
        n_layers=1, n_heads=2, ffn_dim=16, max_positions=64,
        n_groups=2, codebook_size=4, code_dim=8, mask_prob=0.5, mask_span=3,
    )
    base.update(overrides)
    model = AcousticModel(EncoderConfig(**base))
    model.init_parameters(seed)
    return model


# ---------------------------------------------------------------- ctc


def _uniform_lp(t: int, v: int = 3) -> torch.Tensor:
    return torch.full((1, t, v), math.log(1.0 / v), dtype=torch.float64)


def test_ctc_uniform_single_label():
    # T=2, three labels: paths collapsing to "a" are (-,a), (a,-), (a,a) = 3/9
    loss = ctc_loss(_uniform_lp(2), [2], [[1]])
    assert loss.item() == pytest.approx(math.log(3.0), rel=1e-12)


def test_ctc_uniform_two_labels():
    # only the path (a, b) collapses to "ab": probability 1/9
    loss = ctc_loss(_uniform_lp(2), [2], [[1, 2]])
    assert loss.item() == pytest.approx(math.log(9.0), rel=1e-12)


def test_ctc_repeated_label_needs_separator():
    assert min_frames_for_target([1, 1]) == 3
    with pytest.raises(InfeasibleTargetError):
        ctc_loss(_uniform_lp(2), [2], [[1, 1]])
    ctc_loss(_uniform_lp(3), [3], [[1, 1]])  # feasible with a blank between


def test_ctc_empty_target_is_all_blank_path():
    loss = ctc_loss(_uniform_lp(3), [3], [[]])
    assert loss.item() == pytest.approx(3 * math.log(3.0), rel=1e-12)


def test_ctc_rejects_bad_labels():
    with pytest.raises(DataError):
        ctc_loss(_uniform_lp(3), [3], [[0]])  # blank as a target label
    with pytest.raises(DataError):
        ctc_loss(_uniform_lp(3), [3], [[7]])  # out of vocabulary
    with pytest.raises(DataError):
        ctc_loss(_uniform_lp(3), [4], [[1]])  # length exceeds frames
    with pytest.raises(DataError):
        ctc_loss(_uniform_lp(3), [3, 3], [[1]])  # batch mismatch


def _collapse(path: tuple[int, ...], blank: int = 0) -> tuple[int, ...]:
    out, prev = [], None
    for p in path:
        if p != prev and p != blank:
            out.append(p)
        prev = p
    return tuple(out)


def _ctc_oracle(lp: np.ndarray, target: list[int]) -> float:
    """Sum path probabilities by exhaustive enumeration."""
    t, v = lp.shape
    total = -np.inf
    for path in product(range(v), repeat=t):
        if _collapse(path) == tuple(target):
            total = np.logaddexp(total, sum(lp[i, p] for i, p in enumerate(path)))
    return -total


def test_ctc_matches_exhaustive_path_enumeration():
    rng = np.random.default_rng(42)
    checked = 0
    for _ in range(60):
        t = int(rng.integers(1, 7))
        logits = rng.normal(size=(t, 3))
        lp = torch.from_numpy(logits).log_softmax(dim=-1)
        n_labels = int(rng.integers(0, 4))
        target = [int(x) for x in rng.integers(1, 3, size=n_labels)]
        if min_frames_for_target(target) > t:
            with pytest.raises(InfeasibleTargetError):
                ctc_loss(lp.unsqueeze(0), [t], [target])
            continue
        got = ctc_loss(lp.unsqueeze(0), [t], [target]).item()
        want = _ctc_oracle(lp.numpy(), target)
        assert got == pytest.approx(want, rel=1e-6), (t, target)
        checked += 1
    assert checked >= 30


def test_ctc_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    logits = torch.from_numpy(rng.normal(size=(1, 5, 3))).requires_grad_(True)
    target = [1, 2, 1]

    def value() -> torch.Tensor:
        return ctc_loss(logits.log_softmax(dim=-1), [5], [target])

    loss = value()
    loss.backward()
    eps = 1e-6
    with torch.no_grad():
        flat = logits.view(-1)
        for idx in range(flat.numel()):
            orig = flat[idx].item()
            flat[idx] = orig + eps
            up = value().item()
            flat[idx] = orig - eps
            down = value().item()
            flat[idx] = orig
            fd = (up - down) / (2 * eps)
            an = logits.grad.view(-1)[idx].item()
            assert abs(fd - an) <= 1e-7 + 1e-4 * abs(an)


def test_ctc_batch_mean_and_permutation_invariance():
    rng = np.random.default_rng(9)
    lp = torch.from_numpy(rng.normal(size=(2, 6, 4))).log_softmax(dim=-1)
    t1, t2 = [1, 2], [3]
    joint = ctc_loss(lp, [6, 6], [t1, t2])
    a = ctc_loss(lp[:1], [6], [t1])
    b = ctc_loss(lp[1:], [6], [t2])
    assert joint.item() == pytest.approx((a.item() + b.item()) / 2, rel=1e-12)
    swapped = ctc_loss(lp.flip(0), [6, 6], [t2, t1])
    assert joint.item() == pytest.approx(swapped.item(), rel=1e-12)


def test_ctc_ignores_padding_beyond_length():
    rng = np.random.default_rng(10)
    lp_short = torch.from_numpy(rng.normal(size=(1, 4, 3))).log_softmax(dim=-1)
    pad = torch.full((1, 3, 3), 0.123).log_softmax(dim=-1)
    lp_padded = torch.cat([lp_short, pad], dim=1)
    a = ctc_loss(lp_short, [4], [[1, 2]])
    b = ctc_loss(lp_padded, [4], [[1, 2]])
    assert a.item() == pytest.approx(b.item(), rel=1e-12)


# ---------------------------------------------------------------- contrastive


def test_contrastive_uniform_candidates():
    # distractors identical to the target: softmax is uniform over 11 candidates
    c = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    t = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
    d = t.unsqueeze(1).repeat(1, 10, 1)
    loss = contrastive_loss(c, t, d, kappa=0.1)
    assert loss.item() == pytest.approx(math.log(11.0), rel=1e-9)


def test_contrastive_easy_case_near_zero():
    # true cosine 1, ten distractors at cosine -1, kappa 0.1
    c = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    t = torch.tensor([[2.0, 0.0]], dtype=torch.float64)  # scale ignored by cosine
    d = torch.tensor([[-1.0, 0.0]], dtype=torch.float64).unsqueeze(1).repeat(1, 10, 1)
    loss = contrastive_loss(c, t, d, kappa=0.1)
    assert loss.item() == pytest.approx(10 * math.exp(-20.0), rel=1e-3)


def test_contrastive_single_distractor_value():
    # true cosine 0.5, one distractor at cosine 0: ln(1 + e^{-5})
    c = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    t = torch.tensor([[0.5, math.sqrt(3) / 2]], dtype=torch.float64)
    d = torch.tensor([[[0.0, 1.0]]], dtype=torch.float64)
    loss = contrastive_loss(c, t, d, kappa=0.1)
    assert loss.item() == pytest.approx(math.log(1 + math.exp(-5.0)), rel=1e-9)


def test_contrastive_zero_distractors_zero_loss():
    c = torch.randn(3, 4, dtype=torch.float64)
    t = torch.randn(3, 4, dtype=torch.float64)
    steps = contrastive_step_losses(c, t, torch.zeros(3, 0, 4, dtype=torch.float64))
    assert torch.equal(steps, torch.zeros(3, dtype=torch.float64))


def test_contrastive_mean_over_steps():
    rng = np.random.default_rng(3)
    c = torch.from_numpy(rng.normal(size=(4, 5)))
    t = torch.from_numpy(rng.normal(size=(4, 5)))
    d = torch.from_numpy(rng.normal(size=(4, 3, 5)))
    steps = contrastive_step_losses(c, t, d)
    assert contrastive_loss(c, t, d).item() == pytest.approx(steps.mean().item(), rel=1e-12)
    assert steps.shape == (4,)
    assert (steps >= 0).all() or steps.min() > -1e-9  # cross entropy of the true class


def test_contrastive_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    c = torch.from_numpy(rng.normal(size=(3, 4))).requires_grad_(True)
    t = torch.from_numpy(rng.normal(size=(3, 4))).requires_grad_(True)
    d = torch.from_numpy(rng.normal(size=(3, 2, 4))).requires_grad_(True)
    loss = contrastive_loss(c, t, d, kappa=0.1)
    loss.backward()
    eps = 1e-6
    for tensor in (c, t, d):
        with torch.no_grad():
            flat = tensor.view(-1)
            grad = tensor.grad.view(-1)
            for idx in rng.choice(flat.numel(), size=4, replace=False):
                orig = flat[idx].item()
                flat[idx] = orig + eps
                up = contrastive_loss(c, t, d, kappa=0.1).item()
                flat[idx] = orig - eps
                down = contrastive_loss(c, t, d, kappa=0.1).item()
                flat[idx] = orig
                fd = (up - down) / (2 * eps)
                an = grad[idx].item()
                assert abs(fd - an) <= 1e-7 + 1e-4 * abs(an)


def test_contrastive_rejects_bad_inputs():
    c = torch.zeros(2, 3)
    with pytest.raises(ConfigError):
        contrastive_loss(c, c, torch.zeros(2, 1, 3), kappa=0.0)
    with pytest.raises(DataError):
        contrastive_loss(c, torch.zeros(3, 3), torch.zeros(2, 1, 3))
    with pytest.raises(DataError):
        contrastive_loss(torch.zeros(0, 3), torch.zeros(0, 3), torch.zeros(0, 1, 3))


def test_sample_distractors_excludes_self_and_is_unique():
    rng = derive_rng(0, "d")
    idx = sample_distractors(rng, 12, 5)
    assert idx.shape == (12, 5)
    for i in range(12):
        assert i not in idx[i]
        assert len(set(idx[i].tolist())) == 5
        assert idx[i].min() >= 0 and idx[i].max() < 12


def test_sample_distractors_reduces_k_with_warning():
    with pytest.warns(UserWarning):
        idx = sample_distractors(derive_rng(1, "d"), 5, 10)
    assert idx.shape == (5, 4)


def test_sample_distractors_zero_k():
    idx = sample_distractors(derive_rng(2, "d"), 4, 0)
    assert idx.shape == (4, 0)


def test_sample_distractors_deterministic():
    a = sample_distractors(derive_rng(3, "d"), 8, 3)
    b = sample_distractors(derive_rng(3, "d"), 8, 3)
    assert np.array_equal(a, b)


# ---------------------------------------------------------------- diversity


def test_diversity_uniform_is_zero():
    for v in (4, 32, 320):
        p = torch.full((2, v), 1.0 / v, dtype=torch.float64)
        assert diversity_loss(p).item() == pytest.approx(0.0, abs=1e-9)


def test_diversity_one_hot_is_maximal():
    p = torch.zeros(1, 320, dtype=torch.float64)
    p[0, 17] = 1.0
    assert diversity_loss(p).item() == pytest.approx(319.0 / 320.0, rel=1e-12)


def test_diversity_half_support():
    p = torch.tensor([[0.5, 0.5, 0.0, 0.0]], dtype=torch.float64)
    assert diversity_loss(p).item() == pytest.approx(0.5, rel=1e-9)


def test_diversity_averages_over_groups():
    uniform = torch.full((4,), 0.25, dtype=torch.float64)
    one_hot = torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=torch.float64)
    p = torch.stack([uniform, one_hot])
    assert diversity_loss(p).item() == pytest.approx((0.0 + 0.75) / 2, abs=1e-9)


def test_diversity_range_and_uniqueness_of_zero():
    rng = np.random.default_rng(11)
    for _ in range(50):
        v = int(rng.integers(2, 16))
        p = torch.from_numpy(rng.dirichlet(np.ones(v), size=3))
        val = diversity_loss(p).item()
        assert -1e-9 <= val <= (v - 1) / v + 1e-9
    skewed = torch.from_numpy(np.array([[0.9, 0.05, 0.03, 0.02]]))
    assert diversity_loss(skewed).item() > 0.01


def test_diversity_gradient_matches_finite_differences():
    rng = np.random.default_rng(12)
    logits = torch.from_numpy(rng.normal(size=(2, 5))).requires_grad_(True)

    def value() -> torch.Tensor:
        return diversity_loss(logits.softmax(dim=-1))

    value().backward()
    eps = 1e-6
    with torch.no_grad():
        flat = logits.view(-1)
        for idx in range(flat.numel()):
            orig = flat[idx].item()
            flat[idx] = orig + eps
            up = value().item()
            flat[idx] = orig - eps
            down = value().item()
            flat[idx] = orig
            fd = (up - down) / (2 * eps)
            an = logits.grad.view(-1)[idx].item()
            assert abs(fd - an) <= 1e-7 + 1e-4 * abs(an)


def test_diversity_rejects_bad_input():
    with pytest.raises(DataError):
        diversity_loss(torch.ones(4))
    with pytest.raises(DataError):
        diversity_loss(torch.full((1, 4), 0.5))  # rows do not sum to 1


# ---------------------------------------------------------------- model-level


def _feature_batch(rng: np.random.Generator, b: int, t: int, f: int = 6):
    return torch.from_numpy(rng.normal(size=(b, t, f)).astype(np.float32))


def test_self_supervised_loss_deterministic_and_finite():
    model = make_model(seed=1)
    x = _feature_batch(np.random.default_rng(0), 2, 12)
    out1 = self_supervised_loss(model, x, [12, 9], derive_rng(5, "ssl"), k_distractors=3)
    out2 = self_supervised_loss(model, x, [12, 9], derive_rng(5, "ssl"), k_distractors=3)
    assert out1["loss"].item() == pytest.approx(out2["loss"].item(), rel=1e-12)
    assert math.isfinite(out1["loss"].item())
    assert out1["n_masked"] == out2["n_masked"] > 0
    assert torch.allclose(out1["p_bar"].sum(dim=-1), torch.ones(2), atol=1e-6)
    assert out1["loss"].item() == pytest.approx(
        out1["contrastive"].item() + 0.1 * out1["diversity"].item(), rel=1e-5
    )


def test_self_supervised_loss_masks_only_valid_frames():
    model = make_model(seed=2)
    x = _feature_batch(np.random.default_rng(1), 2, 10)
    out = self_supervised_loss(model, x, [10, 4], derive_rng(6, "ssl"), k_distractors=2)
    mask = out["mask"]
    assert not mask[1, 4:].any()  # nothing masked beyond the second item's length


def test_self_supervised_loss_gradients_reach_ssl_parameters():
    model = make_model(seed=3)
    x = _feature_batch(np.random.default_rng(2), 1, 12)
    out = self_supervised_loss(model, x, [12], derive_rng(7, "ssl"), k_distractors=3)
    out["loss"].backward()
    assert model.mask_emb.grad is not None and model.mask_emb.grad.abs().sum() > 0
    assert model.quantizer.codebook.grad.abs().sum() > 0
    assert model.context_proj.weight.grad.abs().sum() > 0
    assert model.ctc_head.weight.grad is None  # recognition head untouched


def test_self_supervised_loss_soft_mode_finite_differences():
    model = make_model(seed=4).double()
    x = torch.from_numpy(np.random.default_rng(3).normal(size=(1, 10, 6)))

    def value() -> float:
        return self_supervised_loss(
            model, x, [10], derive_rng(8, "ssl"), tau=1.5, k_distractors=2, mode="soft"
        )["loss"]

    loss = value()
    loss.backward()
    eps = 1e-6
    param = model.quantizer.weight_proj.weight
    grad = param.grad.view(-1)
    rng = np.random.default_rng(4)
    with torch.no_grad():
        flat = param.view(-1)
        for idx in rng.choice(flat.numel(), size=4, replace=False):
            orig = flat[idx].item()
            flat[idx] = orig + eps
            up = value().item()
            flat[idx] = orig - eps
            down = value().item()
            flat[idx] = orig
            fd = (up - down) / (2 * eps)
            an = grad[idx].item()
            assert abs(fd - an) <= 1e-7 + 1e-4 * abs(an)


def test_self_supervised_loss_zero_mask_prob_warns():
    model = make_model(seed=5)
    x = _feature_batch(np.random.default_rng(4), 1, 8)
    with pytest.warns(UserWarning):
        out = self_supervised_loss(model, x, [8], derive_rng(9, "ssl"), mask_prob=0.0)
    assert out["loss"].item() == 0.0
    assert out["n_masked"] == 0


# ---------------------------------------------------------------- mixed loss


def _labeled_batch(rng: np.random.Generator):
    x = _feature_batch(rng, 2, 12)
    return x, [12, 10], [[1, 2], [3]]


def test_m2ds2_zero_weights_reduce_to_ctc():
    model = make_model(seed=6)
    x, lens, targets = _labeled_batch(np.random.default_rng(5))
    out = m2ds2_loss(model, x, lens, targets, None, None,
                     LossWeights(alpha=0.0, beta=0.0), derive_rng(1, "mix"))
    logp, flens = model.frame_log_probs(x, lens)
    expected = ctc_loss(logp, flens, targets)
    assert out["total"].item() == pytest.approx(expected.item(), rel=1e-12)
    assert out["ss_src"].item() == 0.0
    assert out["ss_tgt"].item() == 0.0


def test_m2ds2_additivity_of_components():
    model = make_model(seed=7)
    rng_data = np.random.default_rng(6)
    x, lens, targets = _labeled_batch(rng_data)
    tx = _feature_batch(rng_data, 2, 11)
    weights = LossWeights(alpha=0.01, beta=0.02)
    out = m2ds2_loss(model, x, lens, targets, tx, [11, 8], weights,
                     derive_rng(2, "mix"), k_distractors=3)
    reconstructed = (
        out["ctc"].item()
        + weights.alpha * out["ss_src"].item()
        + weights.beta * out["ss_tgt"].item()
    )
    assert out["total"].item() == pytest.approx(reconstructed, abs=1e-6)
    assert out["ss_tgt"].item() != 0.0


def test_m2ds2_linear_in_weights():
    model = make_model(seed=8)
    rng_data = np.random.default_rng(7)
    x, lens, targets = _labeled_batch(rng_data)
    tx = _feature_batch(rng_data, 2, 11)

    def run(alpha: float, beta: float) -> dict:
        return m2ds2_loss(model, x, lens, targets, tx, [11, 8],
                          LossWeights(alpha=alpha, beta=beta),
                          derive_rng(3, "mix"), k_distractors=3)

    a = run(0.01, 0.02)
    b = run(0.03, 0.05)
    assert a["ctc"].item() == pytest.approx(b["ctc"].item(), rel=1e-12)
    assert a["ss_src"].item() == pytest.approx(b["ss_src"].item(), rel=1e-9)
    assert a["ss_tgt"].item() == pytest.approx(b["ss_tgt"].item(), rel=1e-9)
    predicted = (
        a["ctc"].item() + 0.03 * a["ss_src"].item() + 0.05 * a["ss_tgt"].item()
    )
    assert b["total"].item() == pytest.approx(predicted, rel=1e-5)


def test_m2ds2_beta_requires_target_batch():
    model = make_model(seed=9)
    x, lens, targets = _labeled_batch(np.random.default_rng(8))
    with pytest.raises(DataError):
        m2ds2_loss(model, x, lens, targets, None, None,
                   LossWeights(alpha=0.0, beta=0.02), derive_rng(4, "mix"))


def test_loss_weights_validation():
    with pytest.raises(ConfigError):
        LossWeights(alpha=-0.1)
    with pytest.raises(ConfigError):
        LossWeights(beta=-1.0)
    defaults = LossWeights()
    assert defaults.alpha == 0.01 and defaults.beta == 0.02


# ---------------------------------------------------------------- diagnostics


def test_codebook_stats_single_code():
    idx = np.zeros((40, 2), dtype=np.int64)
    stats = codebook_stats(idx, codebook_size=8)
    assert isinstance(stats, CodebookStats)
    for g in range(2):
        assert stats.entropies[g] == 0.0
        assert stats.effective_usage[g] == pytest.approx(1.0)
        assert stats.histograms[g][0] == 40
        assert stats.histograms[g].sum() == 40


def test_codebook_stats_uniform_usage():
    idx = np.stack([np.arange(32), np.arange(32)], axis=1)
    stats = codebook_stats(idx, codebook_size=32)
    assert stats.effective_usage[0] == pytest.approx(32.0, rel=1e-9)
    assert stats.entropies[0] == pytest.approx(math.log(32.0), rel=1e-9)


def test_codebook_stats_matches_histogram_oracle():
    rng = np.random.default_rng(13)
    idx = rng.integers(0, 16, size=(200, 3))
    stats = codebook_stats(idx, codebook_size=16)
    for g in range(3):
        hist = np.bincount(idx[:, g], minlength=16)
        assert np.array_equal(stats.histograms[g], hist)
        p = hist / hist.sum()
        h = -(p[p > 0] * np.log(p[p > 0])).sum()
        assert stats.entropies[g] == pytest.approx(h, rel=1e-12)
        assert stats.effective_usage[g] == pytest.approx(math.exp(h), rel=1e-12)
        assert 1.0 <= stats.effective_usage[g] <= 16.0


def test_codebook_stats_accepts_torch_and_flattens():
    idx = torch.randint(0, 4, (2, 6, 2))
    stats = codebook_stats(idx, codebook_size=4)
    assert stats.histograms[0].sum() == 12


def test_codebook_stats_rejects_bad_input():
    with pytest.raises(DataError):
        codebook_stats(np.zeros((0, 2), dtype=np.int64), codebook_size=4)
    with pytest.raises(DataError):
        codebook_stats(np.array([1, 2, 3]), codebook_size=4)
    with pytest.raises(DataError):
        codebook_stats(np.array([[5]]), codebook_size=4)

"""Loss functions: CTC, contrastive, codebook diversity, and the mixed objective.

The mixed objective combines supervised CTC on labeled source audio with
self-supervised losses computed separately on source and target audio:

    total = ctc(source) + alpha * L_s(source) + beta * L_s(target)

where L_s = contrastive + diversity_weight * diversity. Setting alpha and
beta to zero reduces the objective exactly to supervised training — the
self-supervised branches are skipped entirely, consuming no randomness.

CTC is an authored log-space forward recursion, so its gradient through
autograd is the exact analytic gradient. Reduction is mean over the batch and
sum over time (the per-sequence value is the full negative log marginal).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .acoustic import AcousticModel, sample_mask
from .errors import ConfigError, DataError, InfeasibleTargetError

NEG = -1e30  # finite stand-in for log(0); keeps gradients free of nans


@dataclass(frozen=True)
class LossWeights:
    """Mixing weights of the combined objective."""

    alpha: float = 0.01  # self-supervision on labeled source audio
    beta: float = 0.02  # self-supervision on unlabeled target audio
    diversity_weight: float = 0.1

    def __post_init__(self) -> None:
        if self.alpha < 0 or self.beta < 0 or self.diversity_weight < 0:
            raise ConfigError("loss weights must be nonnegative")


@dataclass(frozen=True)
class CodebookStats:
    """Usage diagnostics per codebook group."""

    histograms: tuple[np.ndarray, ...]  # one [V] count vector per group
    entropies: tuple[float, ...]  # nats
    effective_usage: tuple[float, ...]  # exp(entropy), in [1, V]


# ---------------------------------------------------------------------------
# CTC
# ---------------------------------------------------------------------------


def min_frames_for_target(target: Sequence[int]) -> int:
    """Fewest frames able to emit the labels (repeats need a blank between)."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def ctc_loss(
    log_probs: torch.Tensor,
    input_lengths: Sequence[int],
    targets: Sequence[Sequence[int]],
    blank: int = 0,
) -> torch.Tensor:
    """Negative log marginal probability of each target, averaged over the batch.

    log_probs: [B, T, V] frame label log-distributions. Alignments follow the
    usual collapse rule (repeats merge, blanks delete); the marginal is
    computed by the forward recursion in log space, so autograd provides the
    exact gradient.
    """
    if log_probs.ndim != 3:
        raise DataError(f"expected [B, T, V] log probabilities, got shape {tuple(log_probs.shape)}")
    b, t_max, vocab = log_probs.shape
    if len(input_lengths) != b or len(targets) != b:
        raise DataError("batch size mismatch between log_probs, lengths, and targets")
    losses = []
    for i in range(b):
        t_len = int(input_lengths[i])
        if not 1 <= t_len <= t_max:
            raise DataError(f"input length {t_len} outside [1, {t_max}]")
        target = [int(v) for v in targets[i]]
        for label in target:
            if not 0 <= label < vocab or label == blank:
                raise DataError(f"label {label} invalid for vocabulary of {vocab} with blank {blank}")
        need = min_frames_for_target(target)
        if t_len < need:
            raise InfeasibleTargetError(
                f"target of {len(target)} labels needs {need} frames, got {t_len}"
            )
        losses.append(_ctc_forward(log_probs[i, :t_len], target, blank))
    return torch.stack(losses).mean()


def _ctc_forward(lp: torch.Tensor, target: list[int], blank: int) -> torch.Tensor:
    """Forward recursion over the blank-interleaved state lattice for one sequence."""
    t_len = lp.shape[0]
    states = [blank] * (2 * len(target) + 1)
    states[1::2] = target
    s = len(states)
    ext = torch.tensor(states, dtype=torch.long, device=lp.device)
    # states reachable by a skip transition: non-blank and different from the
    # label two states back
    can_skip = torch.tensor(
        [k >= 2 and states[k] != blank and states[k] != states[k - 2] for k in range(s)],
        device=lp.device,
    )
    neg = torch.full((2,), NEG, dtype=lp.dtype, device=lp.device)
    alpha = torch.full((s,), NEG, dtype=lp.dtype, device=lp.device)
    alpha[0] = lp[0, states[0]]
    if s > 1:
        alpha[1] = lp[0, states[1]]
    for t in range(1, t_len):
        stay = alpha
        step = torch.cat([neg[:1], alpha])[:s]
        skip = torch.cat([neg, alpha])[:s]
        skip = torch.where(can_skip, skip, neg[:1].expand(s))
        alpha = lp[t, ext] + torch.logsumexp(torch.stack([stay, step, skip]), dim=0)
    tail = alpha[-1] if s == 1 else torch.logsumexp(torch.stack([alpha[-1], alpha[-2]]), dim=0)
    return -tail


# ---------------------------------------------------------------------------
# contrastive
# ---------------------------------------------------------------------------


def _cosine(a: torch.Tensor, b: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Cosine similarity along the last axis with broadcast support."""
    num = (a * b).sum(dim=-1)
    den = a.norm(dim=-1).clamp_min(eps) * b.norm(dim=-1).clamp_min(eps)
    return num / den


def contrastive_step_losses(
    context: torch.Tensor,
    targets: torch.Tensor,
    distractors: torch.Tensor,
    kappa: float = 0.1,
) -> torch.Tensor:
    """Per-step identification losses.

    context, targets: [M, D] masked-step context vectors and their quantized
    targets; distractors: [M, K, D] competing quantized vectors (K may be 0).
    Each step scores candidates by cosine similarity / kappa and pays the
    cross entropy of picking its true target.
    """
    if kappa <= 0:
        raise ConfigError(f"kappa must be positive, got {kappa}")
    if context.shape != targets.shape:
        raise DataError("context and target shapes differ")
    true_sim = _cosine(context, targets) / kappa  # [M]
    if distractors.shape[1] == 0:
        return torch.zeros_like(true_sim)
    dis_sim = _cosine(context.unsqueeze(1), distractors) / kappa  # [M, K]
    all_sim = torch.cat([true_sim.unsqueeze(1), dis_sim], dim=1)
    return torch.logsumexp(all_sim, dim=1) - true_sim


def contrastive_loss(
    context: torch.Tensor,
    targets: torch.Tensor,
    distractors: torch.Tensor,
    kappa: float = 0.1,
) -> torch.Tensor:
    """Mean over masked steps of the identification loss."""
    steps = contrastive_step_losses(context, targets, distractors, kappa)
    if steps.numel() == 0:
        raise DataError("no masked steps to contrast")
    return steps.mean()


def sample_distractors(rng: np.random.Generator, n_steps: int, k: int) -> np.ndarray:
    """Uniform distractor indices [n_steps, k_eff] excluding each step's own index.

    Sampling is without replacement among the other masked steps. When fewer
    than k other steps exist, k is reduced (with a warning) to n_steps - 1.
    """
    if k < 0:
        raise ConfigError(f"distractor count must be nonnegative, got {k}")
    k_eff = min(k, max(n_steps - 1, 0))
    if k_eff < k:
        warnings.warn(
            f"only {n_steps} masked steps; reducing distractors from {k} to {k_eff}",
            stacklevel=2,
        )
    out = np.empty((n_steps, k_eff), dtype=np.int64)
    for i in range(n_steps):
        others = np.concatenate([np.arange(i), np.arange(i + 1, n_steps)])
        out[i] = rng.choice(others, size=k_eff, replace=False)
    return out


# ---------------------------------------------------------------------------
# diversity
# ---------------------------------------------------------------------------


def diversity_loss(p_bar: torch.Tensor) -> torch.Tensor:
    """Codebook usage penalty (V - exp(H(p̄_g))) / V averaged over groups.

    Zero iff every group's averaged distribution is uniform; approaches
    (V-1)/V as usage collapses onto single codes. Minimizing this maximizes
    the entropy of the averaged code distribution.
    """
    if p_bar.ndim != 2:
        raise DataError(f"expected [G, V] averaged distributions, got shape {tuple(p_bar.shape)}")
    sums = p_bar.sum(dim=-1)
    if not torch.allclose(sums, torch.ones_like(sums), atol=1e-5):
        raise DataError("averaged code distributions must sum to 1 per group")
    v = p_bar.shape[1]
    entropy = -(torch.xlogy(p_bar, p_bar)).sum(dim=-1)
    return ((v - torch.exp(entropy)) / v).mean()


# ---------------------------------------------------------------------------
# model-level self-supervised loss
# ---------------------------------------------------------------------------


def self_supervised_loss(
    model: AcousticModel,
    inputs: torch.Tensor,
    lengths: Sequence[int],
    rng: np.random.Generator,
    tau: float = 2.0,
    kappa: float = 0.1,
    k_distractors: int = 10,
    diversity_weight: float = 0.1,
    mask_prob: float | None = None,
    mask_span: int | None = None,
    mode: str = "train",
) -> dict:
    """Masked-prediction loss for one batch of (possibly unlabeled) audio.

    Randomness draws from rng in a fixed order — per-utterance masks, then
    quantizer noise, then per-utterance distractor indices — so a given
    generator state fully determines the loss.

    Returns a dict with: loss (contrastive + diversity_weight * diversity),
    contrastive, diversity, p_bar [G, V], n_masked, and the sampled mask.
    """
    p = model.cfg.mask_prob if mask_prob is None else mask_prob
    span = model.cfg.mask_span if mask_span is None else mask_span
    frame_lengths = model.output_lengths(lengths)
    t_max = max(frame_lengths)
    mask_np = np.zeros((inputs.shape[0], t_max), dtype=bool)
    for i, n in enumerate(frame_lengths):
        mask_np[i, :n] = sample_mask(rng, n, p, span)
    mask = torch.from_numpy(mask_np)
    n_masked = int(mask.sum())
    if n_masked == 0:
        warnings.warn("no frames were masked; self-supervised loss is zero", stacklevel=2)
        zero = torch.zeros((), dtype=inputs.dtype)
        g, v = model.cfg.n_groups, model.cfg.codebook_size
        return {
            "loss": zero, "contrastive": zero, "diversity": zero,
            "p_bar": torch.full((g, v), 1.0 / v, dtype=inputs.dtype),
            "n_masked": 0, "mask": mask,
        }
    out = model.ssl_forward(inputs, lengths, mask, mode=mode, tau=tau, rng=rng)
    step_losses = []
    for i in range(inputs.shape[0]):
        idx = mask[i].nonzero(as_tuple=True)[0]
        if idx.numel() == 0:
            continue
        ctx = out["context_codes"][i, idx]
        tgt = out["quantized"][i, idx]
        didx = sample_distractors(rng, idx.numel(), k_distractors)
        dis = tgt[torch.from_numpy(didx)] if didx.size else tgt.new_zeros((idx.numel(), 0, tgt.shape[-1]))
        step_losses.append(contrastive_step_losses(ctx, tgt, dis, kappa))
    contrastive = torch.cat(step_losses).mean()
    masked_probs = out["probs"][mask]  # [n_masked, G, V]
    p_bar = masked_probs.mean(dim=0)
    diversity = diversity_loss(p_bar)
    return {
        "loss": contrastive + diversity_weight * diversity,
        "contrastive": contrastive,
        "diversity": diversity,
        "p_bar": p_bar,
        "n_masked": n_masked,
        "mask": mask,
    }


def m2ds2_loss(
    model: AcousticModel,
    source_inputs: torch.Tensor,
    source_lengths: Sequence[int],
    source_targets: Sequence[Sequence[int]],
    target_inputs: torch.Tensor | None,
    target_lengths: Sequence[int] | None,
    weights: LossWeights,
    rng: np.random.Generator,
    tau: float = 2.0,
    kappa: float = 0.1,
    k_distractors: int = 10,
    blank: int = 0,
    mode: str = "train",
) -> dict:
    """Mixed objective over one labeled source batch and one unlabeled target batch.

    Branches with zero weight are skipped outright (no computation, no rng
    consumption), so alpha = beta = 0 is exactly supervised training. The
    target batch may be None when beta is zero.
    """
    log_probs, frame_lengths = model.frame_log_probs(source_inputs, source_lengths)
    ctc = ctc_loss(log_probs, frame_lengths, source_targets, blank=blank)
    zero = torch.zeros((), dtype=ctc.dtype)
    components = {"ctc": ctc, "ss_src": zero, "ss_tgt": zero,
                  "contrastive_src": zero, "diversity_src": zero,
                  "contrastive_tgt": zero, "diversity_tgt": zero}
    if weights.alpha > 0:
        src = self_supervised_loss(
            model, source_inputs, source_lengths, rng, tau=tau, kappa=kappa,
            k_distractors=k_distractors, diversity_weight=weights.diversity_weight, mode=mode,
        )
        components["ss_src"] = src["loss"]
        components["contrastive_src"] = src["contrastive"]
        components["diversity_src"] = src["diversity"]
    if weights.beta > 0:
        if target_inputs is None or target_lengths is None:
            raise DataError("beta > 0 requires a target batch")
        tgt = self_supervised_loss(
            model, target_inputs, target_lengths, rng, tau=tau, kappa=kappa,
            k_distractors=k_distractors, diversity_weight=weights.diversity_weight, mode=mode,
        )
        components["ss_tgt"] = tgt["loss"]
        components["contrastive_tgt"] = tgt["contrastive"]
        components["diversity_tgt"] = tgt["diversity"]
    total = ctc + weights.alpha * components["ss_src"] + weights.beta * components["ss_tgt"]
    components["total"] = total
    return components


# ---------------------------------------------------------------------------
# codebook diagnostics
# ---------------------------------------------------------------------------


def codebook_stats(indices: np.ndarray | torch.Tensor, codebook_size: int) -> CodebookStats:
    """Empirical usage of each codebook group from an index stream.

    indices: integer array [..., G]; all leading axes are flattened into one
    stream of frames.
    """
    arr = indices.detach().cpu().numpy() if isinstance(indices, torch.Tensor) else np.asarray(indices)
    if arr.ndim < 2:
        raise DataError(f"expected [..., G] code indices, got shape {arr.shape}")
    flat = arr.reshape(-1, arr.shape[-1])
    if flat.shape[0] == 0:
        raise DataError("empty code index stream")
    if flat.min() < 0 or flat.max() >= codebook_size:
        raise DataError(f"code indices outside [0, {codebook_size})")
    histograms, entropies, effective = [], [], []
    for g in range(flat.shape[-1]):
        hist = np.bincount(flat[:, g], minlength=codebook_size).astype(np.int64)
        p = hist / hist.sum()
        nz = p[p > 0]
        h = float(-(nz * np.log(nz)).sum())
        histograms.append(hist)
        entropies.append(h)
        effective.append(math.exp(h))
    return CodebookStats(tuple(histograms), tuple(entropies), tuple(effective))

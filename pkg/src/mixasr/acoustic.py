"""Acoustic model: feature encoder, span masking, vector quantizer, transformer.

The model follows the standard self-supervised speech recipe: a frozen-able
feature encoder produces latent frames, a Gumbel-softmax product quantizer
discretizes those latents into targets, masked latents run through a pre-norm
transformer, and a linear head emits per-frame label scores for CTC. Two
input modes are supported: raw 16 kHz waveforms through a strided conv stack,
and precomputed 2-D feature matrices through a linear projection.

All randomness is injected through numpy generators so training runs are
reproducible without global RNG state; checkpoints use a self-describing
binary container (magic + JSON header + raw little-endian tensor payload).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DataError
from .seeding import derive_rng

CHECKPOINT_MAGIC = b"MIXCKPT1"


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture hyperparameters; defaults are sized for fast experiments."""

    vocab_size: int
    feature_mode: str = "features"  # "waveform" or "features"
    feature_dim: int = 16
    conv_channels: int = 64
    conv_kernels: tuple[int, ...] = (10, 3, 3, 3, 3, 2, 2)
    conv_strides: tuple[int, ...] = (5, 2, 2, 2, 2, 2, 2)
    model_dim: int = 64
    n_layers: int = 2
    n_heads: int = 2
    ffn_dim: int = 128
    max_positions: int = 1024
    use_positions: bool = True
    n_groups: int = 2
    codebook_size: int = 32
    code_dim: int = 64
    mask_prob: float = 0.5
    mask_span: int = 10

    def __post_init__(self) -> None:
        if self.feature_mode not in ("waveform", "features"):
            raise ConfigError(f"unknown feature_mode {self.feature_mode!r}")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must include the blank label and at least one symbol")
        if self.model_dim % self.n_heads != 0:
            raise ConfigError("model_dim must be divisible by n_heads")
        if self.code_dim % self.n_groups != 0:
            raise ConfigError("code_dim must be divisible by n_groups")
        if len(self.conv_kernels) != len(self.conv_strides):
            raise ConfigError("conv_kernels and conv_strides must have equal length")
        if not 0.0 <= self.mask_prob < 1.0:
            raise ConfigError("mask_prob must be in [0, 1)")
        if self.mask_span < 1:
            raise ConfigError("mask_span must be >= 1")

    @classmethod
    def full_scale_waveform(cls, vocab_size: int, **overrides) -> "EncoderConfig":
        """Waveform config with the standard 7-layer conv geometry (320x downsample)."""
        values = dict(
            vocab_size=vocab_size,
            feature_mode="waveform",
            conv_kernels=(10, 3, 3, 3, 3, 2, 2),
            conv_strides=(5, 2, 2, 2, 2, 2, 2),
        )
        values.update(overrides)
        return cls(**values)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["conv_kernels"] = list(self.conv_kernels)
        data["conv_strides"] = list(self.conv_strides)
        return data

    @classmethod
    def from_dict(cls, data: Mapping) -> "EncoderConfig":
        values = dict(data)
        values["conv_kernels"] = tuple(values.get("conv_kernels", ()))
        values["conv_strides"] = tuple(values.get("conv_strides", ()))
        return cls(**values)


# ---------------------------------------------------------------------------
# span masking
# ---------------------------------------------------------------------------


def sample_mask(rng: np.random.Generator, length: int, mask_prob: float, mask_span: int) -> np.ndarray:
    """Sample a boolean time mask as a renewal process of bounded spans.

    At each free position a span starts with probability q, runs a uniform
    length in [1, mask_span], and is followed by one forced unmasked step so
    spans never merge. q is chosen so the expected masked fraction equals
    mask_prob exactly: q = p / (E[len] * (1 - p)) with E[len] = (mask_span+1)/2.
    """
    if length < 0:
        raise DataError(f"length must be non-negative, got {length}")
    if not 0.0 <= mask_prob < 1.0:
        raise DataError(f"mask_prob must be in [0, 1), got {mask_prob}")
    if mask_span < 1:
        raise DataError(f"mask_span must be >= 1, got {mask_span}")
    mask = np.zeros(length, dtype=bool)
    if mask_prob == 0.0 or length == 0:
        return mask
    expected_len = (mask_span + 1) / 2.0
    q = mask_prob / (expected_len * (1.0 - mask_prob))
    if q > 1.0:
        warnings.warn(
            f"mask_prob={mask_prob} with mask_span={mask_span} is unattainable; "
            "starting a span at every opportunity",
            stacklevel=2,
        )
        q = 1.0
    t = 0
    while t < length:
        if rng.random() < q:
            span = int(rng.integers(1, mask_span + 1))
            mask[t:t + span] = True
            t += span + 1  # forced gap keeps spans separated
        else:
            t += 1
    return mask


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel axis of a [B, C, T] tensor."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(x.transpose(1, 2)).transpose(1, 2)


class ConvFeatureEncoder(nn.Module):
    """Strided 1-D conv stack turning a waveform into latent frames."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        layers = []
        in_ch = 1
        for k, s in zip(cfg.conv_kernels, cfg.conv_strides):
            layers.append(nn.Conv1d(in_ch, cfg.conv_channels, kernel_size=k, stride=s))
            layers.append(ChannelLayerNorm(cfg.conv_channels))
            layers.append(nn.GELU())
            in_ch = cfg.conv_channels
        self.stack = nn.Sequential(*layers)
        self.proj = nn.Linear(cfg.conv_channels, cfg.model_dim)
        self.norm = nn.LayerNorm(cfg.model_dim)

    def forward(self, wave: torch.Tensor) -> torch.Tensor:
        z = self.stack(wave.unsqueeze(1))  # [B, C, T']
        return self.norm(self.proj(z.transpose(1, 2)))


class FeatureProjection(nn.Module):
    """Linear projection for precomputed [B, T, F] feature inputs."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.proj = nn.Linear(cfg.feature_dim, cfg.model_dim)
        self.norm = nn.LayerNorm(cfg.model_dim)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        return self.norm(self.proj(feats))


class GumbelQuantizer(nn.Module):
    """Product quantizer with Gumbel-softmax selection.

    Latents are scored against n_groups independent codebooks; the selected
    group codes are concatenated and projected. Modes:
      - "train": straight-through hard selection of argmax(logits + gumbel);
        the chosen index is temperature-independent, the gradient flows
        through a softmax at temperature tau.
      - "eval": deterministic argmax of the logits, no noise.
      - "soft": fully differentiable softmax(logits / tau) mixture, no noise.

    The returned probabilities are always softmax(logits) at temperature 1
    without noise — the distribution whose batch average drives codebook
    usage diagnostics.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.n_groups = cfg.n_groups
        self.codebook_size = cfg.codebook_size
        group_dim = cfg.code_dim // cfg.n_groups
        self.weight_proj = nn.Linear(cfg.model_dim, cfg.n_groups * cfg.codebook_size)
        self.codebook = nn.Parameter(torch.zeros(cfg.n_groups, cfg.codebook_size, group_dim))
        self.out_proj = nn.Linear(cfg.code_dim, cfg.code_dim)

    def forward(
        self,
        latents: torch.Tensor,
        mode: str = "eval",
        tau: float = 2.0,
        rng: np.random.Generator | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Returns (codes [B,T,code_dim], probs [B,T,G,V], indices [B,T,G])."""
        if mode not in ("train", "eval", "soft"):
            raise ConfigError(f"unknown quantizer mode {mode!r}")
        b, t, _ = latents.shape
        logits = self.weight_proj(latents).view(b, t, self.n_groups, self.codebook_size)
        probs = torch.softmax(logits, dim=-1)
        if mode == "train":
            if rng is None:
                raise ConfigError("train-mode quantization needs an rng for gumbel noise")
            noise = torch.from_numpy(
                rng.gumbel(size=(b, t, self.n_groups, self.codebook_size))
            ).to(logits.dtype)
            noisy = logits + noise
            indices = noisy.argmax(dim=-1)
            hard = nn.functional.one_hot(indices, self.codebook_size).to(logits.dtype)
            soft = torch.softmax(noisy / tau, dim=-1)
            weights = hard + soft - soft.detach()
        elif mode == "soft":
            weights = torch.softmax(logits / tau, dim=-1)
            indices = logits.argmax(dim=-1)
        else:
            indices = logits.argmax(dim=-1)
            weights = nn.functional.one_hot(indices, self.codebook_size).to(logits.dtype)
        # [B,T,G,V] x [G,V,d] -> [B,T,G,d]
        grouped = torch.einsum("btgv,gvd->btgd", weights, self.codebook)
        codes = self.out_proj(grouped.reshape(b, t, -1))
        return codes, probs, indices


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, valid: torch.Tensor | None) -> torch.Tensor:
        b, t, d = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)

        def split(m: torch.Tensor) -> torch.Tensor:
            return m.view(b, t, self.heads, self.head_dim).transpose(1, 2)

        q, k, v = split(q), split(k), split(v)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if valid is not None:
            scores = scores.masked_fill(~valid[:, None, None, :], float("-inf"))
            # padded query rows would be all -inf and softmax to nan, which
            # poisons gradients even when the output is discarded; give them
            # finite scores and zero their weights instead
            query_rows = valid[:, None, :, None]
            scores = torch.where(query_rows, scores, torch.zeros_like(scores))
            weights = torch.softmax(scores, dim=-1) * query_rows.to(scores.dtype)
        else:
            weights = torch.softmax(scores, dim=-1)
        merged = (weights @ v).transpose(1, 2).reshape(b, t, d)
        return self.out(merged)


class TransformerLayer(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.attn_norm = nn.LayerNorm(cfg.model_dim)
        self.attn = SelfAttention(cfg.model_dim, cfg.n_heads)
        self.ffn_norm = nn.LayerNorm(cfg.model_dim)
        self.ffn = nn.Sequential(
            nn.Linear(cfg.model_dim, cfg.ffn_dim),
            nn.GELU(),
            nn.Linear(cfg.ffn_dim, cfg.model_dim),
        )

    def forward(self, x: torch.Tensor, valid: torch.Tensor | None) -> torch.Tensor:
        x = x + self.attn(self.attn_norm(x), valid)
        return x + self.ffn(self.ffn_norm(x))


class TransformerEncoder(nn.Module):
    """Pre-norm transformer with learned positions (optional) and no dropout."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.use_positions = cfg.use_positions
        self.positions = nn.Parameter(torch.zeros(cfg.max_positions, cfg.model_dim))
        self.layers = nn.ModuleList(TransformerLayer(cfg) for _ in range(cfg.n_layers))
        self.final_norm = nn.LayerNorm(cfg.model_dim)

    def forward(self, x: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
        t = x.shape[1]
        if self.use_positions:
            if t > self.positions.shape[0]:
                raise DataError(f"sequence length {t} exceeds max_positions {self.positions.shape[0]}")
            x = x + self.positions[:t]
        for layer in self.layers:
            x = layer(x, valid)
        return self.final_norm(x)


# ---------------------------------------------------------------------------
# assembled model
# ---------------------------------------------------------------------------


class AcousticModel(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.feature_mode == "waveform":
            self.feature_encoder: nn.Module = ConvFeatureEncoder(cfg)
        else:
            self.feature_encoder = FeatureProjection(cfg)
        self.mask_emb = nn.Parameter(torch.zeros(cfg.model_dim))
        self.quantizer = GumbelQuantizer(cfg)
        self.transformer = TransformerEncoder(cfg)
        self.context_proj = nn.Linear(cfg.model_dim, cfg.code_dim)
        self.ctc_head = nn.Linear(cfg.model_dim, cfg.vocab_size)

    # -- geometry ----------------------------------------------------------

    def output_lengths(self, input_lengths: Sequence[int]) -> list[int]:
        """Frame count produced for each input length (samples or frames)."""
        if self.cfg.feature_mode == "features":
            return [int(n) for n in input_lengths]
        out = []
        for n in input_lengths:
            m = int(n)
            for k, s in zip(self.cfg.conv_kernels, self.cfg.conv_strides):
                m = (m - k) // s + 1
            if m < 1:
                raise DataError(f"input of length {n} produces no frames")
            out.append(m)
        return out

    @staticmethod
    def valid_mask(lengths: Sequence[int], total: int) -> torch.Tensor:
        """Boolean [B, total] matrix marking real (non-padding) frames."""
        idx = torch.arange(total)
        lens = torch.as_tensor(list(lengths))
        return idx[None, :] < lens[:, None]

    # -- forward paths -----------------------------------------------------

    def encode(self, inputs: torch.Tensor) -> torch.Tensor:
        """Latent frames [B, T, model_dim] from a padded input batch."""
        return self.feature_encoder(inputs)

    def frame_log_probs(
        self, inputs: torch.Tensor, lengths: Sequence[int]
    ) -> tuple[torch.Tensor, list[int]]:
        """Unmasked recognition path: log label probabilities per frame."""
        frame_lengths = self.output_lengths(lengths)
        z = self.encode(inputs)
        valid = self.valid_mask(frame_lengths, z.shape[1]).to(z.device)
        context = self.transformer(z, valid)
        return torch.log_softmax(self.ctc_head(context), dim=-1), frame_lengths

    def ssl_forward(
        self,
        inputs: torch.Tensor,
        lengths: Sequence[int],
        mask: torch.Tensor,
        mode: str = "train",
        tau: float = 2.0,
        rng: np.random.Generator | None = None,
    ) -> dict:
        """Masked self-supervised path.

        mask is a boolean [B, T] tensor over latent frames (True = masked).
        Quantization sees the unmasked latents; the transformer sees latents
        with masked positions replaced by the learned mask embedding.
        """
        frame_lengths = self.output_lengths(lengths)
        z = self.encode(inputs)
        if mask.shape != z.shape[:2]:
            raise DataError(f"mask shape {tuple(mask.shape)} does not match frames {tuple(z.shape[:2])}")
        codes, probs, indices = self.quantizer(z, mode=mode, tau=tau, rng=rng)
        masked = torch.where(mask.unsqueeze(-1), self.mask_emb.to(z.dtype), z)
        valid = self.valid_mask(frame_lengths, z.shape[1]).to(z.device)
        context = self.transformer(masked, valid)
        return {
            "context_codes": self.context_proj(context),
            "quantized": codes,
            "probs": probs,
            "indices": indices,
            "valid": valid,
            "frame_lengths": frame_lengths,
        }

    def quantizer_indices(self, inputs: torch.Tensor, lengths: Sequence[int]) -> tuple[torch.Tensor, list[int]]:
        """Deterministic code indices [B, T, G] for usage diagnostics."""
        frame_lengths = self.output_lengths(lengths)
        with torch.no_grad():
            z = self.encode(inputs)
            _, _, indices = self.quantizer(z, mode="eval")
        return indices, frame_lengths

    def freeze_feature_encoder(self) -> None:
        for p in self.feature_encoder.parameters():
            p.requires_grad_(False)

    # -- initialization ----------------------------------------------------

    def init_parameters(self, seed: int) -> None:
        """Deterministic init from per-parameter numpy streams.

        Matrices (and conv kernels, codebooks, position tables) draw from
        N(0, 0.02); 1-D biases start at zero and 1-D norm gains at one; the
        mask embedding draws from N(0, 0.02).
        """
        for name, param in sorted(self.named_parameters()):
            rng = derive_rng(seed, "init", name)
            if param.ndim >= 2:
                values = rng.normal(0.0, 0.02, size=tuple(param.shape))
            elif name.endswith(".bias"):
                values = np.zeros(tuple(param.shape))
            elif name.endswith(".weight"):
                values = np.ones(tuple(param.shape))
            else:
                values = rng.normal(0.0, 0.02, size=tuple(param.shape))
            with torch.no_grad():
                param.copy_(torch.from_numpy(values).to(param.dtype))


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------


def write_checkpoint(path, arrays: Mapping[str, np.ndarray], metadata: dict | None = None) -> None:
    """Serialize named arrays plus JSON metadata to a self-describing file.

    Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON
    header, then the concatenated raw array payloads. All arrays are stored
    little-endian and C-contiguous, so files are bit-identical across runs.
    """
    entries = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        if not arr.flags["C_CONTIGUOUS"] or not arr.flags["OWNDATA"]:
            arr = np.copy(arr, order="C")  # unlike ascontiguousarray, keeps 0-d shape
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        dtype = np.dtype(arr.dtype.str.lstrip("=<|>"))
        raw = arr.tobytes()
        entries.append({
            "name": name,
            "dtype": dtype.str if dtype.byteorder == "|" else "<" + dtype.str.lstrip("=<|>"),
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"version": 1, "metadata": metadata or {}, "tensors": entries},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Load a checkpoint container; returns (arrays, metadata)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: not a checkpoint file")
        header_len = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(header_len).decode("utf-8"))
        payload = fh.read()
    arrays = {}
    for entry in header["tensors"]:
        start, n = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(payload[start:start + n], dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return arrays, header.get("metadata", {})


def model_arrays(model: nn.Module) -> dict[str, np.ndarray]:
    return {name: p.detach().cpu().numpy().copy() for name, p in model.named_parameters()}


def load_model_arrays(model: nn.Module, arrays: Mapping[str, np.ndarray]) -> None:
    names = {name for name, _ in model.named_parameters()}
    missing = names - set(arrays)
    extra = set(arrays) - names
    if missing or extra:
        raise DataError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
    with torch.no_grad():
        for name, param in model.named_parameters():
            arr = arrays[name]
            if tuple(arr.shape) != tuple(param.shape):
                raise DataError(f"shape mismatch for {name}: {arr.shape} vs {tuple(param.shape)}")
            param.copy_(torch.from_numpy(np.ascontiguousarray(arr)).to(param.dtype))

"""Trainable vision-language prompt encoder.

The encoder turns VLM features of a target and an annotated reference image,
plus the text embedding of the class label, into prompt embeddings for the
frozen mask decoder:

    prototype     = masked mean of reference features
    pseudo mask   = target-to-reference cosine similarity, averaged over reference foreground
    attention map = cosine similarity between each pixel and the text embedding
    F'            = 1x1 conv over [features, prototype, text, mask, attention map]
    prompts       = queries -> attend(reference F') -> attend(target F') -> projection

Functions accept optional leading batch dimensions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbones import fourier_positional_encoding
from .errors import ChannelMismatchError, EmptyMaskError, ModeMismatchError, ShapeError, ZeroNormError

WITH_TEXT = "with-text"
TEXT_FREE = "text-free"
MODES = (WITH_TEXT, TEXT_FREE)
COS_EPS = 1e-8


@dataclass
class ModelConfig:
    n_queries: int = 50
    c: int = 64
    heads: int = 8
    mode: str = WITH_TEXT
    ffn_mult: int = 4
    pe_scale: float = 1.0


# ---------------------------------------------------------------- functional ops

def conv1x1(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Per-pixel linear map on (..., C_in, H, W); ``weight`` is (C_out, C_in) or (C_out, C_in, 1, 1)."""
    weight = weight.reshape(weight.shape[0], -1)
    if x.shape[-3] != weight.shape[1]:
        raise ChannelMismatchError(f"expected {weight.shape[1]} input channels, got {x.shape[-3]}")
    out = torch.einsum("oc,...chw->...ohw", weight, x)
    if bias is not None:
        out = out + bias[:, None, None]
    return out


def project_vlm_features(raw: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    return conv1x1(raw, weight, bias)


def project_text(text: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """The same 1x1 projection applied to a (..., C) text embedding."""
    return conv1x1(text[..., None, None], weight, bias)[..., 0, 0]


def downsample_mask(mask, patch_size: int) -> torch.Tensor:
    """Nearest-neighbour resampling to the feature grid (samples each patch centre)."""
    mask = torch.as_tensor(np.asarray(mask) if not torch.is_tensor(mask) else mask)
    h, w = mask.shape[-2:]
    if h % patch_size or w % patch_size:
        raise ShapeError(f"mask size {h}x{w} is not divisible by patch_size={patch_size}")
    c = patch_size // 2
    return mask[..., c::patch_size, c::patch_size].float()


def mask_avg_pool(features: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Masked spatial mean of (..., C, H, W) features under an (..., H, W) mask."""
    mask = mask.to(features.dtype)
    if features.shape[-2:] != mask.shape[-2:]:
        raise ShapeError(f"feature grid {tuple(features.shape[-2:])} != mask {tuple(mask.shape[-2:])}")
    area = mask.sum(dim=(-2, -1))
    if bool((area == 0).any()):
        raise EmptyMaskError("mask has no foreground pixel at feature resolution")
    return (features * mask[..., None, :, :]).sum(dim=(-2, -1)) / area[..., None]


def similarity_matrix(target: torch.Tensor, reference: torch.Tensor, eps: float = COS_EPS) -> torch.Tensor:
    """S[..., p, q] = cos(target[:, p], reference[:, q]) over flattened pixels."""
    if target.shape[-3:] != reference.shape[-3:]:
        raise ShapeError(f"target {tuple(target.shape)} and reference {tuple(reference.shape)} differ")
    t = target.flatten(-2)
    r = reference.flatten(-2)
    dots = t.transpose(-1, -2) @ r
    norms = t.norm(dim=-2)[..., :, None] * r.norm(dim=-2)[..., None, :]
    return dots / (norms + eps)


def minmax_normalize(x: torch.Tensor) -> torch.Tensor:
    """Rescale each (H, W) map to [0, 1]; a constant map becomes 0.5 everywhere."""
    lo = x.amin(dim=(-2, -1), keepdim=True)
    hi = x.amax(dim=(-2, -1), keepdim=True)
    span = hi - lo
    flat = span <= 0
    out = (x - lo) / torch.where(flat, torch.ones_like(span), span)
    return torch.where(flat, torch.full_like(x, 0.5), out)


def pseudo_mask(similarity: torch.Tensor, reference_mask: torch.Tensor) -> torch.Tensor:
    """Mean similarity to reference-foreground pixels, min-max normalised; shape (..., H, W)."""
    h, w = reference_mask.shape[-2:]
    m = reference_mask.to(similarity.dtype).flatten(-2)
    if similarity.shape[-1] != m.shape[-1]:
        raise ShapeError(f"similarity has {similarity.shape[-1]} reference pixels, mask has {m.shape[-1]}")
    area = m.sum(dim=-1, keepdim=True)
    if bool((area == 0).any()):
        raise EmptyMaskError("reference mask has no foreground pixel at feature resolution")
    raw = (similarity @ m[..., None])[..., 0] / area
    return minmax_normalize(raw.reshape(*raw.shape[:-1], h, w))


def attention_mask(features: torch.Tensor, text: torch.Tensor, eps: float = COS_EPS) -> torch.Tensor:
    """Per-pixel cosine similarity to the text embedding, min-max normalised."""
    if features.shape[-3] != text.shape[-1]:
        raise ChannelMismatchError(f"features have {features.shape[-3]} channels, text has {text.shape[-1]}")
    tnorm = text.norm(dim=-1)
    if bool((tnorm == 0).any()):
        raise ZeroNormError("text embedding has zero norm")
    dots = torch.einsum("...chw,...c->...hw", features, text)
    raw = dots / (features.norm(dim=-3) * tnorm[..., None, None] + eps)
    return minmax_normalize(raw)


def enhance_features(features: torch.Tensor, prototype: torch.Tensor, text: torch.Tensor | None,
                     mask: torch.Tensor, attn: torch.Tensor | None,
                     weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """1x1 conv over [features | prototype | text | mask | attention map] broadcast per pixel.

    Pass ``text=None, attn=None`` for the text-free variant.
    """
    h, w = features.shape[-2:]
    if mask.shape[-2:] != (h, w) or (attn is not None and attn.shape[-2:] != (h, w)):
        raise ShapeError("masks must share the feature grid")

    def tile(v):
        return v[..., None, None].expand(*v.shape, h, w)

    parts = [features, tile(prototype)]
    if text is not None:
        parts.append(tile(text))
    parts.append(mask.to(features.dtype)[..., None, :, :])
    if attn is not None:
        parts.append(attn[..., None, :, :])
    return conv1x1(torch.cat(parts, dim=-3), weight, bias)


# ---------------------------------------------------------------- attention blocks

class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, q, k, v):
        def split(x):
            return x.unflatten(-1, (self.heads, -1)).transpose(-3, -2)

        qh, kh, vh = split(self.q_proj(q)), split(self.k_proj(k)), split(self.v_proj(v))
        scores = qh @ kh.transpose(-1, -2) / math.sqrt(qh.shape[-1])
        out = (scores.softmax(dim=-1) @ vh).transpose(-3, -2).flatten(-2)
        return self.out_proj(out)


class AttentionBlock(nn.Module):
    """Pre-norm attention sublayer and feed-forward sublayer, both residual."""

    def __init__(self, dim: int, heads: int, ffn_mult: int = 4, cross: bool = True):
        super().__init__()
        self.cross = cross
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim) if cross else None
        self.attn = MultiHeadAttention(dim, heads)
        self.norm_ffn = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, dim * ffn_mult), nn.GELU(), nn.Linear(dim * ffn_mult, dim))

    def forward(self, x, context=None):
        h = self.norm_q(x)
        kv = self.norm_kv(context) if self.cross else h
        x = x + self.attn(h, kv, kv)
        return x + self.ffn(self.norm_ffn(x))


class QueryAttention(nn.Module):
    """Cross-attention of queries over feature tokens, then self-attention among queries."""

    def __init__(self, dim: int, heads: int, ffn_mult: int = 4):
        super().__init__()
        self.cross_attn = AttentionBlock(dim, heads, ffn_mult, cross=True)
        self.self_attn = AttentionBlock(dim, heads, ffn_mult, cross=False)

    def forward(self, queries: torch.Tensor, features: torch.Tensor) -> torch.Tensor:
        if features.shape[-3] != queries.shape[-1]:
            raise ChannelMismatchError(f"queries have {queries.shape[-1]} channels, features {features.shape[-3]}")
        tokens = features.flatten(-2).transpose(-1, -2)
        return self.self_attn(self.cross_attn(queries, tokens))


def attend(queries: torch.Tensor, features: torch.Tensor, block: QueryAttention) -> torch.Tensor:
    return block(queries, features)


# ---------------------------------------------------------------- encoder

class VlpEncoder(nn.Module):
    def __init__(self, c_vlm: int = 32, c_sam: int = 64, config: ModelConfig | None = None, seed: int = 0):
        super().__init__()
        config = config or ModelConfig()
        if config.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {config.mode!r}")
        self.config = config
        self.mode = config.mode
        c = config.c
        g = torch.Generator().manual_seed(seed)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.input_proj = nn.Conv2d(c_vlm, c, kernel_size=1)
            enh_in = 3 * c + 2 if self.with_text else 2 * c + 1
            self.enhance_ref = nn.Conv2d(enh_in, c, kernel_size=1)
            self.enhance_tgt = nn.Conv2d(enh_in, c, kernel_size=1)
            self.attend_ref = QueryAttention(c, config.heads, config.ffn_mult)
            self.attend_tgt = QueryAttention(c, config.heads, config.ffn_mult)
            self.out_proj = nn.Linear(c, c_sam)
        self.queries = nn.Parameter(torch.randn(config.n_queries, c, generator=g) * 0.02)
        self.register_buffer("pe_freqs", torch.randn(2, c // 2, generator=g) * config.pe_scale)

    @property
    def with_text(self) -> bool:
        return self.mode == WITH_TEXT

    @property
    def c_vlm(self) -> int:
        return self.input_proj.in_channels

    def prompt_stages(self, vlm_target, vlm_reference, reference_mask, text=None) -> dict[str, torch.Tensor]:
        """Run the encoder on feature-level inputs and return every intermediate.

        ``vlm_*`` are (B, C_vlm, H, W), ``reference_mask`` is (B, H, W) at feature
        resolution and ``text`` is (B, C_vlm) (ignored in text-free mode).
        """
        w, b = self.input_proj.weight, self.input_proj.bias
        f_t = project_vlm_features(vlm_target, w, b)
        f_r = project_vlm_features(vlm_reference, w, b)
        ref_mask = reference_mask.to(f_r.dtype)
        proto = mask_avg_pool(f_r, ref_mask)
        pseudo = pseudo_mask(similarity_matrix(f_t, f_r), ref_mask)
        out = {"f_t": f_t, "f_r": f_r, "prototype": proto, "pseudo": pseudo}
        if self.with_text:
            if text is None:
                raise ValueError("with-text encoder needs a text embedding")
            f_text = project_text(text, w, b)
            attn_r = attention_mask(f_r, f_text)
            attn_t = attention_mask(f_t, f_text)
            out.update(f_text=f_text, attn_r=attn_r, attn_t=attn_t)
        else:
            f_text = attn_r = attn_t = None
        er, et = self.enhance_ref, self.enhance_tgt
        fr_enh = enhance_features(f_r, proto, f_text, ref_mask, attn_r, er.weight, er.bias)
        ft_enh = enhance_features(f_t, proto, f_text, pseudo, attn_t, et.weight, et.bias)
        # Fixed positional code so that prompts can carry where the object is.
        pe = fourier_positional_encoding(*fr_enh.shape[-2:], self.pe_freqs.to(fr_enh.dtype))
        fr_enh = fr_enh + pe
        ft_enh = ft_enh + pe
        q = self.queries.expand(*fr_enh.shape[:-3], *self.queries.shape)
        q_r = attend(q, fr_enh, self.attend_ref)
        q_t = attend(q_r, ft_enh, self.attend_tgt)
        out.update(f_r_enh=fr_enh, f_t_enh=ft_enh, q_r=q_r, q_t=q_t, prompts=self.out_proj(q_t))
        return out

    def encode_prompts(self, f_r_enh: torch.Tensor, f_t_enh: torch.Tensor) -> torch.Tensor:
        """Queries attend to enhanced reference then target features; projected to the decoder width."""
        q = self.queries.expand(*f_r_enh.shape[:-3], *self.queries.shape)
        return self.out_proj(attend(attend(q, f_r_enh, self.attend_ref), f_t_enh, self.attend_tgt))

    def forward(self, vlm_target, vlm_reference, reference_mask, text=None) -> torch.Tensor:
        return self.prompt_stages(vlm_target, vlm_reference, reference_mask, text)["prompts"]

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)


# ---------------------------------------------------------------- full pipeline

@dataclass
class EncodedBatch:
    vlm_target: torch.Tensor
    vlm_reference: torch.Tensor
    sam_target: torch.Tensor
    reference_mask: torch.Tensor  # feature resolution
    text: torch.Tensor | None
    gt_mask: torch.Tensor  # image resolution
    class_ids: list[int]


@torch.no_grad()
def encode_episodes(episodes, bundle, with_text: bool = True) -> EncodedBatch:
    """Frozen-backbone features for a list of episodes, stacked along a batch dimension."""
    p = bundle.patch_size
    return EncodedBatch(
        vlm_target=torch.stack([bundle.vlm_encode_image(e.target_image) for e in episodes]),
        vlm_reference=torch.stack([bundle.vlm_encode_image(e.reference_image) for e in episodes]),
        sam_target=torch.stack([bundle.sam_encode_image(e.target_image) for e in episodes]),
        reference_mask=torch.stack([downsample_mask(e.reference_mask, p) for e in episodes]),
        text=torch.stack([bundle.vlm_encode_text(e.text_label) for e in episodes]) if with_text else None,
        gt_mask=torch.stack([torch.as_tensor(np.asarray(e.gt_mask), dtype=torch.float32) for e in episodes]),
        class_ids=[e.class_id for e in episodes],
    )


def forward_encoded(batch: EncodedBatch, bundle, encoder: VlpEncoder) -> torch.Tensor:
    dtype = encoder.queries.dtype
    text = batch.text.to(dtype) if (encoder.with_text and batch.text is not None) else None
    prompts = encoder(batch.vlm_target.to(dtype), batch.vlm_reference.to(dtype), batch.reference_mask, text)
    return bundle.sam_decode_mask(batch.sam_target.to(dtype), prompts)


def forward(episode, bundle, encoder: VlpEncoder, mode: str | None = None) -> torch.Tensor:
    """Mask logits at image resolution for a single episode."""
    if mode is not None and mode != encoder.mode:
        raise ModeMismatchError(f"encoder was built for {encoder.mode!r}, asked to run {mode!r}")
    batch = encode_episodes([episode], bundle, with_text=encoder.with_text)
    return forward_encoded(batch, bundle, encoder)[0]

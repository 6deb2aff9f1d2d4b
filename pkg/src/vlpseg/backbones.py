"""Frozen vision-language and SAM-style backbones.

Everything here is frozen: parameters are registered with ``requires_grad=False``
and never handed to an optimizer.  The toy implementations are deterministic
stand-ins that keep the real interfaces:

* ``ToyOracleVLM`` recognises each class from its colour signature and embeds
  pixels as ``e_class + noise`` so that pixel-text cosine similarity is
  meaningful.
* ``ToySamImageEncoder`` embeds patch appearance (colour) without knowing
  about classes.
* ``ToySamMaskDecoder`` is a two-way attention decoder that turns prompt
  embeddings into mask logits and is differentiable w.r.t. the prompts.

Real pretrained weights plug in through :class:`BackboneAdapter`.
"""
from __future__ import annotations

import hashlib
import math
import zlib
from dataclasses import dataclass
from typing import Protocol

import numpy as np
import torch
import torch.nn.functional as F
from matplotlib.colors import rgb_to_hsv
from torch import nn

from .errors import ChannelMismatchError, DimensionError, UnknownLabelError
from .signatures import CHROMA_THRESHOLD, class_signatures, synthetic_vocabulary

TEXT_TEMPLATE = "a photo of a {}"
MAX_PAIRWISE_COSINE = 0.2


@dataclass
class BackboneConfig:
    kind: str = "toy-oracle"
    seed: int = 0
    patch_size: int = 8
    c_vlm: int = 32
    c_sam: int = 64
    noise_sigma: float = 0.1


def check_image(image: np.ndarray, patch_size: int) -> np.ndarray:
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise DimensionError(f"expected an H x W x 3 image, got shape {image.shape}")
    h, w = image.shape[:2]
    if h % patch_size or w % patch_size:
        raise DimensionError(f"image size {h}x{w} is not divisible by patch_size={patch_size}")
    return image


def fourier_positional_encoding(h: int, w: int, freqs: torch.Tensor) -> torch.Tensor:
    """Random Fourier features of normalised cell centres, shape (2 * freqs.shape[1], h, w)."""
    ys = (torch.arange(h, dtype=freqs.dtype) + 0.5) / h
    xs = (torch.arange(w, dtype=freqs.dtype) + 0.5) / w
    grid = torch.stack(torch.meshgrid(xs, ys, indexing="xy"), dim=-1) * 2 - 1
    proj = 2 * math.pi * grid @ freqs
    return torch.cat([proj.sin(), proj.cos()], dim=-1).permute(2, 0, 1)


def _frozen(t: torch.Tensor) -> nn.Parameter:
    return nn.Parameter(t, requires_grad=False)


def hue_harmonics(hue, n_harmonics: int) -> np.ndarray:
    """Unit-norm circular harmonics of hue; the dot product of two is a sharp kernel in hue difference."""
    angle = 2 * np.pi * np.asarray(hue, dtype=np.float64)[..., None] * np.arange(1, n_harmonics + 1)
    return np.concatenate([np.cos(angle), np.sin(angle)], axis=-1) / math.sqrt(n_harmonics)


def _class_vectors(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    if n <= dim:
        q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        return q[:, :n].T.copy()
    # More vectors than dimensions: rejection-sample for low pairwise cosine.
    vecs = []
    for _ in range(n * 1000):
        v = rng.standard_normal(dim)
        v /= np.linalg.norm(v)
        if all(v @ u < MAX_PAIRWISE_COSINE for u in vecs):
            vecs.append(v)
            if len(vecs) == n:
                return np.stack(vecs)
    raise ValueError(
        f"cannot place {n} embeddings in {dim} dims with pairwise cosine < {MAX_PAIRWISE_COSINE}; "
        "increase backbone.c_vlm"
    )


class ToyOracleVLM(nn.Module):
    """Pixel-level vision-language oracle.

    Each class gets a fixed unit vector; background gets one more.  A pixel is
    assigned to the class whose hue is nearest (or to background when its
    chroma is low), and a patch embedding is the mean of its pixels' vectors
    plus Gaussian noise.  The noise stream is seeded by the image bytes, so the
    encoder stays a pure function of its input.
    """

    def __init__(self, vocabulary: dict[int, str], hues, c_vlm=32, patch_size=8, seed=0, noise_sigma=0.1):
        super().__init__()
        self.vocabulary = dict(vocabulary)
        self._label_to_id = {label: i for i, label in self.vocabulary.items()}
        self.class_ids = sorted(self.vocabulary)
        self.patch_size = patch_size
        self.seed = seed
        self.noise_sigma = noise_sigma
        self.text_calls = 0
        rng = np.random.default_rng([seed, 0x5EED])
        vectors = _class_vectors(len(self.class_ids) + 1, c_vlm, rng)
        # Row k holds class self.class_ids[k]; the last row is background.
        self.class_vectors = _frozen(torch.tensor(vectors, dtype=torch.float32))
        self.class_hues = _frozen(torch.tensor(np.asarray(hues, dtype=np.float32)))

    @property
    def c_vlm(self) -> int:
        return self.class_vectors.shape[1]

    def pixel_classes(self, image: np.ndarray) -> np.ndarray:
        """Row index into ``class_vectors`` for every pixel (last row = background)."""
        hue = rgb_to_hsv(np.clip(image, 0, 1))[..., 0]
        chroma = image.max(-1) - image.min(-1)
        d = np.abs(hue[..., None] - self.class_hues.numpy())
        d = np.minimum(d, 1 - d)
        idx = d.argmin(-1)
        idx[chroma < CHROMA_THRESHOLD] = len(self.class_ids)
        return idx

    def encode_image(self, image) -> torch.Tensor:
        image = check_image(image, self.patch_size)
        p = self.patch_size
        h, w = image.shape[0] // p, image.shape[1] // p
        n_rows = len(self.class_ids) + 1
        onehot = np.eye(n_rows, dtype=np.float32)[self.pixel_classes(image)]
        frac = onehot.reshape(h, p, w, p, n_rows).mean(axis=(1, 3))
        feats = frac @ self.class_vectors.numpy()
        # Mean of p*p iid per-pixel N(0, sigma^2) draws is N(0, sigma^2 / p^2).
        rng = np.random.default_rng([self.seed, zlib.crc32(image.tobytes())])
        feats = feats + rng.standard_normal(feats.shape).astype(np.float32) * (self.noise_sigma / p)
        return torch.from_numpy(np.ascontiguousarray(feats.transpose(2, 0, 1)))

    def label_id(self, text: str) -> int:
        if not text:
            raise ValueError("text must be non-empty")
        prefix = TEXT_TEMPLATE.format("")
        label = text[len(prefix):] if text.startswith(prefix) else text
        try:
            return self._label_to_id[label.strip()]
        except KeyError:
            raise UnknownLabelError(f"label {label!r} is not in the oracle vocabulary") from None

    def encode_text(self, text: str) -> torch.Tensor:
        self.text_calls += 1
        row = self.class_ids.index(self.label_id(text))
        return self.class_vectors[row].detach().clone()


def _shared_basis(c_sam: int, seed: int) -> torch.Tensor:
    """Orthogonal basis shared by the toy SAM encoder and decoder.

    The first half of the columns spans appearance channels, the second half
    spans positional channels.
    """
    g = torch.Generator().manual_seed(seed * 7919 + 3)
    q, _ = torch.linalg.qr(torch.randn(c_sam, c_sam, generator=g, dtype=torch.float64))
    return q.float()


def _check_c_sam(c_sam: int) -> None:
    if c_sam < 8 or c_sam % 4:
        raise ValueError(f"backbone.c_sam must be a multiple of 4 and at least 8, got {c_sam}")


class ToySamImageEncoder(nn.Module):
    """Class-agnostic appearance embedding.

    Every pixel is described by circular harmonics of its hue weighted by how
    saturated it is, an objectness channel and a constant channel; patches
    average their pixels and the result is rotated into the appearance half of
    a fixed orthogonal basis.  Two patches of the same colour get the same
    embedding whatever class that colour belongs to, which is the property a
    promptable segmenter relies on.
    """

    def __init__(self, c_sam=64, patch_size=8, seed=0):
        super().__init__()
        _check_c_sam(c_sam)
        self.patch_size = patch_size
        self.n_harmonics = c_sam // 4 - 1
        self.basis = _frozen(_shared_basis(c_sam, seed)[:, : c_sam // 2].contiguous())

    def pixel_features(self, image: np.ndarray) -> np.ndarray:
        hue = rgb_to_hsv(np.clip(image, 0, 1))[..., 0]
        weight = np.clip((image.max(-1) - image.min(-1)) / (2 * CHROMA_THRESHOLD), 0, 1)
        harm = hue_harmonics(hue, self.n_harmonics) * weight[..., None]
        return np.concatenate([harm, weight[..., None], np.ones_like(weight)[..., None]], axis=-1)

    def encode_image(self, image) -> torch.Tensor:
        image = check_image(image, self.patch_size)
        p = self.patch_size
        h, w = image.shape[0] // p, image.shape[1] // p
        feats = self.pixel_features(image)
        feats = feats.reshape(h, p, w, p, -1).mean(axis=(1, 3)).astype(np.float32)
        return torch.einsum("hwd,cd->chw", torch.from_numpy(feats), self.basis)


def _single_head_attention(q, k, v, wq, wk, wv, wo, scale):
    scores = (q @ wq.T) @ (k @ wk.T).transpose(-1, -2) * scale
    return (scores.softmax(dim=-1) @ (v @ wv.T)) @ wo.T


class ToySamMaskDecoder(nn.Module):
    """Two-way attention mask decoder with fixed, structured weights.

    Image tokens are the appearance embedding plus a dense Fourier positional
    encoding living in the other half of the shared basis.  Incoming prompts
    are projected onto the positional, objectness and bias channels.  Prompts attend to
    image tokens by position and collect their appearance, image tokens then
    attend to the updated prompts, and the 2x-upsampled tokens are dotted with
    the mean prompt.  A prompt pointing at an object therefore yields high
    logits on pixels that look like that object, much as a pretrained
    promptable segmenter behaves.  The logits are bilinearly resized to the
    image resolution.
    """

    def __init__(self, c_sam=64, patch_size=8, seed=0, attention_gain=20.0, logit_scale=8.0):
        super().__init__()
        _check_c_sam(c_sam)
        g = torch.Generator().manual_seed(seed * 7919 + 2)
        self.patch_size = patch_size
        self.attention_gain = attention_gain
        self.logit_scale = logit_scale
        basis = _shared_basis(c_sam, seed)
        appearance, position = basis[:, : c_sam // 2], basis[:, c_sam // 2:]
        self.pe_freqs = _frozen(torch.randn(2, c_sam // 4, generator=g))
        self.pe_basis = _frozen(position.contiguous())
        eye = torch.eye(c_sam)
        # Prompts may steer position, objectness and bias but cannot inject a
        # colour: appearance reaches the mask only through attention.
        control = torch.cat([position, appearance[:, -2:]], dim=1)
        self.prompt_proj = _frozen(control @ control.T)
        self.p2i_q = _frozen(position @ position.T)
        self.p2i_k = _frozen(position @ position.T)
        self.p2i_v = _frozen(appearance @ appearance.T)
        self.p2i_o = _frozen(eye.clone())
        scale = 1 / math.sqrt(c_sam)
        for proj in ("q", "k", "v"):
            setattr(self, f"i2p_{proj}", _frozen(torch.randn(c_sam, c_sam, generator=g) * scale))
        self.i2p_o = _frozen(torch.randn(c_sam, c_sam, generator=g) * (0.1 * scale))

    @property
    def c_sam(self) -> int:
        return self.pe_basis.shape[0]

    def dense_pe(self, h: int, w: int, dtype=torch.float32) -> torch.Tensor:
        """Positional encoding added to the image embedding, shape (C_sam, h, w)."""
        freqs = self.pe_freqs.to(dtype)
        pe = fourier_positional_encoding(h, w, freqs) / math.sqrt(freqs.shape[1])
        return torch.einsum("dhw,cd->chw", pe, self.pe_basis.to(dtype))

    def forward(self, sam_emb: torch.Tensor, prompts: torch.Tensor) -> torch.Tensor:
        if prompts.shape[-1] != self.c_sam or sam_emb.shape[-3] != self.c_sam:
            raise ChannelMismatchError(
                f"decoder expects {self.c_sam} channels, got prompts {tuple(prompts.shape)} "
                f"and embedding {tuple(sam_emb.shape)}"
            )
        dtype = prompts.dtype
        sam_emb = sam_emb.to(dtype)
        w = {name: getattr(self, name).to(dtype) for name, _ in self.named_parameters()}
        batch = sam_emb.shape[:-3]
        c, h, wd = sam_emb.shape[-3:]
        tokens = (sam_emb + self.dense_pe(h, wd, dtype)).flatten(-2).transpose(-1, -2)
        prompts = prompts @ w["prompt_proj"].T
        prompts = prompts + _single_head_attention(
            prompts, tokens, tokens, w["p2i_q"], w["p2i_k"], w["p2i_v"], w["p2i_o"], self.attention_gain
        )
        tokens = tokens + _single_head_attention(
            tokens, prompts, prompts, w["i2p_q"], w["i2p_k"], w["i2p_v"], w["i2p_o"], 1 / math.sqrt(c)
        )
        grid = tokens.transpose(-1, -2).reshape(-1, c, h, wd)
        up = F.interpolate(grid, scale_factor=2, mode="bilinear", align_corners=False)
        mean_prompt = prompts.mean(dim=-2).reshape(-1, c)
        small = torch.einsum("bchw,bc->bhw", up, mean_prompt) * self.logit_scale
        out = F.interpolate(small[:, None], size=(h * self.patch_size, wd * self.patch_size),
                            mode="bilinear", align_corners=False)
        return out.reshape(*batch, h * self.patch_size, wd * self.patch_size)


def module_fingerprint(module: nn.Module) -> str:
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        t = tensor.detach().cpu().contiguous()
        digest.update(f"{name}|{t.dtype}|{tuple(t.shape)}|".encode())
        digest.update(t.numpy().tobytes())
    return digest.hexdigest()


class BackboneAdapter(Protocol):
    """Signature a pretrained backbone must satisfy to replace the toy bundle.

    ``vlm_encode_image(image: HxWx3 float array) -> Tensor[C_vlm, H/p, W/p]``
    ``vlm_encode_text(text: str) -> Tensor[C_vlm]``
    ``sam_encode_image(image) -> Tensor[C_sam, H/p, W/p]``
    ``sam_decode_mask(sam_emb: Tensor[..., C_sam, h, w], prompts: Tensor[..., N, C_sam]) -> Tensor[..., H, W]``
    """

    def vlm_encode_image(self, image) -> torch.Tensor: ...
    def vlm_encode_text(self, text: str) -> torch.Tensor: ...
    def sam_encode_image(self, image) -> torch.Tensor: ...
    def sam_decode_mask(self, sam_emb: torch.Tensor, prompts: torch.Tensor) -> torch.Tensor: ...


@dataclass
class BackboneBundle:
    config: BackboneConfig
    vlm: ToyOracleVLM
    sam_encoder: ToySamImageEncoder
    sam_decoder: ToySamMaskDecoder

    @property
    def patch_size(self) -> int:
        return self.config.patch_size

    @property
    def vocabulary(self) -> dict[int, str]:
        return self.vlm.vocabulary

    def components(self) -> dict[str, nn.Module]:
        # The oracle VLM serves as both the VLM image and text encoder.
        return {"vlm": self.vlm, "sam_image_encoder": self.sam_encoder, "sam_mask_decoder": self.sam_decoder}

    @property
    def frozen(self) -> dict[str, bool]:
        flags = {name: not any(p.requires_grad for p in m.parameters()) for name, m in self.components().items()}
        return {
            "vlm_image_encoder": flags["vlm"],
            "vlm_text_encoder": flags["vlm"],
            "sam_image_encoder": flags["sam_image_encoder"],
            "sam_mask_decoder": flags["sam_mask_decoder"],
        }

    def fingerprints(self) -> dict[str, str]:
        return {name: module_fingerprint(m) for name, m in self.components().items()}

    def state_tensors(self) -> dict[str, torch.Tensor]:
        return {
            f"{name}.{key}": t.detach().clone()
            for name, m in self.components().items()
            for key, t in m.state_dict().items()
        }

    def vlm_encode_image(self, image) -> torch.Tensor:
        return self.vlm.encode_image(image)

    def vlm_encode_text(self, text: str) -> torch.Tensor:
        return self.vlm.encode_text(text)

    def sam_encode_image(self, image) -> torch.Tensor:
        return self.sam_encoder.encode_image(image)

    def sam_decode_mask(self, sam_emb: torch.Tensor, prompts: torch.Tensor) -> torch.Tensor:
        return self.sam_decoder(sam_emb, prompts)


def make_backbones(config: BackboneConfig | None = None, n_classes: int = 20, signature_seed: int = 0,
                   vocabulary: dict[int, str] | None = None, hues=None) -> BackboneBundle:
    """Build a frozen bundle.  ``config.kind`` selects ``toy-oracle`` or ``external``."""
    config = config or BackboneConfig()
    if config.kind == "external":
        raise NotImplementedError(
            "external backbones are not bundled; wrap pretrained weights in an object "
            "implementing vlpseg.backbones.BackboneAdapter"
        )
    if config.kind != "toy-oracle":
        raise ValueError(f"unknown backbone.kind {config.kind!r}")
    if vocabulary is None:
        vocabulary = synthetic_vocabulary(n_classes)
    if hues is None:
        sigs = {s.class_id: s.hue for s in class_signatures(len(vocabulary), signature_seed)}
        hues = [sigs[i] for i in sorted(vocabulary)]
    vlm = ToyOracleVLM(vocabulary, hues, config.c_vlm, config.patch_size, config.seed, config.noise_sigma)
    bundle = BackboneBundle(
        config,
        vlm,
        ToySamImageEncoder(config.c_sam, config.patch_size, config.seed),
        ToySamMaskDecoder(config.c_sam, config.patch_size, config.seed),
    )
    for m in bundle.components().values():
        m.eval()
    return bundle

"""Miniature promptable segmentation network.

Three components, as in SAM: a ViT image encoder, a prompt encoder for points
and boxes, and a lightweight mask decoder. An optional custom semantic head
replaces the prompt path for prompt-free, class-aware segmentation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ShapeError, UsageError, ValidationError
from .layers import (
    CrossAttention,
    LayerNorm,
    Linear,
    Mlp,
    Module,
    attend,
    channels_last_norm,
    fan_in_uniform,
    merge_heads,
    param,
    split_heads,
    trunc_normal,
)
from .tensor import Tensor

# prompt token types
BG_POINT, FG_POINT, BOX_TOP_LEFT, BOX_BOTTOM_RIGHT = range(4)

# std of the Fourier basis; lower values give smoother positional codes
POSITIONAL_SCALE = 0.5
# per-pixel channels of the upsampled mask features
MASK_CHANNELS = 64
# decoder weights use fan-in uniform init
FAN_IN = "fan_in"


@dataclass(frozen=True)
class BackbonePreset:
    name: str
    embed_dim: int
    depth: int
    heads: int
    patch: int = 8
    image_size: int = 128

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ConfigurationError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.image_size % self.patch:
            raise ConfigurationError(f"image_size {self.image_size} not divisible by patch {self.patch}")
        if self.embed_dim % 8:
            raise ConfigurationError("embed_dim must be a multiple of 8")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch


PRESETS = {
    "mini": BackbonePreset("mini", 64, 4, 4),
    "small": BackbonePreset("small", 128, 6, 8),
    "base": BackbonePreset("base", 192, 8, 8),
}


def get_preset(name: str, image_size: int | None = None) -> BackbonePreset:
    try:
        preset = PRESETS[name]
    except KeyError:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    if image_size is not None and image_size != preset.image_size:
        preset = BackbonePreset(name, preset.embed_dim, preset.depth, preset.heads, preset.patch, image_size)
    return preset


@dataclass
class PromptSet:
    """Boxes as pixel-edge coordinates ``(x_min, y_min, x_max, y_max)``;
    points as ``(x, y, is_foreground)``."""

    boxes: list[tuple[float, float, float, float]] = field(default_factory=list)
    points: list[tuple[float, float, bool]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.boxes) + len(self.points)


# ---------------------------------------------------------------------------
# components


class EncoderBlock(Module):
    """Pre-norm transformer block with global self-attention."""

    def __init__(self, d: int, heads: int, rng):
        self.norm1 = LayerNorm(d)
        self.qkv = Linear(d, 3 * d, rng)
        self.proj = Linear(d, d, rng)
        self.norm2 = LayerNorm(d)
        self.mlp = Mlp(d, 4 * d, rng)
        self._heads = heads

    def __call__(self, x: Tensor) -> Tensor:
        d = x.shape[-1]
        h = self._heads
        qkv = self.qkv(self.norm1(x))
        q, k, v = (split_heads(T.slice_axis(qkv, -1, i * d, (i + 1) * d), h) for i in range(3))
        x = x + self.proj(merge_heads(attend(q, k, v)))
        return x + self.mlp(self.norm2(x))


class ImageEncoder(Module):
    def __init__(self, preset: BackbonePreset, rng):
        d, p = preset.embed_dim, preset.patch
        self.patch_embed = Module()
        self.patch_embed.weight = param(trunc_normal(rng, (d, 3, p, p)))
        self.patch_embed.bias = param(np.zeros(d))
        self.pos_embed = param(trunc_normal(rng, (preset.grid**2, d)))
        self.blocks = [EncoderBlock(d, preset.heads, rng) for _ in range(preset.depth)]
        # filled by adapters.insert_prompt_layers; prompt_layers[i] runs after blocks[i]
        self.prompt_layers: list[Module] = []
        self._patch = p

    def tokens(self, images: Tensor, positional: bool = True) -> Tensor:
        """(B, 3, S, S) -> (B, N, d) token sequence after all blocks."""
        x = T.conv2d(images, self.patch_embed.weight, self.patch_embed.bias, stride=self._patch)
        B, d, g, _ = x.shape
        x = T.transpose(T.reshape(x, (B, d, g * g)), (0, 2, 1))
        if positional:
            x = x + self.pos_embed
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i < len(self.prompt_layers):
                x = self.prompt_layers[i](x)
        return x


class PromptEncoder(Module):
    """Random-Fourier positional encoding of coordinates plus learned type embeddings.

    The basis is Gaussian with std ``POSITIONAL_SCALE``; type embeddings are
    standard normal so they are on the same scale as the positional codes.
    """

    def __init__(self, d: int, rng):
        self.fourier_basis = (POSITIONAL_SCALE * rng.standard_normal((2, d // 2))).astype(np.float32)
        self.type_embed = param(rng.standard_normal((4, d)))

    def positional(self, coords: np.ndarray) -> np.ndarray:
        """Encode ``(..., 2)`` coordinates normalized to [0, 1]."""
        c = 2.0 * np.asarray(coords, dtype=np.float32) - 1.0
        proj = (2.0 * np.pi) * (c @ self.fourier_basis)
        return np.concatenate([np.sin(proj), np.cos(proj)], axis=-1).astype(np.float32)

    def dense(self, grid: int) -> np.ndarray:
        """(grid*grid, d) encoding of token-cell centres, row-major."""
        centres = (np.arange(grid) + 0.5) / grid
        yy, xx = np.meshgrid(centres, centres, indexing="ij")
        return self.positional(np.stack([xx, yy], axis=-1).reshape(-1, 2))


class TwoWayBlock(Module):
    """Token self-attention, tokens reading the image, then the image reading the tokens.

    Every attention adds the original tokens (queries side) or the dense
    positional encoding (image side) to its queries and keys.
    """

    def __init__(self, d: int, heads: int, rng, first: bool = False):
        self._first = first
        self.token_self = CrossAttention(d, heads, rng, FAN_IN)
        self.norm0 = LayerNorm(d)
        self.token_to_image = CrossAttention(d, heads, rng, FAN_IN)
        self.norm1 = LayerNorm(d)
        self.token_mlp = Mlp(d, 2 * d, rng, FAN_IN)
        self.norm2 = LayerNorm(d)
        self.image_to_token = CrossAttention(d, heads, rng, FAN_IN)
        self.norm3 = LayerNorm(d)
        self.image_mlp = Mlp(d, 2 * d, rng, FAN_IN)
        self.norm4 = LayerNorm(d)

    def __call__(self, tok: Tensor, src: Tensor, tokens0: Tensor, pe: Tensor) -> tuple[Tensor, Tensor]:
        q = tok if self._first else tok + tokens0  # the first block's tokens already are the originals
        tok = self.norm0(tok + self.token_self(q, q, tok))
        tok = self.norm1(tok + self.token_to_image(tok + tokens0, src + pe, src))
        tok = self.norm2(tok + self.token_mlp(tok))
        src = self.norm3(src + self.image_to_token(src + pe, tok + tokens0, tok))
        src = self.norm4(src + self.image_mlp(src))
        return tok, src


class MaskDecoder(Module):
    """Two-way attention blocks, a final token-to-image attention, two
    transposed-conv upsamplers and a hypernetwork that turns each output
    token into a per-pixel mask projection.

    Output tokens are the single ``mask_token`` for prompted decoding or the
    ``class_tokens`` (background first) for prompt-free semantic decoding.
    """

    def __init__(self, d: int, heads: int, num_classes: int, rng, depth: int = 1):
        c = MASK_CHANNELS
        self.mask_token = param(rng.standard_normal((1, d)))
        self.class_tokens = param(rng.standard_normal((num_classes + 1, d)))
        self.blocks = [TwoWayBlock(d, heads, rng, first=i == 0) for i in range(depth)]
        self.final_to_image = CrossAttention(d, heads, rng, FAN_IN)
        self.norm_final = LayerNorm(d)
        self.up1 = Module()
        self.up1.weight = param(fan_in_uniform(rng, (d, 4 * c, 2, 2), 4 * c * 4))
        self.up1.bias = param(np.zeros(4 * c))
        self.up_norm = LayerNorm(4 * c)
        self.up2 = Module()
        self.up2.weight = param(fan_in_uniform(rng, (4 * c, c, 2, 2), c * 4))
        self.up2.bias = param(np.zeros(c))
        self.hyper = Mlp(d, d, rng, FAN_IN)
        self.hyper_out = Linear(d, c, rng, init=FAN_IN)

    def attention_layers(self) -> list[tuple[str, CrossAttention]]:
        """Cross-attention layers between tokens and image, by dotted name."""
        out = []
        for i, blk in enumerate(self.blocks):
            out += [(f"block{i}.token_to_image", blk.token_to_image), (f"block{i}.image_to_token", blk.image_to_token)]
        return out + [("final_to_image", self.final_to_image)]

    def __call__(self, embedding: Tensor, dense_pe: np.ndarray, prompts: Tensor | None, out_tokens: Tensor) -> Tensor:
        """embedding (B, d, g, g), prompts (B, n, d) or None -> (B, n_out, 4g, 4g) logits."""
        B, d, g, _ = embedding.shape
        src = T.transpose(T.reshape(embedding, (B, d, g * g)), (0, 2, 1))
        tokens0 = T.repeat_batch(out_tokens, B)
        if prompts is not None:
            tokens0 = T.concat([tokens0, prompts], axis=1)
        pe = T.Tensor(dense_pe)

        tok = tokens0
        for blk in self.blocks:
            tok, src = blk(tok, src, tokens0, pe)
        tok = self.norm_final(tok + self.final_to_image(tok + tokens0, src + pe, src))

        fmap = T.reshape(T.transpose(src, (0, 2, 1)), (B, d, g, g))
        up = T.transpose_conv2d(fmap, self.up1.weight, self.up1.bias, stride=2)
        up = T.gelu(channels_last_norm(up, self.up_norm))
        up = T.gelu(T.transpose_conv2d(up, self.up2.weight, self.up2.bias, stride=2))
        _, c, H, W = up.shape

        n_out = out_tokens.shape[0]
        heads_out = T.slice_axis(tok, 1, 0, n_out)
        hyper = self.hyper_out(T.gelu(self.hyper(heads_out)))  # (B, n_out, c)
        logits = T.matmul(hyper, T.reshape(up, (B, c, H * W)))
        return T.reshape(logits, (B, n_out, H, W))


def _conv(rng, c_in: int, c_out: int, k: int, groups: int = 1) -> Module:
    m = Module()
    m.weight = param(fan_in_uniform(rng, (c_out, c_in // groups, k, k), c_in // groups * k * k))
    m.bias = param(np.zeros(c_out))
    return m


def _transpose_conv(rng, c_in: int, c_out: int) -> Module:
    m = Module()
    m.weight = param(fan_in_uniform(rng, (c_in, c_out, 2, 2), c_out * 4))
    m.bias = param(np.zeros(c_out))
    return m


class SemanticHead(Module):
    """Grouped convs for spatial context, transposed convs with grouped-conv
    refinement for upsampling, and a per-pixel linear classifier.

    The context convs run on the token grid as residual blocks, so each token
    sees its 5 x 5 neighbourhood before upsampling. Every conv is followed by a
    channel layer norm and GELU.
    """

    def __init__(self, d: int, num_classes: int, rng, groups: int = 4, context: int = 2):
        c1, c2 = d // 2, d // 4
        self.in_norm = LayerNorm(d)
        self.context = [_conv(rng, d, d, 3, groups) for _ in range(context)]
        self.context_norms = [LayerNorm(d) for _ in range(context)]
        self.up1 = _transpose_conv(rng, d, c1)
        self.norm1 = LayerNorm(c1)
        self.conv1 = _conv(rng, c1, c1, 3, groups)
        self.norm2 = LayerNorm(c1)
        self.up2 = _transpose_conv(rng, c1, c2)
        self.norm3 = LayerNorm(c2)
        self.conv2 = _conv(rng, c2, c2, 3, groups)
        self.norm4 = LayerNorm(c2)
        self.classifier = Linear(c2, num_classes + 1, rng, init=FAN_IN)
        self._groups = groups

    def __call__(self, embedding: Tensor) -> Tensor:
        """(B, d, g, g) -> (B, C + 1, 4g, 4g) logits."""
        gr = self._groups

        def conv(x, m, norm):
            return T.gelu(channels_last_norm(T.conv2d(x, m.weight, m.bias, padding=1, groups=gr), norm))

        def up(x, m, norm):
            return T.gelu(channels_last_norm(T.transpose_conv2d(x, m.weight, m.bias, stride=2), norm))

        x = channels_last_norm(embedding, self.in_norm)
        for m, norm in zip(self.context, self.context_norms):
            x = x + conv(x, m, norm)
        x = conv(up(x, self.up1, self.norm1), self.conv1, self.norm2)
        x = conv(up(x, self.up2, self.norm3), self.conv2, self.norm4)
        y = self.classifier(T.transpose(x, (0, 2, 3, 1)))
        return T.transpose(y, (0, 3, 1, 2))


class MiniSamModel(Module):
    def __init__(self, preset: BackbonePreset, num_classes: int, seed: int, semantic_head: bool):
        rng = np.random.default_rng(seed)
        d = preset.embed_dim
        self.encoder = ImageEncoder(preset, rng)
        self.prompt_encoder = PromptEncoder(d, rng)
        self.mask_decoder = MaskDecoder(d, preset.heads, num_classes, rng)
        self.head = SemanticHead(d, num_classes, rng) if semantic_head else None
        self._preset = preset
        self._num_classes = num_classes
        self._seed = seed
        self._dense_pe = self.prompt_encoder.dense(preset.grid)
        # adapter bookkeeping, written by the adapters module
        self._adapters: dict[str, dict] = {}

    @property
    def preset(self) -> BackbonePreset:
        return self._preset

    @property
    def num_classes(self) -> int:
        return self._num_classes

    @property
    def seed(self) -> int:
        return self._seed

    @property
    def adapters(self) -> dict[str, dict]:
        return self._adapters

    def state(self) -> dict[str, np.ndarray]:
        """All parameters and buffers by dotted name."""
        out = {n: p.data for n, p in self.named_parameters()}
        out.update(self.named_buffers())
        return out

    def metadata(self) -> dict:
        return {
            "preset": asdict(self._preset),
            "num_classes": self._num_classes,
            "seed": self._seed,
            "semantic_head": self.head is not None,
            "adapters": self._adapters,
        }


def build_model(preset: BackbonePreset | str, num_classes: int, seed: int = 0, semantic_head: bool = False) -> MiniSamModel:
    """Freshly initialized model: encoder trunc-normal (std 0.02), decoder and head fan-in uniform, zero biases."""
    if isinstance(preset, str):
        preset = get_preset(preset)
    if num_classes < 1:
        raise ConfigurationError("num_classes must be >= 1")
    return MiniSamModel(preset, num_classes, seed, semantic_head)


# ---------------------------------------------------------------------------
# forward passes


def _as_batch(images: Tensor, size: int) -> tuple[Tensor, bool]:
    single = images.ndim == 3
    if single:
        images = T.reshape(images, (1,) + images.shape)
    if images.ndim != 4 or images.shape[1] != 3 or images.shape[2:] != (size, size):
        raise ShapeError(f"expected image 3x{size}x{size} (optionally batched), got {images.shape}")
    return images, single


def encode_image(model: MiniSamModel, image: Tensor, positional: bool = True) -> Tensor:
    """(3, S, S) -> (d, g, g) embedding; a leading batch axis is carried through."""
    images, single = _as_batch(T.as_tensor(image), model.preset.image_size)
    tokens = model.encoder.tokens(images, positional)
    B, N, d = tokens.shape
    g = model.preset.grid
    emb = T.reshape(T.transpose(tokens, (0, 2, 1)), (B, d, g, g))
    return T.reshape(emb, (d, g, g)) if single else emb


def _check_box(box, size: int) -> None:
    x0, y0, x1, y1 = box
    if not (0 <= x0 < x1 <= size and 0 <= y0 < y1 <= size):
        raise ValidationError(f"box {tuple(box)} is not a valid box inside a {size}x{size} image")


def encode_prompts(model: MiniSamModel, prompts: PromptSet) -> Tensor:
    """Prompt tokens (n_tokens, d): one per point, then two per box (corners)."""
    if len(prompts) == 0:
        raise UsageError("at least one prompt is required")
    S = model.preset.image_size
    coords, types = [], []
    for x, y, fg in prompts.points:
        if not (0 <= x <= S and 0 <= y <= S):
            raise ValidationError(f"point {(x, y)} outside a {S}x{S} image")
        coords.append((x, y))
        types.append(FG_POINT if fg else BG_POINT)
    for box in prompts.boxes:
        _check_box(box, S)
        coords += [(box[0], box[1]), (box[2], box[3])]
        types += [BOX_TOP_LEFT, BOX_BOTTOM_RIGHT]
    pe = model.prompt_encoder.positional(np.asarray(coords, dtype=np.float64) / S)
    return T.add(T.Tensor(pe), T.take_rows(model.prompt_encoder.type_embed, types))


def encode_boxes(model: MiniSamModel, boxes) -> Tensor:
    """One prompt group per box: (G, 2, d) corner tokens."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    S = model.preset.image_size
    for b in boxes:
        _check_box(b, S)
    pe = model.prompt_encoder.positional(boxes.reshape(-1, 2, 2) / S)
    types = model.prompt_encoder.type_embed
    corner = T.slice_axis(types, 0, BOX_TOP_LEFT, BOX_BOTTOM_RIGHT + 1)  # (2, d)
    return T.add(T.Tensor(pe), corner)


def encode_points(model: MiniSamModel, points) -> Tensor:
    """One prompt group per point: (G, 1, d); ``points`` rows are (x, y, is_fg)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    S = model.preset.image_size
    pe = model.prompt_encoder.positional(pts[:, None, :2] / S)
    types = np.where(pts[:, 2] > 0, FG_POINT, BG_POINT)
    emb = T.reshape(T.take_rows(model.prompt_encoder.type_embed, types), (len(pts), 1, -1))
    return T.add(T.Tensor(pe), emb)


def _fit_batch(embedding: Tensor, groups: int) -> Tensor:
    if embedding.ndim == 3:
        return T.repeat_batch(embedding, groups)
    if embedding.shape[0] != groups:
        raise ShapeError(f"{embedding.shape[0]} embeddings for {groups} prompt groups")
    return embedding


def decode_mask(model: MiniSamModel, image_embedding: Tensor, prompt_tokens: Tensor) -> Tensor:
    """Binary-mask logits, one S x S map per prompt group.

    ``prompt_tokens`` is (n, d) for a single group or (G, n, d); the embedding is
    (d, g, g), shared by all groups, or (G, d, g, g).
    """
    if prompt_tokens.ndim == 2:
        prompt_tokens = T.reshape(prompt_tokens, (1,) + prompt_tokens.shape)
    G = prompt_tokens.shape[0]
    emb = _fit_batch(image_embedding, G)
    S = model.preset.image_size
    dec = model.mask_decoder
    low = dec(emb, model._dense_pe, prompt_tokens, dec.mask_token)
    low = T.reshape(low, (G,) + low.shape[2:])
    return T.resize_bilinear(low, (S, S))


def decode_semantic(model: MiniSamModel, image_embedding: Tensor) -> Tensor:
    """Prompt-free class logits from the mask decoder's class tokens: (C+1, S, S) per image."""
    single = image_embedding.ndim == 3
    emb = _fit_batch(image_embedding, 1) if single else image_embedding
    dec = model.mask_decoder
    S = model.preset.image_size
    out = T.resize_bilinear(dec(emb, model._dense_pe, None, dec.class_tokens), (S, S))
    return T.reshape(out, out.shape[1:]) if single else out


def semantic_head(model: MiniSamModel, image_embedding: Tensor) -> Tensor:
    """Custom-head class logits (C+1, S, S); channel 0 is background."""
    if model.head is None:
        raise ConfigurationError("model was built without a semantic head")
    single = image_embedding.ndim == 3
    emb = _fit_batch(image_embedding, 1) if single else image_embedding
    S = model.preset.image_size
    out = T.resize_bilinear(model.head(emb), (S, S))
    return T.reshape(out, out.shape[1:]) if single else out


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 1.0


def dedupe_masks(masks: list[np.ndarray], iou_dedup: float) -> list[np.ndarray]:
    """Drop masks overlapping a larger kept mask with IoU above ``iou_dedup``."""
    order = sorted(range(len(masks)), key=lambda i: (-int(masks[i].sum()), i))
    kept: list[np.ndarray] = []
    for i in order:
        if all(mask_iou(masks[i], k) <= iou_dedup for k in kept):
            kept.append(masks[i])
    return kept


def grid_prompt_inference(
    model: MiniSamModel, image: Tensor, grid_n: int = 4, iou_dedup: float = 0.9
) -> list[np.ndarray]:
    """Automatic mode: one foreground point per grid cell, masks thresholded at logit 0."""
    if grid_n < 1:
        raise UsageError("grid_n must be >= 1")
    S = model.preset.image_size
    emb = encode_image(model, image)
    centres = (np.arange(grid_n) + 0.5) * S / grid_n
    pts = [(x, y, 1) for y in centres for x in centres]
    logits = decode_mask(model, emb, encode_points(model, pts)).data
    return dedupe_masks([m > 0 for m in logits], iou_dedup)

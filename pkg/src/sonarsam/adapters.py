"""Fine-tuning machinery: LoRA, prompt layers and tuning plans.

A tuning plan is the pair (encoder mode, decoder mode) with the legend codes

    encoder: FZ frozen, FF full fine-tune, L LoRA, P prompt layers
    decoder: FF full fine-tune, L LoRA, C custom segmentation head

and decides which parameters receive gradients. The decoder side covers
both the prompt encoder and the mask decoder.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError
from .layers import Linear, LoraLayer, Module
from .model import MiniSamModel
from .tensor import Tensor

ENCODER_MODES = ("FZ", "FF", "L", "P")
DECODER_MODES = ("FF", "L", "C")

_ENCODER = "encoder."
_DECODER_SIDE = ("prompt_encoder.", "mask_decoder.")
_HEAD = "head."


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 4
    alpha: float | None = None  # defaults to rank, i.e. scale 1
    targets: tuple[str, ...] = ("q", "v")

    @property
    def scale_alpha(self) -> float:
        return float(self.rank if self.alpha is None else self.alpha)


class PromptLayer(Module):
    """Token-wise bottleneck ``x + up(gelu(down(x)))`` with a zero-initialized up-projection."""

    def __init__(self, d: int, rng):
        self.down = Linear(d, d // 4, rng)
        self.up = Linear(d // 4, d, rng, zero=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.up(T.gelu(self.down(x)))


def _adapter_rng(model: MiniSamModel, tag: int) -> np.random.Generator:
    return np.random.default_rng([model.seed, tag])


def _lora_sites(model: MiniSamModel, component: str) -> list[tuple[str, Linear, int, int, int]]:
    """(name, linear, target index, start, width) for every LoRA site in a component."""
    sites = []
    if component == "encoder":
        d = model.preset.embed_dim
        offsets = {"q": 0, "k": d, "v": 2 * d}
        for i, block in enumerate(model.encoder.blocks):
            for t, off in offsets.items():
                sites.append((f"encoder.block{i}.qkv", block.qkv, t, off, d))
    elif component == "decoder":
        dec = model.mask_decoder
        for attn_name, attn in dec.attention_layers():
            for t in ("q", "k", "v"):
                lin = getattr(attn, t)
                sites.append((f"mask_decoder.{attn_name}.{t}", lin, t, 0, lin.d_out))
    else:
        raise ConfigurationError(f"LoRA component must be 'encoder' or 'decoder', not {component!r}")
    return sites


def apply_lora(model: MiniSamModel, config: LoraConfig = LoraConfig(), component: str = "encoder") -> MiniSamModel:
    """Attach zero-initialized low-rank residuals to the targeted projections.

    Encoder targets are the query/value slices of each block's fused qkv
    projection; decoder targets are the query/value projections of every
    token-to-image and image-to-token attention. Base weights are frozen.
    """
    if component in model.adapters and "lora" in model.adapters[component]:
        raise ConfigurationError(f"LoRA already applied to the {component}")
    bad = set(config.targets) - {"q", "k", "v"}
    if bad:
        raise ConfigurationError(f"unknown LoRA targets {sorted(bad)}")
    rng = _adapter_rng(model, 1 if component == "encoder" else 2)
    sites = [s for s in _lora_sites(model, component) if s[2] in config.targets]
    if not sites:
        raise ConfigurationError(f"no LoRA targets found in the {component}")
    for _, lin, _, _, width in sites:
        if not 1 <= config.rank < min(lin.d_in, width):
            raise ConfigurationError(
                f"LoRA rank {config.rank} must be in [1, {min(lin.d_in, width)})"
            )
    for name, lin, target, start, width in sites:
        attr = f"lora_{target}" if component == "encoder" else "lora"
        setattr(lin, attr, LoraLayer(lin.d_in, width, config.rank, config.scale_alpha, start, rng))
        lin.weight.requires_grad = False
        if lin.bias is not None:
            lin.bias.requires_grad = False
    model.adapters.setdefault(component, {})["lora"] = {
        "rank": config.rank,
        "alpha": config.scale_alpha,
        "targets": list(config.targets),
    }
    return model


def insert_prompt_layers(model: MiniSamModel) -> MiniSamModel:
    """One prompt layer after every encoder block except the last; base encoder frozen."""
    enc = model.encoder
    if len(enc.blocks) < 2:
        raise ConfigurationError("prompt layers need an encoder with at least two blocks")
    if enc.prompt_layers:
        raise ConfigurationError("prompt layers already inserted")
    rng = _adapter_rng(model, 3)
    d = model.preset.embed_dim
    enc.prompt_layers = [PromptLayer(d, rng) for _ in range(len(enc.blocks) - 1)]
    for name, p in model.named_parameters():
        if name.startswith(_ENCODER) and ".prompt_layer" not in name:
            p.requires_grad = False
    model.adapters.setdefault("encoder", {})["prompt_layers"] = len(enc.prompt_layers)
    return model


def _is_lora(name: str) -> bool:
    return name.endswith(".lora_a") or name.endswith(".lora_b")


@dataclass(frozen=True)
class TuningPlan:
    encoder_mode: str
    decoder_mode: str
    trainable: tuple[str, ...]
    warnings: tuple[str, ...] = field(default=())

    @property
    def code(self) -> str:
        return f"{self.encoder_mode}/{self.decoder_mode}"

    @property
    def semantic_only(self) -> bool:
        return self.decoder_mode == "C"

    def to_dict(self) -> dict:
        return {
            "encoder": self.encoder_mode,
            "decoder": self.decoder_mode,
            "trainable": len(self.trainable),
            "warnings": list(self.warnings),
        }


def parse_decoder_mode(mode: str) -> str:
    parts = [p.strip() for p in mode.split("+")]
    if len(parts) > 1:
        if "C" in parts:
            raise ConfigurationError(
                f"decoder mode {mode!r}: the custom head (C) excludes the mask decoder settings FF/L"
            )
        raise ConfigurationError(f"decoder mode {mode!r}: pick exactly one of {DECODER_MODES}")
    if parts[0] not in DECODER_MODES:
        raise ConfigurationError(f"decoder mode {mode!r} not one of {DECODER_MODES}")
    return parts[0]


def check_modes(encoder_mode: str, decoder_mode: str) -> tuple[str, str]:
    if encoder_mode not in ENCODER_MODES:
        raise ConfigurationError(f"encoder mode {encoder_mode!r} not one of {ENCODER_MODES}")
    return encoder_mode, parse_decoder_mode(decoder_mode)


def build_tuning_plan(encoder_mode: str, decoder_mode: str, model: MiniSamModel) -> TuningPlan:
    """Decide trainability per parameter and write it into ``requires_grad``."""
    encoder_mode, decoder_mode = check_modes(encoder_mode, decoder_mode)
    names = [n for n, _ in model.named_parameters()]
    enc_names = [n for n in names if n.startswith(_ENCODER)]
    dec_names = [n for n in names if n.startswith(_DECODER_SIDE)]
    head_names = [n for n in names if n.startswith(_HEAD)]

    if encoder_mode == "FZ":
        enc_train = []
    elif encoder_mode == "FF":
        enc_train = enc_names
    elif encoder_mode == "L":
        enc_train = [n for n in enc_names if _is_lora(n)]
        if not enc_train:
            raise ConfigurationError("encoder mode L needs apply_lora(model, component='encoder')")
    else:
        enc_train = [n for n in enc_names if ".prompt_layer" in n]
        if not enc_train:
            raise ConfigurationError("encoder mode P needs insert_prompt_layers(model)")

    warnings = []
    if decoder_mode == "FF":
        dec_train = dec_names
    elif decoder_mode == "L":
        dec_train = [n for n in dec_names if _is_lora(n)]
        if not dec_train:
            raise ConfigurationError("decoder mode L needs apply_lora(model, component='decoder')")
    else:
        if not head_names:
            raise ConfigurationError("decoder mode C needs a model built with semantic_head=True")
        dec_train = head_names
        if encoder_mode == "FF":
            warnings.append("FF/C: fully tuning the encoder under a fresh head is known to collapse")

    trainable = tuple(sorted(set(enc_train) | set(dec_train)))
    keep = set(trainable)
    for n, p in model.named_parameters():
        p.requires_grad = n in keep
    return TuningPlan(encoder_mode, decoder_mode, trainable, tuple(warnings))


def trainable_parameters(model: MiniSamModel, plan: TuningPlan) -> list[tuple[str, Tensor]]:
    """Name-sorted (name, tensor) pairs the plan marks trainable."""
    params = dict(model.named_parameters())
    missing = [n for n in plan.trainable if n not in params]
    if missing:
        raise ConfigurationError(f"plan does not match model; unknown parameters {missing[:3]}")
    return [(n, params[n]) for n in plan.trainable]


def prepare_model(
    model: MiniSamModel,
    encoder_mode: str,
    decoder_mode: str,
    lora: LoraConfig = LoraConfig(),
) -> TuningPlan:
    """Install whatever adapters the modes need, then build the plan."""
    encoder_mode, decoder_mode = check_modes(encoder_mode, decoder_mode)
    enc = model.adapters.get("encoder", {})
    if encoder_mode == "L" and "lora" not in enc:
        apply_lora(model, lora, "encoder")
    if encoder_mode == "P" and "prompt_layers" not in enc:
        insert_prompt_layers(model)
    if decoder_mode == "L" and "lora" not in model.adapters.get("decoder", {}):
        apply_lora(model, lora, "decoder")
    return build_tuning_plan(encoder_mode, decoder_mode, model)


def install_adapters(model: MiniSamModel, spec: dict) -> MiniSamModel:
    """Re-create adapters recorded in ``model.metadata()['adapters']``."""
    for component in ("encoder", "decoder"):
        info = spec.get(component, {})
        if "lora" in info:
            cfg = info["lora"]
            apply_lora(model, LoraConfig(cfg["rank"], cfg["alpha"], tuple(cfg["targets"])), component)
        if info.get("prompt_layers"):
            insert_prompt_layers(model)
    return model

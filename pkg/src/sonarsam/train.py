"""Optimization loop: Adam, warm-up plus cosine schedule, two task modes."""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .adapters import TuningPlan, trainable_parameters
from .checkpoint import save_checkpoint
from .data import Sample, augment, boxes_from_mask
from .errors import ConfigurationError, FreezeContractError, UsageError
from .metrics import CLASS_NAMES, DiceReport, aggregate_report, binary_joint_loss, dice_score, semantic_joint_loss
from .model import MiniSamModel, decode_mask, decode_semantic, encode_boxes, encode_image, semantic_head
from .tensor import ComputationTape, Tensor

TASK_MODES = ("box_prompt", "semantic")


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 3e-4
    batch_size: int = 4
    epochs: int = 30
    warmup_epochs: int = 1
    seed: int = 0
    task_mode: str = "box_prompt"
    preset: str = "mini"
    encoder_mode: str = "L"
    decoder_mode: str = "FF"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lora_rank: int = 4
    max_steps: int = 0  # > 0 overrides epochs * steps_per_epoch
    grad_clip: float = 0.0  # global-norm clipping; 0 disables
    augment: bool = True

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigurationError("base_lr must be > 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigurationError("need 0 <= warmup_epochs < epochs")
        if self.task_mode not in TASK_MODES:
            raise ConfigurationError(f"task_mode must be one of {TASK_MODES}")
        if self.max_steps < 0 or self.grad_clip < 0:
            raise ConfigurationError("max_steps and grad_clip must be >= 0")

    def steps_per_epoch(self, n_train: int) -> int:
        return math.ceil(n_train / self.batch_size)

    def schedule(self, n_train: int) -> tuple[int, int]:
        """(total steps, warm-up steps) for a training set of ``n_train`` samples."""
        spe = self.steps_per_epoch(n_train)
        total = self.max_steps or self.epochs * spe
        warmup = self.warmup_epochs * spe
        if warmup >= total:
            raise ConfigurationError(f"warm-up ({warmup} steps) must be shorter than the run ({total} steps)")
        return total, warmup

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warm-up from 0, then cosine decay reaching exactly 0 at the last step."""
    if not 0 <= step < total_steps:
        raise UsageError(f"step {step} outside [0, {total_steps})")
    if not 0 <= warmup_steps < total_steps:
        raise UsageError("warmup_steps must lie in [0, total_steps)")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    span = total_steps - warmup_steps - 1
    progress = (step - warmup_steps) / span if span else 0.0
    if progress == 1.0:
        return 0.0
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    """Adam moments (float64) keyed by parameter name."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params) -> "OptimizerState":
        return cls(
            {n: np.zeros(p.shape) for n, p in params},
            {n: np.zeros(p.shape) for n, p in params},
        )


def adam_step(
    params,
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update of ``(name, tensor)`` pairs, in place."""
    missing = [n for n, _ in params if n not in grads]
    if missing:
        raise FreezeContractError(f"no gradient for trainable parameters {missing[:3]}")
    if set(state.m) != {n for n, _ in params}:
        raise FreezeContractError("optimizer state does not match the trainable parameters")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params:
        g = grads[name].astype(np.float64)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data[...] = (p.data.astype(np.float64) - update).astype(np.float32)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place to global norm ``max_norm``; returns the norm before clipping."""
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm
    return norm


# ---------------------------------------------------------------------------
# task wiring


def _unused_by_task(plan: TuningPlan, task_mode: str) -> tuple[str, ...]:
    """Parameter prefixes that never enter the loss graph of ``task_mode``."""
    if task_mode == "box_prompt":
        return ("mask_decoder.class_tokens", "head.")
    if plan.decoder_mode == "C":
        return ("prompt_encoder.", "mask_decoder.")
    return ("mask_decoder.mask_token", "prompt_encoder.", "head.")


def check_compatible(model: MiniSamModel, plan: TuningPlan, task_mode: str) -> None:
    if task_mode not in TASK_MODES:
        raise ConfigurationError(f"task_mode must be one of {TASK_MODES}")
    if task_mode == "box_prompt" and plan.decoder_mode == "C":
        raise ConfigurationError("box_prompt training needs the prompt encoder and mask decoder; plan uses head C")
    if task_mode == "semantic" and plan.decoder_mode == "C" and model.head is None:
        raise ConfigurationError("semantic training with plan C needs a model built with semantic_head=True")


def task_parameters(model: MiniSamModel, plan: TuningPlan, task_mode: str) -> list[tuple[str, Tensor]]:
    """Trainable parameters that the task's loss actually reaches."""
    skip = _unused_by_task(plan, task_mode)
    return [(n, p) for n, p in trainable_parameters(model, plan) if not n.startswith(skip)]


def _images(batch: list[Sample]) -> Tensor:
    return Tensor(np.stack([s.image for s in batch]))


def _usable_objects(sample: Sample) -> list:
    """Objects whose mask still yields a box (a flip or resize can shrink tiny ones away)."""
    return [o for o in sample.objects if boxes_from_mask(o.mask)]


def box_prompt_loss(model: MiniSamModel, images: Tensor, owner, boxes: np.ndarray, masks: np.ndarray) -> Tensor:
    """Joint loss over every box prompt; ``owner[j]`` is the image index of prompt ``j``.

    Each image is encoded once and its embedding shared by all of its prompts.
    """
    emb = T.take_rows(encode_image(model, images), owner)
    logits = decode_mask(model, emb, encode_boxes(model, boxes))
    return binary_joint_loss(logits, masks)


def semantic_logits(model: MiniSamModel, images: Tensor, plan_decoder: str) -> Tensor:
    emb = encode_image(model, images)
    if plan_decoder == "C":
        return semantic_head(model, emb)
    return decode_semantic(model, emb)


def _semantic_decoder(model: MiniSamModel, decoder_mode: str | None) -> str:
    if decoder_mode is not None:
        return decoder_mode
    return "C" if model.head is not None else "FF"


# ---------------------------------------------------------------------------
# evaluation


def evaluate(
    model: MiniSamModel,
    samples: list[Sample],
    task_mode: str,
    decoder_mode: str | None = None,
    class_names: tuple[str, ...] = CLASS_NAMES,
) -> DiceReport:
    """DICE report on preprocessed samples.

    ``box_prompt``: every object is prompted with its ground-truth box and
    scored against its instance mask at sigmoid 0.5. ``semantic``: per image,
    each class present in the ground truth is scored as argmax == class
    against the class region. ``decoder_mode`` picks the semantic path
    (``C`` uses the custom head); by default the head is used when present.
    """
    if not samples:
        raise UsageError("cannot evaluate an empty split")
    if task_mode not in TASK_MODES:
        raise ConfigurationError(f"task_mode must be one of {TASK_MODES}")
    scores: list[tuple[int, float]] = []
    if task_mode == "box_prompt":
        for s in samples:
            objs = [o for o in s.objects if boxes_from_mask(o.mask)]
            if not objs:
                continue
            emb = encode_image(model, Tensor(s.image))
            boxes = np.array([o.box for o in objs], dtype=np.float64)
            logits = decode_mask(model, emb, encode_boxes(model, boxes)).data
            for o, lg in zip(objs, logits):
                scores.append((o.class_id, dice_score(lg > 0, o.mask)))
    else:
        dec = _semantic_decoder(model, decoder_mode)
        for s in samples:
            pred = np.argmax(semantic_logits(model, Tensor(s.image[None]), dec).data[0], axis=0)
            for c in np.unique(s.label_map):
                if c == 0:
                    continue
                scores.append((int(c), dice_score(pred == c, s.label_map == c)))
    if not scores:
        raise UsageError("split contains no scorable objects")
    return aggregate_report(scores, class_names)


# ---------------------------------------------------------------------------
# run log


@dataclass
class RunLog:
    config: dict
    plan: dict
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.steps]

    @property
    def lrs(self) -> list[float]:
        return [r["lr"] for r in self.steps]

    def lines(self) -> list[str]:
        out = [json.dumps({"type": "config", "config": self.config, "plan": self.plan}, sort_keys=True)]
        out += [json.dumps({"type": "step", **r}) for r in self.steps]
        out += [json.dumps({"type": "epoch", **r}) for r in self.epochs]
        if self.summary:
            out.append(json.dumps({"type": "summary", **self.summary}, sort_keys=True))
        return out

    def write(self, path) -> None:
        Path(path).write_text("\n".join(self.lines()) + "\n")

    @classmethod
    def read(cls, path) -> "RunLog":
        log = cls({}, {})
        for line in Path(path).read_text().splitlines():
            rec = json.loads(line)
            kind = rec.pop("type")
            if kind == "config":
                log.config, log.plan = rec["config"], rec["plan"]
            elif kind == "step":
                log.steps.append(rec)
            elif kind == "epoch":
                log.epochs.append(rec)
            elif kind == "summary":
                log.summary = rec
        return log


@dataclass
class TrainResult:
    log: RunLog
    best_val: float | None
    checkpoint: Path | None


def _state_copy(params) -> dict[str, np.ndarray]:
    return {n: p.data.copy() for n, p in params}


def train(
    config: TrainConfig,
    train_samples: list[Sample],
    model: MiniSamModel,
    plan: TuningPlan,
    val_samples: list[Sample] | None = None,
    out_dir=None,
    class_names: tuple[str, ...] = CLASS_NAMES,
) -> TrainResult:
    """Fit ``model`` in place under ``plan``.

    With ``val_samples`` the model is scored after every epoch and the best
    weights (by average DICE) are restored at the end and written to
    ``out_dir/best.ckpt``; without, the final weights are kept and saved.
    """
    check_compatible(model, plan, config.task_mode)
    if (config.encoder_mode, config.decoder_mode) != (plan.encoder_mode, plan.decoder_mode):
        raise ConfigurationError(f"config modes {config.encoder_mode}/{config.decoder_mode} differ from plan {plan.code}")
    if not train_samples:
        raise UsageError("empty training set")
    S = model.preset.image_size
    for s in train_samples:
        if s.image.shape != (3, S, S):
            raise ConfigurationError(f"sample {s.sample_id} not preprocessed to 3x{S}x{S}")

    params = task_parameters(model, plan, config.task_mode)
    if not params:
        raise ConfigurationError(f"plan {plan.code} leaves nothing to train for {config.task_mode}")
    state = OptimizerState.for_params(params)
    n = len(train_samples)
    spe = config.steps_per_epoch(n)
    total, warmup = config.schedule(n)
    rng = np.random.default_rng([config.seed, 7])
    log = RunLog(config.to_dict(), plan.to_dict())
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    best_val, best_state = None, None
    started = time.perf_counter()
    dec_mode = plan.decoder_mode

    step = 0
    epoch = 0
    while step < total:
        order = rng.permutation(n)
        for b in range(spe):
            if step >= total:
                break
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            batch = [train_samples[i] for i in idx]
            lr = lr_at(step, total, warmup, config.base_lr)
            with ComputationTape() as tape:
                if config.task_mode == "box_prompt":
                    if config.augment:
                        batch = [augment(s, rng) for s in batch]
                    owner, boxes, masks = [], [], []
                    for i, s in enumerate(batch):
                        for obj in _usable_objects(s):
                            owner.append(i)
                            boxes.append(obj.box)
                            masks.append(obj.mask)
                    if not boxes:
                        continue
                    loss = box_prompt_loss(model, _images(batch), owner, np.array(boxes, float), np.stack(masks))
                else:
                    if config.augment:
                        batch = [augment(s, rng) for s in batch]
                    labels = np.stack([s.label_map for s in batch])
                    loss = semantic_joint_loss(semantic_logits(model, _images(batch), dec_mode), labels)
            value = loss.item()
            if not math.isfinite(value):
                raise FloatingPointError(f"non-finite loss {value} at step {step}")
            raw = T.backward(loss, tape)
            by_id = {id(t): g for t, g in raw.items()}
            grads = {name: by_id[id(p)] for name, p in params if id(p) in by_id}
            if config.grad_clip:
                clip_gradients(grads, config.grad_clip)
            adam_step(params, grads, state, lr, config.beta1, config.beta2, config.eps)
            log.steps.append({"step": step, "lr": lr, "loss": value})
            step += 1
        epoch += 1
        if val_samples:
            report = evaluate(model, val_samples, config.task_mode, dec_mode, class_names)
            log.epochs.append({"epoch": epoch, "step": step, "val_dice": report.average})
            if best_val is None or report.average > best_val:
                best_val, best_state = report.average, _state_copy(params)

    if best_state is not None:
        for name, p in params:
            p.data[...] = best_state[name]
    ckpt = None
    if out_dir is not None:
        ckpt = out_dir / "best.ckpt"
        save_checkpoint(ckpt, model, extra={"plan": plan.to_dict(), "task_mode": config.task_mode})
    log.summary = {
        "steps": step,
        "epochs": epoch,
        "initial_loss": log.losses[0] if log.losses else None,
        "final_loss": log.losses[-1] if log.losses else None,
        "best_val_dice": best_val,
        "wall_clock_s": time.perf_counter() - started,
        "box_prompt_objects": "every object of every image in the batch",
        "trainable": len(params),
    }
    if out_dir is not None:
        log.write(out_dir / "runlog.jsonl")
    return TrainResult(log, best_val, ckpt)


"""Masked language, image and vision-language modeling objectives, plus the training step."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .aux_losses import unweighted_aux
from .model import FIRST_WORD_ID, IMAGE, MASK_ID, TEXT, Mode, MoMEModel, concat_pair, patchify
from .routing import drop_stats
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

MLM_RATIO = 0.15
VLM_TEXT_RATIO = 0.5
MIM_RATIO = 0.4
MIN_BLOCK_AREA = 4
BLOCK_ASPECT = 0.3
BLOCK_CAP_SLACK = 0.1

MASK_TOKEN, RANDOM_TOKEN, KEEP = "MASK_TOKEN", "RANDOM_TOKEN", "KEEP"
BLOCK_MASK = "BLOCK_MASK"


class NonFiniteLoss(FloatingPointError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class MaskPlan:
    positions: np.ndarray
    replacement: list[str]
    targets: np.ndarray
    blocks: list[tuple[int, int, int, int]] = field(default_factory=list)  # (top, left, h, w)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


# ---------------------------------------------------------------- text masking


def mask_text(token_ids, ratio: float, rng: np.random.Generator, vocab_size: int,
              maskable=None) -> tuple[MaskPlan, np.ndarray]:
    """BERT-style corruption: pick round(ratio * n) positions, then 80% MASK / 10% random / 10% keep.

    ``maskable`` (booleans) excludes special positions; by default every
    position is maskable. Random replacements are drawn from the word ids.
    """
    if not 0 < ratio < 1:
        raise ValueError(f"mask ratio must lie in (0, 1), got {ratio}")
    ids = np.asarray(token_ids, dtype=np.int64)
    corrupted = ids.copy()
    if maskable is None:
        candidates = np.arange(ids.size)
    else:
        candidates = np.flatnonzero(np.asarray(maskable, dtype=bool))
    count = round_half_up(ratio * candidates.size)
    if count == 0:
        return MaskPlan(np.zeros(0, dtype=np.int64), [], np.zeros(0, dtype=np.int64)), corrupted
    positions = np.sort(rng.choice(candidates, size=count, replace=False))
    u = rng.random(count)
    random_ids = rng.integers(FIRST_WORD_ID, vocab_size, size=count)
    replacement = []
    for j, pos in enumerate(positions):
        if u[j] < 0.8:
            corrupted[pos] = MASK_ID
            replacement.append(MASK_TOKEN)
        elif u[j] < 0.9:
            corrupted[pos] = random_ids[j]
            replacement.append(RANDOM_TOKEN)
        else:
            replacement.append(KEEP)
    return MaskPlan(positions, replacement, ids[positions].copy()), corrupted


# ---------------------------------------------------------------- image masking


def mask_image_blockwise(grid: tuple[int, int], ratio: float, rng: np.random.Generator,
                         max_attempts: int = 200) -> MaskPlan:
    """Union of random rectangles covering between ceil(ratio*N) and floor((ratio+0.1)*N) patches.

    Each block has area >= 4 and aspect ratio in [0.3, 1/0.3] before clipping.
    A block is accepted only if the patches it newly covers stay under the cap.
    If no block fits (tiny grids, or the last few patches), single patches are
    added instead.
    """
    if not 0 < ratio < 1:
        raise ValueError(f"mask ratio must lie in (0, 1), got {ratio}")
    rows, cols = grid
    n = rows * cols
    need = math.ceil(round(ratio * n, 9))
    cap = max(need, math.floor(round((ratio + BLOCK_CAP_SLACK) * n, 9)))
    mask = np.zeros((rows, cols), dtype=bool)
    blocks: list[tuple[int, int, int, int]] = []
    log_lo, log_hi = math.log(BLOCK_ASPECT), math.log(1.0 / BLOCK_ASPECT)
    can_block = rows * cols >= MIN_BLOCK_AREA and max(rows, cols) >= 2
    attempts = 0
    while can_block and mask.sum() < need and attempts < max_attempts:
        attempts += 1
        count = int(mask.sum())
        target = rng.uniform(MIN_BLOCK_AREA, max(MIN_BLOCK_AREA, need - count))
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        h = min(rows, max(1, int(round(math.sqrt(target * aspect)))))
        w = min(cols, max(1, int(round(math.sqrt(target / aspect)))))
        if h * w < MIN_BLOCK_AREA:
            continue
        top = int(rng.integers(0, rows - h + 1))
        left = int(rng.integers(0, cols - w + 1))
        fresh = int((~mask[top : top + h, left : left + w]).sum())
        if fresh == 0 or count + fresh > cap:
            continue
        mask[top : top + h, left : left + w] = True
        blocks.append((top, left, h, w))
    while mask.sum() < need:
        free = np.flatnonzero(~mask.reshape(-1))
        idx = int(rng.choice(free))
        r, c = divmod(idx, cols)
        mask[r, c] = True
        blocks.append((r, c, 1, 1))
    positions = np.flatnonzero(mask.reshape(-1))
    return MaskPlan(positions, [BLOCK_MASK] * positions.size, np.zeros(0, dtype=np.int64), blocks)


def blocks_cover(plan: MaskPlan, grid: tuple[int, int]) -> np.ndarray:
    mask = np.zeros(grid, dtype=bool)
    for top, left, h, w in plan.blocks:
        mask[top : top + h, left : left + w] = True
    return mask


# ---------------------------------------------------------------- visual tokens


def visual_tokenize(pixels, patch: int, visual_vocab: int) -> np.ndarray:
    """Quantize each patch's mean intensity into ``visual_vocab`` equal bins."""
    px = np.asarray(pixels, dtype=np.float64)
    squeeze = px.ndim == 3
    if squeeze:
        px = px[None]
    means = patchify(px, patch).mean(axis=-1)
    ids = np.clip(np.floor(means * visual_vocab + 1e-9), 0, visual_vocab - 1).astype(np.int64)
    return ids[0] if squeeze else ids


# ---------------------------------------------------------------- batches


@dataclass
class TextBatch:
    ids: np.ndarray  # corrupted words [B, M]
    targets: np.ndarray  # [B, M + 2], -1 where not predicted (incl. specials)


@dataclass
class ImageBatch:
    pixels: np.ndarray  # [B, H, W, C]
    patch_mask: np.ndarray  # [B, N]
    targets: np.ndarray  # [B, N + 1], -1 where not predicted (incl. I_CLS)


def make_text_batch(captions: np.ndarray, ratio: float, rng, vocab_size: int) -> TextBatch:
    b, m = captions.shape
    ids = np.empty_like(captions)
    targets = np.full((b, m + 2), -1, dtype=np.int64)
    for i in range(b):
        plan, ids[i] = mask_text(captions[i], ratio, rng, vocab_size)
        targets[i, plan.positions + 1] = plan.targets
    return TextBatch(ids, targets)


def make_image_batch(pixels: np.ndarray, config, ratio: float, rng) -> ImageBatch:
    b = pixels.shape[0]
    gh, gw = (s // config.image_patch for s in config.image_size)
    tokens = visual_tokenize(pixels, config.image_patch, config.visual_vocab)
    patch_mask = np.zeros((b, gh * gw), dtype=bool)
    targets = np.full((b, gh * gw + 1), -1, dtype=np.int64)
    for i in range(b):
        plan = mask_image_blockwise((gh, gw), ratio, rng)
        patch_mask[i, plan.positions] = True
        targets[i, plan.positions + 1] = tokens[i, plan.positions]
    return ImageBatch(pixels, patch_mask, targets)


# ---------------------------------------------------------------- losses


@dataclass
class TaskResult:
    loss: Tensor
    routing: list
    parts: dict[str, Tensor] = field(default_factory=dict)


def _masked_ce(logits: Tensor, targets: np.ndarray, name: str) -> Tensor:
    flat = T.reshape(logits, (-1, logits.shape[-1]))
    tgt = targets.reshape(-1)
    ignore = tgt < 0
    if ignore.all():
        log.warning("%s batch has no masked positions; loss is zero", name)
    return T.cross_entropy(flat, np.where(ignore, 0, tgt), ignore)


def loss_mlm(model: MoMEModel, batch: TextBatch, training: bool, rng=None) -> TaskResult:
    out = model.forward(model.embed_text(batch.ids), Mode.TEXT_ONLY, training, rng)
    return TaskResult(_masked_ce(out.text_logits, batch.targets, "MLM"), out.routing)


def loss_mim(model: MoMEModel, batch: ImageBatch, training: bool, rng=None) -> TaskResult:
    out = model.forward(model.embed_image(batch.pixels, batch.patch_mask), Mode.IMAGE_ONLY, training, rng)
    return TaskResult(_masked_ce(out.image_logits, batch.targets, "MIM"), out.routing)


def loss_vlm(model: MoMEModel, text: TextBatch, image: ImageBatch, training: bool, rng=None) -> TaskResult:
    pair = concat_pair(model.embed_text(text.ids), model.embed_image(image.pixels, image.patch_mask))
    out = model.forward(pair, Mode.PAIR, training, rng)
    text_loss = _masked_ce(out.text_logits, text.targets, "VLM-text")
    image_loss = _masked_ce(out.image_logits, image.targets, "VLM-image")
    return TaskResult(text_loss + image_loss, out.routing, {"text": text_loss, "image": image_loss})


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamW:
    """Adam with decoupled weight decay on matrices, warmup + cosine schedule."""

    params: dict[str, Tensor]
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.05
    total_steps: int = 2000
    warmup_frac: float = 0.05
    frozen: set[str] = field(default_factory=set)
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def learning_rate(self, step: int) -> float:
        warmup = max(1, int(round(self.warmup_frac * self.total_steps)))
        if step < warmup:
            return self.lr * (step + 1) / warmup
        progress = min(1.0, (step - warmup) / max(1, self.total_steps - warmup))
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * progress))

    def step(self) -> None:
        lr = self.learning_rate(self.step_count)
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name, p in self.params.items():
            if name in self.frozen or p.grad is None:
                continue
            g = p.grad
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.weight_decay and p.data.ndim >= 2:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------- training step


@dataclass
class StepBatches:
    mlm: TextBatch | None
    mim: ImageBatch | None
    vlm: tuple[TextBatch, ImageBatch] | None


def sample_batches(corpus, config, rng: np.random.Generator, sizes=(32, 32, 32)) -> StepBatches:
    """Draw independent scenes for each stream and mask them."""
    n_text, n_image, n_pair = sizes
    mlm = mim = vlm = None
    if n_text:
        idx = rng.integers(0, len(corpus), size=n_text)
        mlm = make_text_batch(corpus.captions[idx], MLM_RATIO, rng, config.text_vocab)
    if n_image:
        idx = rng.integers(0, len(corpus), size=n_image)
        mim = make_image_batch(corpus.pixels[idx], config, MIM_RATIO, rng)
    if n_pair:
        idx = rng.integers(0, len(corpus), size=n_pair)
        vlm = (
            make_text_batch(corpus.captions[idx], VLM_TEXT_RATIO, rng, config.text_vocab),
            make_image_batch(corpus.pixels[idx], config, MIM_RATIO, rng),
        )
    return StepBatches(mlm, mim, vlm)


@dataclass
class StepLosses:
    total: Tensor
    mlm: Tensor
    mim: Tensor
    vlm: Tensor
    aux: Tensor
    routing: dict[str, list]


def compute_losses(model: MoMEModel, batches: StepBatches, training: bool, rng=None) -> StepLosses:
    zero = Tensor(0.0)
    routing: dict[str, list] = {}
    mlm = mim = vlm = zero
    if batches.mlm is not None:
        r = loss_mlm(model, batches.mlm, training, rng)
        mlm, routing["mlm"] = r.loss, r.routing
    if batches.mim is not None:
        r = loss_mim(model, batches.mim, training, rng)
        mim, routing["mim"] = r.loss, r.routing
    if batches.vlm is not None:
        r = loss_vlm(model, *batches.vlm, training, rng)
        vlm, routing["vlm"] = r.loss, r.routing
    per_modality: dict[str, list] = {TEXT: [], IMAGE: []}
    for task_routing in routing.values():
        for lr in task_routing:
            per_modality[lr.modality].append(lr.aux)
    aux = unweighted_aux(per_modality)
    total = mlm + mim + vlm + T.scale(aux, model.config.aux_weight)
    return StepLosses(total, mlm, mim, vlm, aux, routing)


def drop_rates(routing: dict[str, list]) -> dict[str, float]:
    out = {}
    for task, layers in routing.items():
        for lr in layers:
            out[f"{task}/{lr.modality}/{lr.layer}"] = drop_stats(lr.plan).drop_rate
    return out


def _diagnostics(losses: StepLosses) -> dict:
    diag = {}
    for task, layers in losses.routing.items():
        for lr in layers:
            logits = lr.plan.clean_logits.data if lr.plan.clean_logits is not None else lr.plan.gates.data
            diag[f"{task}/{lr.modality}/{lr.layer}"] = {
                "finite": bool(np.isfinite(logits).all()),
                "max_abs_logit": float(np.nanmax(np.abs(logits))) if logits.size else 0.0,
            }
    return diag


def pretrain_step(model: MoMEModel, batches: StepBatches, optimizer: AdamW, rng, step: int = 0) -> dict:
    """One optimizer step on MLM + MIM + VLM + weighted aux; returns a report row."""
    start = time.perf_counter()
    optimizer.zero_grad()
    with Tape() as tape:
        losses = compute_losses(model, batches, training=True, rng=rng)
        if not np.isfinite(losses.total.data):
            raise NonFiniteLoss(f"non-finite loss at step {step}", _diagnostics(losses))
        tape.backward(losses.total)
    optimizer.step()
    return {
        "step": step,
        "loss_total": float(losses.total.data),
        "loss_mlm": float(losses.mlm.data),
        "loss_mim": float(losses.mim.data),
        "loss_vlm": float(losses.vlm.data),
        "loss_aux": float(losses.aux.data),
        "drop_rate_by_layer": drop_rates(losses.routing),
        "wall_ms": (time.perf_counter() - start) * 1000.0,
        "_routing": losses.routing,
    }


def evaluate(model: MoMEModel, batches: StepBatches) -> dict[str, float]:
    """Inference-mode task losses (no noise, inference capacity); total excludes aux."""
    losses = compute_losses(model, batches, training=False)
    mlm, mim, vlm = float(losses.mlm.data), float(losses.mim.data), float(losses.vlm.data)
    return {"total": mlm + mim + vlm, "mlm": mlm, "mim": mim, "vlm": vlm,
            "aux": float(losses.aux.data), "drop_rate_by_layer": drop_rates(losses.routing)}

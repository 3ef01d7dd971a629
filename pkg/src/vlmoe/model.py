"""Mixture-of-modality-experts transformer with sparse V-MoE / T-MoE sublayers.

Every block shares one self-attention across modalities. The FFN sublayer is
hard-routed by modality: text tokens go through T-FFN (or a T-MoE), image
tokens through V-FFN (or a V-MoE). In the last ``F`` layers, image-text pairs
go through the shared VL-FFN instead. MoE sublayers live only in the first
``L - F`` layers.
"""

from __future__ import annotations

import dataclasses
import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .aux_losses import AuxLossKind, router_aux_loss
from .routing import (
    CapacityPolicy,
    RouterParams,
    RoutingPlan,
    assign_bpr,
    assign_vanilla,
    compute_capacity,
    dispatch_combine,
    ffn,
    gate,
)
from .tensor import Tensor

PAD_ID, T_CLS_ID, T_SEP_ID, MASK_ID = 0, 1, 2, 3
FIRST_WORD_ID = 4


class Mode(str, enum.Enum):
    TEXT_ONLY = "text"
    IMAGE_ONLY = "image"
    PAIR = "pair"


class Kind(str, enum.Enum):
    T_CLS = "T_CLS"
    T_SEP = "T_SEP"
    WORD = "WORD"
    I_CLS = "I_CLS"
    PATCH = "PATCH"


TEXT, IMAGE = "text", "image"


@dataclass
class MoMEConfig:
    L: int = 4
    F: int = 1
    D: int = 64
    heads: int = 4
    E: int = 4
    k: int = 1
    capacity_train: float = 1.05
    capacity_infer: float = 1.0
    moe_layer_set: list[int] | None = None  # None -> every second layer up to L - F
    scale_T: bool = True
    scale_V: bool = True
    bpr_T: bool = False
    bpr_V: bool = True
    noise_sigma: float | None = None  # None -> 1/E
    aux_T: str = "load"
    aux_V: str = "vloss"
    aux_weight: float = 0.01
    image_patch: int = 4
    image_size: tuple[int, int] = (16, 16)
    channels: int = 3
    text_vocab: int = 256
    visual_vocab: int = 16
    max_text_len: int = 32
    ffn_mult: int = 4
    init_std: float = 0.02

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        if self.moe_layer_set is not None:
            self.moe_layer_set = sorted(int(i) for i in self.moe_layer_set)
        self.validate()

    def validate(self) -> None:
        if not 0 <= self.F < self.L:
            raise ValueError(f"need 0 <= F < L, got F={self.F}, L={self.L}")
        if self.D % self.heads:
            raise ValueError(f"D={self.D} not divisible by heads={self.heads}")
        if self.E < 1 or not 1 <= self.k <= self.E:
            raise ValueError(f"need 1 <= k <= E, got k={self.k}, E={self.E}")
        bad = [i for i in self.moe_layers if not 1 <= i <= self.L - self.F]
        if bad:
            raise ValueError(f"MoE layers {bad} outside 1..L-F={self.L - self.F}")
        h, w = self.image_size
        if h % self.image_patch or w % self.image_patch:
            raise ValueError(f"image {self.image_size} not divisible by patch {self.image_patch}")
        if self.max_text_len < 2:
            raise ValueError("max_text_len must leave room for T_CLS and T_SEP")
        AuxLossKind(self.aux_T)
        AuxLossKind(self.aux_V)
        CapacityPolicy(self.capacity_train, self.capacity_infer)

    @property
    def moe_layers(self) -> tuple[int, ...]:
        if self.moe_layer_set is not None:
            return tuple(self.moe_layer_set)
        return tuple(i for i in range(2, self.L - self.F + 1, 2))

    @property
    def num_patches(self) -> int:
        h, w = self.image_size
        return (h // self.image_patch) * (w // self.image_patch)

    @property
    def patch_dim(self) -> int:
        return self.image_patch * self.image_patch * self.channels

    @property
    def sigma(self) -> float:
        return 1.0 / self.E if self.noise_sigma is None else self.noise_sigma

    def is_moe(self, layer: int, modality: str) -> bool:
        scaled = self.scale_T if modality == TEXT else self.scale_V
        return scaled and layer in self.moe_layers

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MoMEConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "MoMEConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @classmethod
    def base(cls, **overrides) -> "MoMEConfig":
        cfg = dict(L=12, F=3, D=768, heads=12, E=32, image_patch=16, image_size=(224, 224),
                   text_vocab=64000, visual_vocab=8192, max_text_len=128)
        cfg.update(overrides)
        return cls(**cfg)

    @classmethod
    def small(cls, **overrides) -> "MoMEConfig":
        cfg = dict(L=8, F=1, D=384, heads=6, E=32, image_patch=16, image_size=(224, 224),
                   text_vocab=64000, visual_vocab=8192, max_text_len=128)
        cfg.update(overrides)
        return cls(**cfg)


@dataclass
class TokenBatch:
    """Embeddings ``[B, S, D]`` plus per-position tags shared by every sequence in the batch.

    Pair batches hold the text segment first, then the image segment.
    """

    embeddings: Tensor
    modality: np.ndarray
    kind: np.ndarray
    position: np.ndarray

    @property
    def n_text(self) -> int:
        return int((self.modality == TEXT).sum())

    @property
    def n_image(self) -> int:
        return int((self.modality == IMAGE).sum())

    def with_embeddings(self, emb: Tensor) -> "TokenBatch":
        return TokenBatch(emb, self.modality, self.kind, self.position)


def concat_pair(text: TokenBatch, image: TokenBatch) -> TokenBatch:
    return TokenBatch(
        T.concat([text.embeddings, image.embeddings], axis=1),
        np.concatenate([text.modality, image.modality]),
        np.concatenate([text.kind, image.kind]),
        np.concatenate([text.position, image.position]),
    )


@dataclass
class LayerRouting:
    layer: int
    modality: str
    plan: RoutingPlan
    aux: Tensor
    kinds: np.ndarray  # token kind per routed (flattened) token


@dataclass
class ForwardOutput:
    text_logits: Tensor | None
    image_logits: Tensor | None
    routing: list[LayerRouting] = field(default_factory=list)
    hidden: Tensor | None = None


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def patchify(pixels: np.ndarray, patch: int) -> np.ndarray:
    """``[B, H, W, C]`` -> ``[B, N, P*P*C]`` in row-major patch order."""
    b, h, w, c = pixels.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} not divisible by patch size {patch}")
    x = pixels.reshape(b, h // patch, patch, w // patch, patch, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(b, (h // patch) * (w // patch), patch * patch * c)


class MoMEModel:
    def __init__(self, config: MoMEConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.frozen: set[str] = set()
        rng = np.random.default_rng(seed)
        self._init_params(rng)

    # ------------------------------------------------------------ parameters

    def _add(self, name: str, data: np.ndarray) -> None:
        self.params[name] = Tensor(data, requires_grad=True, name=name)

    def _ffn_params(self, prefix: str, rng) -> None:
        c = self.config
        hidden = c.ffn_mult * c.D
        self._add(f"{prefix}.w1", _trunc_normal(rng, (c.D, hidden), c.init_std))
        self._add(f"{prefix}.w2", _trunc_normal(rng, (hidden, c.D), c.init_std))

    def _init_params(self, rng: np.random.Generator) -> None:
        c = self.config
        std = c.init_std
        self._add("text.word", _trunc_normal(rng, (c.text_vocab, c.D), std))
        self._add("text.pos", _trunc_normal(rng, (c.max_text_len, c.D), std))
        self._add("image.proj.w", _trunc_normal(rng, (c.patch_dim, c.D), std))
        self._add("image.proj.b", np.zeros(c.D))
        self._add("image.cls", _trunc_normal(rng, (c.D,), std))
        self._add("image.mask", _trunc_normal(rng, (c.D,), std))
        self._add("image.pos", _trunc_normal(rng, (c.num_patches + 1, c.D), std))
        for i in range(1, c.L + 1):
            p = f"layers.{i}"
            for ln in ("ln1", "ln2"):
                self._add(f"{p}.{ln}.g", np.ones(c.D))
                self._add(f"{p}.{ln}.b", np.zeros(c.D))
            for proj in ("q", "k", "v", "o"):
                self._add(f"{p}.attn.{proj}.w", _trunc_normal(rng, (c.D, c.D), std))
                self._add(f"{p}.attn.{proj}.b", np.zeros(c.D))
            for tag, modality in (("t", TEXT), ("v", IMAGE)):
                if c.is_moe(i, modality):
                    self._add(f"{p}.{tag}_moe.router", _trunc_normal(rng, (c.E, c.D), std))
                    for e in range(c.E):
                        self._ffn_params(f"{p}.{tag}_moe.experts.{e}", rng)
                else:
                    self._ffn_params(f"{p}.{tag}_ffn", rng)
            if i > c.L - c.F:
                self._ffn_params(f"{p}.vl_ffn", rng)
        self._add("final_ln.g", np.ones(c.D))
        self._add("final_ln.b", np.zeros(c.D))
        self._add("head.text.w", _trunc_normal(rng, (c.D, c.text_vocab), std))
        self._add("head.text.b", np.zeros(c.text_vocab))
        self._add("head.image.w", _trunc_normal(rng, (c.D, c.visual_vocab), std))
        self._add("head.image.b", np.zeros(c.visual_vocab))

    def trainable(self) -> dict[str, Tensor]:
        return {n: t for n, t in self.params.items() if n not in self.frozen}

    def moe_param_names(self) -> list[str]:
        return [n for n in self.params if "_moe." in n]

    def freeze_moe(self) -> list[str]:
        """Mark every router and expert tensor non-trainable; returns their names."""
        names = self.moe_param_names()
        for n in names:
            self.frozen.add(n)
            self.params[n].requires_grad = False
        return names

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for name, t in self.params.items():
            if state[name].shape != t.shape:
                raise ValueError(f"{name}: checkpoint shape {state[name].shape} != {t.shape}")
            t.data = np.array(state[name], dtype=T.DTYPE)

    def save(self, path) -> None:
        T.save_checkpoint(path, self.params)

    # ------------------------------------------------------------ embeddings

    def embed_text(self, token_ids) -> TokenBatch:
        """Word + position embeddings for ``[B, M']`` ids (or one list), wrapped in T_CLS/T_SEP."""
        c = self.config
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        b, m = ids.shape
        if m > c.max_text_len - 2:
            raise ValueError(f"text of length {m} exceeds max_text_len - 2 = {c.max_text_len - 2}")
        if ids.size and (ids.min() < 0 or ids.max() >= c.text_vocab):
            raise IndexError(f"token ids must lie in [0, {c.text_vocab})")
        full = np.concatenate(
            [np.full((b, 1), T_CLS_ID), ids, np.full((b, 1), T_SEP_ID)], axis=1
        )
        s = m + 2
        emb = T.embedding_gather(self.params["text.word"], full)
        pos = T.index_select(self.params["text.pos"], slice(0, s))
        kind = np.array([Kind.T_CLS.value] + [Kind.WORD.value] * m + [Kind.T_SEP.value])
        return TokenBatch(emb + pos, np.full(s, TEXT), kind, np.arange(s))

    def embed_image(self, pixels, patch_mask=None) -> TokenBatch:
        """I_CLS + linearly projected patches + learned 1-D positions.

        ``patch_mask`` ([B, N] booleans) swaps masked patch embeddings for the
        learned mask embedding before positions are added.
        """
        c = self.config
        px = np.asarray(pixels, dtype=T.DTYPE)
        if px.ndim == 3:
            px = px[None]
        patches = patchify(px, c.image_patch)
        b, n, _ = patches.shape
        emb = T.linear(Tensor(patches), self.params["image.proj.w"], self.params["image.proj.b"])
        if patch_mask is not None:
            m = np.asarray(patch_mask, dtype=T.DTYPE).reshape(b, n, 1)
            emb = emb * (1.0 - m) + self.params["image.mask"] * m
        cls = T.mul(Tensor(np.ones((b, 1, 1))), self.params["image.cls"])
        emb = T.concat([cls, emb], axis=1)
        pos = T.index_select(self.params["image.pos"], slice(0, n + 1))
        kind = np.array([Kind.I_CLS.value] + [Kind.PATCH.value] * n)
        return TokenBatch(emb + pos, np.full(n + 1, IMAGE), kind, np.arange(n + 1))

    # ------------------------------------------------------------ blocks

    def _attention(self, x: Tensor, layer: int) -> Tensor:
        c = self.config
        p = f"layers.{layer}.attn"
        b, s, d = x.shape
        h, dh = c.heads, c.D // c.heads

        def heads(name):
            y = T.linear(x, self.params[f"{p}.{name}.w"], self.params[f"{p}.{name}.b"])
            return T.transpose(T.reshape(y, (b, s, h, dh)), (0, 2, 1, 3))

        q, k, v = heads("q"), heads("k"), heads("v")
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        ctx = T.matmul(T.softmax(scores, axis=-1), v)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, s, d))
        return T.linear(ctx, self.params[f"{p}.o.w"], self.params[f"{p}.o.b"])

    def _dense_ffn(self, x: Tensor, prefix: str) -> Tensor:
        return ffn(x, self.params[f"{prefix}.w1"], self.params[f"{prefix}.w2"])

    def _moe(self, x: Tensor, layer: int, modality: str, training: bool, rng, kinds) -> tuple[Tensor, LayerRouting]:
        c = self.config
        tag = "t" if modality == TEXT else "v"
        prefix = f"layers.{layer}.{tag}_moe"
        router = RouterParams(self.params[f"{prefix}.router"], c.noise_sigma)
        gates, clean, noisy = gate(router, x, training, rng)
        factor = c.capacity_train if training else c.capacity_infer
        capacity = compute_capacity(x.shape[0], c.E, c.k, factor)
        use_bpr = c.bpr_T if modality == TEXT else c.bpr_V
        plan = (assign_bpr if use_bpr else assign_vanilla)(gates, c.k, capacity)
        plan.clean_logits, plan.noisy_logits = clean, noisy
        experts = [
            (self.params[f"{prefix}.experts.{e}.w1"], self.params[f"{prefix}.experts.{e}.w2"])
            for e in range(c.E)
        ]
        out = dispatch_combine(x, plan, experts)
        kind_name = c.aux_T if modality == TEXT else c.aux_V
        aux = router_aux_loss(kind_name, gates, clean, noisy, c.k, router.sigma)
        return out, LayerRouting(layer, modality, plan, aux, kinds)

    def _modality_ffn(self, y: Tensor, layer: int, modality: str, training, rng, kinds):
        b, s, d = y.shape
        flat = T.reshape(y, (b * s, d))
        if self.config.is_moe(layer, modality):
            out, routing = self._moe(flat, layer, modality, training, rng, np.tile(kinds, b))
        else:
            tag = "t" if modality == TEXT else "v"
            out, routing = self._dense_ffn(flat, f"layers.{layer}.{tag}_ffn"), None
        return T.reshape(out, (b, s, d)), routing

    def block(self, batch: TokenBatch, layer: int, mode: Mode | str, training: bool = False, rng=None):
        c = self.config
        mode = Mode(mode)
        if not 1 <= layer <= c.L:
            raise ValueError(f"layer {layer} outside [1, {c.L}]")
        p = f"layers.{layer}"
        x = batch.embeddings
        h = x + self._attention(T.layernorm(x, self.params[f"{p}.ln1.g"], self.params[f"{p}.ln1.b"]), layer)
        y = T.layernorm(h, self.params[f"{p}.ln2.g"], self.params[f"{p}.ln2.b"])
        routings: list[LayerRouting] = []
        if layer > c.L - c.F and mode is Mode.PAIR:
            f = self._dense_ffn(y, f"{p}.vl_ffn")
        else:
            nt = batch.n_text
            segments = []
            if nt:
                yt = y if nt == y.shape[1] else T.index_select(y, (slice(None), slice(0, nt)))
                out, r = self._modality_ffn(yt, layer, TEXT, training, rng, batch.kind[:nt])
                segments.append(out)
                routings += [r] if r else []
            if nt < y.shape[1]:
                yv = y if nt == 0 else T.index_select(y, (slice(None), slice(nt, None)))
                out, r = self._modality_ffn(yv, layer, IMAGE, training, rng, batch.kind[nt:])
                segments.append(out)
                routings += [r] if r else []
            f = segments[0] if len(segments) == 1 else T.concat(segments, axis=1)
        return batch.with_embeddings(h + f), routings

    def forward(self, batch: TokenBatch, mode: Mode | str, training: bool = False, rng=None) -> ForwardOutput:
        c = self.config
        routing: list[LayerRouting] = []
        for layer in range(1, c.L + 1):
            batch, r = self.block(batch, layer, mode, training, rng)
            routing += r
        h = T.layernorm(batch.embeddings, self.params["final_ln.g"], self.params["final_ln.b"])
        nt = batch.n_text
        text_logits = image_logits = None
        if nt:
            ht = h if nt == h.shape[1] else T.index_select(h, (slice(None), slice(0, nt)))
            text_logits = T.linear(ht, self.params["head.text.w"], self.params["head.text.b"])
        if nt < h.shape[1]:
            hv = h if nt == 0 else T.index_select(h, (slice(None), slice(nt, None)))
            image_logits = T.linear(hv, self.params["head.image.w"], self.params["head.image.b"])
        return ForwardOutput(text_logits, image_logits, routing, h)


# ---------------------------------------------------------------- parameter accounting


def ffn_param_count(config: MoMEConfig) -> int:
    return 2 * config.D * config.ffn_mult * config.D


def block_shared_param_count(config: MoMEConfig) -> int:
    d = config.D
    return 4 * (d * d + d) + 4 * d  # attention projections + two layernorms


def total_param_count(config: MoMEConfig) -> int:
    c = config
    d = c.D
    n = c.text_vocab * d + c.max_text_len * d
    n += c.patch_dim * d + d + 2 * d + (c.num_patches + 1) * d
    for i in range(1, c.L + 1):
        n += block_shared_param_count(c)
        for modality in (TEXT, IMAGE):
            if c.is_moe(i, modality):
                n += c.E * d + c.E * ffn_param_count(c)
            else:
                n += ffn_param_count(c)
        if i > c.L - c.F:
            n += ffn_param_count(c)
    n += 2 * d + d * c.text_vocab + c.text_vocab + d * c.visual_vocab + c.visual_vocab
    return n


def router_param_count(config: MoMEConfig) -> int:
    c = config
    return sum(c.E * c.D for i in c.moe_layers for m in (TEXT, IMAGE) if c.is_moe(i, m))


def per_token_param_count(config: MoMEConfig, modality: str = TEXT, pair: bool = False) -> int:
    """Transformer parameters applied to one token of ``modality`` (routers counted separately).

    Embedding tables and prediction heads are excluded; an MoE sublayer
    contributes ``k`` expert FFNs.
    """
    c = config
    n = 2 * c.D  # final layernorm
    for i in range(1, c.L + 1):
        n += block_shared_param_count(c)
        if pair and i > c.L - c.F:
            n += ffn_param_count(c)
        elif c.is_moe(i, modality):
            n += c.k * ffn_param_count(c)
        else:
            n += ffn_param_count(c)
    return n

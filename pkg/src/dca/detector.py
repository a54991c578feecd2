"""Decoupled detection transformer.

Pipeline: a small conv stem plus transformer encoder turns the image into
feature tokens; a localization decoder refines learned location queries into
location embeddings (regression head -> boxes); a recognition decoder,
sharing the same block parameters, re-decodes those embeddings together with
per-class semantic query tokens into class embeddings; a duplex classifier
fuses a linear head with a semantic-similarity head into the final per-class
probabilities P = beta * H + (1 - beta) * S.

All forwards run through the local autodiff tape so one implementation
serves training (grad-requiring parameter bindings) and evaluation
(constant bindings, no tape retained).
"""

from __future__ import annotations

import dataclasses
import functools
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, ShapeError
from .semantics import SemanticTable

STEM_STRIDE = 8  # three stride-2 convolutions


@dataclass
class ModelConfig:
    d: int = 64                      # model width
    decoder_layers: int = 6          # shared decoder depth L
    num_queries: int = 100           # location queries N
    n_heads: int = 8
    d_se: int = 64                   # semantic embedding width
    beta: float = 0.5                # duplex fusion weight
    encoder_layers: int = 2
    stem_channels: tuple = (16, 32)
    ffn_dim: int = 0                 # 0 -> 4 * d
    decoupled: bool = True           # DLR: separate localization/recognition passes
    semantic_queries: bool = True    # SRD: semantic tokens join recognition decoding
    duplex: bool = True              # DCF: fuse linear and semantic heads
    detach_localization: bool = False
    aux_supervision: bool = False
    temperature_init: float = 10.0

    def __post_init__(self):
        if self.ffn_dim == 0:
            self.ffn_dim = 4 * self.d
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigurationError(f"beta={self.beta} outside [0, 1]")
        if self.d % self.n_heads != 0:
            raise ConfigurationError("model width must divide evenly into heads")
        if self.d % 4 != 0:
            raise ConfigurationError("model width must be divisible by 4")
        if self.num_queries < 1 or self.decoder_layers < 1:
            raise ConfigurationError("need at least one query and one decoder block")
        if self.d_se < 8:
            raise ConfigurationError("semantic width must be >= 8")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["stem_channels"] = list(self.stem_channels)
        return out

    @classmethod
    def from_dict(cls, payload: dict) -> "ModelConfig":
        payload = dict(payload)
        payload["stem_channels"] = tuple(payload.get("stem_channels", (16, 32)))
        return cls(**payload)


@dataclass
class ModelState:
    """All learnable parameters plus the registered (visible) class ids."""

    config: ModelConfig
    params: dict[str, np.ndarray]
    visible_class_ids: list[int]
    phase: int = 1

    @property
    def num_classes(self) -> int:
        return len(self.visible_class_ids)

    def bind(self, requires_grad: bool) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}

    def clone(self) -> "ModelState":
        return ModelState(config=dataclasses.replace(self.config),
                          params={k: v.copy() for k, v in self.params.items()},
                          visible_class_ids=list(self.visible_class_ids),
                          phase=self.phase)

    def quantize_fp32(self) -> None:
        """Snap parameters to float32-representable values (checkpoint grid)."""
        for k in self.params:
            self.params[k] = self.params[k].astype(np.float32).astype(np.float64)


@dataclass
class ForwardOutput:
    v_e: Tensor                 # (S, d) encoded tokens
    e_local: Tensor             # (N, d) location embeddings
    e_cls: Tensor               # (N, d) class embeddings
    e_se: list                  # per-block decoded semantic tokens, each (K, d)
    e_proj: Tensor              # (N, d_se) projected class embeddings
    boxes: Tensor               # (N, 4) cxcywh in (0, 1)
    h: Tensor                   # (N, K) linear-head probabilities
    s: Tensor                   # (N, K) semantic-head probabilities
    p: Tensor                   # (N, K) fused probabilities
    aux: list = field(default_factory=list)  # [(boxes_l, p_l)] per intermediate layer

    def image(self, i: int) -> "ForwardOutput":
        """Unbatched numpy view of image i from a batched output."""
        pick = lambda t: Tensor(t.data[i])
        return ForwardOutput(v_e=pick(self.v_e), e_local=pick(self.e_local),
                             e_cls=pick(self.e_cls),
                             e_se=[Tensor(t.data[i]) for t in self.e_se],
                             e_proj=pick(self.e_proj), boxes=pick(self.boxes),
                             h=pick(self.h), s=pick(self.s), p=pick(self.p))


@dataclass
class Detection:
    box: np.ndarray      # (4,) cxcywh
    class_id: int
    score: float
    query_index: int


# -- initialization ---------------------------------------------------------


def _uniform(rng, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _init_attention(rng, params: dict, prefix: str, d: int) -> None:
    for name in ("wq", "wk", "wv", "wo"):
        params[f"{prefix}.{name}"] = _uniform(rng, d, d, (d, d))
    for name in ("bq", "bk", "bv", "bo"):
        params[f"{prefix}.{name}"] = np.zeros(d)


def _init_block(rng, params: dict, prefix: str, cfg: ModelConfig, cross: bool) -> None:
    d, f = cfg.d, cfg.ffn_dim
    _init_attention(rng, params, f"{prefix}.sa", d)
    params[f"{prefix}.ln1.g"] = np.ones(d)
    params[f"{prefix}.ln1.b"] = np.zeros(d)
    if cross:
        _init_attention(rng, params, f"{prefix}.ca", d)
        params[f"{prefix}.ln2.g"] = np.ones(d)
        params[f"{prefix}.ln2.b"] = np.zeros(d)
    params[f"{prefix}.ffn.w1"] = _uniform(rng, d, f, (d, f))
    params[f"{prefix}.ffn.b1"] = np.zeros(f)
    params[f"{prefix}.ffn.w2"] = _uniform(rng, f, d, (f, d))
    params[f"{prefix}.ffn.b2"] = np.zeros(d)
    params[f"{prefix}.ln3.g"] = np.ones(d)
    params[f"{prefix}.ln3.b"] = np.zeros(d)


def init_classifier_rows(rng, n_rows: int, d: int) -> tuple[np.ndarray, np.ndarray]:
    """Fresh linear-head rows: small weights, negative bias prior."""
    return rng.normal(0.0, 0.01, size=(n_rows, d)), np.full(n_rows, -2.0)


def init_state(config: ModelConfig, visible_class_ids: list[int], seed: int = 0) -> ModelState:
    rng = np.random.default_rng([seed, 11])
    d = config.d
    c1, c2 = config.stem_channels
    params: dict[str, np.ndarray] = {}
    params["stem.c1.w"] = _uniform(rng, 9 * 3, c1, (3, 3, 3, c1))
    params["stem.c1.b"] = np.zeros(c1)
    params["stem.c2.w"] = _uniform(rng, 9 * c1, c2, (3, 3, c1, c2))
    params["stem.c2.b"] = np.zeros(c2)
    params["stem.c3.w"] = _uniform(rng, 9 * c2, d, (3, 3, c2, d))
    params["stem.c3.b"] = np.zeros(d)
    for i in range(config.encoder_layers):
        _init_block(rng, params, f"enc{i}", config, cross=False)
    for i in range(config.decoder_layers):
        _init_block(rng, params, f"dec{i}", config, cross=True)
    params["q_local"] = rng.normal(0.0, 1.0, size=(config.num_queries, d))
    params["adapter.w"] = _uniform(rng, config.d_se, d, (config.d_se, d))
    params["adapter.b"] = np.zeros(d)
    params["reg.w1"] = _uniform(rng, d, d, (d, d))
    params["reg.b1"] = np.zeros(d)
    params["reg.w2"] = _uniform(rng, d, d, (d, d))
    params["reg.b2"] = np.zeros(d)
    params["reg.w3"] = np.zeros((d, 4))  # boxes start at sigmoid(0) = center
    params["reg.b3"] = np.zeros(4)
    k = len(visible_class_ids)
    params["cls.w"], params["cls.b"] = init_classifier_rows(rng, k, d)
    params["proj.w"] = _uniform(rng, d, config.d_se, (d, config.d_se))
    params["proj.b"] = np.zeros(config.d_se)
    params["fusion.tau"] = np.asarray(float(config.temperature_init))
    return ModelState(config=config, params=params,
                      visible_class_ids=list(visible_class_ids))


def expand_head(state: ModelState, new_class_ids: list[int], seed: int = 0) -> ModelState:
    """Register new classes: old head rows are carried over untouched."""
    overlap = set(new_class_ids) & set(state.visible_class_ids)
    if overlap:
        raise ConfigurationError(f"classes {sorted(overlap)} already registered")
    out = state.clone()
    rng = np.random.default_rng([seed, 13, state.phase + 1])
    w_new, b_new = init_classifier_rows(rng, len(new_class_ids), state.config.d)
    out.params["cls.w"] = np.concatenate([out.params["cls.w"], w_new], axis=0)
    out.params["cls.b"] = np.concatenate([out.params["cls.b"], b_new], axis=0)
    out.visible_class_ids = list(state.visible_class_ids) + list(new_class_ids)
    out.phase = state.phase + 1
    return out


# -- building blocks --------------------------------------------------------


@functools.lru_cache(maxsize=8)
def _sine_table(h: int, w: int, d: int) -> np.ndarray:
    """2-D sinusoidal positions, half the channels per axis, shape (1, h*w, d)."""
    quarter = d // 4
    freqs = 1.0 / (10000.0 ** (np.arange(quarter) / quarter))
    ys = (np.arange(h) + 0.5) / h * 2.0 * np.pi
    xs = (np.arange(w) + 0.5) / w * 2.0 * np.pi
    y_ang = ys[:, None] * freqs[None, :]
    x_ang = xs[:, None] * freqs[None, :]
    y_part = np.concatenate([np.sin(y_ang), np.cos(y_ang)], axis=-1)  # (h, d/2)
    x_part = np.concatenate([np.sin(x_ang), np.cos(x_ang)], axis=-1)  # (w, d/2)
    grid = np.concatenate([
        np.repeat(y_part[:, None, :], w, axis=1),
        np.repeat(x_part[None, :, :], h, axis=0),
    ], axis=-1)
    return grid.reshape(1, h * w, d)


def _linear(x: Tensor, p: dict, prefix: str) -> Tensor:
    return x @ p[f"{prefix}.w"] + p[f"{prefix}.b"]


def _ffn(p: dict, prefix: str, x: Tensor) -> Tensor:
    hidden = ad.relu(x @ p[f"{prefix}.w1"] + p[f"{prefix}.b1"])
    return hidden @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"]


def _mha(p: dict, prefix: str, x_q: Tensor, x_kv: Tensor, n_heads: int,
         q_pos=None, k_pos=None) -> Tensor:
    """Multi-head attention; positional terms join queries/keys, not values."""
    d = x_q.shape[-1]
    dh = d // n_heads

    def heads(t: Tensor) -> Tensor:
        b, n = t.shape[0], t.shape[1]
        return t.reshape((b, n, n_heads, dh)).transpose((0, 2, 1, 3))

    xq = x_q if q_pos is None else x_q + q_pos
    xk = x_kv if k_pos is None else x_kv + k_pos
    q = heads(xq @ p[f"{prefix}.wq"] + p[f"{prefix}.bq"])
    k = heads(xk @ p[f"{prefix}.wk"] + p[f"{prefix}.bk"])
    v = heads(x_kv @ p[f"{prefix}.wv"] + p[f"{prefix}.bv"])
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
    ctx = ad.softmax(scores, axis=-1) @ v
    b, nq = ctx.shape[0], ctx.shape[2]
    ctx = ctx.transpose((0, 2, 1, 3)).reshape((b, nq, d))
    return ctx @ p[f"{prefix}.wo"] + p[f"{prefix}.bo"]


def _ln(p: dict, prefix: str, x: Tensor) -> Tensor:
    return ad.layer_norm(x, p[f"{prefix}.g"], p[f"{prefix}.b"])


def _encoder_block(p: dict, i: int, x: Tensor, n_heads: int, pos: Tensor) -> Tensor:
    pre = f"enc{i}"
    x = _ln(p, f"{pre}.ln1",
            x + _mha(p, f"{pre}.sa", x, x, n_heads, q_pos=pos, k_pos=pos))
    return _ln(p, f"{pre}.ln3", x + _ffn(p, f"{pre}.ffn", x))


def _decoder_block(p: dict, i: int, x_cls: Tensor, x_se, v_e: Tensor,
                   n_heads: int, pos: Tensor) -> tuple[Tensor, Tensor | None]:
    """One shared decoder block.

    Self-attention runs jointly over class and semantic tokens; the semantic
    part is returned straight after self-attention (it bypasses cross
    attention and the feed-forward), while the class part continues through
    cross-attention against the image tokens and the feed-forward. Token
    positions re-enter the cross-attention keys at every block.
    """
    pre = f"dec{i}"
    joint = ad.concat([x_cls, x_se], axis=1) if x_se is not None else x_cls
    y = _ln(p, f"{pre}.ln1", joint + _mha(p, f"{pre}.sa", joint, joint, n_heads))
    if x_se is not None:
        n = x_cls.shape[1]
        c, se = y[:, :n, :], y[:, n:, :]
    else:
        c, se = y, None
    c = _ln(p, f"{pre}.ln2", c + _mha(p, f"{pre}.ca", c, v_e, n_heads, k_pos=pos))
    c = _ln(p, f"{pre}.ln3", c + _ffn(p, f"{pre}.ffn", c))
    return c, se


# -- spec operations ----------------------------------------------------------


def extract_features(state: ModelState, images, params: dict | None = None) -> Tensor:
    """Encode one image or a batch into S = (H/8) * (W/8) feature tokens."""
    p = params if params is not None else state.bind(False)
    single = np.asarray(images.data if isinstance(images, Tensor) else images).ndim == 3
    v_e, _ = _extract_features(p, state.config, _as_batch(images))
    return v_e[0] if single else v_e


def _as_batch(images) -> Tensor:
    t = images if isinstance(images, Tensor) else Tensor(images)
    if t.ndim == 3:
        t = t.reshape((1,) + t.shape)
    if t.ndim != 4 or t.shape[-1] != 3:
        raise ShapeError(f"expected (B, H, W, 3) images, got {t.shape}")
    return t


def _conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int) -> Tensor:
    h, wd = x.shape[1], x.shape[2]
    ho, wo = h // stride, wd // stride
    xp = ad.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    acc = None
    for dy in range(3):
        for dx in range(3):
            piece = xp[:, dy:dy + stride * ho:stride, dx:dx + stride * wo:stride, :]
            term = piece @ w[dy, dx]
            acc = term if acc is None else acc + term
    return acc + b


def _extract_features(p: dict, cfg: ModelConfig, images: Tensor):
    h, w = images.shape[1], images.shape[2]
    if h % STEM_STRIDE or w % STEM_STRIDE:
        raise ShapeError(f"image sides must be divisible by {STEM_STRIDE}, got {h}x{w}")
    x = ad.relu(_conv2d(images, p["stem.c1.w"], p["stem.c1.b"], 2))
    x = ad.relu(_conv2d(x, p["stem.c2.w"], p["stem.c2.b"], 2))
    x = _conv2d(x, p["stem.c3.w"], p["stem.c3.b"], 2)
    ho, wo = h // STEM_STRIDE, w // STEM_STRIDE
    pos = Tensor(_sine_table(ho, wo, cfg.d))
    tokens = x.reshape((x.shape[0], ho * wo, cfg.d)) + pos
    for i in range(cfg.encoder_layers):
        tokens = _encoder_block(p, i, tokens, cfg.n_heads, pos)
    return tokens, pos


def _token_positions(v_e: Tensor, d: int) -> Tensor:
    """Sine table for the (square) token grid backing a feature sequence."""
    s = v_e.shape[-2]
    side = int(round(np.sqrt(s)))
    if side * side != s:
        raise ShapeError(f"cannot infer a square token grid from {s} tokens")
    return Tensor(_sine_table(side, side, d))


def decode_localization(state: ModelState, v_e, params: dict | None = None) -> Tensor:
    """Refine the learned location queries against the image tokens."""
    p = params if params is not None else state.bind(False)
    single = (v_e.ndim == 2)
    v = v_e if isinstance(v_e, Tensor) else Tensor(v_e)
    v = v.reshape((1,) + v.shape) if single else v
    pos = _token_positions(v, state.config.d)
    out, _, _ = _decode_stack(p, state.config, v, _query_tokens(p, state.config),
                              None, pos)
    return out[0] if single else out


def _query_tokens(p: dict, cfg: ModelConfig) -> Tensor:
    return p["q_local"].reshape((1, cfg.num_queries, cfg.d))


def _decode_stack(p: dict, cfg: ModelConfig, v_e: Tensor, x_cls: Tensor, x_se,
                  pos: Tensor):
    if x_se is not None and x_cls.shape[0] != x_se.shape[0]:
        # query tokens ride along at batch 1 until something image-bound joins
        x_cls = ad.broadcast_to(x_cls, (x_se.shape[0],) + x_cls.shape[1:])
    e_se_list: list[Tensor] = []
    layers: list[Tensor] = []
    for i in range(cfg.decoder_layers):
        x_cls, se = _decoder_block(p, i, x_cls, x_se, v_e, cfg.n_heads, pos)
        if se is not None:
            e_se_list.append(se)
            x_se = se
        layers.append(x_cls)
    return x_cls, e_se_list, layers


def decode_recognition(state: ModelState, v_e, e_local, q_se_adapted,
                       params: dict | None = None):
    """Recognition pass: class queries start from the location embeddings.

    `q_se_adapted` is the (K, d) adapter output; pass None (or empty) to run
    self-attention over the class tokens alone with no semantic trace.
    """
    p = params if params is not None else state.bind(False)
    single = (v_e.ndim == 2)
    v = v_e if isinstance(v_e, Tensor) else Tensor(v_e)
    v = v.reshape((1,) + v.shape) if single else v
    e0 = e_local if isinstance(e_local, Tensor) else Tensor(e_local)
    e0 = e0.reshape((1,) + e0.shape) if e0.ndim == 2 else e0
    x_se = _semantic_tokens(q_se_adapted, e0.shape[0])
    pos = _token_positions(v, state.config.d)
    e_cls, e_se_list, _ = _decode_stack(p, state.config, v, e0, x_se, pos)
    if single:
        return e_cls[0], [t[0] for t in e_se_list]
    return e_cls, e_se_list


def _semantic_tokens(q_se_adapted, batch: int):
    if q_se_adapted is None:
        return None
    q = q_se_adapted if isinstance(q_se_adapted, Tensor) else Tensor(q_se_adapted)
    if q.shape[0] == 0:
        return None
    k, d = q.shape
    return ad.broadcast_to(q.reshape((1, k, d)), (batch, k, d))


def predict_boxes(state: ModelState, e_local, params: dict | None = None) -> Tensor:
    """Three-layer perceptron onto sigmoid-bounded (cx, cy, w, h)."""
    p = params if params is not None else state.bind(False)
    e = e_local if isinstance(e_local, Tensor) else Tensor(e_local)
    return _predict_boxes(p, e)


def _predict_boxes(p: dict, e_local: Tensor) -> Tensor:
    x = ad.relu(e_local @ p["reg.w1"] + p["reg.b1"])
    x = ad.relu(x @ p["reg.w2"] + p["reg.b2"])
    return ad.sigmoid(x @ p["reg.w3"] + p["reg.b3"])


def duplex_fusion(state: ModelState, e_cls, table: SemanticTable,
                  beta: float | None = None, params: dict | None = None):
    """Linear head H, semantic head S, and the fused probabilities P."""
    p = params if params is not None else state.bind(False)
    e = e_cls if isinstance(e_cls, Tensor) else Tensor(e_cls)
    q_raw = table.lookup(state.visible_class_ids)
    beta = state.config.beta if beta is None else float(beta)
    return _duplex_fusion(p, state.config, e, q_raw, beta)


def _duplex_fusion(p: dict, cfg: ModelConfig, e_cls: Tensor, q_raw: np.ndarray,
                   beta: float):
    if not 0.0 <= beta <= 1.0:
        raise ConfigurationError(f"beta={beta} outside [0, 1]")
    k = q_raw.shape[0]
    w, b = p["cls.w"], p["cls.b"]
    if w.shape[0] != k:  # probing with a restricted visible set
        w, b = w[:k], b[:k]
    h = ad.sigmoid(e_cls @ w.swapaxes(0, 1) + b)
    e_proj = e_cls @ p["proj.w"] + p["proj.b"]
    anchors = q_raw / np.linalg.norm(q_raw, axis=-1, keepdims=True)
    cosine = ad.l2_normalize(e_proj, axis=-1) @ Tensor(anchors.T)
    s = ad.sigmoid(cosine * p["fusion.tau"])
    fused = h * beta + s * (1.0 - beta) if cfg.duplex else h
    return h, s, fused, e_proj


def forward(state: ModelState, images, table: SemanticTable,
            params: dict | None = None, beta: float | None = None) -> ForwardOutput:
    """Full localization-then-recognition pass; deterministic given inputs."""
    p = params if params is not None else state.bind(False)
    cfg = state.config
    batch = _as_batch(images)
    single = np.asarray(images.data if isinstance(images, Tensor) else images).ndim == 3
    v_e, pos = _extract_features(p, cfg, batch)

    q_raw = table.lookup(state.visible_class_ids)
    q_adapted = Tensor(q_raw) @ p["adapter.w"] + p["adapter.b"]
    se_in = q_adapted if cfg.semantic_queries else None

    if cfg.decoupled:
        queries = _query_tokens(p, cfg)
        e_local, _, loc_layers = _decode_stack(p, cfg, v_e, queries, None, pos)
        boxes = _predict_boxes(p, e_local)
        rec_seed = e_local.detach() if cfg.detach_localization else e_local
        x_se = _semantic_tokens(se_in, v_e.shape[0])
        e_cls, e_se_list, cls_layers = _decode_stack(p, cfg, v_e, rec_seed, x_se, pos)
    else:
        # Coupled baseline: one decoding pass feeds both heads.
        x_se = _semantic_tokens(se_in, v_e.shape[0])
        e_cls, e_se_list, cls_layers = _decode_stack(p, cfg, v_e,
                                                     _query_tokens(p, cfg), x_se, pos)
        loc_layers = cls_layers
        e_local = e_cls
        boxes = _predict_boxes(p, e_local)

    fuse_beta = cfg.beta if beta is None else float(beta)
    h, s, fused, e_proj = _duplex_fusion(p, cfg, e_cls, q_raw, fuse_beta)
    aux = []
    if cfg.aux_supervision:
        for l in range(cfg.decoder_layers - 1):
            boxes_l = _predict_boxes(p, loc_layers[l])
            _, _, p_l, _ = _duplex_fusion(p, cfg, cls_layers[l], q_raw, fuse_beta)
            aux.append((boxes_l, p_l))

    out = ForwardOutput(v_e=v_e, e_local=e_local, e_cls=e_cls, e_se=e_se_list,
                        e_proj=e_proj, boxes=boxes, h=h, s=s, p=fused, aux=aux)
    return _squeeze_output(out) if single else out


def _squeeze_output(out: ForwardOutput) -> ForwardOutput:
    sq = lambda t: t[0]
    return ForwardOutput(v_e=sq(out.v_e), e_local=sq(out.e_local),
                         e_cls=sq(out.e_cls), e_se=[sq(t) for t in out.e_se],
                         e_proj=sq(out.e_proj), boxes=sq(out.boxes),
                         h=sq(out.h), s=sq(out.s), p=sq(out.p),
                         aux=[(sq(b), sq(pp)) for b, pp in out.aux])


def postprocess(output: ForwardOutput, top_k: int = 50,
                class_ids: list[int] | None = None) -> list[Detection]:
    """Keep the top_k (query, class) scores; a query may appear repeatedly.

    Results are sorted by descending score with ties broken by
    (query index, class index).
    """
    if top_k < 1:
        raise ConfigurationError("top_k must be >= 1")
    probs = output.p.data
    boxes = output.boxes.data
    if probs.ndim != 2:
        raise ShapeError("postprocess expects a single-image output; use .image(i)")
    n, k = probs.shape
    flat = probs.ravel()
    order = np.argsort(-flat, kind="stable")[:min(top_k, n * k)]
    detections = []
    for idx in order:
        q, c = divmod(int(idx), k)
        cid = class_ids[c] if class_ids is not None else c
        detections.append(Detection(box=boxes[q].copy(), class_id=int(cid),
                                    score=float(flat[idx]), query_index=q))
    return detections


# -- checkpoints --------------------------------------------------------------


def save_state(state: ModelState, path, snap_to_fp32: bool = True) -> None:
    """Write a single-archive checkpoint (float32 little-endian payloads).

    By default the in-memory parameters are first snapped onto the float32
    grid so that a loaded checkpoint reproduces the live model bit for bit.
    """
    if snap_to_fp32:
        state.quantize_fp32()
    meta = {
        "config": state.config.to_dict(),
        "visible_class_ids": [int(c) for c in state.visible_class_ids],
        "phase": int(state.phase),
    }
    arrays = {k: v.astype("<f4") for k, v in state.params.items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    np.savez(path, **arrays)


def load_state(path) -> ModelState:
    with np.load(path) as archive:
        meta = json.loads(bytes(archive["__meta__"]).decode("utf-8"))
        params = {k: archive[k].astype(np.float64) for k in archive.files
                  if k != "__meta__"}
    return ModelState(config=ModelConfig.from_dict(meta["config"]), params=params,
                      visible_class_ids=list(meta["visible_class_ids"]),
                      phase=int(meta["phase"]))

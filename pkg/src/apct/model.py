"""Point-cloud transformer with significance-targeted key dropout.

Pipeline: patch tokenizer (FPS + kNN + shared MLP + max-pool), then three
stages of pre-norm attention blocks. At the start of every stage the tokens
are scored by the top-k identifier; the resulting per-token rates drive a
fresh key mask in each block of that stage during training. Stages other
than the last also feed an auxiliary max-pool classifier.
"""

from __future__ import annotations

import dataclasses
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as tn
from .adversarial import SignificanceRecord, identify, sample_drop_entries
from .errors import ConfigError, ContractError, FormatError, NumericFault
from .geometry import PointCloud, group_cloud
from .rng import keyed_rng
from .tensor import Tensor

MODEL_MAGIC = b"APCT"
MODEL_VERSION = 1


@dataclass
class ModelConfig:
    n_tokens: int = 32
    group_size: int = 16
    dim: int = 64
    heads: int = 4
    depths: list[int] = field(default_factory=lambda: [2, 2, 2])
    k: int = 2
    gammas: list[float] = field(default_factory=lambda: [0.2, 0.2, 0.2])
    alpha: float = 0.05
    beta: float = 0.95
    aux_weight: float = 1.0
    num_classes: int = 8
    drop: bool = True
    drop_at_inference: bool = False
    tokenizer_seed: int = 0

    def __post_init__(self):
        self.depths = [int(d) for d in self.depths]
        self.gammas = [float(g) for g in self.gammas]
        self.validate()

    def validate(self) -> None:
        problems = []
        if self.dim % self.heads:
            problems.append(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.dim % 2:
            problems.append("dim must be even (tokenizer hidden width is dim/2)")
        if len(self.depths) != 3 or any(d < 1 for d in self.depths):
            problems.append(f"depths must be three positive ints, got {self.depths}")
        if len(self.gammas) != 3 or any(g < 0 for g in self.gammas):
            problems.append(f"gammas must be three non-negative values, got {self.gammas}")
        if not 0 < self.alpha <= self.beta < 1:
            problems.append(f"need 0 < alpha <= beta < 1, got {self.alpha}, {self.beta}")
        if not 1 <= self.k <= self.n_tokens:
            problems.append(f"k must be in 1..n_tokens, got {self.k}")
        if self.n_tokens < 1 or self.group_size < 1 or self.num_classes < 2:
            problems.append("n_tokens, group_size must be positive and num_classes >= 2")
        if self.aux_weight < 0:
            problems.append("aux_weight must be non-negative")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def stages(self) -> int:
        return len(self.depths)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class TokenSet:
    features: Tensor
    centers: np.ndarray


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    C, K, half = cfg.dim, cfg.num_classes, cfg.dim // 2
    shapes = {
        "tok.w1": (3, half), "tok.b1": (half,), "tok.w2": (half, C), "tok.b2": (C,),
        "pos.w1": (3, C), "pos.b1": (C,), "pos.w2": (C, C), "pos.b2": (C,),
    }
    for b in range(sum(cfg.depths)):
        p = f"blk{b}."
        shapes.update({
            p + "ln1.g": (C,), p + "ln1.b": (C,),
            p + "wq": (C, C), p + "wk": (C, C), p + "wv": (C, C),
            p + "wo": (C, C), p + "bo": (C,),
            p + "ln2.g": (C,), p + "ln2.b": (C,),
            p + "ff.w1": (C, 4 * C), p + "ff.b1": (4 * C,),
            p + "ff.w2": (4 * C, C), p + "ff.b2": (C,),
        })
    for s in range(cfg.stages - 1):
        shapes[f"aux{s}.w"] = (C, K)
        shapes[f"aux{s}.b"] = (K,)
    shapes.update({
        "norm.g": (C,), "norm.b": (C,),
        "head.w1": (C, C), "head.b1": (C,), "head.w2": (C, K), "head.b2": (K,),
    })
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, Tensor]:
    """Glorot-uniform weights, zero biases, unit layer-norm gains."""
    rng = keyed_rng("init", seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".g"):
            arr = np.ones(shape)
        elif len(shape) == 1:
            arr = np.zeros(shape)
        else:
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            arr = rng.uniform(-bound, bound, shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    return params


def cast_params(params: dict[str, Tensor], dtype) -> dict[str, Tensor]:
    return {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in params.items()}


def _linear(x, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = tn.matmul(x, w)
    return y if b is None else y + b


# building blocks -------------------------------------------------------------


def prepare_batch(clouds: Sequence[PointCloud], cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Patch centers (B, n, 3) and center-relative groups (B, n, g, 3)."""
    centers, rel = zip(*(group_cloud(pc.points, cfg.n_tokens, cfg.group_size, cfg.tokenizer_seed) for pc in clouds))
    return np.stack(centers), np.stack(rel)


def tokenize_groups(rel: np.ndarray, params: dict[str, Tensor]) -> Tensor:
    """Shared per-point MLP (3 -> C/2 -> C) and max-pool within each group."""
    dt = params["tok.w1"].dtype
    B, n, g, _ = rel.shape
    x = Tensor(rel.reshape(B * n * g, 3), dtype=dt)
    h = tn.gelu(_linear(x, params["tok.w1"], params["tok.b1"]))
    h = _linear(h, params["tok.w2"], params["tok.b2"])
    h = tn.reshape(h, (B * n, g, -1))
    return tn.reshape(tn.max_axis(h, axis=1), (B, n, -1))


def tokenize(pc: PointCloud, cfg: ModelConfig, params: dict[str, Tensor]) -> TokenSet:
    centers, rel = prepare_batch([pc], cfg)
    feats = tokenize_groups(rel, params)
    return TokenSet(tn.reshape(feats, feats.shape[1:]), centers[0])


def pos_embed(centers: np.ndarray, params: dict[str, Tensor]) -> Tensor:
    c = Tensor(centers, dtype=params["pos.w1"].dtype)
    return _linear(tn.gelu(_linear(c, params["pos.w1"], params["pos.b1"])), params["pos.w2"], params["pos.b2"])


def attention_block(
    x: Tensor, pe: Tensor, mask: np.ndarray | None, params: dict[str, Tensor], prefix: str, heads: int
) -> tuple[Tensor, Tensor]:
    """Pre-norm block; ``mask`` is an additive (B, n, n) key mask or None.

    Returns the block output and the attention weights (B, h, n, n).
    """
    B, n, C = x.shape
    d = C // heads
    x = x + pe
    h = tn.layer_norm(x, params[prefix + "ln1.g"], params[prefix + "ln1.b"])

    def split(t):
        return tn.swapaxes(tn.reshape(t, (B, n, heads, d)), 1, 2)

    q = split(tn.matmul(h, params[prefix + "wq"]))
    k = split(tn.matmul(h, params[prefix + "wk"]))
    v = split(tn.matmul(h, params[prefix + "wv"]))
    logits = tn.matmul(q, tn.transpose(k)) * (1.0 / math.sqrt(d))
    attn = tn.softmax_masked(logits, None if mask is None else mask[:, None, :, :])
    ctx = tn.reshape(tn.swapaxes(tn.matmul(attn, v), 1, 2), (B, n, C))
    x = x + _linear(ctx, params[prefix + "wo"], params[prefix + "bo"])
    h = tn.layer_norm(x, params[prefix + "ln2.g"], params[prefix + "ln2.b"])
    h = _linear(tn.gelu(_linear(h, params[prefix + "ff.w1"], params[prefix + "ff.b1"])), params[prefix + "ff.w2"], params[prefix + "ff.b2"])
    return x + h, attn


def aux_head(tokens: Tensor, params: dict[str, Tensor], stage: int) -> Tensor:
    """Class probabilities from channel-wise max-pooled tokens."""
    pooled = tn.max_axis(tokens, axis=-2)
    return tn.softmax(_linear(pooled, params[f"aux{stage}.w"], params[f"aux{stage}.b"]))


# full model ------------------------------------------------------------------


@dataclass
class ForwardOutput:
    logits: Tensor
    aux_probs: list[Tensor]
    records: list[SignificanceRecord]
    masks: list[np.ndarray | None]
    attentions: list[Tensor] = field(default_factory=list)


def _check(t: Tensor, where: str) -> None:
    if not np.all(np.isfinite(t.data)):
        raise NumericFault(f"non-finite values at {where}")


def forward_groups(
    centers: np.ndarray,
    rel: np.ndarray,
    cfg: ModelConfig,
    params: dict[str, Tensor],
    train: bool = False,
    rng: np.random.Generator | None = None,
    masks: Sequence[np.ndarray | None] | None = None,
    rate_override: float | None = None,
    with_aux: bool = True,
) -> ForwardOutput:
    """Forward pass over pre-grouped patches.

    ``masks`` replays previously sampled key masks (one entry per block)
    instead of drawing new ones. ``rate_override`` replaces the identifier's
    rates with a constant.
    """
    dt = params["tok.w1"].dtype
    x = tokenize_groups(rel, params)
    _check(x, "tokenizer")
    pe = pos_embed(centers, params)
    B, n, _ = x.shape
    masking = cfg.drop and (train or cfg.drop_at_inference)
    if masking and masks is None and rng is None:
        raise ContractError("sampling drop masks requires an rng")

    aux_probs, records, used, attns = [], [], [], []
    blk = 0
    for s, depth in enumerate(cfg.depths):
        rec = identify(x.data, cfg.k, cfg.gammas[s], cfg.alpha, cfg.beta, stage=s)
        if rate_override is not None:
            rec.rates = np.full_like(rec.rates, rate_override)
        records.append(rec)
        if with_aux and s < cfg.stages - 1:
            aux_probs.append(aux_head(x, params, s))
        for _ in range(depth):
            if masks is not None:
                mask = masks[blk]
            elif masking:
                mask = sample_drop_entries(rec.rates, n, rng, dtype=dt)
            else:
                mask = None
            used.append(mask)
            x, attn = attention_block(x, pe, mask, params, f"blk{blk}.", cfg.heads)
            attns.append(attn)
            _check(x, f"stage {s + 1} block {blk}")
            blk += 1

    x = tn.layer_norm(x, params["norm.g"], params["norm.b"])
    pooled = tn.max_axis(x, axis=-2)
    hidden = tn.gelu(_linear(pooled, params["head.w1"], params["head.b1"]))
    logits = _linear(hidden, params["head.w2"], params["head.b2"])
    _check(logits, "classifier head")
    return ForwardOutput(logits, aux_probs, records, used, attns)


def forward(
    clouds: PointCloud | Sequence[PointCloud],
    cfg: ModelConfig,
    params: dict[str, Tensor],
    train: bool = False,
    rng: np.random.Generator | None = None,
    **kwargs,
) -> ForwardOutput:
    if isinstance(clouds, PointCloud):
        clouds = [clouds]
    centers, rel = prepare_batch(clouds, cfg)
    return forward_groups(centers, rel, cfg, params, train, rng, **kwargs)


def predict_groups(centers, rel, cfg, params, batch_size: int = 64) -> np.ndarray:
    preds = []
    for i in range(0, len(rel), batch_size):
        out = forward_groups(centers[i : i + batch_size], rel[i : i + batch_size], cfg, params, with_aux=False)
        preds.append(out.logits.data.argmax(axis=-1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


# serialization ---------------------------------------------------------------


def encode_model(cfg: ModelConfig, params: dict[str, Tensor]) -> bytes:
    buf = io.BytesIO()
    doc = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    buf.write(MODEL_MAGIC + struct.pack("<II", MODEL_VERSION, len(doc)) + doc)
    buf.write(struct.pack("<I", len(params)))
    for name, p in params.items():
        raw = name.encode()
        arr = np.ascontiguousarray(p.data, dtype="<f4")
        buf.write(struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, blob: bytes):
        self.blob, self.pos = blob, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError("model file is truncated")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals


def decode_model(blob: bytes) -> tuple[ModelConfig, dict[str, Tensor]]:
    r = _Reader(blob)
    if r.take(4) != MODEL_MAGIC:
        raise FormatError("not a model file (bad magic)")
    version = r.u32()
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported model file version {version}")
    try:
        cfg = ModelConfig.from_dict(json.loads(r.take(r.u32())))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"bad config document: {exc}") from exc
    expected = param_shapes(cfg)
    params = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        rank = r.u32()
        dims = tuple(r.u32(rank)) if rank > 1 else ((r.u32(),) if rank == 1 else ())
        size = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
        if expected.get(name) != dims:
            raise FormatError(f"parameter {name!r} has shape {dims}, config implies {expected.get(name)}")
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"parameter {name!r} holds non-finite values")
        params[name] = Tensor(arr, requires_grad=True, name=name)
    if r.pos != len(blob):
        raise FormatError("trailing bytes after parameter records")
    missing = set(expected) - set(params)
    if missing:
        raise FormatError(f"model file lacks parameters: {sorted(missing)}")
    return cfg, params


def save_model(path, cfg: ModelConfig, params: dict[str, Tensor]) -> None:
    Path(path).write_bytes(encode_model(cfg, params))


def load_model(path) -> tuple[ModelConfig, dict[str, Tensor]]:
    return decode_model(Path(path).read_bytes())

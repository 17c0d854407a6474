"""Masked-autoencoding transformer over channel/time token lattices.

All forward code is batched over records that share a grid geometry
(same channel kinds, same number of time patches, same text length);
:func:`group_batches` splits arbitrary batches into such groups.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import math
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .errors import (
    BadMagicError,
    ConfigError,
    ContractError,
    DimensionError,
    ParseError,
    TruncatedDataError,
    VersionMismatchError,
    VocabularyError,
)
from .signals import ChannelKind, SignalRecord
from .tensor import Tensor
from .tokens import (
    DEFAULT_PATCH_LEN,
    TEXT_BUCKETS,
    MaskPlan,
    TokenGrid,
    patchify,
    text_buckets,
)


class SizeTag(str, enum.Enum):
    TINY = "TINY"
    BASE = "BASE"
    LARGE = "LARGE"


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    d_model: int
    n_layers_enc: int
    n_layers_dec: int
    n_heads: int
    ffn_mult: int = 4
    patch_len: int = DEFAULT_PATCH_LEN
    max_time_patches: int = 64
    max_text_tokens: int = 16
    channel_vocab: tuple[ChannelKind, ...] = tuple(ChannelKind)
    size_tag: SizeTag = SizeTag.TINY
    text_buckets: int = TEXT_BUCKETS
    init_std: float = 0.02
    channel_init_std: float = 0.5
    ln_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "channel_vocab", tuple(ChannelKind.parse(k) for k in self.channel_vocab))
        object.__setattr__(self, "size_tag", SizeTag(self.size_tag))
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if len(set(self.channel_vocab)) != len(self.channel_vocab):
            raise ConfigError("channel_vocab contains duplicates")
        if ChannelKind.TEXT not in self.channel_vocab:
            raise ConfigError("channel_vocab must include TEXT")
        if min(self.d_model, self.n_layers_enc, self.patch_len, self.max_time_patches, self.text_buckets) < 1 or self.n_layers_dec < 0:
            raise ConfigError("model dimensions must be positive")

    @property
    def d_ffn(self) -> int:
        return self.d_model * self.ffn_mult

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["channel_vocab"] = [k.value for k in self.channel_vocab]
        d["size_tag"] = self.size_tag.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["channel_vocab"] = tuple(ChannelKind.parse(k) for k in d["channel_vocab"])
        return cls(**d)


_FAMILY = {
    SizeTag.TINY: dict(d_model=64, n_layers_enc=4, n_layers_dec=2, n_heads=4, ffn_mult=4),
    SizeTag.BASE: dict(d_model=128, n_layers_enc=6, n_layers_dec=2, n_heads=8, ffn_mult=4),
    SizeTag.LARGE: dict(d_model=256, n_layers_enc=8, n_layers_dec=2, n_heads=8, ffn_mult=4),
}


def config_family(size_tag: SizeTag | str, **overrides) -> ModelConfig:
    tag = SizeTag(size_tag)
    return ModelConfig(size_tag=tag, **{**_FAMILY[tag], **overrides})


def micro_config(**overrides) -> ModelConfig:
    """A sub-5k-parameter TINY variant used for end-to-end gradient checks."""
    base = dict(
        d_model=8, n_layers_enc=1, n_layers_dec=1, n_heads=2, ffn_mult=2, patch_len=10,
        max_time_patches=4, max_text_tokens=4, text_buckets=16, size_tag=SizeTag.TINY, init_std=0.3,
    )
    return ModelConfig(**{**base, **overrides})


def _block_shapes(prefix: str, d: int, f: int) -> list[tuple[str, tuple[int, ...]]]:
    shapes = [(f"{prefix}ln1.g", (d,)), (f"{prefix}ln1.b", (d,))]
    for proj in "qkvo":
        shapes += [(f"{prefix}attn.{proj}.w", (d, d)), (f"{prefix}attn.{proj}.b", (d,))]
    shapes += [
        (f"{prefix}ln2.g", (d,)), (f"{prefix}ln2.b", (d,)),
        (f"{prefix}ffn.in.w", (d, f)), (f"{prefix}ffn.in.b", (f,)),
        (f"{prefix}ffn.out.w", (f, d)), (f"{prefix}ffn.out.b", (d,)),
    ]
    return shapes


def parameter_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Backbone parameters in their declared (checkpoint) order."""
    d, f, P = config.d_model, config.d_ffn, config.patch_len
    shapes = [
        ("patch_proj.w", (P, d)), ("patch_proj.b", (d,)),
        ("channel_emb", (len(config.channel_vocab), d)),
        ("temporal_emb", (config.max_time_patches, d)),
        ("text_emb", (config.text_buckets, d)),
    ]
    for i in range(config.n_layers_enc):
        shapes += _block_shapes(f"enc.{i}.", d, f)
    shapes += [("enc.norm.g", (d,)), ("enc.norm.b", (d,)), ("mask_token", (d,))]
    for i in range(config.n_layers_dec):
        shapes += _block_shapes(f"dec.{i}.", d, f)
    shapes += [("dec.norm.g", (d,)), ("dec.norm.b", (d,)), ("dec.head.w", (d, P)), ("dec.head.b", (P,))]
    return shapes


def param_count(config: ModelConfig) -> int:
    return sum(int(np.prod(s)) for _, s in parameter_shapes(config))


def sinusoid_table(n_positions: int, d: int) -> np.ndarray:
    """Interleaved sine/cosine position table with unit amplitude."""
    pos = np.arange(n_positions)[:, None]
    freq = 1.0 / 10000.0 ** (2.0 * np.arange((d + 1) // 2)[None] / d)
    table = np.zeros((n_positions, d))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)[:, : d // 2]
    return table


def init_params(shapes, seed: int, init_std: float, channel_init_std: float | None = None) -> "OrderedDict[str, Tensor]":
    """Seeded initial values.

    The learned temporal table starts from sinusoids and the channel table
    from a wider normal: with both near zero, attention cannot tell tokens
    apart by position or kind and masked pretraining stalls for hundreds
    of steps before it starts aligning tokens across channels.
    """
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    for name, shape in shapes:
        leaf = name.rsplit(".", 1)[-1]
        if name == "temporal_emb":
            value = sinusoid_table(*shape)
        elif name == "channel_emb":
            value = rng.normal(0.0, init_std if channel_init_std is None else channel_init_std, size=shape)
        elif leaf == "g":
            value = np.ones(shape)
        elif leaf == "b":
            value = np.zeros(shape)
        elif leaf == "w" and name.endswith("head.w"):
            # output heads start near zero so initial predictions are ~0
            value = rng.normal(0.0, init_std, size=shape)
        elif leaf == "w":
            fan_in, fan_out = shape[0], shape[-1]
            value = rng.normal(0.0, math.sqrt(2.0 / (fan_in + fan_out)), size=shape)
        else:
            value = rng.normal(0.0, init_std, size=shape)
        params[name] = T.parameter(value, name=name)
    return params


# ---------------------------------------------------------------- batching


@dataclasses.dataclass
class Example:
    """A tokenized record ready for the model."""

    grid: TokenGrid
    text_ids: np.ndarray
    record_id: str = ""
    labels: dict = dataclasses.field(default_factory=dict)
    target: np.ndarray | None = None
    target_mask: np.ndarray | None = None

    @property
    def key(self) -> tuple:
        return (self.grid.geometry, len(self.text_ids))


def prepare_example(record: SignalRecord, config: ModelConfig, include_text: bool = True, report: str | None = None) -> Example:
    grid = patchify(record, config.patch_len)
    if grid.n_time_patches > config.max_time_patches:
        raise ContractError(
            f"record {record.record_id!r} yields {grid.n_time_patches} time patches; the model supports {config.max_time_patches}"
        )
    unknown = [k.value for k in grid.kinds if k not in config.channel_vocab]
    if unknown:
        raise VocabularyError(f"channel kind(s) {unknown} are not in the model vocabulary")
    text = report if report is not None else (record.report if include_text else None)
    ids = text_buckets(text, config.text_buckets, config.max_text_tokens)
    return Example(grid, ids, record.record_id, dict(record.labels))


def group_batches(examples: Sequence[Example]) -> list[list[Example]]:
    """Split examples into groups of identical geometry, keeping first-seen order."""
    groups: "OrderedDict[tuple, list[Example]]" = OrderedDict()
    for ex in examples:
        groups.setdefault(ex.key, []).append(ex)
    return list(groups.values())


# ---------------------------------------------------------------- model


class CSFM:
    """Backbone parameters plus an optional downstream head."""

    def __init__(self, config: ModelConfig, seed: int = 0, params=None):
        self.config = config
        self.seed = seed
        self.params = params if params is not None else init_params(parameter_shapes(config), seed, config.init_std, config.channel_init_std)
        self.head = None
        self._vocab_index = {k: i for i, k in enumerate(config.channel_vocab)}

    # -- parameter access
    def parameters(self) -> list[Tensor]:
        out = list(self.params.values())
        if self.head is not None:
            out += list(self.head.params.values())
        return out

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        named = OrderedDict(self.params)
        if self.head is not None:
            named.update((f"head.{k}", v) for k, v in self.head.params.items())
        return named

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def astype(self, dtype) -> "CSFM":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def channel_embedding(self, kind: ChannelKind) -> np.ndarray:
        return self.params["channel_emb"].data[self.kind_index([ChannelKind.parse(kind)])[0]]

    def kind_index(self, kinds: Iterable[ChannelKind]) -> np.ndarray:
        try:
            return np.array([self._vocab_index[k] for k in kinds], dtype=np.int64)
        except KeyError as exc:
            raise VocabularyError(f"channel kind {exc.args[0].value!r} is not in the model vocabulary") from None

    # -- embeddings
    def embed_signal(self, patches: np.ndarray, kinds: Sequence[ChannelKind], n_time: int) -> Tensor:
        """(B, N, P) normalized patches -> (B, N, d) tokens."""
        p = self.params
        kind_idx = np.repeat(self.kind_index(kinds), n_time)
        time_idx = np.tile(np.arange(n_time), len(kinds))
        pos = T.add(T.embedding_lookup(p["channel_emb"], kind_idx), T.embedding_lookup(p["temporal_emb"], time_idx))
        x = T.linear(Tensor(patches, dtype=p["patch_proj.w"].dtype), p["patch_proj.w"], p["patch_proj.b"])
        return T.add(x, pos)

    def embed_text(self, text_ids: np.ndarray) -> Tensor | None:
        """(B, n_text) bucket ids -> (B, n_text, d) tokens, or None when empty."""
        if text_ids.shape[-1] == 0:
            return None
        p = self.params
        text_row = T.reshape(T.embedding_lookup(p["channel_emb"], self.kind_index([ChannelKind.TEXT])), (self.config.d_model,))
        return T.add(T.embedding_lookup(p["text_emb"], text_ids), text_row)

    # -- transformer pieces
    def _attention(self, x: Tensor, prefix: str) -> Tensor:
        p = self.params
        B, N, d = x.shape
        h = self.config.n_heads
        dh = d // h

        def split(t):
            return T.transpose(T.reshape(t, (B, N, h, dh)), (0, 2, 1, 3))

        q = split(T.linear(x, p[prefix + "attn.q.w"], p[prefix + "attn.q.b"]))
        k = split(T.linear(x, p[prefix + "attn.k.w"], p[prefix + "attn.k.b"]))
        v = split(T.linear(x, p[prefix + "attn.v.w"], p[prefix + "attn.v.b"]))
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        ctx = T.matmul(T.softmax(scores, axis=-1), v)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, N, d))
        return T.linear(ctx, p[prefix + "attn.o.w"], p[prefix + "attn.o.b"])

    def _block(self, x: Tensor, prefix: str) -> Tensor:
        p, eps = self.params, self.config.ln_eps
        x = T.add(x, self._attention(T.layer_norm(x, p[prefix + "ln1.g"], p[prefix + "ln1.b"], eps), prefix))
        hdn = T.layer_norm(x, p[prefix + "ln2.g"], p[prefix + "ln2.b"], eps)
        hdn = T.gelu(T.linear(hdn, p[prefix + "ffn.in.w"], p[prefix + "ffn.in.b"]))
        return T.add(x, T.linear(hdn, p[prefix + "ffn.out.w"], p[prefix + "ffn.out.b"]))

    def run_encoder(self, tokens: Tensor) -> Tensor:
        for i in range(self.config.n_layers_enc):
            tokens = self._block(tokens, f"enc.{i}.")
        return T.layer_norm(tokens, self.params["enc.norm.g"], self.params["enc.norm.b"], self.config.ln_eps)

    # -- batched forward passes
    def encode_batch(self, group: Sequence[Example], visible: np.ndarray | None = None) -> tuple[Tensor, int]:
        """Encode one geometry group.

        ``visible`` holds per-record visible signal-token indices (B, n_vis);
        None means every signal token is visible. Returns encoder outputs
        (B, n_vis + n_text, d) with signal tokens first, and n_vis.
        """
        grid0 = group[0].grid
        patches = np.stack([ex.grid.flat_patches() for ex in group])
        tokens = self.embed_signal(patches, grid0.kinds, grid0.n_time_patches)
        if visible is not None:
            tokens = T.take_tokens(tokens, visible)
        n_vis = tokens.shape[1]
        text = self.embed_text(np.stack([ex.text_ids for ex in group]))
        if text is not None:
            tokens = T.concat([tokens, text], axis=1)
        return self.run_encoder(tokens), n_vis

    def decode_batch(self, encoded: Tensor, n_vis: int, grid: TokenGrid, visible: np.ndarray, masked: np.ndarray) -> Tensor:
        """Predict (B, n_masked, patch_len) normalized patches for masked slots."""
        p, cfg = self.params, self.config
        N = grid.n_tokens
        if visible.shape[1] + masked.shape[1] != N:
            raise ContractError(f"mask plan covers {visible.shape[1] + masked.shape[1]} tokens, grid has {N}")
        kind_idx = np.repeat(self.kind_index(grid.kinds), grid.n_time_patches)
        time_idx = np.tile(np.arange(grid.n_time_patches), grid.n_channels)
        vis_out = T.slice_(encoded, (slice(None), slice(0, n_vis)))
        slots = T.add(
            T.add(T.embedding_lookup(p["channel_emb"], kind_idx[masked]), T.embedding_lookup(p["temporal_emb"], time_idx[masked])),
            p["mask_token"],
        )
        joined = T.concat([vis_out, slots], axis=1)
        order = np.concatenate([visible, masked], axis=1)
        inverse = np.argsort(order, axis=1, kind="stable")
        x = T.take_tokens(joined, inverse)
        for i in range(cfg.n_layers_dec):
            x = self._block(x, f"dec.{i}.")
        x = T.layer_norm(x, p["dec.norm.g"], p["dec.norm.b"], cfg.ln_eps)
        x = T.take_tokens(x, masked)
        return T.linear(x, p["dec.head.w"], p["dec.head.b"])

    def pretrain_loss(self, group: Sequence[Example], plans: Sequence[MaskPlan]) -> Tensor:
        """Masked reconstruction loss for one geometry group."""
        visible = np.stack([pl.visible_indices for pl in plans])
        masked = np.stack([pl.masked_indices for pl in plans])
        encoded, n_vis = self.encode_batch(group, visible)
        pred = self.decode_batch(encoded, n_vis, group[0].grid, visible, masked)
        targets = np.stack([ex.grid.flat_patches()[m] for ex, m in zip(group, masked)])
        return T.mse_loss(pred, targets)


# ---------------------------------------------------------------- single-record API


def embed_grid(model: CSFM, grid: TokenGrid) -> Tensor:
    """(N, d) token sequence in canonical order."""
    tokens = model.embed_signal(grid.flat_patches()[None], grid.kinds, grid.n_time_patches)
    return T.reshape(tokens, tokens.shape[1:])


def embed_text(model: CSFM, report: str | None) -> Tensor:
    """(n_text, d) text tokens; zero rows for an empty report."""
    ids = text_buckets(report, model.config.text_buckets, model.config.max_text_tokens)
    out = model.embed_text(ids[None])
    if out is None:
        return Tensor(np.zeros((0, model.config.d_model)), dtype=model.params["text_emb"].dtype)
    return T.reshape(out, out.shape[1:])


def encode(model: CSFM, example: Example, plan: MaskPlan | None = None) -> Tensor:
    """Encoder outputs (n_visible + n_text, d) for one example."""
    if plan is not None and plan.masked.size != example.grid.n_tokens:
        raise ContractError("mask plan does not match the grid")
    visible = None if plan is None else plan.visible_indices[None]
    if visible is not None and visible.shape[1] == 0 and len(example.text_ids) == 0:
        raise ContractError("nothing left to encode after masking")
    out, _ = model.encode_batch([example], visible)
    return T.reshape(out, out.shape[1:])


def decode_reconstruct(model: CSFM, encoded: Tensor, plan: MaskPlan, grid: TokenGrid) -> Tensor:
    """(n_masked, patch_len) predictions for one example's masked tokens."""
    if plan.masked.size != grid.n_tokens:
        raise ContractError(f"mask plan has {plan.masked.size} tokens, grid has {grid.n_tokens}")
    if plan.n_masked < 1:
        raise ContractError("decode_reconstruct needs at least one masked token")
    n_vis = plan.masked.size - plan.n_masked
    batched = T.reshape(encoded, (1,) + encoded.shape)
    out = model.decode_batch(batched, n_vis, grid, plan.visible_indices[None], plan.masked_indices[None])
    return T.reshape(out, out.shape[1:])


def mae_loss(predictions: Tensor, grid: TokenGrid, plan: MaskPlan) -> Tensor:
    targets = grid.flat_patches()[plan.masked_indices]
    if predictions.shape != targets.shape:
        raise DimensionError(f"predictions {predictions.shape} do not align with {targets.shape} masked targets")
    return T.mse_loss(predictions, targets)


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"CSFM"
CHECKPOINT_VERSION = 1
_U32 = struct.Struct("<I")


def save_checkpoint(model: CSFM, path) -> None:
    """Write config, tensor table and little-endian float32 tensors."""
    named = model.named_parameters()
    header = {
        "config": model.config.to_dict(),
        "seed": model.seed,
        "head": None if model.head is None else model.head.spec(),
        "tensors": [[name, list(t.shape)] for name, t in named.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(t.data.astype("<f4").tobytes() for t in named.values())
    Path(path).write_bytes(CHECKPOINT_MAGIC + _U32.pack(CHECKPOINT_VERSION) + _U32.pack(len(blob)) + blob + body)


def load_checkpoint(path) -> CSFM:
    buf = Path(path).read_bytes()
    if len(buf) < 12:
        raise TruncatedDataError("checkpoint shorter than its fixed preamble")
    if buf[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"not a checkpoint (magic {buf[:4]!r})")
    (version,) = _U32.unpack_from(buf, 4)
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    (hlen,) = _U32.unpack_from(buf, 8)
    if len(buf) < 12 + hlen:
        raise TruncatedDataError("checkpoint header truncated")
    try:
        header = json.loads(buf[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"bad checkpoint header: {exc}") from exc
    config = ModelConfig.from_dict(header["config"])
    offset = 12 + hlen
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for name, shape in header["tensors"]:
        n = int(np.prod(shape)) * 4
        if offset + n > len(buf):
            raise TruncatedDataError(f"tensor {name!r} truncated")
        tensors[name] = np.frombuffer(buf, dtype="<f4", count=n // 4, offset=offset).reshape(shape)
        offset += n
    if offset != len(buf):
        raise ParseError(f"{len(buf) - offset} trailing bytes after the last tensor")
    expected = parameter_shapes(config)
    params = OrderedDict()
    for name, shape in expected:
        if name not in tensors or tuple(tensors[name].shape) != shape:
            raise ParseError(f"checkpoint tensor {name!r} missing or misshapen")
        params[name] = T.parameter(tensors[name].astype(np.float32), name=name)
    model = CSFM(config, seed=header.get("seed", 0), params=params)
    if header.get("head"):
        from .heads import head_from_spec

        head = head_from_spec(header["head"], config)
        for name in head.params:
            head.params[name] = T.parameter(tensors[f"head.{name}"].astype(np.float32), name=name)
        model.head = head
    return model


# ---------------------------------------------------------------- gradient check


def toy_record(seed: int = 0, length: int = 40, kinds: Sequence[ChannelKind] = (ChannelKind.II, ChannelKind.V5),
               report: str | None = "sinus rhythm") -> SignalRecord:
    """Small random record for end-to-end gradient checks."""
    rng = np.random.default_rng([seed, 7])
    channels = {k: rng.normal(size=length) for k in kinds}
    return SignalRecord("toy", 100.0, channels, report)


def loss_grad_check(model: CSFM, loss_fn, h: float = 1e-5) -> float:
    """grad_check of ``loss_fn()`` with respect to every model parameter (head included)."""
    return T.grad_check(lambda *_: loss_fn(), model.parameters(), h)


def model_grad_check(config: ModelConfig | None = None, seed: int = 0, h: float = 1e-5) -> float:
    """Max relative gradient error of the masked loss on the micro config, in 64-bit."""
    from .tokens import sample_mask

    config = config or micro_config()
    with T.precision(np.float64):
        model = CSFM(config, seed=seed).astype(np.float64)
        ex = prepare_example(toy_record(seed, length=config.patch_len * config.max_time_patches), config)
        plan = sample_mask(ex.grid, "MIXED", 0.5, seed)
        return loss_grad_check(model, lambda: model.pretrain_loss([ex], [plan]), h)

"""Toy multimodal causal transformer.

Visual features pass through a two-layer projector, are concatenated in front
of the text-token embeddings and run through ``n_layers`` pre-norm causal
blocks. A :class:`~progdistill.compress.CompressionRequest` prunes visual
positions at the input of one layer; text positions are never pruned and
retained tokens keep their original positional embeddings.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import compress as C
from . import tensor as T
from .tensor import Tensor

_MASK_FILL = -1e9


@dataclass
class ModelConfig:
    n_layers: int = 8
    d_model: int = 64
    n_heads: int = 4
    ffn_dim: int = 256
    vocab_size: int = 64
    n_visual_tokens: int = 64
    d_visual: int = 16
    max_seq_len: int = 72
    init_scale: float = 1.0

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "ffn_dim", "vocab_size",
                     "n_visual_tokens", "d_visual", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.max_seq_len < self.n_visual_tokens + 1:
            raise ValueError("max_seq_len must leave room for text after the visual span")


def _check_cols(cols, span) -> None:
    if cols is None:
        return
    a, b = span
    c = np.asarray(cols)
    if len(c) == 0 or (c < a).any() or (c >= b).any() or (np.diff(c) <= 0).any():
        raise ValueError(f"answer_cols {tuple(cols)} must be increasing and inside {span}")


@dataclass
class TokenSequence:
    """One example: visual span followed by text tokens."""

    visual_features: np.ndarray
    text_tokens: np.ndarray
    answer_span: tuple[int, int]
    answer_cols: tuple[int, ...] | None = None   # supervised columns; default the whole span

    def __post_init__(self):
        a, b = self.answer_span
        if not 0 < a < b <= len(self.text_tokens):
            raise ValueError(f"answer_span {self.answer_span} must be non-empty, inside the text "
                             "and preceded by at least one text token")
        _check_cols(self.answer_cols, self.answer_span)

    @property
    def n_visual(self) -> int:
        return self.visual_features.shape[0]

    @property
    def positions(self) -> np.ndarray:
        return np.arange(self.n_visual + len(self.text_tokens))


@dataclass
class Batch:
    """A stack of sequences sharing the same text layout."""

    visual: np.ndarray        # [B, N, d_v]
    text: np.ndarray          # [B, L_text] int
    answer_span: tuple[int, int]
    answer_cols: tuple[int, ...] | None = None

    def __post_init__(self):
        a, b = self.answer_span
        if not 0 < a < b <= self.text.shape[1]:
            raise ValueError(f"bad answer_span {self.answer_span}")
        if self.answer_cols is not None:
            self.answer_cols = tuple(int(c) for c in self.answer_cols)
        _check_cols(self.answer_cols, self.answer_span)

    @classmethod
    def from_sequences(cls, seqs: list[TokenSequence]) -> "Batch":
        layouts = {(s.answer_span, None if s.answer_cols is None else tuple(s.answer_cols))
                   for s in seqs}
        if len(layouts) != 1:
            raise ValueError("sequences in a batch must share the answer layout")
        span, cols = layouts.pop()
        return cls(np.stack([s.visual_features for s in seqs]),
                   np.stack([s.text_tokens for s in seqs]).astype(np.int64), span, cols)

    @property
    def columns(self) -> np.ndarray:
        """Text columns holding supervised answer tokens."""
        if self.answer_cols is not None:
            return np.asarray(self.answer_cols)
        return np.arange(*self.answer_span)

    def __len__(self) -> int:
        return self.visual.shape[0]

    @property
    def n_visual(self) -> int:
        return self.visual.shape[1]

    @property
    def answers(self) -> np.ndarray:
        return self.text[:, self.columns]

    def example(self, i: int) -> TokenSequence:
        return TokenSequence(self.visual[i], self.text[i], self.answer_span, self.answer_cols)

    def subset(self, idx) -> "Batch":
        return Batch(self.visual[idx], self.text[idx], self.answer_span, self.answer_cols)


@dataclass
class ForwardOutput:
    logits: Tensor                    # [B, seq_out, V]
    positions: np.ndarray             # original position of each surviving row
    n_visual: int                     # visual rows surviving at the output
    retention: C.CompressionEvent | None = None
    per_layer_attn: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def seq_len(self) -> int:
        return self.logits.shape[1]


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    d, f, s = config.d_model, config.ffn_dim, config.init_scale

    def w(fan_in, *shape, gain=1.0):
        return Tensor(rng.normal(0.0, s * gain / math.sqrt(fan_in), size=shape), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape), requires_grad=True)

    out_gain = 1.0 / math.sqrt(2 * config.n_layers)
    p: dict[str, Tensor] = {
        "proj.w1": w(config.d_visual, config.d_visual, d),
        "proj.b1": zeros(d),
        "proj.w2": w(d, d, d),
        "proj.b2": zeros(d),
        "tok_emb": w(1.0, config.vocab_size, d, gain=0.1),
        "pos_emb": w(1.0, config.max_seq_len, d, gain=0.1),
        "ln_f.g": ones(d),
        "ln_f.b": zeros(d),
        "head.w": w(d, d, config.vocab_size),
    }
    for i in range(1, config.n_layers + 1):
        pre = f"blocks.{i}."
        p.update({
            pre + "ln1.g": ones(d), pre + "ln1.b": zeros(d),
            pre + "attn.wq": w(d, d, d), pre + "attn.wk": w(d, d, d),
            pre + "attn.wv": w(d, d, d), pre + "attn.wo": w(d, d, d, gain=out_gain),
            pre + "ln2.g": ones(d), pre + "ln2.b": zeros(d),
            pre + "mlp.w1": w(d, d, f), pre + "mlp.b1": zeros(f),
            pre + "mlp.w2": w(f, f, d, gain=out_gain), pre + "mlp.b2": zeros(d),
        })
    return p


def project_visual(features, params: dict[str, Tensor]) -> Tensor:
    """Two-layer MLP mapping ``[..., N, d_v]`` visual features to model width."""
    x = features if isinstance(features, Tensor) else Tensor(features)
    w1 = params["proj.w1"]
    if x.shape[-1] != w1.shape[0]:
        raise ValueError(f"visual feature dim {x.shape[-1]} != d_visual {w1.shape[0]}")
    h = T.gelu(x @ w1 + params["proj.b1"])
    return h @ params["proj.w2"] + params["proj.b2"]


def _attention(x: Tensor, p: dict[str, Tensor], pre: str, n_heads: int):
    B, n, d = x.shape
    dh = d // n_heads

    def heads(t):
        return t.reshape(B, n, n_heads, dh).transpose(0, 2, 1, 3)

    q = heads(x @ p[pre + "wq"])
    k = heads(x @ p[pre + "wk"])
    v = heads(x @ p[pre + "wv"])
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    # rows keep their relative order after pruning, so plain lower-triangular masking stays causal
    causal = np.triu(np.full((n, n), _MASK_FILL), k=1)
    att = T.softmax(scores + causal)
    y = (att @ v).transpose(0, 2, 1, 3).reshape(B, n, d)
    return y @ p[pre + "wo"], att.data


def _block(x: Tensor, p: dict[str, Tensor], i: int, n_heads: int):
    pre = f"blocks.{i}."
    h = T.layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
    a, att = _attention(h, p, pre + "attn.", n_heads)
    x = x + a
    h = T.layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
    h = T.gelu(h @ p[pre + "mlp.w1"] + p[pre + "mlp.b1"]) @ p[pre + "mlp.w2"] + p[pre + "mlp.b2"]
    return x + h, att


class ToyMLLM:
    """Parameters plus forward pass of the toy multimodal LM."""

    def __init__(self, config: ModelConfig, seed: int = 0, params: dict[str, Tensor] | None = None):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def copy(self) -> "ToyMLLM":
        return ToyMLLM(self.config, params={k: Tensor(v.data.copy(), requires_grad=True)
                                            for k, v in self.params.items()})

    # forward --------------------------------------------------------------

    def forward(self, batch: Batch | TokenSequence, compression: C.CompressionRequest | None = None,
                compressor: str = "random", rng: np.random.Generator | None = None,
                keep_attn: bool = False, n_pivots: int = 8) -> ForwardOutput:
        if isinstance(batch, TokenSequence):
            batch = Batch.from_sequences([batch])
        cfg, p = self.config, self.params
        B, N = batch.visual.shape[:2]
        L_text = batch.text.shape[1]
        if N + L_text > cfg.max_seq_len:
            raise ValueError(f"sequence length {N + L_text} exceeds max_seq_len {cfg.max_seq_len}")
        if compression is not None:
            if not 1 <= compression.layer <= cfg.n_layers:
                raise C.CompressionError(
                    f"compression layer {compression.layer} outside [1, {cfg.n_layers}]")
            if compressor == "importance" and compression.layer < 2:
                raise C.CompressionError("importance compression needs layer >= 2")
            if compressor not in C.COMPRESSORS:
                raise C.CompressionError(f"unknown compressor {compressor!r}")
            if compressor != "importance" and rng is None:
                raise ValueError(f"{compressor!r} compression needs an rng")

        positions = np.tile(np.arange(N + L_text), (B, 1))
        x = T.concat([project_visual(batch.visual, p), T.embedding(p["tok_emb"], batch.text)], axis=1)
        x = x + T.embedding(p["pos_emb"], positions[0])

        n_vis = N
        event = None
        attn_maps: dict[int, np.ndarray] = {}
        need_prev = compression is not None and compressor == "importance"
        for i in range(1, cfg.n_layers + 1):
            if compression is not None and i == compression.layer:
                event = C.CompressionEvent(compression.ratio, compression.layer, compressor)
                rows = []
                for b in range(B):
                    mask = C.select(compressor, n=N, r=compression.ratio, rng=rng,
                                    attn=attn_maps[i - 1][b] if need_prev else None,
                                    hidden=x.data[b, :N] if compressor == "redundancy" else None,
                                    visual_range=(0, N), n_pivots=n_pivots)
                    event.masks.append(mask)
                    rows.append(np.concatenate([mask.kept_indices, np.arange(N, N + L_text)]))
                idx = np.stack(rows)
                x = T.take_rows(x, idx)
                positions = np.take_along_axis(positions, idx, axis=1)
                n_vis = len(event.masks[0])
            x, att = _block(x, p, i, cfg.n_heads)
            if keep_attn or (need_prev and i == compression.layer - 1):
                attn_maps[i] = att
        x = T.layer_norm(x, p["ln_f.g"], p["ln_f.b"])
        logits = x @ p["head.w"]
        return ForwardOutput(logits, positions, n_vis, event, attn_maps if keep_attn else {})

    __call__ = forward

    # losses ---------------------------------------------------------------

    def loss_sft(self, output: ForwardOutput, batch: Batch) -> Tensor:
        return loss_sft(output, batch)

    # persistence ----------------------------------------------------------

    def save(self, path) -> None:
        save_checkpoint(path, self.params, asdict(self.config))

    @classmethod
    def load(cls, path) -> "ToyMLLM":
        params, meta = load_checkpoint(path)
        return cls(ModelConfig(**meta), params=params)


def answer_rows(output: ForwardOutput, batch: Batch) -> np.ndarray:
    """Row index (per batch element) of the logits that predict each answer token."""
    n_text = batch.text.shape[1]
    text_start = output.seq_len - n_text
    if text_start != output.n_visual:
        raise ValueError("text span misaligned with output rows")
    rows = text_start + batch.columns - 1
    return np.tile(rows, (len(batch), 1))


def answer_logits(output: ForwardOutput, batch: Batch) -> Tensor:
    """Logits ``[B, answer_len, V]`` at the positions predicting the answer."""
    return T.take_rows(output.logits, answer_rows(output, batch))


def loss_sft(output: ForwardOutput, batch: Batch) -> Tensor:
    """Next-token cross-entropy over the supervised answer columns."""
    logits = answer_logits(output, batch)
    return T.cross_entropy(logits, batch.answers)


# checkpoint format ---------------------------------------------------------

CHECKPOINT_MAGIC = b"PDCKPT 1\n"


def save_checkpoint(path, params: dict[str, Tensor], meta: dict) -> None:
    """Write named float64 tensors; see docs/CHECKPOINT.md for the layout."""
    names = sorted(params)
    header = {"meta": meta,
              "tensors": [{"name": n, "shape": list(params[n].shape)} for n in names]}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(blob + b"\n")
        for n in names:
            fh.write(np.ascontiguousarray(params[n].data, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, Tensor], dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    rest = raw[len(CHECKPOINT_MAGIC):]
    nl = rest.index(b"\n")
    header = json.loads(rest[:nl])
    offset = nl + 1
    params = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(rest, dtype="<f8", count=count, offset=offset).reshape(entry["shape"])
        offset += 8 * count
        params[entry["name"]] = Tensor(arr.copy(), requires_grad=True)
    if offset != len(rest):
        raise ValueError(f"{path}: trailing bytes after tensor data")
    return params, header["meta"]

"""Composite speech/text transformer.

The stack is: speech transformer blocks -> two-stage downsampling adapter ->
shared text transformer encoder -> text transformer decoder with a token
embedding table tied to the output projection. Four forward modes:

  * ``encode_speech``     frames -> adapter output (the speech embedding)
  * ``encode_speech_only``  speech embedding -> text-encoder states
  * ``encode_text``       token ids -> text-encoder states
  * ``encode_concat``     [speech ; masked text] -> joint encoder states,
                          split back at the segment boundary
  * ``decode_logits``     causal teacher-forced decoder over a memory

Positions restart at zero in each segment of the concatenated mode, and a
learned segment embedding distinguishes speech from text, so text-positional
geometry is identical between text-only and concatenated forwards.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import (
    Tensor,
    add,
    concat_seq,
    conv1d_stride2,
    dropout,
    embedding,
    gelu,
    layer_norm,
    masked_fill,
    matmul,
    reshape,
    scale,
    slice_seq,
    softmax_last,
    transpose,
)
from .vocabulary import TASK_TAGS

GROUPS = ("speech", "adapter", "text_enc", "text_dec", "shared_embed")

_NEG_FILL = -1e9


@dataclass
class ModelConfig:
    """Sizes and rates for the composite model."""

    vocab_size: int
    d_model: int = 48
    n_heads: int = 4
    speech_layers: int = 2
    text_enc_layers: int = 4
    text_dec_layers: int = 2
    erm_layer: int = 4
    feat_dim: int = 16
    max_frames: int = 256
    max_tokens: int = 32
    dropout_text: float = 0.1
    attn_dropout_text: float = 0.0
    dropout_speech: float = 0.0
    ffn_mult: int = 2

    def validate(self) -> None:
        problems = []
        for field in ("vocab_size", "d_model", "n_heads", "speech_layers",
                      "text_enc_layers", "text_dec_layers", "feat_dim",
                      "max_tokens", "ffn_mult"):
            if getattr(self, field) < 1:
                problems.append(f"{field} must be a positive integer")
        if self.d_model % self.n_heads != 0:
            problems.append(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        if not 1 <= self.erm_layer <= self.text_enc_layers:
            problems.append(
                f"erm_layer ({self.erm_layer}) must be in 1..text_enc_layers "
                f"({self.text_enc_layers})"
            )
        if self.max_frames < 4:
            problems.append(f"max_frames ({self.max_frames}) must be >= 4")
        for field in ("dropout_text", "attn_dropout_text", "dropout_speech"):
            rate = getattr(self, field)
            if not 0.0 <= rate < 1.0:
                problems.append(f"{field} ({rate}) must be in [0, 1)")
        if problems:
            raise ValueError("invalid model config: " + "; ".join(problems))

    @property
    def speech_embed_cap(self) -> int:
        """Max adapter output length (two stride-2 stages over max_frames)."""
        return -(-(-(-self.max_frames // 2)) // 2)


@dataclass
class Encoding:
    """Text-encoder output for one forward.

    ``layer_trace`` is the hidden state after encoder block ``erm_layer``,
    restricted to the traced segment (the speech segment in concatenated
    mode, the whole sequence otherwise). ``segment_lengths`` is
    (speech_len, text_len); the absent segment has length zero.
    """

    hidden: Tensor
    layer_trace: Tensor
    segment_lengths: tuple[int, int]

    def speech_part(self) -> Tensor:
        return slice_seq(self.hidden, 0, self.segment_lengths[0])

    def text_part(self) -> Tensor:
        s, t = self.segment_lengths
        return slice_seq(self.hidden, s, s + t)


_PE_CACHE: dict[tuple[int, str], np.ndarray] = {}


def sinusoid_positions(length: int, d_model: int, dtype) -> np.ndarray:
    """Fixed sinusoidal position table, cached per (d_model, dtype)."""
    key = (d_model, np.dtype(dtype).str)
    table = _PE_CACHE.get(key)
    if table is None or table.shape[0] < length:
        n = max(length, 64)
        pos = np.arange(n, dtype=np.float64)[:, None]
        idx = np.arange(d_model, dtype=np.float64)[None, :]
        angle = pos / np.power(10000.0, 2.0 * (idx // 2) / d_model)
        table = np.where(np.arange(d_model) % 2 == 0, np.sin(angle), np.cos(angle))
        table = table.astype(dtype)
        _PE_CACHE[key] = table
    return table[:length]


class SpeechTextModel:
    """Parameter collection plus the forward modes.

    Safe for concurrent read-only inference; training mutates parameters and
    must be exclusive.
    """

    def __init__(
        self,
        cfg: ModelConfig,
        params: dict[str, Tensor],
        groups: dict[str, str],
        dropout_rng: np.random.Generator,
    ):
        self.cfg = cfg
        self.params = params
        self.groups = groups
        self.train_mode = False
        self._rng = dropout_rng

    # -- bookkeeping --------------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def group_names(self, group: str) -> list[str]:
        return [n for n, g in self.groups.items() if g == group]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def train(self, flag: bool = True) -> None:
        self.train_mode = flag

    def eval(self) -> None:
        self.train_mode = False

    @property
    def dtype(self):
        return self.params["embed.tokens"].dtype

    def copy(self, requires_grad: bool) -> "SpeechTextModel":
        params = {}
        for name, p in self.params.items():
            t = Tensor(p.data.copy(), requires_grad=requires_grad)
            params[name] = t
        clone = SpeechTextModel(self.cfg, params, dict(self.groups),
                                np.random.default_rng(0))
        clone.train_mode = False
        return clone

    # -- small building blocks ---------------------------------------------

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _drop(self, x: Tensor, rate: float) -> Tensor:
        if self.train_mode and rate > 0.0:
            return dropout(x, rate, self._rng)
        return x

    def _ln(self, prefix: str, x: Tensor) -> Tensor:
        return layer_norm(x, self._p(prefix + ".g"), self._p(prefix + ".b"))

    def _linear(self, prefix: str, x: Tensor) -> Tensor:
        return add(matmul(x, self._p(prefix + ".w")), self._p(prefix + ".b"))

    def _mha(
        self,
        prefix: str,
        q_in: Tensor,
        kv_in: Tensor,
        mask: Optional[np.ndarray],
        attn_drop: float,
    ) -> Tensor:
        cfg = self.cfg
        heads, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
        lq, lk = q_in.shape[0], kv_in.shape[0]
        q = transpose(reshape(self._linear(prefix + ".q", q_in), (lq, heads, dh)), (1, 0, 2))
        k = transpose(reshape(self._linear(prefix + ".k", kv_in), (lk, heads, dh)), (1, 0, 2))
        v = transpose(reshape(self._linear(prefix + ".v", kv_in), (lk, heads, dh)), (1, 0, 2))
        scores = scale(matmul(q, transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
        if mask is not None:
            scores = masked_fill(scores, mask, _NEG_FILL)
        attn = softmax_last(scores)
        attn = self._drop(attn, attn_drop)
        ctx = reshape(transpose(matmul(attn, v), (1, 0, 2)), (lq, cfg.d_model))
        return self._linear(prefix + ".o", ctx)

    def _ffn(self, prefix: str, x: Tensor) -> Tensor:
        return self._linear(prefix + ".2", gelu(self._linear(prefix + ".1", x)))

    def _enc_block(
        self,
        prefix: str,
        x: Tensor,
        mask: Optional[np.ndarray],
        drop_rate: float,
        attn_drop: float,
    ) -> Tensor:
        a = self._mha(prefix + ".attn", self._ln(prefix + ".ln1", x), None if False else self._noop(x), mask, attn_drop)
        return x

    def _noop(self, x):  # placeholder removed below
        return x

    # -- forward modes -------------------------------------------------------

    def _encoder_block(self, prefix, x, mask, drop_rate, attn_drop):
        h = self._ln(prefix + ".ln1", x)
        x = add(x, self._drop(self._mha(prefix + ".attn", h, h, mask, attn_drop), drop_rate))
        f = self._ffn(prefix + ".ffn", self._ln(prefix + ".ln2", x))
        return add(x, self._drop(f, drop_rate))

    def _decoder_block(self, prefix, x, memory, causal_mask, drop_rate, attn_drop):
        h = self._ln(prefix + ".ln1", x)
        x = add(x, self._drop(self._mha(prefix + ".attn", h, h, causal_mask, attn_drop), drop_rate))
        h = self._ln(prefix + ".lnc", x)
        x = add(x, self._drop(self._mha(prefix + ".cross", h, memory, None, attn_drop), drop_rate))
        f = self._ffn(prefix + ".ffn", self._ln(prefix + ".ln2", x))
        return add(x, self._drop(f, drop_rate))

    def _positions(self, length: int) -> Tensor:
        return Tensor(sinusoid_positions(length, self.cfg.d_model, self.dtype))

    def _embed_tokens(self, ids: np.ndarray) -> Tensor:
        e = embedding(self._p("embed.tokens"), ids)
        return scale(e, math.sqrt(self.cfg.d_model))

    def encode_speech(self, frames) -> Tensor:
        """Speech blocks then the adapter; output length ceil(ceil(T/2)/2)."""
        frames = frames if isinstance(frames, Tensor) else Tensor(
            np.asarray(frames, dtype=self.dtype))
        t = frames.shape[0]
        if frames.ndim != 2 or frames.shape[1] != self.cfg.feat_dim:
            raise ValueError(
                f"encode_speech: expected [T, {self.cfg.feat_dim}] frames, got {frames.shape}"
            )
        if t < 1 or t > self.cfg.max_frames:
            raise ValueError(
                f"encode_speech: frame count {t} outside 1..{self.cfg.max_frames}"
            )
        cfg = self.cfg
        x = add(self._linear("speech.in_proj", frames), self._positions(t))
        for i in range(cfg.speech_layers):
            x = self._encoder_block(f"speech.block{i}", x, None,
                                    cfg.dropout_speech, 0.0)
        x = self._ln("speech.final_ln", x)
        for i in range(2):
            pre = f"adapter.layer{i}"
            h = add(x, self._ffn(pre + ".ffn", self._ln(pre + ".ln", x)))
            x = conv1d_stride2(h, self._p(pre + ".conv.w"), self._p(pre + ".conv.b"))
        return x

    def _run_text_encoder(self, x: Tensor, mask: Optional[np.ndarray]):
        cfg = self.cfg
        trace = None
        for i in range(cfg.text_enc_layers):
            x = self._encoder_block(f"text_enc.block{i}", x, mask,
                                    cfg.dropout_text, cfg.attn_dropout_text)
            if i + 1 == cfg.erm_layer:
                trace = x
        return self._ln("text_enc.final_ln", x), trace

    def encode_text(self, tokens) -> Encoding:
        """Text-encoder states for a token sequence, with the block-k trace."""
        ids = np.asarray(tokens, dtype=np.int64)
        n = ids.shape[0]
        if n < 1 or n > self.cfg.max_tokens:
            raise ValueError(f"encode_text: length {n} outside 1..{self.cfg.max_tokens}")
        x = add(add(self._embed_tokens(ids), self._positions(n)),
                self._p("text_enc.segment_text"))
        x = self._drop(x, self.cfg.dropout_text)
        hidden, trace = self._run_text_encoder(x, None)
        return Encoding(hidden, trace, (0, n))

    def encode_speech_only(self, speech_embed: Tensor) -> Encoding:
        """Text-encoder states for the adapter output alone."""
        s = speech_embed.shape[0]
        if s < 1 or s > self.cfg.speech_embed_cap:
            raise ValueError(
                f"encode_speech_only: segment length {s} outside "
                f"1..{self.cfg.speech_embed_cap}"
            )
        x = add(add(speech_embed, self._positions(s)),
                self._p("text_enc.segment_speech"))
        x = self._drop(x, self.cfg.dropout_text)
        hidden, trace = self._run_text_encoder(x, None)
        return Encoding(hidden, trace, (s, 0))

    def encode_concat(
        self,
        speech_embed: Tensor,
        masked_tokens,
        isolate_segments: bool = False,
    ) -> Encoding:
        """Joint encoder pass over [speech ; masked text].

        ``isolate_segments`` is a diagnostic mode that forces the attention
        pattern block-diagonal, severing all cross-segment interaction.
        """
        ids = np.asarray(masked_tokens, dtype=np.int64)
        s, x_len = speech_embed.shape[0], ids.shape[0]
        if s < 1 or x_len < 1:
            raise ValueError("encode_concat: both segments must be nonempty")
        if s > self.cfg.speech_embed_cap:
            raise ValueError(
                f"encode_concat: speech segment {s} exceeds position capacity "
                f"{self.cfg.speech_embed_cap}"
            )
        if x_len > self.cfg.max_tokens:
            raise ValueError(
                f"encode_concat: text segment {x_len} exceeds position capacity "
                f"{self.cfg.max_tokens}"
            )
        sx = add(add(speech_embed, self._positions(s)),
                 self._p("text_enc.segment_speech"))
        tx = add(add(self._embed_tokens(ids), self._positions(x_len)),
                 self._p("text_enc.segment_text"))
        joint = concat_seq(self._drop(sx, self.cfg.dropout_text),
                           self._drop(tx, self.cfg.dropout_text))
        mask = None
        if isolate_segments:
            is_speech = np.arange(s + x_len) < s
            mask = is_speech[:, None] != is_speech[None, :]
        hidden, trace_full = self._run_text_encoder(joint, mask)
        return Encoding(hidden, slice_seq(trace_full, 0, s), (s, x_len))

    def decode_logits(self, memory: Tensor, prefix) -> Tensor:
        """Next-token logits at every prefix position (causal self-attention,
        full cross-attention over the memory)."""
        ids = np.asarray(prefix, dtype=np.int64)
        n = ids.shape[0]
        if n == 0:
            raise ValueError("decode_logits: empty prefix rejected")
        if ids[0] not in TASK_TAGS:
            raise ValueError(
                f"decode_logits: prefix must start with a task tag, got id {ids[0]}"
            )
        if n > self.cfg.max_tokens + 2:
            raise ValueError(
                f"decode_logits: prefix length {n} exceeds capacity "
                f"{self.cfg.max_tokens + 2}"
            )
        cfg = self.cfg
        x = add(self._embed_tokens(ids), self._positions(n))
        x = self._drop(x, cfg.dropout_text)
        causal = np.triu(np.ones((n, n), dtype=bool), k=1)
        for i in range(cfg.text_dec_layers):
            x = self._decoder_block(f"text_dec.block{i}", x, memory, causal,
                                    cfg.dropout_text, cfg.attn_dropout_text)
        x = self._ln("text_dec.final_ln", x)
        return matmul(x, transpose(self._p("embed.tokens"), (1, 0)))


def _uniform(rng, fan_in, fan_out, shape, dtype):
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(dtype)


def init_model(cfg: ModelConfig, seed: int, dtype=np.float32) -> SpeechTextModel:
    """Deterministically initialized model: scaled-uniform weights, zero
    biases, unit layer-norm gains."""
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 11]))
    d, f = cfg.d_model, cfg.ffn_mult * cfg.d_model
    params: dict[str, Tensor] = {}
    groups: dict[str, str] = {}

    def addp(name, group, array):
        params[name] = Tensor(array, requires_grad=True)
        groups[name] = group

    def weight(name, group, fi, fo, shape=None):
        addp(name, group, _uniform(rng, fi, fo, shape or (fi, fo), dtype))

    def bias(name, group, n):
        addp(name, group, np.zeros(n, dtype=dtype))

    def ln(prefix, group):
        addp(prefix + ".g", group, np.ones(d, dtype=dtype))
        addp(prefix + ".b", group, np.zeros(d, dtype=dtype))

    def attn(prefix, group):
        for nm in ("q", "k", "v", "o"):
            weight(f"{prefix}.{nm}.w", group, d, d)
            bias(f"{prefix}.{nm}.b", group, d)

    def ffn(prefix, group, hidden):
        weight(prefix + ".1.w", group, d, hidden, (d, hidden))
        bias(prefix + ".1.b", group, hidden)
        weight(prefix + ".2.w", group, hidden, d, (hidden, d))
        bias(prefix + ".2.b", group, d)

    def enc_block(prefix, group):
        ln(prefix + ".ln1", group)
        attn(prefix + ".attn", group)
        ln(prefix + ".ln2", group)
        ffn(prefix + ".ffn", group, f)

    # speech blocks
    weight("speech.in_proj.w", "speech", cfg.feat_dim, d, (cfg.feat_dim, d))
    bias("speech.in_proj.b", "speech", d)
    for i in range(cfg.speech_layers):
        enc_block(f"speech.block{i}", "speech")
    ln("speech.final_ln", "speech")

    # adapter: per stage a residual feed-forward then a stride-2 convolution
    for i in range(2):
        pre = f"adapter.layer{i}"
        ln(pre + ".ln", "adapter")
        ffn(pre + ".ffn", "adapter", 2 * d)
        addp(pre + ".conv.w", "adapter",
             _uniform(rng, 3 * d, 3 * d, (3, d, d), dtype))
        bias(pre + ".conv.b", "adapter", d)

    # shared token embedding (tied to the output projection)
    weight("embed.tokens", "shared_embed", cfg.vocab_size, d,
           (cfg.vocab_size, d))

    # text encoder
    addp("text_enc.segment_speech", "text_enc", np.zeros(d, dtype=dtype))
    addp("text_enc.segment_text", "text_enc", np.zeros(d, dtype=dtype))
    for i in range(cfg.text_enc_layers):
        enc_block(f"text_enc.block{i}", "text_enc")
    ln("text_enc.final_ln", "text_enc")

    # text decoder
    for i in range(cfg.text_dec_layers):
        pre = f"text_dec.block{i}"
        ln(pre + ".ln1", "text_dec")
        attn(pre + ".attn", "text_dec")
        ln(pre + ".lnc", "text_dec")
        attn(pre + ".cross", "text_dec")
        ln(pre + ".ln2", "text_dec")
        ffn(pre + ".ffn", "text_dec", f)
    ln("text_dec.final_ln", "text_dec")

    dropout_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 23]))
    return SpeechTextModel(cfg, params, groups, dropout_rng)


def model_checksum(model: SpeechTextModel) -> str:
    """Stable digest over all parameter names and bytes."""
    import hashlib

    h = hashlib.sha256()
    for name in sorted(model.params):
        h.update(name.encode())
        h.update(model.params[name].data.tobytes())
    return h.hexdigest()

"""Autoregressive text decoding conditioned on fused visual tokens.

The decoder is a small seeded causal transformer. It verifies the decoding
contract: prefix assembly, per-step distributions, greedy and sampled decoding,
and sequence log-probabilities that factorise over steps. It makes no claim
about language quality.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from molgeom.deepencoder import block_params, mlp, self_attention
from molgeom.errors import SchemaError, ShapeError
from molgeom.numerics import NEG_INF, layer_norm, seeded_params, softmax_last_masked
from molgeom.structok import EmbeddingTable


@dataclass(frozen=True)
class DecoderConfig:
    vocab_size: int = 32
    d_h: int = 32
    layers: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 2:
            raise SchemaError("vocab_size must be >= 2")
        if self.layers < 0:
            raise SchemaError("layers must be >= 0")
        if self.d_h < 1 or self.heads < 1 or self.d_h % self.heads:
            raise ShapeError(f"d_h={self.d_h} is not divisible by {self.heads} heads")


@dataclass(frozen=True, eq=False)
class DecoderParams:
    cfg: DecoderConfig
    txt: EmbeddingTable
    blocks: tuple[dict, ...]
    lnf_g: np.ndarray
    lnf_b: np.ndarray
    w_vocab: np.ndarray
    b_vocab: np.ndarray

    @classmethod
    def init(cls, cfg: DecoderConfig) -> DecoderParams:
        s, d = cfg.seed, cfg.d_h
        blocks = tuple(
            {k: v.astype(np.float64) for k, v in block_params(f"dec.{i}", d, cfg.mlp_ratio * d, s).items()}
            for i in range(cfg.layers)
        )
        return cls(
            cfg=cfg,
            txt=EmbeddingTable(cfg.vocab_size, d, s, "dec.txt"),
            blocks=blocks,
            lnf_g=np.ones(d),
            lnf_b=np.zeros(d),
            w_vocab=seeded_params((d, cfg.vocab_size), s, "dec.w_vocab", dtype=np.float64),
            b_vocab=np.zeros(cfg.vocab_size),
        )

    @classmethod
    def zeros(cls, cfg: DecoderConfig) -> DecoderParams:
        """All weights zero; every step then yields the uniform distribution."""
        p = cls.init(cfg)
        return cls(
            cfg=cfg,
            txt=p.txt,
            blocks=tuple({k: np.zeros_like(v) for k, v in b.items()} for b in p.blocks),
            lnf_g=np.zeros(cfg.d_h),
            lnf_b=np.zeros(cfg.d_h),
            w_vocab=np.zeros_like(p.w_vocab),
            b_vocab=np.zeros(cfg.vocab_size),
        )

    def with_vocab_bias(self, bias: np.ndarray) -> DecoderParams:
        return DecoderParams(self.cfg, self.txt, self.blocks, self.lnf_g, self.lnf_b, self.w_vocab,
                             np.asarray(bias, dtype=np.float64))  # fmt: skip

    def embed(self, ids) -> np.ndarray:
        ids = list(ids)
        if any(not 0 <= i < self.cfg.vocab_size for i in ids):
            raise SchemaError(f"token id outside vocabulary of size {self.cfg.vocab_size}")
        return self.txt.weights[ids].astype(np.float64).reshape(len(ids), self.cfg.d_h)


@dataclass(frozen=True)
class PromptTokens:
    ids: tuple[int, ...]
    vocab_size: int

    def __post_init__(self):
        if any(not 0 <= i < self.vocab_size for i in self.ids):
            raise SchemaError(f"prompt id outside vocabulary of size {self.vocab_size}")


@dataclass(frozen=True, eq=False)
class DecoderState:
    """Context rows (fused visual tokens, prompt, generated tokens) plus the prefix."""

    context: np.ndarray
    prefix: tuple[int, ...] = ()
    n_prompt_rows: int = field(default=-1)

    def __post_init__(self):
        if self.n_prompt_rows < 0:
            object.__setattr__(self, "n_prompt_rows", self.context.shape[0] - len(self.prefix))
        if self.context.shape[0] != self.n_prompt_rows + len(self.prefix):
            raise ShapeError("context rows must equal prompt rows plus generated tokens")

    def extend(self, token: int, params: DecoderParams) -> DecoderState:
        row = params.embed([token])
        return DecoderState(
            np.concatenate([self.context, row]), self.prefix + (int(token),), self.n_prompt_rows
        )


def assemble_prefix(h_fused: np.ndarray, prompt: PromptTokens, txt_table: EmbeddingTable) -> np.ndarray:
    """Stack fused visual tokens above the prompt embeddings."""
    if h_fused.ndim != 2 or h_fused.shape[1] != txt_table.dim:
        raise ShapeError(f"fused tokens width {h_fused.shape} vs text embedding dim {txt_table.dim}")
    rows = [txt_table[i] for i in prompt.ids]
    txt = np.stack(rows) if rows else np.zeros((0, txt_table.dim))
    return np.concatenate([h_fused.astype(np.float64), txt.astype(np.float64)])


def initial_state(h_fused: np.ndarray, prompt: PromptTokens, params: DecoderParams) -> DecoderState:
    return DecoderState(assemble_prefix(h_fused, prompt, params.txt))


def hidden_states(x: np.ndarray, params: DecoderParams) -> np.ndarray:
    """Causal pre-norm transformer over rows of ``x``; returns final-normed rows."""
    n = x.shape[0]
    causal = np.triu(np.full((n, n), NEG_INF), k=1)
    h = x.astype(np.float64)
    for p in params.blocks:
        h = h + self_attention(layer_norm(h, p["ln1_g"], p["ln1_b"]), p, params.cfg.heads,
                               attn_mask=causal)  # fmt: skip
        h = h + mlp(layer_norm(h, p["ln2_g"], p["ln2_b"]), p)
    return layer_norm(h, params.lnf_g, params.lnf_b)


def vocab_logits(h: np.ndarray, params: DecoderParams) -> np.ndarray:
    return h @ params.w_vocab + params.b_vocab


def step(state: DecoderState, params: DecoderParams) -> np.ndarray:
    """Next-token distribution from the last context position."""
    h = hidden_states(state.context, params)[-1:]
    return softmax_last_masked(vocab_logits(h, params))[0]


def greedy_decode(state: DecoderState, params: DecoderParams, t_max: int, stop_id: int | None = None) -> list[int]:
    """Argmax decoding; ties go to the lowest id. Stops after emitting stop_id."""
    if t_max < 1:
        raise SchemaError("t_max must be >= 1")
    out = []
    for _ in range(t_max):
        token = int(np.argmax(step(state, params)))
        out.append(token)
        if token == stop_id:
            break
        state = state.extend(token, params)
    return out


def _sample(pi: np.ndarray, u: float) -> int:
    cdf = np.cumsum(pi)
    idx = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
    return min(idx, len(pi) - 1)


def sample_decode(
    state: DecoderState,
    params: DecoderParams,
    t_max: int,
    seed: int,
    temperature: float = 1.0,
    stop_id: int | None = None,
) -> list[int]:
    """Seeded categorical sampling from softmax(logits / temperature)."""
    if not temperature > 0:
        raise SchemaError("temperature must be > 0")
    if t_max < 1:
        raise SchemaError("t_max must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(t_max):
        h = hidden_states(state.context, params)[-1:]
        pi = softmax_last_masked(vocab_logits(h, params) / temperature)[0]
        token = _sample(pi, rng.random())
        out.append(token)
        if token == stop_id:
            break
        state = state.extend(token, params)
    return out


def sequence_logprob(state: DecoderState, params: DecoderParams, y) -> float:
    """log p(y | context), summed over steps, from one teacher-forced pass."""
    y = [int(t) for t in y]
    if not y:
        return 0.0
    if any(not 0 <= t < params.cfg.vocab_size for t in y):
        raise SchemaError("target id outside vocabulary")
    x = np.concatenate([state.context, params.embed(y[:-1])])
    n0 = state.context.shape[0]
    logits = vocab_logits(hidden_states(x, params)[n0 - 1 :], params)
    logits = logits - logits.max(axis=-1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=-1, keepdims=True))
    return float(sum(logp[t, tok] for t, tok in enumerate(y)))

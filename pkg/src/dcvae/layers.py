"""GRU cell, bidirectional encoder, multiplicative attention, two-layer scorer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    affine,
    concat,
    matmul,
    parameter,
    reshape,
    row,
    sigmoid,
    softmax,
    stack_rows,
    tanh,
)


def uniform_init(rng: np.random.Generator, shape, scale: float = 0.1) -> Tensor:
    return parameter(rng.uniform(-scale, scale, size=shape))


@dataclass
class GRUParams:
    """Gate and candidate weights of a single GRU cell."""

    w_xu: Tensor
    w_hu: Tensor
    b_u: Tensor
    w_xr: Tensor
    w_hr: Tensor
    b_r: Tensor
    w_xc: Tensor
    w_hc: Tensor
    b_c: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, d_h: int, scale: float = 0.1) -> "GRUParams":
        def w(shape):
            return uniform_init(rng, shape, scale)
        return cls(
            w_xu=w((d_in, d_h)), w_hu=w((d_h, d_h)), b_u=w((d_h,)),
            w_xr=w((d_in, d_h)), w_hr=w((d_h, d_h)), b_r=w((d_h,)),
            w_xc=w((d_in, d_h)), w_hc=w((d_h, d_h)), b_c=w((d_h,)),
        )

    @property
    def d_in(self) -> int:
        return self.w_xu.shape[0]

    @property
    def d_h(self) -> int:
        return self.w_xu.shape[1]

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{k}": getattr(self, k) for k in (
            "w_xu", "w_hu", "b_u", "w_xr", "w_hr", "b_r", "w_xc", "w_hc", "b_c")}


def gru_step(p: GRUParams, x_t: Tensor, h_prev: Tensor) -> Tensor:
    """One GRU update: h_t = u * h_prev + (1 - u) * candidate."""
    if x_t.shape != (p.d_in,) or h_prev.shape != (p.d_h,):
        raise ValueError(
            f"gru_step: expected x({p.d_in},) and h({p.d_h},), got {x_t.shape} and {h_prev.shape}")
    u = sigmoid(affine(x_t, p.w_xu, p.b_u) + affine(h_prev, p.w_hu))
    r = sigmoid(affine(x_t, p.w_xr, p.b_r) + affine(h_prev, p.w_hr))
    cand = tanh(affine(x_t, p.w_xc, p.b_c) + affine(r * h_prev, p.w_hc))
    return u * h_prev + (1.0 - u) * cand


@dataclass
class BiGRUEncoder:
    """Forward and backward GRU cells over a shared embedding table.

    The embedding table is a reference to a table owned elsewhere; encoder
    parameter sets are the GRU weights only.
    """

    fwd: GRUParams
    bwd: GRUParams
    embed: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, embed: Tensor, d_h: int, scale: float = 0.1) -> "BiGRUEncoder":
        d_w = embed.shape[1]
        return cls(fwd=GRUParams.init(rng, d_w, d_h, scale),
                   bwd=GRUParams.init(rng, d_w, d_h, scale),
                   embed=embed)

    @property
    def d_h(self) -> int:
        return self.fwd.d_h

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = self.fwd.named(f"{prefix}.fwd")
        out.update(self.bwd.named(f"{prefix}.bwd"))
        return out


def encode_bidirectional(enc: BiGRUEncoder, token_ids) -> tuple[list[Tensor], Tensor]:
    """Encode a token sequence in both directions.

    Returns per-position states concat(fwd_t, bwd_t) of dim 2*d_h and the
    summary concat(final fwd, final bwd).
    """
    ids = list(token_ids)
    if not ids:
        raise ValueError("encode_bidirectional: empty sequence")
    vocab = enc.embed.shape[0]
    for i in ids:
        if not 0 <= i < vocab:
            raise ValueError(f"encode_bidirectional: token id {i} outside table of {vocab} rows")
    d_h = enc.d_h
    zeros = Tensor(np.zeros(d_h))

    xs = [row(enc.embed, i) for i in ids]
    fwd_states = []
    h = zeros
    for x in xs:
        h = gru_step(enc.fwd, x, h)
        fwd_states.append(h)
    bwd_states: list[Tensor] = [None] * len(ids)
    h = zeros
    for t in range(len(ids) - 1, -1, -1):
        h = gru_step(enc.bwd, xs[t], h)
        bwd_states[t] = h
    states = [concat([f, b]) for f, b in zip(fwd_states, bwd_states)]
    summary = concat([fwd_states[-1], bwd_states[0]])
    return states, summary


@dataclass
class AttentionParams:
    """Bilinear attention scores plus the attentional-output projection."""

    w_score: Tensor   # (d_h, 2*d_h)
    w_out: Tensor     # (d_h + 2*d_h, d_h)
    b_out: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, d_h: int, scale: float = 0.1) -> "AttentionParams":
        return cls(
            w_score=uniform_init(rng, (d_h, 2 * d_h), scale),
            w_out=uniform_init(rng, (3 * d_h, d_h), scale),
            b_out=uniform_init(rng, (d_h,), scale),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{k}": getattr(self, k) for k in ("w_score", "w_out", "b_out")}


def attend(p: AttentionParams, dec_state: Tensor, enc_states) -> tuple[Tensor, Tensor]:
    """Bilinear attention over encoder states.

    Accepts the encoder states as a list of vectors or a prestacked (n, 2*d_h)
    matrix. Returns (context, weights); weights live on the simplex.
    """
    if isinstance(enc_states, Tensor):
        enc_mat = enc_states
        n = enc_mat.shape[0]
    else:
        if len(enc_states) == 0:
            raise ValueError("attend: no encoder states")
        enc_mat = stack_rows(enc_states)
        n = len(enc_states)
    if n == 0:
        raise ValueError("attend: no encoder states")
    q = affine(dec_state, p.w_score)                       # (2*d_h,)
    scores = reshape(matmul(enc_mat, reshape(q, (q.shape[0], 1))), (n,))
    weights = softmax(scores)
    context = reshape(matmul(reshape(weights, (1, n)), enc_mat), (enc_mat.shape[1],))
    return context, weights


@dataclass
class ScorerParams:
    """Two affine layers with a tanh in between; emits unnormalized logits."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, d_hidden: int, d_out: int,
             scale: float = 0.1) -> "ScorerParams":
        return cls(
            w1=uniform_init(rng, (d_in, d_hidden), scale),
            b1=uniform_init(rng, (d_hidden,), scale),
            w2=uniform_init(rng, (d_hidden, d_out), scale),
            b2=uniform_init(rng, (d_out,), scale),
        )

    @property
    def d_in(self) -> int:
        return self.w1.shape[0]

    @property
    def d_out(self) -> int:
        return self.w2.shape[1]

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{k}": getattr(self, k) for k in ("w1", "b1", "w2", "b2")}


def score(p: ScorerParams, v: Tensor) -> Tensor:
    if v.shape != (p.d_in,):
        raise ValueError(f"score: expected input ({p.d_in},), got {v.shape}")
    return affine(tanh(affine(v, p.w1, p.b1)), p.w2, p.b2)

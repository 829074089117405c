"""Categorical sampling, two-stage sampling, and beam-search generation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, stack_rows
from .corpus import BOS, EOS, Vocab
from .layers import encode_bidirectional
from .model import (
    DCVAEParams,
    LatentConfig,
    TwoStageDist,
    decode_step,
    init_decoder_state,
    latent_repr,
    prior_dist,
)


def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw: returns i with probability probs[i]."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1 or probs.size == 0:
        raise ValueError("sample_categorical: probs must be a non-empty vector")
    if (probs < -1e-12).any() or abs(probs.sum() - 1.0) > 1e-9:
        raise ValueError(f"sample_categorical: not a probability simplex (sum={probs.sum()!r})")
    cdf = np.cumsum(probs)
    i = int(np.searchsorted(cdf, rng.random(), side="right"))
    return min(i, probs.size - 1)


def two_stage_sample(dist: TwoStageDist, rng: np.random.Generator) -> tuple[int, int]:
    """Sample a cluster, then a word within it; returns (cluster, latent id)."""
    c = sample_categorical(dist.cluster, rng)
    j = sample_categorical(dist.words[c], rng)
    return c, dist.members[c][j]


@dataclass
class BeamHypothesis:
    """Partial decode: token ids, cumulative log-probability, decoder state."""

    tokens: tuple[int, ...]
    score: float
    state: Tensor
    finished: bool = False

    def __post_init__(self):
        if self.finished and (not self.tokens or self.tokens[-1] != EOS):
            raise ValueError("BeamHypothesis: finished hypotheses must end in EOS")


def beam_search(p: DCVAEParams, x_ids, h_z, beam_size: int = 10,
                max_len: int = 30, length_norm: bool = False) -> tuple[list[int], float]:
    """Best-first decode keeping the top `beam_size` partial hypotheses.

    Returns the best finished hypothesis (EOS stripped) by cumulative
    log-probability, ties broken by lexicographically smallest token
    sequence; if nothing finishes, the best unfinished one at max_len.
    Finished hypotheses move to a completed pool; because per-step log-probs
    are non-positive the search stops once the pool's best can no longer be
    beaten. With `length_norm` final candidates compare by score / length.
    """
    x_ids = list(x_ids)
    if not x_ids:
        raise ValueError("beam_search: empty query")
    if beam_size < 1 or max_len < 1:
        raise ValueError("beam_search: beam_size and max_len must be at least 1")
    states, _ = encode_bidirectional(p.gen_enc, x_ids)
    enc_mat = stack_rows(states)

    active = [BeamHypothesis(tokens=(), score=0.0, state=init_decoder_state(p))]
    done: list[BeamHypothesis] = []
    for _ in range(max_len):
        candidates = []
        for hyp in active:
            prev = hyp.tokens[-1] if hyp.tokens else BOS
            logp, state = decode_step(p, prev, hyp.state, enc_mat, h_z)
            lp = logp.data
            for tok in range(lp.size):
                candidates.append((hyp.score + lp[tok], hyp.tokens + (tok,), state))
        candidates.sort(key=lambda c: (-c[0], c[1]))
        active = []
        for sc, toks, state in candidates[:beam_size]:
            if toks[-1] == EOS:
                done.append(BeamHypothesis(tokens=toks, score=sc, state=state, finished=True))
            else:
                active.append(BeamHypothesis(tokens=toks, score=sc, state=state))
        if not active:
            break
        best_done = max((h.score for h in done), default=-np.inf)
        if not length_norm and best_done >= max(h.score for h in active):
            break

    pool = done if done else active

    def rank(h: BeamHypothesis):
        toks = h.tokens[:-1] if h.finished else h.tokens
        s = h.score / max(1, len(h.tokens)) if length_norm else h.score
        return (-s, toks)

    best = min(pool, key=rank)
    out = list(best.tokens[:-1] if best.finished else best.tokens)
    return out, best.score


@dataclass
class GenerationResult:
    """One sampled generation: the latent draw and the decoded response."""

    z: int | None
    cluster: int | None
    tokens: list[int]
    score: float


def generate_diverse(p: DCVAEParams, config: LatentConfig, x_ids, num_samples: int,
                     rng: np.random.Generator, beam_size: int = 10,
                     max_len: int = 30, length_norm: bool = False,
                     prior=None) -> list[GenerationResult]:
    """Sample latent variables from the prior and beam-decode each of them.

    In two-stage mode each sample draws a cluster then a word; flat modes draw
    directly; no_latent decodes once per sample with a zero latent vector (so
    all results coincide). Pass `prior` to reuse a precomputed distribution.
    """
    if num_samples < 1:
        raise ValueError("generate_diverse: num_samples must be at least 1")
    mode = config.mode
    if mode == "two_stage" and p.clusters is None:
        raise ValueError("generate_diverse: two_stage mode without a cluster model")
    if mode != "no_latent" and prior is None:
        prior = prior_dist(p, config, x_ids)

    results = []
    for _ in range(num_samples):
        if mode == "no_latent":
            z, c = None, None
            h_z = latent_repr(p, config, None)
        elif mode == "two_stage":
            c, z = two_stage_sample(prior, rng)
            h_z = latent_repr(p, config, z, c)
        else:
            idx = sample_categorical(prior.probs, rng)
            z, c = prior.ids[idx], None
            h_z = latent_repr(p, config, z)
        tokens, sc = beam_search(p, x_ids, h_z, beam_size=beam_size,
                                 max_len=max_len, length_norm=length_norm)
        results.append(GenerationResult(z=z, cluster=c, tokens=tokens, score=sc))
    return results


# ---------------------------------------------------------------------------
# generation output file: query TAB z TAB cluster TAB response TAB score


def _z_token(vocab: Vocab, mode: str, z: int | None) -> str:
    if z is None:
        return "-"
    if mode == "cd_variant":
        return str(z)
    return vocab.tokens[z]


def save_generation_file(path: str, vocab: Vocab, mode: str, rows):
    """`rows` is a sequence of (query token ids, GenerationResult)."""
    with open(path, "w", encoding="utf-8") as f:
        for x_ids, res in rows:
            f.write("\t".join([
                " ".join(vocab.decode(x_ids)),
                _z_token(vocab, mode, res.z),
                str(-1 if res.cluster is None else res.cluster),
                " ".join(vocab.decode(res.tokens)),
                f"{res.score:.6f}",
            ]) + "\n")


def load_generation_file(path: str) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            cols = line.rstrip("\n").split("\t")
            if len(cols) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 tab-separated columns")
            out.append({"query": cols[0], "z": cols[1], "cluster": int(cols[2]),
                        "response": cols[3].split() if cols[3] else [],
                        "score": float(cols[4])})
    if not out:
        raise ValueError(f"{path}: empty generation file")
    return out

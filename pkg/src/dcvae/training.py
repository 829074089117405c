"""Training objective, exact categorical KL, bag-of-words loss, Adam, loops.

The minimized loss is the negated variational objective: teacher-forced
reconstruction NLL plus the exact posterior/prior KL plus the bag-of-words
NLL. The KL never needs sampling; the reconstruction and bag-of-words terms
are estimated with posterior samples. Gradients reach the posterior through
the analytic KL, always through the bag-of-words latent lookup (mixture
backward), and through the reconstruction lookup only when the
straight-through switch is on.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Tape,
    Tensor,
    affine,
    concat,
    gather,
    log_softmax,
    mul,
    reshape,
    row,
    rows,
    st_mixture,
    stack_rows,
    tsum,
)
from .corpus import BOS, EOS, Example
from .layers import encode_bidirectional
from .model import (
    DCVAEParams,
    FlatDist,
    LatentConfig,
    TwoStageDist,
    bow_logits,
    decode_step,
    init_decoder_state,
    latent_repr,
    posterior_dist,
    prior_dist,
    save_checkpoint,
)
from .sampling import sample_categorical, two_stage_sample


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch: int = 128
    epochs: int = 1
    n_samples: int = 1
    seed: int = 0
    latent: LatentConfig = field(default_factory=LatentConfig)
    straight_through: bool = True
    # the bag-of-words latent lookup keeps its mixture backward even with
    # straight_through off, so the posterior still learns from KL + BoW;
    # disable only to make the whole loss finite-difference consistent
    bow_mixture: bool = True
    clip_norm: float | None = 5.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("TrainConfig: lr must be positive")
        if self.batch < 1 or self.n_samples < 1 or self.epochs < 0:
            raise ValueError("TrainConfig: batch and n_samples must be at least 1")


# ---------------------------------------------------------------------------
# KL divergence of categorical distributions


def kl_categorical(q: np.ndarray, p: np.ndarray) -> float:
    """Sum of q(z) log(q(z)/p(z)) with the 0 log 0 = 0 convention."""
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if q.shape != p.shape or q.ndim != 1:
        raise ValueError(f"kl_categorical: shape mismatch {q.shape} vs {p.shape}")
    for name, v in (("q", q), ("p", p)):
        if (v < -1e-12).any() or abs(v.sum() - 1.0) > 1e-9:
            raise ValueError(f"kl_categorical: {name} is not a probability simplex")
    support = q > 0
    if (p[support] <= 0).any():
        raise ValueError("kl_categorical: q puts mass where p is zero (infinite divergence)")
    return float((q[support] * np.log(q[support] / p[support])).sum())


def kl_two_stage(q: TwoStageDist, p: TwoStageDist) -> float:
    """KL of two-stage distributions sharing a partition.

    Equals KL(q_c || p_c) + sum_k q_c(k) KL(q_w|k || p_w|k), which is exactly
    the flat KL of the implied distributions because the cluster of a word is
    deterministic under the shared partition.
    """
    if q.members != p.members:
        raise ValueError("kl_two_stage: distributions use different partitions")
    total = kl_categorical(q.cluster, p.cluster)
    for k in range(q.k):
        if q.cluster[k] > 0:
            total += q.cluster[k] * kl_categorical(q.words[k], p.words[k])
    return float(total)


def _kl_flat_t(q: FlatDist, p: FlatDist) -> Tensor:
    return tsum(mul(q.probs_t, q.log_t - p.log_t))


def _kl_two_stage_t(q: TwoStageDist, p: TwoStageDist) -> Tensor:
    if q.members != p.members:
        raise ValueError("kl_two_stage: distributions use different partitions")
    total = tsum(mul(q.cluster_t, q.cluster_log_t - p.cluster_log_t))
    for k in range(q.k):
        qk = reshape(gather(q.cluster_t, [k]), ())
        dk = tsum(mul(q.words_t[k], q.words_log_t[k] - p.words_log_t[k]))
        total = total + mul(qk, dk)
    return total


# ---------------------------------------------------------------------------
# bag-of-words likelihood


def bow_nll(h_b: np.ndarray, y_ids) -> float:
    """Negative log-likelihood of the unordered response under softmax(h_b)."""
    y = list(y_ids)
    if not y:
        raise ValueError("bow_nll: empty response")
    h = np.asarray(h_b, dtype=np.float64)
    logp = h - h.max() - math.log(np.exp(h - h.max()).sum())
    return float(-logp[y].sum())


def _bow_nll_t(h_b: Tensor, y_ids) -> Tensor:
    if not list(y_ids):
        raise ValueError("bow_nll: empty response")
    return -1.0 * tsum(gather(log_softmax(h_b), list(y_ids)))


# ---------------------------------------------------------------------------
# sampled latent representations with configurable gradient routing


def _sampled_repr(p: DCVAEParams, q, c: int | None, z: int, mixture: bool) -> Tensor:
    """h_z for a drawn (cluster, word); `mixture` routes gradients to q."""
    mode = p.config.mode
    if mode == "two_stage":
        if mixture:
            e_c_raw = st_mixture(q.cluster_t, p.cluster_embed, c)
            local = q.members[c].index(z)
            e_z = st_mixture(q.words_t[c], rows(p.embed, q.members[c]), local)
        else:
            e_c_raw = row(p.cluster_embed, c)
            e_z = row(p.embed, z)
        e_c = affine(e_c_raw, p.cluster_to_word_w, p.cluster_to_word_b)
        return e_c + e_z
    if mode == "cd_variant":
        if mixture:
            return st_mixture(q.probs_t, p.cd_embed, z)
        return row(p.cd_embed, z)
    # one_stage: the flat distribution is indexed in latent order
    if mixture:
        pos = q.ids.index(z)
        return st_mixture(q.probs_t, rows(p.embed, list(q.ids)), pos)
    return row(p.embed, z)


def teacher_forced_nll(p: DCVAEParams, enc_mat, y_ids, h_z: Tensor) -> Tensor:
    """Sum over response positions of -log p(y_t | x, y_<t, z)."""
    state = init_decoder_state(p)
    steps = []
    prev = BOS
    for tgt in list(y_ids) + [EOS]:
        logp, state = decode_step(p, prev, state, enc_mat, h_z)
        steps.append(gather(logp, [tgt]))
        prev = tgt
    return -1.0 * tsum(concat(steps))


@dataclass
class LossBreakdown:
    """Per-example mean losses; `loss` is the differentiable total."""

    recon: float
    kl: float
    bow: float
    total: float
    loss: Tensor | None = None

    def line(self, epoch: int) -> str:
        return f"{epoch}\t{self.recon:.6f}\t{self.kl:.6f}\t{self.bow:.6f}\t{self.total:.6f}"


def training_loss(p: DCVAEParams, config: TrainConfig, batch, rng: np.random.Generator) -> LossBreakdown:
    """Differentiable minimized objective averaged over the batch.

    Reconstruction and bag-of-words terms average over `n_samples` posterior
    draws per example; the KL term is exact. Must run under an active Tape to
    be differentiable.
    """
    batch = list(batch)
    if not batch:
        raise ValueError("training_loss: empty batch")
    mode = config.latent.mode
    if mode == "two_stage" and p.clusters is None:
        raise ValueError("training_loss: two_stage mode without a fitted cluster model")

    recon_terms, kl_terms, bow_terms = [], [], []
    for ex in batch:
        states, summary = encode_bidirectional(p.gen_enc, ex.x)
        enc_mat = stack_rows(states)
        if mode == "no_latent":
            h_z = latent_repr(p, config.latent, None)
            recon_terms.append(teacher_forced_nll(p, enc_mat, ex.y, h_z))
            continue

        q = posterior_dist(p, config.latent, ex.x, ex.y)
        pr = prior_dist(p, config.latent, ex.x)
        if mode == "two_stage":
            kl_terms.append(_kl_two_stage_t(q, pr))
        else:
            kl_terms.append(_kl_flat_t(q, pr))

        for _ in range(config.n_samples):
            if mode == "two_stage":
                c, z = two_stage_sample(q, rng)
            else:
                idx = sample_categorical(q.probs, rng)
                c, z = None, q.ids[idx]
            h_dec = _sampled_repr(p, q, c, z, mixture=config.straight_through)
            h_bow = _sampled_repr(p, q, c, z, mixture=config.bow_mixture)
            recon_terms.append(teacher_forced_nll(p, enc_mat, ex.y, h_dec))
            bow_terms.append(_bow_nll_t(bow_logits(p, summary, h_bow), ex.y))

    n = len(batch)

    def _mean(terms, k):
        if not terms:
            return None
        return (1.0 / k) * tsum(concat([reshape(t, (1,)) for t in terms]))

    recon_t = _mean(recon_terms, n * (1 if mode == "no_latent" else config.n_samples))
    kl_t = _mean(kl_terms, n)
    bow_t = _mean(bow_terms, n * config.n_samples)

    total_t = recon_t
    if kl_t is not None:
        total_t = total_t + kl_t
    if bow_t is not None:
        total_t = total_t + bow_t
    return LossBreakdown(
        recon=float(recon_t.data),
        kl=0.0 if kl_t is None else float(kl_t.data),
        bow=0.0 if bow_t is None else float(bow_t.data),
        total=float(total_t.data),
        loss=total_t,
    )


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, named: dict[str, Tensor]) -> "AdamState":
        return cls(m={k: np.zeros(t.shape) for k, t in named.items()},
                   v={k: np.zeros(t.shape) for k, t in named.items()})


def clip_global_norm(grads: dict[str, np.ndarray], cap: float | None) -> float:
    """Scale all gradients so their joint L2 norm is at most `cap`."""
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if cap is not None and norm > cap > 0:
        scale = cap / norm
        for g in grads.values():
            g *= scale
    return norm


def adam_step(named: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float):
    """Standard Adam update with bias correction, in place."""
    state.t += 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name in sorted(named):
        t = named[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros(t.shape)
        if g.shape != t.shape:
            raise ValueError(f"adam_step: gradient shape {g.shape} != parameter {t.shape} for {name}")
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * (g * g)
        t.data = t.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


def collect_grads(named: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: (t.grad if t.grad is not None else np.zeros(t.shape)) for k, t in named.items()}


def zero_grads(named: dict[str, Tensor]):
    for t in named.values():
        t.grad = None


# ---------------------------------------------------------------------------
# pre-training of the prior and posterior heads on extracted keywords


@dataclass
class PretrainLoss:
    cluster_ce: float
    word_ce: float
    total: float
    loss: Tensor | None = None


def pretrain_step(p: DCVAEParams, config: TrainConfig, batch) -> PretrainLoss:
    """Cross-entropy of both latent heads against each example's keyword.

    The target is (cluster_of(keyword), keyword) in two-stage mode and the
    keyword alone in one-stage mode. The generation network is untouched.
    """
    mode = config.latent.mode
    if mode not in ("two_stage", "one_stage"):
        raise ValueError(f"pretrain_step: mode {mode!r} has no word-valued latents to pre-train")
    batch = list(batch)
    if not batch:
        raise ValueError("pretrain_step: empty batch")

    cluster_parts, word_parts = [], []
    for ex in batch:
        kw = ex.keyword
        if kw is None or kw not in p.latent:
            raise ValueError(f"pretrain_step: keyword {kw!r} outside the latent space")
        q = posterior_dist(p, config.latent, ex.x, ex.y)
        pr = prior_dist(p, config.latent, ex.x)
        if mode == "two_stage":
            c = p.clusters.assignment[kw]
            local = p.clusters.members[c].index(kw)
            for dist in (q, pr):
                cluster_parts.append(-1.0 * reshape(gather(dist.cluster_log_t, [c]), ()))
                word_parts.append(-1.0 * reshape(gather(dist.words_log_t[c], [local]), ()))
        else:
            pos = p.latent.pos[kw]
            for dist in (q, pr):
                word_parts.append(-1.0 * reshape(gather(dist.log_t, [pos]), ()))

    n = len(batch)

    def _mean(parts):
        return (1.0 / n) * tsum(concat([reshape(t, (1,)) for t in parts]))

    word_t = _mean(word_parts)
    if cluster_parts:
        cluster_t = _mean(cluster_parts)
        total_t = cluster_t + word_t
        return PretrainLoss(cluster_ce=float(cluster_t.data), word_ce=float(word_t.data),
                            total=float(total_t.data), loss=total_t)
    return PretrainLoss(cluster_ce=0.0, word_ce=float(word_t.data),
                        total=float(word_t.data), loss=word_t)


def _trainable(p: DCVAEParams, pretrain: bool) -> dict[str, Tensor]:
    if not pretrain:
        return p.named()
    named = dict(p.prior_named())
    named.update(p.posterior_named())
    named["embed"] = p.embed
    if p.cluster_embed is not None:
        named["cluster_embed"] = p.cluster_embed
        named["cluster_to_summary_w"] = p.cluster_to_summary_w
        named["cluster_to_summary_b"] = p.cluster_to_summary_b
    return named


def pretrain(examples, p: DCVAEParams, config: TrainConfig, steps: int,
             progress=None) -> list[float]:
    """Run `steps` batches of keyword cross-entropy; returns per-step losses."""
    keyworded = [ex for ex in examples if ex.keyword is not None]
    if not keyworded:
        raise ValueError("pretrain: no examples carry keywords")
    rng = np.random.default_rng(config.seed)
    named = _trainable(p, pretrain=True)
    state = AdamState.for_params(named)
    losses: list[float] = []
    order: list[int] = []
    while len(losses) < steps:
        if not order:
            order = list(rng.permutation(len(keyworded)))
        take = min(config.batch, len(order))
        batch = [keyworded[i] for i in order[:take]]
        order = order[take:]
        with Tape() as tape:
            out = pretrain_step(p, config, batch)
            zero_grads(named)
            tape.backward(out.loss)
        grads = collect_grads(named)
        clip_global_norm(grads, config.clip_norm)
        adam_step(named, grads, state, config.lr)
        losses.append(out.total)
        if progress:
            progress(len(losses), out.total)
    return losses


# ---------------------------------------------------------------------------
# main training loop


def make_batches(n: int, batch: int, rng: np.random.Generator) -> list[list[int]]:
    order = list(rng.permutation(n))
    return [order[i:i + batch] for i in range(0, n, batch)]


def train(corpus, p: DCVAEParams, config: TrainConfig,
          checkpoint_path: str | None = None, log_path: str | None = None,
          progress=None) -> list[LossBreakdown]:
    """Epoch loop: shuffled batches, backward, clip, Adam; one log per epoch.

    Deterministic given config.seed. When paths are given, the checkpoint is
    rewritten after every epoch (atomically) and the per-epoch loss log is
    written at the end, one tab-separated line per epoch.
    """
    corpus = list(corpus)
    if not corpus:
        raise ValueError("train: empty corpus")
    rng = np.random.default_rng(config.seed)
    named = p.named()
    state = AdamState.for_params(named)
    log: list[LossBreakdown] = []
    for epoch in range(config.epochs):
        sums = np.zeros(4)
        count = 0
        for idxs in make_batches(len(corpus), config.batch, rng):
            batch = [corpus[i] for i in idxs]
            with Tape() as tape:
                out = training_loss(p, config, batch, rng)
                zero_grads(named)
                tape.backward(out.loss)
            grads = collect_grads(named)
            clip_global_norm(grads, config.clip_norm)
            adam_step(named, grads, state, config.lr)
            sums += np.array([out.recon, out.kl, out.bow, out.total]) * len(batch)
            count += len(batch)
        epoch_loss = LossBreakdown(*(sums / count), loss=None)
        log.append(epoch_loss)
        if checkpoint_path:
            save_checkpoint(checkpoint_path, p)
        if progress:
            progress(epoch, epoch_loss)
    if log_path:
        write_epoch_log(log_path, log)
    return log


def write_epoch_log(path: str, log: list[LossBreakdown]):
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        for epoch, breakdown in enumerate(log):
            f.write(breakdown.line(epoch) + "\n")
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# exact objective on toy latent spaces (enumeration, no sampling)


def exact_objective(p: DCVAEParams, config: LatentConfig, x_ids, y_ids) -> tuple[float, float]:
    """Enumerated variational bound (no bag-of-words term) and exact likelihood.

    Returns (sum_z q(z) log p(y|x,z) - KL(q||prior),
             log sum_z prior(z) p(y|x,z)).
    The first is a lower bound on the second for any posterior q.
    """
    if config.mode == "no_latent":
        raise ValueError("exact_objective: no latent space to enumerate")
    q = posterior_dist(p, config, x_ids, y_ids)
    pr = prior_dist(p, config, x_ids)
    if config.mode == "two_stage":
        order = list(p.latent.ids)
        q_flat, p_flat = q.flatten(order), pr.flatten(order)
        pairs = [(z, p.clusters.assignment[z]) for z in order]
    else:
        q_flat, p_flat = q.probs, pr.probs
        pairs = [(z, None) for z in q.ids]

    states, _ = encode_bidirectional(p.gen_enc, x_ids)
    enc_mat = stack_rows(states)
    loglik = np.empty(len(pairs))
    for i, (z, c) in enumerate(pairs):
        h_z = latent_repr(p, config, z, c)
        loglik[i] = -float(teacher_forced_nll(p, enc_mat, y_ids, h_z).data)

    support = q_flat > 0
    expected = float((q_flat[support] * loglik[support]).sum())
    bound = expected - kl_categorical(q_flat, p_flat)
    joint = np.log(p_flat) + loglik
    exact = float(np.logaddexp.reduce(joint))
    return bound, exact

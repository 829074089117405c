"""Prior, posterior, and generation networks with two-stage latent heads.

The latent variable is a word (or an abstract index in the cd variant). The
prior scores it from the query summary, the posterior from the sum of query
and response summaries; in two-stage mode both factor into a cluster-level
categorical and per-cluster word categoricals over the cluster members only.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, affine, concat, gather, log_softmax, parameter, row, softmax, tanh
from .clustering import ClusterModel
from .corpus import SPECIAL_TOKENS, LatentSpace, Vocab
from .layers import (
    AttentionParams,
    BiGRUEncoder,
    GRUParams,
    ScorerParams,
    attend,
    encode_bidirectional,
    gru_step,
    score,
    uniform_init,
)

MODES = ("two_stage", "one_stage", "cd_variant", "no_latent")

CHECKPOINT_MAGIC = b"DCVAE\x00"
CHECKPOINT_VERSION = 1


@dataclass
class LatentConfig:
    """Which latent machinery is active and how large the latent space is."""

    mode: str = "two_stage"
    top_k: int | None = None
    cd_size: int | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"LatentConfig: unknown mode {self.mode!r}, expected one of {MODES}")
        if self.mode != "cd_variant" and self.cd_size is not None:
            raise ValueError("LatentConfig: cd_size only applies to cd_variant")


@dataclass
class ModelDims:
    hidden: int = 32          # GRU state size; encoder summaries are 2*hidden
    embed: int = 64           # word embedding size
    cluster_embed: int = 64   # cluster embedding size
    scorer_hidden: int = 64

    def validate(self):
        for name in ("hidden", "embed", "cluster_embed", "scorer_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelDims: {name} must be positive")


@dataclass
class TwoStageDist:
    """Cluster-level categorical plus one word categorical per cluster.

    `words[k]` is a simplex over `members[k]` only, so the word stage puts
    exactly zero mass outside its cluster. When built under a tape the *_t
    fields carry the differentiable tensors behind the numpy views.
    """

    cluster: np.ndarray
    words: list[np.ndarray]
    members: list[list[int]]
    cluster_t: Tensor | None = None
    cluster_log_t: Tensor | None = None
    words_t: list[Tensor] | None = None
    words_log_t: list[Tensor] | None = None

    @property
    def k(self) -> int:
        return len(self.members)

    def flatten(self, order) -> np.ndarray:
        """Implied flat categorical over the latent ids in the given order."""
        pos = {z: i for i, z in enumerate(order)}
        out = np.zeros(len(pos))
        for k, ids in enumerate(self.members):
            for j, z in enumerate(ids):
                out[pos[z]] = self.cluster[k] * self.words[k][j]
        return out


@dataclass
class FlatDist:
    """Plain categorical over latent ids (one-stage) or abstract indices (cd)."""

    probs: np.ndarray
    ids: tuple[int, ...]
    probs_t: Tensor | None = None
    log_t: Tensor | None = None


@dataclass
class DCVAEParams:
    """All weights plus the vocab, latent space, and cluster model they bind to."""

    vocab: Vocab
    latent: LatentSpace
    config: LatentConfig
    dims: ModelDims
    clusters: ClusterModel | None

    embed: Tensor
    gen_enc: BiGRUEncoder
    dec: GRUParams
    attn: AttentionParams
    out_w: Tensor
    out_b: Tensor

    prior_enc: BiGRUEncoder | None = None
    prior_cluster: ScorerParams | None = None
    prior_word: ScorerParams | None = None
    post_query_enc: BiGRUEncoder | None = None
    post_resp_enc: BiGRUEncoder | None = None
    post_cluster: ScorerParams | None = None
    post_word: ScorerParams | None = None

    cluster_embed: Tensor | None = None
    cluster_to_summary_w: Tensor | None = None
    cluster_to_summary_b: Tensor | None = None
    cluster_to_word_w: Tensor | None = None
    cluster_to_word_b: Tensor | None = None

    bow: ScorerParams | None = None
    cd_embed: Tensor | None = None

    def named(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {"embed": self.embed}
        out.update(self.gen_enc.named("gen_enc"))
        out.update(self.dec.named("dec"))
        out.update(self.attn.named("attn"))
        out["out_w"], out["out_b"] = self.out_w, self.out_b
        for enc_name in ("prior_enc", "post_query_enc", "post_resp_enc"):
            enc = getattr(self, enc_name)
            if enc is not None:
                out.update(enc.named(enc_name))
        for sc_name in ("prior_cluster", "prior_word", "post_cluster", "post_word", "bow"):
            sc = getattr(self, sc_name)
            if sc is not None:
                out.update(sc.named(sc_name))
        for t_name in ("cluster_embed", "cluster_to_summary_w", "cluster_to_summary_b",
                       "cluster_to_word_w", "cluster_to_word_b", "cd_embed"):
            t = getattr(self, t_name)
            if t is not None:
                out[t_name] = t
        return out

    def prior_named(self) -> dict[str, Tensor]:
        out = self.prior_enc.named("prior_enc") if self.prior_enc else {}
        for name in ("prior_cluster", "prior_word"):
            sc = getattr(self, name)
            if sc is not None:
                out.update(sc.named(name))
        return out

    def posterior_named(self) -> dict[str, Tensor]:
        out = {}
        for enc_name in ("post_query_enc", "post_resp_enc"):
            enc = getattr(self, enc_name)
            if enc is not None:
                out.update(enc.named(enc_name))
        for name in ("post_cluster", "post_word"):
            sc = getattr(self, name)
            if sc is not None:
                out.update(sc.named(name))
        return out

    @property
    def latent_size(self) -> int:
        if self.config.mode == "cd_variant":
            return self.cd_embed.shape[0]
        return len(self.latent)


def _identity_or_uniform(rng, d_from: int, d_to: int) -> tuple[Tensor, Tensor]:
    if d_from == d_to:
        w = parameter(np.eye(d_from))
    else:
        w = uniform_init(rng, (d_from, d_to))
    return w, parameter(np.zeros(d_to))


def build_params(rng: np.random.Generator, vocab: Vocab, latent: LatentSpace,
                 config: LatentConfig, dims: ModelDims | None = None,
                 clusters: ClusterModel | None = None,
                 pretrained=None) -> DCVAEParams:
    """Create and initialize all parameters for the requested latent mode.

    Everything draws from U[-0.1, 0.1] except word embedding rows found in
    `pretrained` and the cluster-embedding adapters, which start as the
    identity when their dimensions already agree.
    """
    dims = dims or ModelDims()
    dims.validate()
    for z in latent.ids:
        if z < len(SPECIAL_TOKENS):
            raise ValueError("latent space must not contain special tokens")

    mode = config.mode
    if mode == "two_stage":
        if clusters is None:
            raise ValueError("two_stage mode needs a fitted ClusterModel")
        if set(clusters.assignment) != set(latent.ids):
            raise ValueError("cluster model does not partition the latent space")

    emb_data = rng.uniform(-0.1, 0.1, size=(vocab.size, dims.embed))
    if pretrained is not None:
        if pretrained.dim != dims.embed:
            raise ValueError(
                f"pretrained embedding dim {pretrained.dim} != model embed dim {dims.embed}")
        for tid, vec in pretrained.vectors.items():
            emb_data[tid] = vec
    embed = parameter(emb_data)

    d_h, d_w = dims.hidden, dims.embed
    gen_enc = BiGRUEncoder.init(rng, embed, d_h)
    dec = GRUParams.init(rng, d_w, d_h)
    attn = AttentionParams.init(rng, d_h)
    out_w = uniform_init(rng, (d_h + d_w, vocab.size))
    out_b = uniform_init(rng, (vocab.size,))

    p = DCVAEParams(vocab=vocab, latent=latent, config=config, dims=dims,
                    clusters=clusters if mode == "two_stage" else None,
                    embed=embed, gen_enc=gen_enc, dec=dec, attn=attn,
                    out_w=out_w, out_b=out_b)
    if mode == "no_latent":
        return p

    n_latent = len(latent)
    if mode == "cd_variant":
        n_latent = config.cd_size if config.cd_size is not None else len(latent)
        p.cd_embed = uniform_init(rng, (n_latent, d_w))

    d_sum = 2 * d_h
    p.prior_enc = BiGRUEncoder.init(rng, embed, d_h)
    p.post_query_enc = BiGRUEncoder.init(rng, embed, d_h)
    p.post_resp_enc = BiGRUEncoder.init(rng, embed, d_h)
    p.prior_word = ScorerParams.init(rng, d_sum, dims.scorer_hidden, n_latent)
    p.post_word = ScorerParams.init(rng, d_sum, dims.scorer_hidden, n_latent)
    p.bow = ScorerParams.init(rng, d_sum + d_w, dims.scorer_hidden, vocab.size)

    if mode == "two_stage":
        k = clusters.k
        p.prior_cluster = ScorerParams.init(rng, d_sum, dims.scorer_hidden, k)
        p.post_cluster = ScorerParams.init(rng, d_sum, dims.scorer_hidden, k)
        p.cluster_embed = uniform_init(rng, (k, dims.cluster_embed))
        p.cluster_to_summary_w, p.cluster_to_summary_b = _identity_or_uniform(
            rng, dims.cluster_embed, d_sum)
        p.cluster_to_word_w, p.cluster_to_word_b = _identity_or_uniform(
            rng, dims.cluster_embed, d_w)
    return p


def _cluster_summary_shift(p: DCVAEParams, k: int) -> Tensor:
    e_c = row(p.cluster_embed, k)
    return affine(e_c, p.cluster_to_summary_w, p.cluster_to_summary_b)


def _heads(p: DCVAEParams, summary: Tensor, cluster_scorer, word_scorer):
    mode = p.config.mode
    if mode in ("one_stage", "cd_variant"):
        logits = score(word_scorer, summary)
        probs_t, log_t = softmax(logits), log_softmax(logits)
        ids = tuple(range(p.latent_size)) if mode == "cd_variant" else tuple(p.latent.ids)
        return FlatDist(probs=probs_t.data.copy(), ids=ids, probs_t=probs_t, log_t=log_t)

    cm = p.clusters
    c_logits = score(cluster_scorer, summary)
    c_probs, c_log = softmax(c_logits), log_softmax(c_logits)
    words, words_t, words_log_t = [], [], []
    for k in range(cm.k):
        inp = summary + _cluster_summary_shift(p, k)
        logits = score(word_scorer, inp)
        member_pos = [p.latent.pos[z] for z in cm.members[k]]
        sub = gather(logits, member_pos)
        w_probs, w_log = softmax(sub), log_softmax(sub)
        words.append(w_probs.data.copy())
        words_t.append(w_probs)
        words_log_t.append(w_log)
    return TwoStageDist(cluster=c_probs.data.copy(), words=words, members=cm.members,
                        cluster_t=c_probs, cluster_log_t=c_log,
                        words_t=words_t, words_log_t=words_log_t)


def prior_dist(p: DCVAEParams, config: LatentConfig, x_ids):
    """p(z | x): cluster stage then per-cluster word stage (or flat)."""
    if config.mode == "no_latent":
        raise ValueError("prior_dist: no latent distribution in no_latent mode")
    if not list(x_ids):
        raise ValueError("prior_dist: empty query")
    _, summary = encode_bidirectional(p.prior_enc, x_ids)
    return _heads(p, summary, p.prior_cluster, p.prior_word)


def posterior_dist(p: DCVAEParams, config: LatentConfig, x_ids, y_ids):
    """q(z | y, x): like the prior but scoring the sum of both summaries."""
    if config.mode == "no_latent":
        raise ValueError("posterior_dist: no latent distribution in no_latent mode")
    if not list(x_ids) or not list(y_ids):
        raise ValueError("posterior_dist: empty query or response")
    _, h_x = encode_bidirectional(p.post_query_enc, x_ids)
    _, h_y = encode_bidirectional(p.post_resp_enc, y_ids)
    return _heads(p, h_x + h_y, p.post_cluster, p.post_word)


def latent_repr(p: DCVAEParams, config: LatentConfig, z: int | None,
                c: int | None = None) -> Tensor:
    """The decoder-side representation h_z of a sampled latent variable."""
    mode = config.mode
    if mode == "no_latent":
        return Tensor(np.zeros(p.dims.embed))
    if mode == "cd_variant":
        if not 0 <= z < p.cd_embed.shape[0]:
            raise ValueError(f"latent_repr: abstract index {z} out of range")
        return row(p.cd_embed, z)
    if z not in p.latent:
        raise ValueError(f"latent_repr: id {z} is not in the latent space")
    if mode == "one_stage":
        return row(p.embed, z)
    expected = p.clusters.assignment.get(z)
    if c != expected:
        raise ValueError(f"latent_repr: id {z} belongs to cluster {expected}, got {c}")
    e_c = affine(row(p.cluster_embed, c), p.cluster_to_word_w, p.cluster_to_word_b)
    return e_c + row(p.embed, z)


def init_decoder_state(p: DCVAEParams) -> Tensor:
    return Tensor(np.zeros(p.dims.hidden))


def decode_step(p: DCVAEParams, prev_token: int, dec_state: Tensor,
                enc_states, h_z: Tensor) -> tuple[Tensor, Tensor]:
    """One decoder step; returns vocab log-probs and the next GRU state.

    The attentional hidden state is concatenated with h_z before the output
    projection, so the latent signal enters at every step.
    """
    if not 0 <= prev_token < p.vocab.size:
        raise ValueError(f"decode_step: token id {prev_token} outside the vocab")
    x = row(p.embed, prev_token)
    h = gru_step(p.dec, x, dec_state)
    context, _ = attend(p.attn, h, enc_states)
    att_h = tanh(affine(concat([h, context]), p.attn.w_out, p.attn.b_out))
    logits = affine(concat([att_h, h_z]), p.out_w, p.out_b)
    return log_softmax(logits), h


def bow_logits(p: DCVAEParams, x_summary: Tensor, h_z: Tensor) -> Tensor:
    """Unordered-response logits from the query summary and latent repr."""
    if p.bow is None:
        raise ValueError("bow_logits: no bag-of-words head in this mode")
    return score(p.bow, concat([x_summary, h_z]))


# ---------------------------------------------------------------------------
# checkpointing: versioned binary, bit-exact round trip, atomic writes


def save_checkpoint(path: str, p: DCVAEParams):
    named = p.named()
    manifest = [[name, list(named[name].shape)] for name in sorted(named)]
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": {"mode": p.config.mode, "top_k": p.config.top_k, "cd_size": p.config.cd_size},
        "dims": {"hidden": p.dims.hidden, "embed": p.dims.embed,
                 "cluster_embed": p.dims.cluster_embed, "scorer_hidden": p.dims.scorer_hidden},
        "vocab": {"tokens": p.vocab.tokens, "counts": p.vocab.counts,
                  "coverage": p.vocab.coverage},
        "latent_ids": list(p.latent.ids),
        "clusters": None if p.clusters is None else {
            "k": p.clusters.k,
            "centroids": p.clusters.centroids.tolist(),
            "assignment": [[z, c] for z, c in sorted(p.clusters.assignment.items())],
        },
        "manifest": manifest,
    }
    blob = json.dumps(meta, sort_keys=True, ensure_ascii=False).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        for name, _ in manifest:
            f.write(named[name].data.astype("<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str) -> DCVAEParams:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, meta_len = struct.unpack("<IQ", f.read(12))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        meta = json.loads(f.read(meta_len).decode("utf-8"))
        arrays: dict[str, np.ndarray] = {}
        for name, shape in meta["manifest"]:
            n = int(np.prod(shape, dtype=np.int64)) if shape else 1
            buf = f.read(8 * n)
            if len(buf) != 8 * n:
                raise ValueError(f"{path}: truncated checkpoint at parameter {name}")
            arrays[name] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)

    v = meta["vocab"]
    vocab = Vocab(tokens=list(v["tokens"]),
                  token_to_id={t: i for i, t in enumerate(v["tokens"])},
                  counts=list(v["counts"]), coverage=v["coverage"])
    latent = LatentSpace(tuple(meta["latent_ids"]))
    cfg = meta["config"]
    config = LatentConfig(mode=cfg["mode"], top_k=cfg["top_k"], cd_size=cfg["cd_size"])
    d = meta["dims"]
    dims = ModelDims(hidden=d["hidden"], embed=d["embed"],
                     cluster_embed=d["cluster_embed"], scorer_hidden=d["scorer_hidden"])
    clusters = None
    if meta["clusters"] is not None:
        cm = meta["clusters"]
        assignment = {int(z): int(c) for z, c in cm["assignment"]}
        members: list[list[int]] = [[] for _ in range(cm["k"])]
        for z, c in assignment.items():
            members[c].append(z)
        clusters = ClusterModel(k=cm["k"], centroids=np.array(cm["centroids"]),
                                assignment=assignment,
                                members=[sorted(m) for m in members])
        clusters.check()

    p = build_params(np.random.default_rng(0), vocab, latent, config, dims, clusters)
    named = p.named()
    manifest_shapes = {name: tuple(shape) for name, shape in meta["manifest"]}
    if sorted(named) != sorted(manifest_shapes):
        raise ValueError(f"{path}: checkpoint parameters do not match mode {config.mode!r}")
    for name, t in named.items():
        if t.shape != manifest_shapes[name]:
            raise ValueError(f"{path}: shape mismatch for parameter {name}")
        t.data = arrays[name]
    return p

"""Vocabulary, latent space, corpus I/O, TF-IDF keywords, synthetic corpus."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

PAD, UNK, BOS, EOS = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<unk>", "<bos>", "<eos>")


@dataclass
class Vocab:
    """Token/id bijection with reserved ids 0..3 and a frequency table."""

    tokens: list[str]
    token_to_id: dict[str, int]
    counts: list[int]
    coverage: float = 1.0

    @property
    def size(self) -> int:
        return len(self.tokens)

    def encode(self, toks) -> list[int]:
        return [self.token_to_id.get(t, UNK) for t in toks]

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]


def build_vocab(pairs, max_size: int) -> Vocab:
    """Keep the `max_size` most frequent non-special tokens (ties lexicographic).

    `pairs` is a sequence of (query tokens, response tokens). The coverage
    field reports the fraction of corpus occurrences kept in-vocab.
    """
    if not pairs:
        raise ValueError("build_vocab: empty corpus")
    if max_size < 1:
        raise ValueError("build_vocab: max_size must be positive")
    freq: dict[str, int] = {}
    total = 0
    for q, r in pairs:
        for t in list(q) + list(r):
            freq[t] = freq.get(t, 0) + 1
            total += 1
    if total == 0:
        raise ValueError("build_vocab: corpus has no tokens")
    ranked = sorted(freq.items(), key=lambda kv: (-kv[1], kv[0]))[:max_size]
    tokens = list(SPECIAL_TOKENS) + [t for t, _ in ranked]
    counts = [0, 0, 0, 0] + [c for _, c in ranked]
    kept = sum(c for _, c in ranked)
    return Vocab(tokens=tokens,
                 token_to_id={t: i for i, t in enumerate(tokens)},
                 counts=counts,
                 coverage=kept / total)


@dataclass
class LatentSpace:
    """Ordered latent ids: the vocab minus specials, most frequent first."""

    ids: tuple[int, ...]

    def __post_init__(self):
        self.pos = {z: i for i, z in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, z: int) -> bool:
        return z in self.pos


def restrict_latent_space(vocab: Vocab, top_k: int | None = None) -> LatentSpace:
    """Latent ids ordered by descending frequency, optionally truncated."""
    content = [i for i in range(len(SPECIAL_TOKENS), vocab.size)]
    content.sort(key=lambda i: (-vocab.counts[i], vocab.tokens[i]))
    if top_k is not None:
        if top_k <= 0:
            raise ValueError("restrict_latent_space: top_k must be positive")
        if top_k > len(content):
            raise ValueError(
                f"restrict_latent_space: top_k={top_k} exceeds {len(content)} non-special tokens")
        content = content[:top_k]
    return LatentSpace(tuple(content))


@dataclass
class Example:
    """One query/response pair as token ids, optionally with a keyword id."""

    x: tuple[int, ...]
    y: tuple[int, ...]
    keyword: int | None = None

    def __post_init__(self):
        if not self.x or not self.y:
            raise ValueError("Example: query and response must be non-empty")


# ---------------------------------------------------------------------------
# corpus files: one pair per line, query TAB response, tokens space-separated


def read_pairs(path: str) -> list[tuple[list[str], list[str]]]:
    pairs = []
    try:
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.rstrip("\n")
                cols = line.split("\t")
                if len(cols) != 2 or not cols[0].strip() or not cols[1].strip():
                    raise ValueError(f"{path}:{lineno}: expected `query<TAB>response`")
                pairs.append((cols[0].split(), cols[1].split()))
    except UnicodeDecodeError as e:
        raise ValueError(f"{path}: not valid UTF-8 ({e})") from None
    if not pairs:
        raise ValueError(f"{path}: empty corpus file")
    return pairs


def save_pairs(pairs, path: str):
    with open(path, "w", encoding="utf-8") as f:
        for q, r in pairs:
            f.write(" ".join(q) + "\t" + " ".join(r) + "\n")


def encode_pairs(pairs, vocab: Vocab) -> list[Example]:
    return [Example(tuple(vocab.encode(q)), tuple(vocab.encode(r))) for q, r in pairs]


def load_corpus(path: str, vocab: Vocab) -> list[Example]:
    return encode_pairs(read_pairs(path), vocab)


# ---------------------------------------------------------------------------
# TF-IDF keyword per query


def tfidf_keywords(examples, latent: LatentSpace, smooth: bool = False) -> list[int | None]:
    """Pick one keyword id per example from its query, TF-IDF weighted.

    Document frequency is computed over all queries first, so the result is
    invariant to example order. Score = tf * log(n_docs / df); candidates are
    restricted to the latent space. Ties break by higher term frequency, then
    by lower token id. Queries with no latent-space token yield None.
    """
    n_docs = len(examples)
    if n_docs == 0:
        raise ValueError("tfidf_keywords: empty corpus")
    df: dict[int, int] = {}
    for ex in examples:
        for t in set(ex.x):
            df[t] = df.get(t, 0) + 1

    def idf(t: int) -> float:
        if smooth:
            return math.log((1 + n_docs) / (1 + df[t]))
        return math.log(n_docs / df[t])

    out: list[int | None] = []
    for ex in examples:
        tf: dict[int, int] = {}
        for t in ex.x:
            if t in latent:
                tf[t] = tf.get(t, 0) + 1
        if not tf:
            out.append(None)
            continue
        best = max(tf, key=lambda t: (tf[t] * idf(t), tf[t], -t))
        out.append(best)
    return out


def save_keywords(path: str, keywords, vocab: Vocab):
    """One keyword token per line, aligned with the corpus; blank if none."""
    with open(path, "w", encoding="utf-8") as f:
        for k in keywords:
            f.write(("" if k is None else vocab.tokens[k]) + "\n")


def load_keywords(path: str, vocab: Vocab) -> list[int | None]:
    out: list[int | None] = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            tok = line.rstrip("\n")
            out.append(vocab.token_to_id.get(tok) if tok else None)
    return out


# ---------------------------------------------------------------------------
# synthetic corpus with planted one-to-many structure


@dataclass
class SyntheticSpec:
    """Knobs for the planted corpus: T query templates, M responses each.

    Every template pairs with M responses; response i is determined by its
    own topic word. Topic words land in well-separated embedding clusters so
    a K-means fit can recover the planted structure exactly.
    """

    templates: int = 12
    responses_per_query: int = 4
    content_vocab: int = 160
    clusters: int = 4
    pairs: int = 2000
    seed: int = 0
    embed_dim: int = 64

    def validate(self):
        t, m, g = self.templates, self.responses_per_query, self.clusters
        if m < 2:
            raise ValueError("SyntheticSpec: need at least 2 responses per query")
        if t < 1 or g < 1 or self.pairs < 1:
            raise ValueError("SyntheticSpec: templates, clusters and pairs must be positive")
        if g > self.embed_dim:
            raise ValueError("SyntheticSpec: more clusters than embedding dimensions")
        mandatory = 4 + t + t * m
        if self.content_vocab < mandatory:
            raise ValueError(
                f"SyntheticSpec: content_vocab={self.content_vocab} below the "
                f"{mandatory} scaffold+key+topic tokens required")
        if self.pairs < t * m:
            raise ValueError(
                f"SyntheticSpec: pairs={self.pairs} cannot cover all {t * m} template/response combos")


@dataclass
class SyntheticCorpus:
    pairs: list[tuple[list[str], list[str]]]
    keywords: list[str]                  # gold topic word per pair
    clusters: dict[str, int]             # gold cluster per content token
    embeddings: dict[str, np.ndarray]    # planted vectors per content token


def synthesize_corpus(spec: SyntheticSpec) -> SyntheticCorpus:
    spec.validate()
    t_n, m_n, g_n = spec.templates, spec.responses_per_query, spec.clusters
    rng = np.random.default_rng(spec.seed)

    scaffold = ["qa", "qb", "ra", "rb"]
    keys = [f"key{t}" for t in range(t_n)]
    topics = {(t, i): f"top{t}_{i}" for t in range(t_n) for i in range(m_n)}
    n_fill = spec.content_vocab - (4 + t_n + t_n * m_n)
    fillers = [f"fil{j}" for j in range(n_fill)]

    queries = {t: ["qa", keys[t], "qb"] for t in range(t_n)}
    responses = {}
    for combo, (t, i) in enumerate(sorted(topics)):
        resp = ["ra", topics[(t, i)]]
        if fillers:
            resp.append(fillers[(2 * combo) % n_fill])
            if n_fill > 1:
                resp.append(fillers[(2 * combo + 1) % n_fill])
        resp.append("rb")
        responses[(t, i)] = resp

    pairs: list[tuple[list[str], list[str]]] = []
    keywords: list[str] = []
    n = 0
    while n < spec.pairs:
        for t in range(t_n):
            for i in range(m_n):
                if n >= spec.pairs:
                    break
                pairs.append((list(queries[t]), list(responses[(t, i)])))
                keywords.append(topics[(t, i)])
                n += 1
            if n >= spec.pairs:
                break

    # planted clusters: topic i -> cluster i mod G; everything else round-robin
    clusters: dict[str, int] = {}
    for (t, i), tok in sorted(topics.items()):
        clusters[tok] = i % g_n
    rest = scaffold + keys + fillers
    for j, tok in enumerate(rest):
        clusters[tok] = j % g_n

    centers = np.zeros((g_n, spec.embed_dim))
    for g in range(g_n):
        centers[g, g] = 3.0
    embeddings: dict[str, np.ndarray] = {}
    for tok in sorted(clusters):
        jitter = rng.uniform(-0.02, 0.02, size=spec.embed_dim)
        embeddings[tok] = centers[clusters[tok]] + jitter

    return SyntheticCorpus(pairs=pairs, keywords=keywords,
                           clusters=clusters, embeddings=embeddings)

"""K-means partitioning of the latent word space over pre-trained embeddings."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class WordEmbeddings:
    """Token-id keyed embedding vectors, all of one dimension."""

    vectors: dict[int, np.ndarray]
    dim: int

    def matrix(self, ids) -> np.ndarray:
        missing = [i for i in ids if i not in self.vectors]
        if missing:
            raise KeyError(f"no embedding for ids {missing[:5]} (and {max(0, len(missing) - 5)} more)")
        return np.stack([self.vectors[i] for i in ids])


def fill_missing(emb: WordEmbeddings, ids, seed: int) -> WordEmbeddings:
    """Give ids absent from the table vectors drawn from U[-0.1, 0.1]."""
    rng = np.random.default_rng(seed)
    vectors = dict(emb.vectors)
    for i in ids:
        if i not in vectors:
            vectors[i] = rng.uniform(-0.1, 0.1, size=emb.dim)
    return WordEmbeddings(vectors, emb.dim)


@dataclass
class ClusterModel:
    """Hard partition of the latent ids: centroids, assignment, members.

    `members` is the exact inverse of `assignment`; every cluster is
    non-empty and member lists are sorted.
    """

    k: int
    centroids: np.ndarray                 # (k, dim)
    assignment: dict[int, int]
    members: list[list[int]]
    sse_history: list[float] = field(default_factory=list)

    def check(self):
        seen = set()
        for ci, ids in enumerate(self.members):
            if not ids:
                raise ValueError(f"cluster {ci} is empty")
            if ids != sorted(ids):
                raise ValueError(f"cluster {ci} member list is not sorted")
            for z in ids:
                if self.assignment.get(z) != ci:
                    raise ValueError(f"assignment/members disagree for id {z}")
                seen.add(z)
        if seen != set(self.assignment):
            raise ValueError("members do not cover the assignment domain")


def cluster_of(model: ClusterModel, z: int) -> int:
    try:
        return model.assignment[z]
    except KeyError:
        raise ValueError(f"id {z} is not in the clustered latent space") from None


def _assign(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


def _sse(x: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    return float(((x - centroids[labels]) ** 2).sum())


def kmeans(emb: WordEmbeddings, latent_ids, k: int, max_iters: int = 100,
           seed: int = 0, normalize: bool = False) -> ClusterModel:
    """Lloyd's algorithm with distance-weighted (k-means++ style) seeding.

    Deterministic given the seed. Empty clusters are repaired by stealing the
    point currently farthest from its centroid, so no cluster ends up empty.
    With `normalize`, vectors are length-normalized first (cosine geometry).
    """
    ids = list(latent_ids)
    n = len(ids)
    if k <= 0:
        raise ValueError(f"kmeans: k must be positive, got {k}")
    if k > n:
        raise ValueError(f"kmeans: k={k} exceeds the {n} points available")
    if max_iters < 1:
        raise ValueError("kmeans: max_iters must be at least 1")
    x = emb.matrix(ids).astype(np.float64)
    if normalize:
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        x = x / np.where(norms == 0, 1.0, norms)

    rng = np.random.default_rng(seed)
    centroids = np.empty((k, x.shape[1]))
    first = int(rng.integers(n))
    centroids[0] = x[first]
    closest = ((x - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            # all remaining points coincide with chosen centroids
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centroids[j] = x[idx]
        closest = np.minimum(closest, ((x - centroids[j]) ** 2).sum(axis=1))

    def repair_empties(labels):
        # move the point farthest from its centroid (among clusters that can
        # spare one) into each empty cluster; guarantees a full partition
        while True:
            empty = [ci for ci in range(k) if not (labels == ci).any()]
            if not empty:
                return
            dist = ((x - centroids[labels]) ** 2).sum(axis=1)
            counts = np.bincount(labels, minlength=k)
            dist[counts[labels] <= 1] = -1.0
            labels[int(dist.argmax())] = empty[0]

    labels = _assign(x, centroids)
    history: list[float] = []
    for _ in range(max_iters):
        repair_empties(labels)
        for ci in range(k):
            centroids[ci] = x[labels == ci].mean(axis=0)
        sse = _sse(x, centroids, labels)
        if history and sse > history[-1] + 1e-9 * max(1.0, history[-1]):
            raise RuntimeError("kmeans: within-cluster SSE increased during fitting")
        history.append(sse)
        new_labels = _assign(x, centroids)
        if (new_labels == labels).all():
            break
        labels = new_labels

    repair_empties(labels)
    for ci in range(k):
        centroids[ci] = x[labels == ci].mean(axis=0)

    assignment = {z: int(c) for z, c in zip(ids, labels)}
    members: list[list[int]] = [[] for _ in range(k)]
    for z in ids:
        members[assignment[z]].append(z)
    members = [sorted(m) for m in members]
    model = ClusterModel(k=k, centroids=centroids, assignment=assignment,
                         members=members, sse_history=history)
    model.check()
    return model


# ---------------------------------------------------------------------------
# text formats: embedding file and cluster file


def load_embedding_file(path: str, vocab) -> WordEmbeddings:
    """Read `token v1 v2 ...` lines; tokens outside the vocab are skipped."""
    vectors: dict[int, np.ndarray] = {}
    dim = None
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.rstrip("\n").split(" ")
            if len(parts) < 2:
                raise ValueError(f"{path}:{lineno}: expected `token floats...`")
            token, vals = parts[0], parts[1:]
            vec = np.array([float(v) for v in vals])
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise ValueError(f"{path}:{lineno}: dimension {vec.size} != {dim}")
            tid = vocab.token_to_id.get(token)
            if tid is not None:
                vectors[tid] = vec
    if dim is None:
        raise ValueError(f"{path}: empty embedding file")
    return WordEmbeddings(vectors, dim)


def save_embedding_file(path: str, vocab, emb: WordEmbeddings):
    with open(path, "w", encoding="utf-8") as f:
        for tid in sorted(emb.vectors):
            vec = emb.vectors[tid]
            f.write(vocab.tokens[tid] + " " + " ".join(repr(float(v)) for v in vec) + "\n")


def save_cluster_file(path: str, model: ClusterModel, vocab, latent_ids):
    with open(path, "w", encoding="utf-8") as f:
        for z in latent_ids:
            f.write(f"{vocab.tokens[z]} {cluster_of(model, z)}\n")


def load_cluster_file(path: str, vocab, emb: WordEmbeddings) -> ClusterModel:
    """Rebuild a ClusterModel from a `token cluster-index` file.

    Centroids are recomputed as member means over the given embeddings.
    """
    assignment: dict[int, int] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.rstrip("\n").split(" ")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected `token cluster`")
            token, ci = parts[0], int(parts[1])
            tid = vocab.token_to_id.get(token)
            if tid is None:
                raise ValueError(f"{path}:{lineno}: token {token!r} not in vocab")
            assignment[tid] = ci
    if not assignment:
        raise ValueError(f"{path}: empty cluster file")
    k = max(assignment.values()) + 1
    members: list[list[int]] = [[] for _ in range(k)]
    for z, ci in assignment.items():
        members[ci].append(z)
    members = [sorted(m) for m in members]
    centroids = np.stack([emb.matrix(m).mean(axis=0) for m in members])
    model = ClusterModel(k=k, centroids=centroids, assignment=assignment, members=members)
    model.check()
    return model

"""Vocabulary, latent space, TF-IDF keywords, corpus files, synthetic corpus."""

import numpy as np
import pytest
from sklearn.metrics import adjusted_rand_score

from dcvae.clustering import WordEmbeddings, cluster_of, kmeans
from dcvae.corpus import (
    BOS,
    EOS,
    PAD,
    UNK,
    Example,
    SPECIAL_TOKENS,
    SyntheticSpec,
    build_vocab,
    encode_pairs,
    load_corpus,
    read_pairs,
    restrict_latent_space,
    save_keywords,
    load_keywords,
    save_pairs,
    synthesize_corpus,
    tfidf_keywords,
)


class TestVocab:
    def test_single_pair_small_vocab(self):
        vocab = build_vocab([(["a", "b"], ["c"])], 10)
        assert vocab.tokens[:4] == list(SPECIAL_TOKENS)
        assert sorted(vocab.tokens[4:]) == ["a", "b", "c"]
        assert vocab.coverage == 1.0

    def test_truncation_sends_rare_tokens_to_unk(self):
        pairs = [(["a", "a", "a"], ["b", "b"]), (["a"], ["rare"])]
        vocab = build_vocab(pairs, 2)
        assert "rare" not in vocab.token_to_id
        assert vocab.encode(["rare"]) == [UNK]
        assert vocab.coverage < 1.0

    def test_coverage_matches_hand_count(self):
        pairs = [(["x", "x"], ["y"]), (["x"], ["z"]), (["w"], ["y"]),
                 (["x"], ["y"]), (["q"], ["z"])]
        # counts: x=4, y=3, z=2, w=1, q=1 -> keep top 3 = x,y,z -> 9 of 11
        vocab = build_vocab(pairs, 3)
        assert vocab.coverage == pytest.approx(9 / 11)

    def test_frequency_ties_break_lexicographically(self):
        vocab = build_vocab([(["b", "a"], ["c"])], 2)
        assert sorted(vocab.tokens[4:]) == ["a", "b"]

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            build_vocab([], 10)

    def test_reserved_ids(self):
        assert (PAD, UNK, BOS, EOS) == (0, 1, 2, 3)


class TestLatentSpace:
    def _vocab(self):
        pairs = [(["a"] * 5 + ["b"] * 3, ["c"] * 2 + ["d"])]
        return build_vocab(pairs, 10)

    def test_all_mode_is_vocab_minus_specials(self):
        vocab = self._vocab()
        latent = restrict_latent_space(vocab)
        assert len(latent) == vocab.size - 4
        assert all(z >= 4 for z in latent.ids)

    def test_top_one_is_most_frequent(self):
        vocab = self._vocab()
        latent = restrict_latent_space(vocab, top_k=1)
        assert vocab.tokens[latent.ids[0]] == "a"

    def test_top_k_matches_frequency_sort_oracle(self):
        vocab = self._vocab()
        latent = restrict_latent_space(vocab, top_k=3)
        oracle = sorted(range(4, vocab.size),
                        key=lambda i: (-vocab.counts[i], vocab.tokens[i]))[:3]
        assert list(latent.ids) == oracle

    def test_bad_k_rejected(self):
        vocab = self._vocab()
        with pytest.raises(ValueError, match="positive"):
            restrict_latent_space(vocab, top_k=0)
        with pytest.raises(ValueError, match="exceeds"):
            restrict_latent_space(vocab, top_k=99)


class TestTfidf:
    def test_rare_token_beats_ubiquitous_one(self):
        # df(a) = every document -> idf 0; df(b) = 1
        pairs = [(["a", "a", "b"], ["r"]), (["a", "c"], ["r"]), (["a", "d"], ["r"])]
        vocab = build_vocab(pairs, 20)
        latent = restrict_latent_space(vocab)
        exs = encode_pairs(pairs, vocab)
        kws = tfidf_keywords(exs, latent)
        assert vocab.tokens[kws[0]] == "b"

    def test_single_document_falls_back_to_term_frequency(self):
        pairs = [(["u", "v", "v", "w"], ["r"])]
        vocab = build_vocab(pairs, 20)
        exs = encode_pairs(pairs, vocab)
        kws = tfidf_keywords(exs, restrict_latent_space(vocab))
        assert vocab.tokens[kws[0]] == "v"

    def test_keyword_always_in_latent_space(self):
        pairs = [(["a", "b"], ["c"]), (["b", "d"], ["e"])]
        vocab = build_vocab(pairs, 20)
        latent = restrict_latent_space(vocab, top_k=2)
        kws = tfidf_keywords(encode_pairs(pairs, vocab), latent)
        for kw in kws:
            if kw is not None:
                assert kw in latent

    def test_query_without_latent_token_yields_none(self):
        pairs = [(["only"], ["r1"]), (["frequent", "frequent"], ["r2"])]
        vocab = build_vocab(pairs, 20)
        latent = restrict_latent_space(vocab, top_k=1)  # just "frequent"
        kws = tfidf_keywords(encode_pairs(pairs, vocab), latent)
        assert kws[0] is None and kws[1] is not None

    def test_invariant_to_example_order(self):
        rng = np.random.default_rng(0)
        pairs = [([f"q{i}", "shared"], [f"r{i}"]) for i in range(8)]
        vocab = build_vocab(pairs, 50)
        latent = restrict_latent_space(vocab)
        exs = encode_pairs(pairs, vocab)
        base = {tuple(ex.x): kw for ex, kw in zip(exs, tfidf_keywords(exs, latent))}
        perm = [exs[i] for i in rng.permutation(len(exs))]
        shuffled = {tuple(ex.x): kw for ex, kw in zip(perm, tfidf_keywords(perm, latent))}
        assert base == shuffled

    def test_keyword_sidecar_round_trip(self, tmp_path):
        pairs = [(["a", "b"], ["c"]), (["b"], ["d"])]
        vocab = build_vocab(pairs, 20)
        kws = [vocab.token_to_id["a"], None]
        path = tmp_path / "kw.txt"
        save_keywords(str(path), kws, vocab)
        assert load_keywords(str(path), vocab) == kws


class TestCorpusFiles:
    def test_parse_utf8_pair(self, tmp_path):
        path = tmp_path / "c.tsv"
        path.write_text("你好 吗\t我 很 好\n", encoding="utf-8")
        pairs = read_pairs(str(path))
        assert len(pairs) == 1
        assert len(pairs[0][0]) == 2 and len(pairs[0][1]) == 3

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "c.tsv"
        path.write_text("", encoding="utf-8")
        with pytest.raises(ValueError, match="empty"):
            read_pairs(str(path))

    def test_malformed_line_reports_line_number(self, tmp_path):
        path = tmp_path / "c.tsv"
        path.write_text("a b\tc d\nmissing tab\n", encoding="utf-8")
        with pytest.raises(ValueError, match=":2:"):
            read_pairs(str(path))

    def test_non_utf8_rejected(self, tmp_path):
        path = tmp_path / "c.tsv"
        path.write_bytes(b"\xff\xfe broken \tx\n")
        with pytest.raises(ValueError, match="UTF-8"):
            read_pairs(str(path))

    def test_thousand_pair_round_trip_is_byte_identical(self, tmp_path):
        rng = np.random.default_rng(1)
        pairs = [([f"q{rng.integers(50)}", f"w{i % 7}"], [f"r{rng.integers(50)}", "e"])
                 for i in range(1000)]
        p1, p2 = tmp_path / "a.tsv", tmp_path / "b.tsv"
        save_pairs(pairs, str(p1))
        save_pairs(read_pairs(str(p1)), str(p2))
        assert p1.read_bytes() == p2.read_bytes()

    def test_load_corpus_encodes_in_vocab_range(self, tmp_path):
        path = tmp_path / "c.tsv"
        path.write_text("a b\tc\nb zz\td\n", encoding="utf-8")
        pairs = read_pairs(str(path))
        vocab = build_vocab(pairs, 4)
        for ex in load_corpus(str(path), vocab):
            assert all(0 <= t < vocab.size for t in ex.x + ex.y)

    def test_example_rejects_empty_sides(self):
        with pytest.raises(ValueError, match="non-empty"):
            Example(x=(), y=(5,))


class TestSynthesize:
    def test_counting(self):
        spec = SyntheticSpec(templates=10, responses_per_query=4, content_vocab=100,
                             clusters=4, pairs=40, seed=0, embed_dim=8)
        syn = synthesize_corpus(spec)
        assert len(syn.pairs) == 40
        assert len(syn.keywords) == 40
        assert len(set(syn.keywords)) == 40  # one topic word per pair

    def test_planted_separation(self):
        spec = SyntheticSpec(seed=1)
        syn = synthesize_corpus(spec)
        toks = sorted(syn.embeddings)
        within, between = 0.0, np.inf
        for i, a in enumerate(toks):
            for b in toks[i + 1:]:
                d = float(np.linalg.norm(syn.embeddings[a] - syn.embeddings[b]))
                if syn.clusters[a] == syn.clusters[b]:
                    within = max(within, d)
                else:
                    between = min(between, d)
        assert within < 0.1 * between

    def test_kmeans_recovers_planted_clusters(self):
        spec = SyntheticSpec(templates=6, responses_per_query=4, content_vocab=80,
                             clusters=4, pairs=24, seed=2, embed_dim=16)
        syn = synthesize_corpus(spec)
        vocab = build_vocab(syn.pairs, 500)
        latent = restrict_latent_space(vocab)
        emb = WordEmbeddings({vocab.token_to_id[t]: v for t, v in syn.embeddings.items()
                              if t in vocab.token_to_id}, spec.embed_dim)
        present = [z for z in latent.ids if z in emb.vectors]
        model = kmeans(emb, present, k=4, seed=0)
        gold = [syn.clusters[vocab.tokens[z]] for z in present]
        got = [cluster_of(model, z) for z in present]
        assert adjusted_rand_score(gold, got) == 1.0

    def test_deterministic_given_seed(self):
        a = synthesize_corpus(SyntheticSpec(seed=5))
        b = synthesize_corpus(SyntheticSpec(seed=5))
        assert a.pairs == b.pairs and a.keywords == b.keywords
        for tok in a.embeddings:
            np.testing.assert_array_equal(a.embeddings[tok], b.embeddings[tok])

    def test_each_query_has_m_distinct_responses(self):
        spec = SyntheticSpec(templates=4, responses_per_query=3, content_vocab=60,
                             clusters=3, pairs=60, seed=3, embed_dim=8)
        syn = synthesize_corpus(spec)
        by_query = {}
        for q, r in syn.pairs:
            by_query.setdefault(tuple(q), set()).add(tuple(r))
        assert all(len(v) == 3 for v in by_query.values())
        assert len(by_query) == 4

    def test_arity_inconsistencies_rejected(self):
        with pytest.raises(ValueError, match="2 responses"):
            SyntheticSpec(responses_per_query=1).validate()
        with pytest.raises(ValueError, match="content_vocab"):
            SyntheticSpec(templates=20, responses_per_query=10, content_vocab=50).validate()
        with pytest.raises(ValueError, match="cannot cover"):
            SyntheticSpec(templates=10, responses_per_query=4, pairs=20).validate()
        with pytest.raises(ValueError, match="dimensions"):
            SyntheticSpec(clusters=100, embed_dim=8).validate()

    def test_topic_words_spread_across_clusters(self):
        spec = SyntheticSpec(templates=5, responses_per_query=4, clusters=4,
                             content_vocab=120, pairs=20, seed=4)
        syn = synthesize_corpus(spec)
        for t in range(5):
            topics = [f"top{t}_{i}" for i in range(4)]
            assert len({syn.clusters[tok] for tok in topics}) == 4

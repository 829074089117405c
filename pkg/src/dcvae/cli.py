"""Command-line pipeline: synth, prep, cluster, keywords, pretrain, train,
generate, evaluate, ablate.

Flags override values from an optional `key = value` config file. All
randomness is controlled by --seed; repeating a command with identical seed
and inputs produces byte-identical outputs.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import clustering, corpus, metrics, model, sampling, training

CLI_MODES = {"two_stage": "two_stage", "one_stage": "one_stage",
             "cd": "cd_variant", "no_latent": "no_latent"}


def parse_config_file(path: str) -> dict[str, str]:
    """Line-based `key = value` settings; `#` starts a comment."""
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected `key = value`")
            key, val = line.split("=", 1)
            out[key.strip()] = val.strip()
    return out


_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


class Options:
    """Flag values with config-file fallback and typed defaults."""

    def __init__(self, args: argparse.Namespace):
        self.args = vars(args)
        self.file = parse_config_file(args.config) if getattr(args, "config", None) else {}

    def _raw(self, key: str):
        v = self.args.get(key)
        if v is not None:
            return v
        return self.file.get(key)

    def get(self, key: str, default=None, kind=str):
        v = self._raw(key)
        if v is None:
            return default
        if kind is bool and isinstance(v, str):
            low = v.lower()
            if low in _BOOL_TRUE:
                return True
            if low in _BOOL_FALSE:
                return False
            raise ValueError(f"option {key}: expected a boolean, got {v!r}")
        return kind(v)

    def require(self, key: str, kind=str):
        v = self._raw(key)
        if v is None:
            raise ValueError(f"missing required option --{key.replace('_', '-')}")
        return kind(v)


def _mode(opts: Options) -> str:
    raw = opts.get("mode", "two_stage")
    if raw not in CLI_MODES:
        raise ValueError(f"unknown mode {raw!r}; expected one of {sorted(CLI_MODES)}")
    return CLI_MODES[raw]


def _load_data(opts: Options):
    pairs = corpus.read_pairs(opts.require("corpus"))
    vocab = corpus.build_vocab(pairs, opts.get("vocab_size", 500, int))
    latent = corpus.restrict_latent_space(vocab, opts.get("latent_top_k", None, int))
    examples = corpus.encode_pairs(pairs, vocab)
    return pairs, vocab, examples, latent


def _dims(opts: Options, embed_dim: int | None) -> model.ModelDims:
    hidden = opts.get("hidden", 32, int)
    embed = opts.get("embed_dim", embed_dim or 2 * hidden, int)
    if embed_dim is not None and embed != embed_dim:
        raise ValueError(f"embed_dim {embed} conflicts with embedding file dim {embed_dim}")
    return model.ModelDims(
        hidden=hidden,
        embed=embed,
        cluster_embed=opts.get("cluster_dim", embed, int),
        scorer_hidden=opts.get("scorer_hidden", 2 * hidden, int),
    )


def _train_config(opts: Options, latent_cfg: model.LatentConfig) -> training.TrainConfig:
    return training.TrainConfig(
        lr=opts.get("lr", 1e-4, float),
        batch=opts.get("batch", 128, int),
        epochs=opts.get("epochs", 5, int),
        n_samples=opts.get("n_samples", 1, int),
        seed=opts.get("seed", 0, int),
        latent=latent_cfg,
        straight_through=opts.get("straight_through", True, bool),
        clip_norm=opts.get("clip_norm", 5.0, float),
    )


def _load_embeddings(opts: Options, vocab, latent, required: bool):
    path = opts.get("embeddings")
    if path is None:
        if required:
            raise ValueError("missing required option --embeddings")
        return None
    emb = clustering.load_embedding_file(path, vocab)
    return clustering.fill_missing(emb, latent.ids, opts.get("seed", 0, int))


def _fit_or_load_clusters(opts: Options, vocab, latent, emb):
    path = opts.get("clusters")
    if path is not None:
        return clustering.load_cluster_file(path, vocab, emb)
    return clustering.kmeans(emb, latent.ids, k=opts.get("K", 10, int),
                             seed=opts.get("seed", 0, int),
                             normalize=opts.get("kmeans_normalize", False, bool))


def _keywords(opts: Options, examples, latent, vocab):
    path = opts.get("keywords")
    if path is not None:
        kws = corpus.load_keywords(path, vocab)
        if len(kws) != len(examples):
            raise ValueError(
                f"keyword file has {len(kws)} lines but corpus has {len(examples)}")
    else:
        kws = corpus.tfidf_keywords(examples, latent, smooth=opts.get("tfidf_smooth", False, bool))
    for ex, kw in zip(examples, kws):
        ex.keyword = kw if (kw is not None and kw in latent) else None
    return examples


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(opts: Options) -> int:
    out_dir = opts.require("out")
    spec = corpus.SyntheticSpec(
        templates=opts.get("synth_templates", 12, int),
        responses_per_query=opts.get("synth_responses", 4, int),
        content_vocab=opts.get("synth_content_vocab", 160, int),
        clusters=opts.get("K", 4, int),
        pairs=opts.get("synth_pairs", 2000, int),
        seed=opts.get("seed", 0, int),
        embed_dim=opts.get("embed_dim", 64, int),
    )
    syn = corpus.synthesize_corpus(spec)
    os.makedirs(out_dir, exist_ok=True)
    corpus.save_pairs(syn.pairs, os.path.join(out_dir, "corpus.tsv"))
    with open(os.path.join(out_dir, "keywords.txt"), "w", encoding="utf-8") as f:
        for kw in syn.keywords:
            f.write(kw + "\n")
    with open(os.path.join(out_dir, "embeddings.txt"), "w", encoding="utf-8") as f:
        for tok in sorted(syn.embeddings):
            vec = syn.embeddings[tok]
            f.write(tok + " " + " ".join(repr(float(v)) for v in vec) + "\n")
    with open(os.path.join(out_dir, "clusters_gold.txt"), "w", encoding="utf-8") as f:
        for tok in sorted(syn.clusters):
            f.write(f"{tok} {syn.clusters[tok]}\n")
    print(f"synth: wrote {len(syn.pairs)} pairs, {len(syn.embeddings)} embeddings to {out_dir}")
    return 0


def cmd_prep(opts: Options) -> int:
    out_dir = opts.require("out")
    pairs, vocab, _, latent = _load_data(opts)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "vocab.tsv"), "w", encoding="utf-8") as f:
        for tok, cnt in zip(vocab.tokens, vocab.counts):
            f.write(f"{tok}\t{cnt}\n")
    with open(os.path.join(out_dir, "latent.txt"), "w", encoding="utf-8") as f:
        for z in latent.ids:
            f.write(vocab.tokens[z] + "\n")
    print(f"prep: vocab {vocab.size} (coverage {vocab.coverage:.4f}), latent {len(latent)}")
    return 0


def cmd_cluster(opts: Options) -> int:
    out_path = opts.require("out")
    _, vocab, _, latent = _load_data(opts)
    emb = _load_embeddings(opts, vocab, latent, required=True)
    cm = clustering.kmeans(emb, latent.ids, k=opts.get("K", 10, int),
                           seed=opts.get("seed", 0, int),
                           normalize=opts.get("kmeans_normalize", False, bool))
    clustering.save_cluster_file(out_path, cm, vocab, latent.ids)
    sizes = [len(m) for m in cm.members]
    print(f"cluster: K={cm.k} sizes={sizes} sse={cm.sse_history[-1]:.6f}")
    return 0


def cmd_keywords(opts: Options) -> int:
    out_path = opts.require("out")
    _, vocab, examples, latent = _load_data(opts)
    kws = corpus.tfidf_keywords(examples, latent, smooth=opts.get("tfidf_smooth", False, bool))
    corpus.save_keywords(out_path, kws, vocab)
    n = sum(k is not None for k in kws)
    print(f"keywords: {n}/{len(kws)} examples keyworded")
    return 0


def _build_model(opts: Options, vocab, latent, mode: str, emb, clusters):
    latent_cfg = model.LatentConfig(mode=mode,
                                    top_k=opts.get("latent_top_k", None, int),
                                    cd_size=opts.get("cd_size", None, int))
    dims = _dims(opts, emb.dim if emb is not None else None)
    rng = np.random.default_rng(opts.get("seed", 0, int))
    params = model.build_params(rng, vocab, latent, latent_cfg, dims,
                                clusters=clusters, pretrained=emb)
    return params, latent_cfg


def cmd_pretrain(opts: Options) -> int:
    out_path = opts.require("out")
    mode = _mode(opts)
    if mode not in ("two_stage", "one_stage"):
        raise ValueError(f"pretrain only applies to word-latent modes, not {opts.get('mode')}")
    _, vocab, examples, latent = _load_data(opts)
    emb = _load_embeddings(opts, vocab, latent, required=False)
    clusters = None
    if mode == "two_stage":
        if emb is None:
            raise ValueError("two_stage pretraining needs --embeddings to fit clusters")
        clusters = _fit_or_load_clusters(opts, vocab, latent, emb)
    params, latent_cfg = _build_model(opts, vocab, latent, mode, emb, clusters)
    examples = _keywords(opts, examples, latent, vocab)
    cfg = _train_config(opts, latent_cfg)
    steps = opts.get("pretrain_steps", 200, int)
    losses = training.pretrain(examples, params, cfg, steps=steps)
    model.save_checkpoint(out_path, params)
    print(f"pretrain: {steps} steps, loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    return 0


def cmd_train(opts: Options) -> int:
    out_path = opts.require("out")
    mode = _mode(opts)
    _, vocab, examples, latent = _load_data(opts)
    ckpt = opts.get("checkpoint")
    if ckpt is not None:
        params = model.load_checkpoint(ckpt)
        if params.config.mode != mode:
            raise ValueError(
                f"checkpoint mode {params.config.mode!r} does not match --mode {opts.get('mode')!r}")
        latent_cfg = params.config
    else:
        emb = _load_embeddings(opts, vocab, latent, required=False)
        clusters = None
        if mode == "two_stage":
            if emb is None:
                raise ValueError("two_stage training needs --embeddings (or a --checkpoint)")
            clusters = _fit_or_load_clusters(opts, vocab, latent, emb)
        params, latent_cfg = _build_model(opts, vocab, latent, mode, emb, clusters)
    cfg = _train_config(opts, latent_cfg)
    log = training.train(examples, params, cfg,
                         checkpoint_path=out_path, log_path=out_path + ".log")
    last = log[-1]
    print(f"train: {cfg.epochs} epochs, total {last.total:.4f} "
          f"(recon {last.recon:.4f} kl {last.kl:.4f} bow {last.bow:.4f})")
    return 0


def _unique_queries(examples):
    seen = set()
    out = []
    for ex in examples:
        if ex.x not in seen:
            seen.add(ex.x)
            out.append(ex.x)
    return out


def cmd_generate(opts: Options) -> int:
    out_path = opts.require("out")
    params = model.load_checkpoint(opts.require("checkpoint"))
    pairs = corpus.read_pairs(opts.require("corpus"))
    examples = corpus.encode_pairs(pairs, params.vocab)
    queries = _unique_queries(examples)
    rng = np.random.default_rng(opts.get("seed", 0, int))
    num = opts.get("samples", 10, int)
    beam = opts.get("beam", 10, int)
    max_len = opts.get("max_len", 30, int)
    rows = []
    raw = dedup = 0
    for x_ids in queries:
        results = sampling.generate_diverse(params, params.config, x_ids, num, rng,
                                            beam_size=beam, max_len=max_len,
                                            length_norm=opts.get("length_norm", False, bool))
        rows.extend((x_ids, r) for r in results)
        raw += len(results)
        dedup += len({tuple(r.tokens) for r in results})
    sampling.save_generation_file(out_path, params.vocab, params.config.mode, rows)
    print(f"generate: {len(queries)} queries x {num} samples; "
          f"{raw} responses, {dedup} after per-query dedup")
    return 0


def cmd_evaluate(opts: Options) -> int:
    report = metrics.evaluate(opts.require("generated"), opts.require("corpus"))
    out_path = opts.get("out")
    if out_path:
        metrics.save_report(out_path, report)
    print("evaluate: " + report.summary())
    return 0


def run_pipeline(opts: Options, out_dir: str) -> metrics.EvalReport:
    """prep -> cluster -> keywords -> pretrain -> train -> generate -> evaluate.

    Skips the stages a mode has no use for (clusters outside two_stage,
    pre-training outside the word-latent modes). Everything lands in out_dir.
    """
    mode = _mode(opts)
    corpus_path = opts.require("corpus")
    _, vocab, examples, latent = _load_data(opts)
    emb = _load_embeddings(opts, vocab, latent, required=mode == "two_stage")
    clusters = _fit_or_load_clusters(opts, vocab, latent, emb) if mode == "two_stage" else None
    params, latent_cfg = _build_model(opts, vocab, latent, mode, emb, clusters)
    cfg = _train_config(opts, latent_cfg)

    os.makedirs(out_dir, exist_ok=True)
    if mode in ("two_stage", "one_stage"):
        examples = _keywords(opts, examples, latent, vocab)
        training.pretrain(examples, params, cfg, steps=opts.get("pretrain_steps", 200, int))

    ckpt = os.path.join(out_dir, "checkpoint.dcv")
    training.train(examples, params, cfg, checkpoint_path=ckpt,
                   log_path=os.path.join(out_dir, "epochs.log"))

    rng = np.random.default_rng(cfg.seed)
    rows = []
    for x_ids in _unique_queries(examples):
        results = sampling.generate_diverse(params, latent_cfg, x_ids,
                                            opts.get("samples", 10, int), rng,
                                            beam_size=opts.get("beam", 10, int),
                                            max_len=opts.get("max_len", 30, int))
        rows.extend((x_ids, r) for r in results)
    gen_path = os.path.join(out_dir, "generated.tsv")
    sampling.save_generation_file(gen_path, vocab, mode, rows)

    report = metrics.evaluate(gen_path, corpus_path)
    metrics.save_report(os.path.join(out_dir, "report.tsv"), report)
    return report


def cmd_ablate(opts: Options) -> int:
    out_dir = opts.require("out")
    report = run_pipeline(opts, out_dir)
    print(f"ablate[{opts.get('mode', 'two_stage')}]: " + report.summary())
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "prep": cmd_prep,
    "cluster": cmd_cluster,
    "keywords": cmd_keywords,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dcvae",
        description="Discrete-latent conditional VAE for short-text response generation.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("synth", "write a planted synthetic corpus, embeddings, and gold keywords"),
        ("prep", "build the vocabulary and latent space from a corpus"),
        ("cluster", "fit K-means clusters over latent-word embeddings"),
        ("keywords", "extract one TF-IDF keyword per query"),
        ("pretrain", "pre-train the prior and posterior heads on keywords"),
        ("train", "train the full model"),
        ("generate", "sample latent variables and beam-decode responses"),
        ("evaluate", "score a generation file against its reference corpus"),
        ("ablate", "run the whole pipeline for one latent mode"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key = value settings file; flags override it")
        p.add_argument("--seed", type=int)
        p.add_argument("--corpus")
        p.add_argument("--embeddings")
        p.add_argument("--clusters")
        p.add_argument("--checkpoint")
        p.add_argument("--out")
        p.add_argument("--mode", choices=sorted(CLI_MODES))
        p.add_argument("--latent-top-k", dest="latent_top_k", type=int)
        p.add_argument("--K", dest="K", type=int)
        p.add_argument("--beam", type=int)
        p.add_argument("--samples", type=int)
        p.add_argument("--hidden", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch", type=int)
        if name == "evaluate":
            p.add_argument("generated", help="generation file to score")
    return parser


def run_cli(argv) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        opts = Options(args)
        return COMMANDS[args.command](opts)
    except (ValueError, OSError, KeyError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()

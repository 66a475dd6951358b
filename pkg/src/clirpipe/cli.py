"""Command-line entry point: embed, index, search, fuse, rerank, eval, pipeline.

Exit status: 0 success, 1 user/input error, 2 internal invariant violation.
Flags override values from ``--config``; both fall back to the built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional

from . import __version__
from .config import (EvalSection, IndexSection, OracleSection, PipelineConfig, RerankSection,
                     SearchSection, WindowSection, EmbedSection, FusionSection, load_config)
from .corpus import (WindowConfig, build_query_text, get_tokenizer, passage_table, read_documents,
                     read_topics, window_passages)
from .embed_io import (parse_synthetic_tag, read_embeddings, read_manifest, synthetic_embed,
                       synthetic_tag, write_embeddings)
from .errors import ConfigError, EngineError
from .evaluation import evaluate, format_table, read_qrels, to_json
from .fusion import FUSERS, fuse
from .index_core import IndexConfig, build_index, load_index, save_index
from .oracle_bridge import MockOracle, MockOracleSpec, OracleEndpoint, WireOracle, load_mock_scores
from .reranker import RerankConfig, rerank_listwise, rerank_pointwise, rerank_tournament
from .runs import Run, read_run, write_run
from .searcher import SearchParams, maxp_aggregate, search

log = logging.getLogger("clirpipe")

MODES = ("pointwise", "tournament", "listwise")


def _dflt(section, name) -> str:
    return f"(default: {getattr(section(), name)})"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_embed(corpus_path, out_path, cfg: PipelineConfig) -> int:
    docs = read_documents(corpus_path)
    window = WindowConfig(cfg.window.window, cfg.window.stride)
    tok = get_tokenizer(cfg.window.tokenizer)
    mats = []
    for doc in docs.values():
        tokens = tok(doc.body)
        for p in window_passages(tokens, window, doc.doc_id):
            mats.append(synthetic_embed(tokens[p.start:p.end], cfg.embed.dim, cfg.embed.seed,
                                        p.passage_id))
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    manifest = write_embeddings(mats, out_path, cfg.window.tokenizer,
                                synthetic_tag(cfg.embed.dim, cfg.embed.seed))
    print(f"embedded {manifest.count} passages (dim {manifest.dim}) -> {out_path}")
    return 0


def cmd_index(corpus_path, embeddings_path, out_dir, cfg: PipelineConfig, threads: int = 1) -> int:
    docs = read_documents(corpus_path)
    window = WindowConfig(cfg.window.window, cfg.window.stride)
    table = passage_table(docs, window, cfg.window.tokenizer)
    manifest = read_manifest(embeddings_path)
    if manifest.tokenizer_name != cfg.window.tokenizer:
        raise ConfigError(f"embeddings were tokenized with {manifest.tokenizer_name!r}, "
                          f"index expects {cfg.window.tokenizer!r}")
    mats = list(read_embeddings(embeddings_path))
    ic = cfg.index
    index = build_index(
        mats, table,
        IndexConfig(k=ic.k or None, pool_factor=ic.pool_factor, seed=ic.seed,
                    sample_size=ic.sample_size, max_iters=ic.max_iters, store_raw=ic.store_raw),
        window=window, tokenizer_name=manifest.tokenizer_name, encoder_tag=manifest.encoder_tag,
        threads=threads)
    save_index(index, out_dir)
    print(f"tokens before pooling: {index.meta['n_tokens_in']}")
    print(f"tokens after pooling: {index.n_codes}")
    print(f"passages: {len(index.passages)}  centroids: {index.k}  -> {out_dir}")
    return 0


def _query_matrices(index, topics, query_embeddings: Optional[str]):
    if query_embeddings:
        by_id = {m.passage_id: m for m in read_embeddings(query_embeddings)}
        missing = [t for t in topics if t not in by_id]
        if missing:
            raise ConfigError(f"no query embedding for topic(s): {', '.join(missing)}")
        return {t: by_id[t] for t in topics}
    synth = parse_synthetic_tag(index.meta.get("encoder_tag", ""))
    if synth is None:
        raise ConfigError("index was not built from synthetic embeddings; pass --query-embeddings")
    dim, seed = synth
    tok = get_tokenizer(index.meta.get("tokenizer", "whitespace"))
    return {t: synthetic_embed(tok(build_query_text(topic)), dim, seed, t)
            for t, topic in topics.items()}


def run_search(index, topics, params: SearchParams, doc_depth: int, tag: str,
               query_embeddings=None, threads: int = 1) -> Run:
    queries = _query_matrices(index, topics, query_embeddings)
    ids = sorted(queries)

    def one(topic_id):
        return maxp_aggregate(search(queries[topic_id], index, params))[:doc_depth]

    with ThreadPoolExecutor(max_workers=max(1, threads)) as ex:
        results = list(ex.map(one, ids))
    return Run(tag, dict(zip(ids, results)))


def cmd_search(index_dir, topics_path, out_run, cfg: PipelineConfig, threads: int = 1,
               query_embeddings=None, tag=None) -> int:
    index = load_index(index_dir)
    topics = read_topics(topics_path)
    sc = cfg.search
    nprobe = index.k if sc.nprobe <= 0 else sc.nprobe
    if sc.exact and index.raw is None:
        log.warning("index has no raw vectors (build with --store-raw); scoring reconstructions")
    params = SearchParams(sc.k_passages, nprobe, sc.exact)
    tag = tag or f"{sc.tag}.k{sc.k_passages}.np{'max' if sc.nprobe <= 0 else sc.nprobe}" \
                 f"{'.exact' if sc.exact else ''}"
    run = run_search(index, topics, params, sc.doc_depth, tag, query_embeddings, threads)
    Path(out_run).parent.mkdir(parents=True, exist_ok=True)
    write_run(run, out_run, sc.doc_depth)
    print(f"searched {len(topics)} topics -> {out_run} [{tag}]")
    return 0


def cmd_fuse(run_paths: List[str], out_run, cfg: PipelineConfig, tag=None) -> int:
    runs = [read_run(p) for p in run_paths]
    fused = fuse(runs, cfg.fusion.method, cfg.fusion.k_rrf, tag)
    write_run(fused, out_run)
    print(f"fused {len(runs)} runs with {cfg.fusion.method} -> {out_run}")
    return 0


def make_oracle(spec: str, oc: OracleSection, cfg: PipelineConfig):
    """``mock:truthful``, ``mock:fail``, ``mock:every=N`` or an http(s) base url."""
    if spec.startswith(("http://", "https://")):
        return WireOracle(OracleEndpoint(spec, oc.auth_token_env, oc.timeout, oc.max_retries,
                                         oc.rate_limit))
    if spec == "http":
        if not oc.base_url:
            raise ConfigError("[oracle] kind = http needs base_url")
        return make_oracle(oc.base_url, oc, cfg)
    if not spec.startswith("mock"):
        raise ConfigError(f"unknown oracle {spec!r}")
    variant = spec.split(":", 1)[1] if ":" in spec else "truthful"
    failure = oc.failure
    if variant == "fail":
        failure = "always"
    elif variant.startswith("every="):
        failure = "every:" + variant.split("=", 1)[1]
    elif variant != "truthful":
        raise ConfigError(f"unknown mock oracle {spec!r}")
    table = load_mock_scores(cfg.path(oc.mock_scores)) if oc.mock_scores else {}
    if not table and failure != "always":
        raise ConfigError("mock oracle needs hidden scores (--mock-scores)")
    if set(table) <= {"*"}:
        return MockOracle(MockOracleSpec(table.get("*", {}), failure))
    # one oracle per topic; call ordinals are counted per topic
    shared = table.get("*", {})
    return {t: MockOracle(MockOracleSpec({**shared, **m}, failure))
            for t, m in table.items() if t != "*"}


def run_rerank(run: Run, topics, docs, mode: str, rc: RerankConfig, oracle, tokenizer: str,
               tag: str) -> Run:
    """``oracle`` may be a mapping of topic id to oracle; topics without one are left as is."""
    if isinstance(oracle, dict):
        out = Run(tag)
        for topic_id in run.topic_ids():
            part = Run(run.tag, {topic_id: run.topics[topic_id]})
            if topic_id in oracle:
                part = run_rerank(part, topics, docs, mode, rc, oracle[topic_id], tokenizer, tag)
            else:
                log.warning("topic %s: no mock scores, left unchanged", topic_id)
            out.topics[topic_id] = part.topics[topic_id]
        return out
    if mode == "pointwise":
        return rerank_pointwise(run, oracle, rc.depth, topics, docs, tag)
    if mode == "tournament":
        return rerank_tournament(run, topics, docs, oracle, rc, tokenizer, tag)
    if mode == "listwise":
        return rerank_listwise(run, topics, docs, oracle, rc.depth, rc.passage_tokens, tokenizer, tag)
    raise ConfigError(f"unknown rerank mode {mode!r}; choose from {MODES}")


def cmd_rerank(run_path, topics_path, corpus_path, out_run, cfg: PipelineConfig, oracle_spec: str,
               tag=None) -> int:
    run = read_run(run_path)
    topics = read_topics(topics_path)
    docs = read_documents(corpus_path)
    r = cfg.rerank
    rc = RerankConfig(r.depth, r.top_sorted, r.heap_arity, r.passage_tokens)
    oracle = make_oracle(oracle_spec, cfg.oracle, cfg)
    mode = r.mode if r.mode in MODES else "tournament"
    out = run_rerank(run, topics, docs, mode, rc, oracle, cfg.window.tokenizer,
                     tag or f"{run.tag}.{mode}")
    write_run(out, out_run)
    print(f"reranked top {rc.depth} of {len(out.topics)} topics ({mode}) -> {out_run}")
    return 0


def cmd_eval(run_path, qrels_path, cfg: PipelineConfig, as_json=False, figure=None) -> int:
    run = read_run(run_path)
    qrels = read_qrels(qrels_path)
    e = cfg.eval
    results = evaluate(run, qrels, e.k_ndcg, e.k_recall, e.gain)
    if as_json:
        print(json.dumps(to_json(results, run.tag), indent=2, sort_keys=True))
    else:
        print(format_table(results))
    if figure:
        from .report import plot_metrics

        plot_metrics(results, figure, run.tag)
    return 0


def cmd_pipeline(cfg: PipelineConfig, out_dir, threads: int = 1) -> int:
    """Embed (synthetic), index, search, optionally fuse and rerank, then evaluate."""
    p = cfg.pipeline
    if not p.corpus or not p.topics:
        raise ConfigError("[pipeline] needs corpus and topics")
    out = Path(out_dir)
    runs_dir = out / "runs"
    runs_dir.mkdir(parents=True, exist_ok=True)
    corpus, topics_path = cfg.path(p.corpus), cfg.path(p.topics)

    emb = out / "embeddings.lfv"
    cmd_embed(corpus, emb, cfg)
    cmd_index(corpus, emb, out / "index", cfg, threads)
    produced = [runs_dir / "search.trec"]
    cmd_search(out / "index", topics_path, produced[0], cfg, threads)

    if cfg.fusion.runs:
        fused = runs_dir / "fused.trec"
        cmd_fuse([str(produced[0])] + [str(cfg.path(r)) for r in cfg.fusion.runs], fused, cfg)
        produced.append(fused)

    if cfg.rerank.mode != "none":
        oc = cfg.oracle
        spec = "http" if oc.kind == "http" else "mock:truthful"
        reranked = runs_dir / f"rerank.{cfg.rerank.mode}.trec"
        cmd_rerank(produced[-1], topics_path, corpus, reranked, cfg, spec)
        produced.append(reranked)

    if p.qrels:
        qrels = read_qrels(cfg.path(p.qrels))
        eval_dir = out / "eval"
        eval_dir.mkdir(exist_ok=True)
        summary = {}
        for run_path in produced:
            run = read_run(run_path)
            results = evaluate(run, qrels, cfg.eval.k_ndcg, cfg.eval.k_recall, cfg.eval.gain)
            summary[run_path.stem] = results
            (eval_dir / f"{run_path.stem}.json").write_text(
                json.dumps(to_json(results, run.tag), indent=2, sort_keys=True) + "\n")
            (eval_dir / f"{run_path.stem}.txt").write_text(format_table(results) + "\n")
            print(f"{run_path.stem}: " + "  ".join(f"{r.name}={r.mean:.4f}" for r in results))
        if cfg.eval.figure:
            from .report import plot_metrics, plot_run_summary

            fig_dir = out / "figures"
            fig_dir.mkdir(exist_ok=True)
            for name, results in summary.items():
                plot_metrics(results, fig_dir / f"{name}.png", name)
            plot_run_summary(summary, fig_dir / "summary.png")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _window_args(p):
    p.add_argument("--window", type=int, help=f"passage window in tokens {_dflt(WindowSection, 'window')}")
    p.add_argument("--stride", type=int, help=f"window stride in tokens {_dflt(WindowSection, 'stride')}")
    p.add_argument("--tokenizer", help=f"tokenizer name {_dflt(WindowSection, 'tokenizer')}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="clirpipe", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("--config", help="TOML configuration file; flags override its values")
    ap.add_argument("--threads", type=int, default=1, help="worker threads; never changes output (default: 1)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("embed", help="write synthetic token embeddings for every passage")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dim", type=int, help=f"embedding dimension {_dflt(EmbedSection, 'dim')}")
    p.add_argument("--seed", type=int, help=f"embedding seed {_dflt(EmbedSection, 'seed')}")
    _window_args(p)

    p = sub.add_parser("index", help="build a quantized late-interaction index")
    p.add_argument("--corpus", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)
    _window_args(p)
    p.add_argument("--k", type=int, help="number of centroids; 0 = 2^ceil(log2(sqrt(tokens))) (default: 0)")
    p.add_argument("--pool-factor", type=int, help=f"token pooling factor, 2 halves the index {_dflt(IndexSection, 'pool_factor')}")
    p.add_argument("--seed", type=int, help=f"training seed {_dflt(IndexSection, 'seed')}")
    p.add_argument("--sample-size", type=int, help=f"centroid training sample {_dflt(IndexSection, 'sample_size')}")
    p.add_argument("--store-raw", action="store_true", default=None, help="also keep unquantized vectors for --exact search")

    p = sub.add_parser("search", help="retrieve passages and emit a MaxP document run")
    p.add_argument("--index", required=True)
    p.add_argument("--topics", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k-passages", type=int, help=f"passages retrieved per topic {_dflt(SearchSection, 'k_passages')}")
    p.add_argument("--nprobe", help=f"centroids probed per query token, or 'max' {_dflt(SearchSection, 'nprobe')}")
    p.add_argument("--exact", action="store_true", default=None, help="score with unquantized vectors when stored")
    p.add_argument("--doc-depth", type=int, help=f"documents kept per topic {_dflt(SearchSection, 'doc_depth')}")
    p.add_argument("--query-embeddings", help="query embeddings file keyed by topic id")
    p.add_argument("--tag", help="run tag (default: derived from the configuration)")

    p = sub.add_parser("fuse", help="fuse several TREC runs")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=FUSERS, help=f"fusion method {_dflt(FusionSection, 'method')}")
    p.add_argument("--k-rrf", type=float, help=f"reciprocal rank constant {_dflt(FusionSection, 'k_rrf')}")
    p.add_argument("--tag")

    p = sub.add_parser("rerank", help="rerank the head of a run with an oracle")
    p.add_argument("--run", required=True)
    p.add_argument("--topics", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=MODES, help="pointwise | tournament | listwise (default: tournament)")
    p.add_argument("--depth", type=int, help=f"head size {_dflt(RerankSection, 'depth')}")
    p.add_argument("--top-sorted", type=int, help=f"positions fully ordered by heapsort {_dflt(RerankSection, 'top_sorted')}")
    p.add_argument("--arity", type=int, help=f"heap arity {_dflt(RerankSection, 'heap_arity')}")
    p.add_argument("--passage-tokens", type=int, help=f"tokens per oracle passage {_dflt(RerankSection, 'passage_tokens')}")
    p.add_argument("--oracle", help="mock:truthful | mock:fail | mock:every=N | http(s)://base-url (default: mock:truthful)")
    p.add_argument("--mock-scores", help="JSON of id -> hidden score, optionally nested under topic ids")
    p.add_argument("--auth-env", help=f"env var with the bearer token {_dflt(OracleSection, 'auth_token_env')}")
    p.add_argument("--timeout", type=float, help=f"seconds per request {_dflt(OracleSection, 'timeout')}")
    p.add_argument("--max-retries", type=int, help=f"retries on transport errors {_dflt(OracleSection, 'max_retries')}")
    p.add_argument("--rate-limit", type=float, help=f"calls per second, 0 = unlimited {_dflt(OracleSection, 'rate_limit')}")
    p.add_argument("--tag")

    p = sub.add_parser("eval", help="nDCG and recall of a run against qrels")
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--json", action="store_true", help="print JSON instead of a table")
    p.add_argument("--k-ndcg", type=int, help=f"nDCG cutoff {_dflt(EvalSection, 'k_ndcg')}")
    p.add_argument("--k-recall", type=int, help=f"recall cutoff {_dflt(EvalSection, 'k_recall')}")
    p.add_argument("--gain", choices=("exponential", "linear"), help=f"gain function {_dflt(EvalSection, 'gain')}")
    p.add_argument("--figure", help="also render a per-topic bar chart to this path")

    p = sub.add_parser("pipeline", help="run a declared recipe end to end")
    p.add_argument("recipe", help="TOML recipe (same schema as --config)")
    p.add_argument("--out", required=True)

    for name in ("index", "search", "pipeline"):
        # also accepted after the subcommand; SUPPRESS keeps the global value otherwise
        sub.choices[name].add_argument("--threads", type=int, default=argparse.SUPPRESS,
                                       help="worker threads (default: 1)")
    return ap


def _apply_flags(cfg: PipelineConfig, args) -> None:
    def set_(section, name, value):
        if value is not None:
            setattr(getattr(cfg, section), name, value)

    g = vars(args)
    for name in ("window", "stride", "tokenizer"):
        set_("window", name, g.get(name))
    if args.command == "embed":
        set_("embed", "dim", g.get("dim"))
        set_("embed", "seed", g.get("seed"))
    if args.command == "index":
        for name in ("k", "pool_factor", "seed", "sample_size", "store_raw"):
            set_("index", name, g.get(name))
    if args.command == "search":
        for name in ("k_passages", "exact", "doc_depth"):
            set_("search", name, g.get(name))
        nprobe = g.get("nprobe")
        if nprobe is not None:
            cfg.search.nprobe = 0 if nprobe == "max" else int(nprobe)
    if args.command == "fuse":
        set_("fusion", "method", g.get("method"))
        set_("fusion", "k_rrf", g.get("k_rrf"))
    if args.command == "rerank":
        set_("rerank", "mode", g.get("mode"))
        set_("rerank", "depth", g.get("depth"))
        set_("rerank", "top_sorted", g.get("top_sorted"))
        set_("rerank", "heap_arity", g.get("arity"))
        set_("rerank", "passage_tokens", g.get("passage_tokens"))
        if g.get("mock_scores"):
            cfg.oracle.mock_scores = str(Path(g["mock_scores"]).resolve())
        set_("oracle", "auth_token_env", g.get("auth_env"))
        set_("oracle", "timeout", g.get("timeout"))
        set_("oracle", "max_retries", g.get("max_retries"))
        set_("oracle", "rate_limit", g.get("rate_limit"))
    if args.command == "eval":
        set_("eval", "k_ndcg", g.get("k_ndcg"))
        set_("eval", "k_recall", g.get("k_recall"))
        set_("eval", "gain", g.get("gain"))


def _dispatch(args) -> int:
    if args.command == "pipeline":
        cfg = load_config(args.recipe)
        return cmd_pipeline(cfg, args.out, args.threads)
    cfg = load_config(args.config) if args.config else PipelineConfig()
    _apply_flags(cfg, args)
    if args.command == "embed":
        return cmd_embed(args.corpus, args.out, cfg)
    if args.command == "index":
        return cmd_index(args.corpus, args.embeddings, args.out, cfg, args.threads)
    if args.command == "search":
        return cmd_search(args.index, args.topics, args.out, cfg, args.threads,
                          args.query_embeddings, args.tag)
    if args.command == "fuse":
        return cmd_fuse(args.runs, args.out, cfg, args.tag)
    if args.command == "rerank":
        spec = args.oracle or ("http" if cfg.oracle.kind == "http" else "mock:truthful")
        return cmd_rerank(args.run, args.topics, args.corpus, args.out, cfg, spec, args.tag)
    if args.command == "eval":
        return cmd_eval(args.run, args.qrels, cfg, args.json, args.figure)
    raise ConfigError(f"unknown command {args.command}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except (EngineError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except AssertionError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""``linkrank`` command line: crawl, docrepr, rank, train, evaluate, loo, stats.

JSON goes to stdout (always with ``schema_version``), tables and logs go to
stderr.  Each invocation appends one manifest line to ``run.manifest_path``.

Exit codes: 0 ok, 2 bad input, 3 empty result, 4 backend failure,
5 internal error, 130 interrupted.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import mimetypes
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

from . import __version__
from .config import ConfigError, load_config
from .corpus import DatasetError, compute_stats, load_dataset, split_dataset
from .docrepr import (
    ExtractionError,
    RendererError,
    UnsupportedFormat,
    make_layout_provider,
    represent,
    strip_layout,
)
from .embedder import EmbeddingError, embed_documents, embed_query, make_backend
from .experiments import (
    ExperimentError,
    embed_corpus,
    identity_heads,
    query_results,
    represent_bundle,
    represent_dataset,
    run_leave_one_out,
)
from .fetcher import (
    CrawlError,
    FetchedResource,
    FetchFailure,
    FetchPolicy,
    ResponseCache,
    crawl_one_hop,
    load_bundle,
    save_bundle,
)
from .metrics import evaluate_results
from .ranker import RankingError, rank, top_k
from .report import k_table_text, loo_table, report_table, write_loo_dir, write_report_dir
from .trainer import (
    TrainConfig,
    build_training_examples,
    load_heads,
    save_heads,
    train,
)
from .urls import is_absolute_http, normalize_url

log = logging.getLogger("linkrank")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_INPUT, EXIT_EMPTY, EXIT_BACKEND, EXIT_INTERNAL = 0, 2, 3, 4, 5
EXIT_INTERRUPTED = 130


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, CliError):
        return exc.code
    if isinstance(exc, (EmbeddingError, RendererError)):
        return EXIT_BACKEND
    if isinstance(exc, (ConfigError, DatasetError, CrawlError, ExtractionError, UnsupportedFormat,
                        ExperimentError, RankingError, OSError, ValueError)):
        return EXIT_INPUT
    return EXIT_INTERNAL


# -- helpers --------------------------------------------------------------------------


def _finite(obj):
    """NaN/inf are not JSON; emit them as null."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {str(k): _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


def _emit(payload: dict) -> None:
    doc = {"schema_version": SCHEMA_VERSION, **payload}
    sys.stdout.write(json.dumps(_finite(doc), sort_keys=True, indent=2, ensure_ascii=False) + "\n")
    sys.stdout.flush()


def _sha256_path(path: Path) -> str:
    h = hashlib.sha256()
    if path.is_dir():
        for f in sorted(p for p in path.rglob("*") if p.is_file()):
            h.update(str(f.relative_to(path)).encode())
            h.update(f.read_bytes())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


class Run:
    """Collects the manifest for one invocation."""

    def __init__(self, command: str, argv: list[str], cfg: dict):
        self.command = command
        self.argv = argv
        self.cfg = cfg
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        self.started = datetime.now(timezone.utc).isoformat()

    def add_input(self, ref) -> None:
        path = Path(ref)
        if path.exists():
            self.inputs[str(path)] = _sha256_path(path)
        else:
            self.inputs[str(ref)] = hashlib.sha256(str(ref).encode()).hexdigest()

    def add_output(self, path) -> None:
        self.outputs.append(str(path))

    def write_manifest(self, exit_code: int) -> None:
        target = self.cfg["run"].get("manifest_path")
        if not target:
            return
        record = {
            "schema_version": SCHEMA_VERSION,
            "command": self.command,
            "argv": self.argv,
            "config": self.cfg,
            "input_hashes": self.inputs,
            "output_paths": self.outputs,
            "started_at": self.started,
            "finished_at": datetime.now(timezone.utc).isoformat(),
            "exit_code": exit_code,
            "tool_version": __version__,
        }
        path = Path(target)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(_finite(record), sort_keys=True) + "\n")


def _policy(cfg) -> FetchPolicy:
    return FetchPolicy.from_mapping(cfg["fetch"])


def _cache(cfg) -> Optional[ResponseCache]:
    root = cfg["run"].get("cache_dir")
    return ResponseCache(root) if root else None


def _layout_provider(cfg):
    r = cfg["renderer"]
    return make_layout_provider(r["provider"], r.get("endpoint") or None, r.get("on_error", "fallback"))


def _backend(cfg):
    e = cfg["embedder"]
    return make_backend(e["backend"], int(e["dim"]), e.get("endpoint") or None,
                        int(e["max_tokens"]), int(e.get("seed", 0)))


def _train_config(cfg) -> TrainConfig:
    return TrainConfig.from_mapping(cfg["train"])


def _renderer_for_links(cfg):
    # rendered link discovery only makes sense with a live browser
    return _layout_provider(cfg) if cfg["renderer"]["provider"] != "deterministic" else None


def _dataset(run: Run, path):
    run.add_input(Path(path) / "publications.jsonl")
    run.add_input(Path(path) / "links.jsonl")
    return load_dataset(path)


def _embedded_dataset(run: Run, cfg, dataset_dir, layout: bool):
    pubs, labels = _dataset(run, dataset_dir)
    run.add_input(Path(dataset_dir) / "bundles")
    represented = represent_dataset(dataset_dir, pubs, labels, _layout_provider(cfg))
    embedded = embed_corpus(represented, _backend(cfg), layout=layout)
    ev = cfg["eval"]
    split = split_dataset(pubs, tuple(ev["ratios"]), int(ev["split_seed"]))
    return pubs, embedded, split


# -- subcommands ----------------------------------------------------------------------


def cmd_crawl(args, cfg, run: Run) -> int:
    policy, cache = _policy(cfg), _cache(cfg)
    renderer = _renderer_for_links(cfg)
    if bool(args.seed) == bool(args.dataset):
        raise CliError("give exactly one of SEED or --dataset")
    if args.seed:
        if not is_absolute_http(args.seed):
            raise CliError(f"seed must be an absolute http(s) URL: {args.seed!r}")
        if not args.out:
            raise CliError("--out is required with a single seed")
        jobs = [(args.seed, Path(args.out))]
    else:
        pubs, _ = _dataset(run, args.dataset)
        out_root = Path(args.out) if args.out else Path(args.dataset) / "bundles"
        jobs = [
            ((args.doi_resolver.rstrip("/") + "/" + p.doi) if args.doi_resolver else p.landing_url,
             out_root / p.id)
            for p in pubs
        ]

    done, failed = [], []
    try:
        for seed, out in jobs:
            run.add_input(seed)
            try:
                bundle = crawl_one_hop(seed, policy, cache, renderer)
            except CrawlError as exc:
                if args.seed:
                    raise
                log.error("%s", exc)
                failed.append({"seed": seed, "error": str(exc)})
                continue
            index = save_bundle(bundle, out)
            run.add_output(index)
            done.append({"seed": seed, "index": str(index), "n_links": len(bundle.links),
                         "n_failures": len(bundle.failures())})
    except KeyboardInterrupt:
        # everything in ``done`` is already on disk
        _emit({"command": "crawl", "bundles": done, "failed": failed, "interrupted": True})
        return EXIT_INTERRUPTED
    _emit({"command": "crawl", "bundles": done, "failed": failed})
    return EXIT_OK if done else EXIT_INPUT


def _guess_media_type(path: Path) -> str:
    guessed, _ = mimetypes.guess_type(path.name)
    return guessed or "application/octet-stream"


def cmd_docrepr(args, cfg, run: Run) -> int:
    path = Path(args.input)
    run.add_input(path)
    if path.is_dir():
        bundle = load_bundle(path)
        resource = bundle.seed
        if args.url:
            doc = bundle.documents.get(args.url)
            if doc is None or isinstance(doc, FetchFailure):
                raise CliError(f"{args.url} is not a fetched document of this bundle")
            resource = doc
    else:
        if not args.url:
            raise CliError("--url is required when converting a single file")
        resource = FetchedResource(
            requested_url=args.url, final_url=args.url,
            media_type=args.media_type or _guess_media_type(path),
            body=path.read_bytes(), status=200, fetched_at="",
        )
    rep = represent(resource, _layout_provider(cfg), layout=not args.no_layout)
    # the representation object keeps its exact canonical encoding
    sys.stdout.write('{"representation":' + rep.to_json()
                     + f',"schema_version":{SCHEMA_VERSION}}}\n')
    return EXIT_OK


def cmd_rank(args, cfg, run: Run) -> int:
    target = args.target
    run.add_input(target)
    if Path(target).is_dir():
        bundle = load_bundle(target)
    elif is_absolute_http(target):
        bundle = crawl_one_hop(target, _policy(cfg), _cache(cfg), _renderer_for_links(cfg))
    else:
        raise CliError(f"not a bundle directory or URL: {target!r}")

    backend = _backend(cfg)
    qh = dh = None
    if args.heads:
        run.add_input(args.heads)
        qh, dh = load_heads(args.heads)
        if qh.dim != backend.dim:
            raise CliError(f"heads dimension {qh.dim} does not match backend dimension {backend.dim}")

    landing, reps = represent_bundle(bundle, _layout_provider(cfg))
    layout = not args.no_layout
    if not layout:
        landing = strip_layout(landing)
        reps = [(l, strip_layout(r) if r is not None else None) for l, r in reps]
    self_url = normalize_url(bundle.seed.final_url)
    items = [(l, r) for l, r in reps if r is not None and normalize_url(l.url) != self_url]
    skipped = tuple(l.url for l, r in reps if r is None)
    if not items:
        raise CliError("no fetched candidate documents to rank", EXIT_EMPTY)

    query = embed_query(landing, backend, qh)
    docs = embed_documents(items, backend, dh)
    ranked = rank(query, [(l.url, v) for (l, _), v in zip(items, docs)],
                  query_url=bundle.seed.final_url, produced_with_layout=layout, skipped=skipped)
    if args.k is not None:
        ranked = top_k(ranked, args.k)
    _emit({"command": "rank", "ranked_list": ranked.to_json()})
    return EXIT_OK


def cmd_train(args, cfg, run: Run) -> int:
    _, embedded, split = _embedded_dataset(run, cfg, args.dataset, layout=not args.no_layout)
    config = _train_config(cfg)
    train_ids, val_ids = set(split.train), set(split.validation)
    examples = build_training_examples([p for p in embedded if p.publication_id in train_ids], config)
    if not examples:
        raise CliError("training split produced no examples", EXIT_EMPTY)
    qh, dh, tlog = train(examples, [p for p in embedded if p.publication_id in val_ids], config)
    out = save_heads(args.out, qh, dh)
    run.add_output(out)
    _emit({"command": "train", "heads": str(out), "heads_sha256": _sha256_path(out),
           "log": tlog.to_json()})
    return EXIT_OK


def cmd_evaluate(args, cfg, run: Run) -> int:
    _, embedded, split = _embedded_dataset(run, cfg, args.dataset, layout=not args.no_layout)
    if args.split == "all":
        selected = list(embedded)
    else:
        wanted = set(split.part(args.split))
        selected = [p for p in embedded if p.publication_id in wanted]
    if not selected:
        raise CliError(f"split {args.split!r} is empty", EXIT_EMPTY)
    if args.heads:
        run.add_input(args.heads)
        heads = load_heads(args.heads)
    else:
        heads = identity_heads(selected[0].query.shape[0])
    results, _ = query_results(selected, heads)
    report = evaluate_results(results, cfg["eval"]["aggregation"])
    sys.stderr.write(report_table(report) + "\n" + k_table_text(report.k_table))
    if args.report_dir:
        for p in write_report_dir(report, args.report_dir):
            run.add_output(p)
    _emit({"command": "evaluate", "split": args.split, "layout_included": not args.no_layout,
           "report": report.to_json()})
    return EXIT_OK


def cmd_loo(args, cfg, run: Run) -> int:
    _, embedded, split = _embedded_dataset(run, cfg, args.dataset, layout=not args.no_layout)
    result = run_leave_one_out(embedded, split, _train_config(cfg))
    sys.stderr.write(loo_table(result))
    if args.report_dir:
        for p in write_loo_dir(result, args.report_dir):
            run.add_output(p)
    _emit({"command": "loo", "report": result.to_json()})
    return EXIT_OK


def cmd_stats(args, cfg, run: Run) -> int:
    pubs, labels = _dataset(run, args.dataset)
    stats = compute_stats(pubs, labels, sample_sd=args.sample_sd)
    _emit({"command": "stats", "stats": stats.to_json()})
    return EXIT_OK


# -- argument parsing -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="linkrank", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="TOML or JSON config file")
    parser.add_argument("--manifest", help="append the run manifest here (run.manifest_path)")
    parser.add_argument("--cache", help="on-disk response cache directory (run.cache_dir)")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def embedding_flags(p):
        p.add_argument("--backend", choices=("hash", "remote"))
        p.add_argument("--dim", type=int)
        p.add_argument("--endpoint", help="remote embedding endpoint")
        p.add_argument("--renderer", choices=("deterministic", "external-renderer"))
        p.add_argument("--no-layout", action="store_true", help="strip bounding boxes first")

    def dataset_flags(p):
        p.add_argument("--dataset", required=True,
                       help="directory with publications.jsonl, links.jsonl and bundles/")
        p.add_argument("--split-seed", type=int)
        embedding_flags(p)

    def train_flags(p):
        p.add_argument("--lr", type=float, dest="learning_rate")
        p.add_argument("--max-epochs", type=int)
        p.add_argument("--patience", type=int)
        p.add_argument("--train-seed", type=int, dest="rng_seed")

    p = sub.add_parser("crawl", help="one-hop crawl of a seed URL or every publication of a dataset")
    p.add_argument("seed", nargs="?")
    p.add_argument("--out", help="bundle directory (single seed) or bundles root (dataset)")
    p.add_argument("--dataset")
    p.add_argument("--doi-resolver", help="crawl <resolver>/<doi> instead of landing_url")
    p.set_defaults(func=cmd_crawl)

    p = sub.add_parser("docrepr", help="fetched file or bundle document to representation JSON")
    p.add_argument("input", help="file, or a bundle directory")
    p.add_argument("--url", help="source URL of the file / document within the bundle")
    p.add_argument("--media-type")
    p.add_argument("--no-layout", action="store_true")
    p.add_argument("--renderer", choices=("deterministic", "external-renderer"))
    p.set_defaults(func=cmd_docrepr)

    p = sub.add_parser("rank", help="rank the links of a saved bundle or a live seed URL")
    p.add_argument("target", help="bundle directory or seed URL")
    p.add_argument("--k", type=int)
    p.add_argument("--heads", help="trained projection heads JSON")
    embedding_flags(p)
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("train", help="train projection heads on the train split")
    dataset_flags(p)
    train_flags(p)
    p.add_argument("--out", required=True, help="heads JSON to write")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="metrics on a split")
    dataset_flags(p)
    p.add_argument("--split", choices=("train", "validation", "test", "all"), default="test")
    p.add_argument("--heads", help="projection heads JSON (identity when omitted)")
    p.add_argument("--aggregation", choices=("macro", "micro"))
    p.add_argument("--report-dir", help="write tables, k-sweep CSV and figures here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("loo", help="leave-one-publisher-out protocol")
    dataset_flags(p)
    train_flags(p)
    p.add_argument("--report-dir")
    p.set_defaults(func=cmd_loo)

    p = sub.add_parser("stats", help="dataset statistics")
    p.add_argument("--dataset", required=True)
    p.add_argument("--sample-sd", action="store_true", help="n-1 standard deviations")
    p.set_defaults(func=cmd_stats)
    return parser


def _overrides(args) -> dict:
    get = lambda name: getattr(args, name, None)  # noqa: E731
    return {
        "run": {"manifest_path": args.manifest, "cache_dir": args.cache},
        "renderer": {"provider": get("renderer")},
        "embedder": {"backend": get("backend"), "dim": get("dim"), "endpoint": get("endpoint")},
        "eval": {"split_seed": get("split_seed"), "aggregation": get("aggregation")},
        "train": {"learning_rate": get("learning_rate"), "max_epochs": get("max_epochs"),
                  "patience": get("patience"),
                  "rng_seed": get("rng_seed")},
    }


def main(argv: Optional[list[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = load_config(args.config, overrides=_overrides(args))
    except ConfigError as exc:
        print(f"linkrank: {exc}", file=sys.stderr)
        return EXIT_INPUT
    run = Run(args.command, argv, cfg)
    if args.config:
        run.add_input(args.config)
    code = EXIT_INTERNAL
    started = time.monotonic()
    try:
        code = args.func(args, cfg, run)
    except KeyboardInterrupt:
        code = EXIT_INTERRUPTED
    except Exception as exc:  # mapped to an exit code, traceback only with -vv
        code = _exit_code(exc)
        log.debug("failure", exc_info=True)
        print(f"linkrank {args.command}: {exc}", file=sys.stderr)
    finally:
        run.write_manifest(code)
        log.info("%s finished in %.2fs with exit code %d", args.command,
                 time.monotonic() - started, code)
    return code


if __name__ == "__main__":
    sys.exit(main())

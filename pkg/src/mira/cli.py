"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 configuration error, 3 provider failure.
"""

from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import os
import random
import sys
from pathlib import Path
from typing import Any, Sequence, TextIO

import numpy as np

from .core import PipelineConfig, load_config, text_digest
from .errors import ConfigError, CorruptIndexError, MiraError, ProviderError, RecordParseError
from .metrics import evaluate, load_corpus
from .pipeline import (
    ManifestEntry,
    Pipeline,
    Providers,
    QueryInput,
    add_entries,
    promote_cached,
    read_manifest,
)
from .store import VectorIndex
from .websearch import iter_cached

log = logging.getLogger("mira")

VERBS = ("index-build", "index-add", "query", "repl", "eval", "serve", "promote-cache", "trace-export")
ENV_CONFIG = "MIRA_CONFIG"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(f"{self.prog}: {message}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help=f"config file (default: ${ENV_CONFIG})")
    p.add_argument("--index", help="vector index file")
    p.add_argument("--seed", type=int, default=0, help="seed for any randomness")
    p.add_argument("--out", help="output file")
    return p


def _query_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--image", help="input image file")
    p.add_argument("--text", help="query text")
    p.add_argument("--k-text", type=int, dest="k_text")
    p.add_argument("--k-image", type=int, dest="k_image")
    p.add_argument("--alpha", type=float)
    p.add_argument("--no-online", action="store_true", dest="no_online")
    p.add_argument("--no-offline", action="store_true", dest="no_offline")
    modes = p.add_mutually_exclusive_group()
    modes.add_argument("--text-only", action="store_true", dest="text_only")
    modes.add_argument("--vision-only", action="store_true", dest="vision_only")
    return p


def build_parser() -> argparse.ArgumentParser:
    common, qflags = _common(), _query_flags()
    parser = _Parser(prog="mira", description="Multimodal retrieval-augmented answering.")
    sub = parser.add_subparsers(dest="verb", metavar="VERB", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("index-build", parents=[common], help="build a new index from a JSONL manifest")
    p.add_argument("--corpus", required=True, help="JSONL manifest of records")

    p = sub.add_parser("index-add", parents=[common], help="add records to an index")
    p.add_argument("--corpus", help="JSONL manifest of records")
    p.add_argument("--text", help="add one text record")
    p.add_argument("--image", help="add one image record")

    sub.add_parser("query", parents=[common, qflags], help="answer one query and print the record")
    sub.add_parser("repl", parents=[common, qflags], help="answer queries read line by line from stdin")

    p = sub.add_parser("eval", parents=[common], help="score an evaluation corpus")
    p.add_argument("--corpus", required=True, help="tab-separated evaluation pairs")
    p.add_argument("--threshold", type=float, default=0.5, help="judge score cutoff for details")

    p = sub.add_parser("serve", parents=[common, qflags], help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)

    sub.add_parser("promote-cache", parents=[common], help="copy cached online results into the index")
    sub.add_parser("trace-export", parents=[common, qflags], help="export the attention trace of a query")
    return parser


def _setup_logging() -> None:
    level = os.environ.get("MIRA_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="ts=%(asctime)s level=%(levelname)s logger=%(name)s msg=%(message)s",
        stream=sys.stderr,
    )


def load_settings(args: argparse.Namespace) -> tuple[PipelineConfig, Path]:
    """Config from --config, else $MIRA_CONFIG, else defaults; plus the base dir for relative paths."""
    path = args.config or os.environ.get(ENV_CONFIG)
    if path:
        cfg, base = load_config(path), Path(path).resolve().parent
    else:
        cfg, base = PipelineConfig(), Path.cwd()
    changes: dict[str, Any] = {}
    for flag in ("k_text", "k_image", "alpha"):
        value = getattr(args, flag, None)
        if value is not None:
            changes[flag] = value
    if getattr(args, "no_online", False):
        changes["online_enabled"] = False
    if getattr(args, "no_offline", False):
        changes["offline_enabled"] = False
    if getattr(args, "text_only", False):
        changes.update(text_only=True, vision_only=False)
    if getattr(args, "vision_only", False):
        changes.update(vision_only=True, text_only=False)
    if changes:
        cfg = cfg.with_overrides(**changes)
    return cfg, base


def _load_index(path: str | None, required: bool = False) -> VectorIndex | None:
    if path is None:
        if required:
            raise UsageError("--index is required")
        return None
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"index file not found: {p}", "index")
    return VectorIndex.load(p)


def _pipeline(args: argparse.Namespace, providers: Providers | None = None) -> Pipeline:
    cfg, base = load_settings(args)
    index = _load_index(args.index) if cfg.offline_enabled else None
    return Pipeline.from_config(cfg, index=index, base_dir=base, providers=providers)


def _need_text(args: argparse.Namespace) -> str:
    if not args.text or not args.text.strip():
        raise UsageError("--text is required")
    return args.text


def cmd_index_build(args: argparse.Namespace, out: TextIO) -> int:
    if not args.index:
        raise UsageError("--index is required")
    cfg, base = load_settings(args)
    providers = Providers.from_config(cfg, base)
    idx = VectorIndex(cfg.embed_dim)
    add_entries(idx, read_manifest(args.corpus), providers.encoders)
    idx.save(args.index)
    counts = idx.count_by_modality
    out.write(f"built {len(idx)} records (text={counts['text']}, image={counts['image']}) -> {args.index}\n")
    return 0


def cmd_index_add(args: argparse.Namespace, out: TextIO) -> int:
    if not args.index:
        raise UsageError("--index is required")
    if not (args.corpus or args.text or args.image):
        raise UsageError("index-add needs --corpus, --text or --image")
    cfg, base = load_settings(args)
    enc = Providers.from_config(cfg, base).encoders
    path = Path(args.index)
    idx = VectorIndex.load(path) if path.exists() else VectorIndex(cfg.embed_dim)
    entries = read_manifest(args.corpus) if args.corpus else []
    if args.text:
        entries.append(ManifestEntry(f"txt-{text_digest(args.text)[:12]}", text=args.text))
    if args.image:
        img = Path(args.image)
        entries.append(ManifestEntry(img.stem, image_path=img))
    added = add_entries(idx, entries, enc)
    idx.save(path)
    out.write(f"added {len(added)} records ({', '.join(added)}); index now holds {len(idx)}\n")
    return 0


def cmd_query(args: argparse.Namespace, out: TextIO) -> int:
    text = _need_text(args)
    pipe = _pipeline(args)
    result = pipe.run(QueryInput.from_path(text, args.image))
    out.write(result.serialized)
    if args.out:
        Path(args.out).write_text(result.serialized, encoding="utf-8")
    return 0


def cmd_repl(args: argparse.Namespace, out: TextIO, inp: TextIO | None = None) -> int:
    """One query per line; ``@path rest of question`` attaches an image. ``:quit`` ends."""
    pipe = _pipeline(args)
    stream = inp if inp is not None else sys.stdin
    for raw in stream:
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line in (":quit", ":q"):
            break
        image = None
        if line.startswith("@"):
            image, _, line = line[1:].partition(" ")
            line = line.strip()
            if not line:
                out.write("error: missing question after image path\n")
                continue
        try:
            result = pipe.run(QueryInput.from_path(line, image))
        except (ValueError, ProviderError) as exc:
            out.write(f"error: {exc}\n")
            continue
        rec = result.record
        if rec.is_none:
            out.write("Final: <None>\n")
        else:
            out.write(f"Final: {rec.final}\n")
        ids = list(dict.fromkeys(c.evidence_id for c in rec.citations))
        out.write(f"Citations: {', '.join(ids) if ids else '-'}\n")
        out.flush()
    return 0


def cmd_eval(args: argparse.Namespace, out: TextIO) -> int:
    cfg, base = load_settings(args)
    pairs = load_corpus(args.corpus)
    judge = None
    if cfg.endpoints.get("judge"):
        judge = Providers.from_config(cfg, base).judge_fn()
    report = evaluate(pairs, threshold=args.threshold, judge=judge)
    text = report.render()
    out.write(text)
    if args.out:
        from .plotting import figure_path, plot_report

        Path(args.out).write_text(text, encoding="utf-8")
        plot_report(report, figure_path(args.out))
    return 0


def cmd_serve(args: argparse.Namespace, out: TextIO) -> int:
    import uvicorn

    from .service import create_app

    cfg, base = load_settings(args)
    index = None
    if args.index:
        path = Path(args.index)
        index = VectorIndex.load(path) if path.exists() else VectorIndex(cfg.embed_dim)
    pipe = Pipeline.from_config(cfg, index=index, base_dir=base)
    uvicorn.run(create_app(pipe, args.index), host=args.host, port=args.port, log_level="warning")
    return 0


def cmd_promote_cache(args: argparse.Namespace, out: TextIO) -> int:
    if not args.index:
        raise UsageError("--index is required")
    cfg, base = load_settings(args)
    enc = Providers.from_config(cfg, base).encoders
    path = Path(args.index)
    idx = VectorIndex.load(path) if path.exists() else VectorIndex(cfg.embed_dim)
    cache_dir = Path(cfg.cache_dir) if Path(cfg.cache_dir).is_absolute() else base / cfg.cache_dir
    docs = iter_cached(cache_dir)
    added = promote_cached(idx, docs, enc)
    idx.save(path)
    audit = cache_dir / "promotions.log"
    audit.parent.mkdir(parents=True, exist_ok=True)
    entry = {
        "at": dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds"),
        "index": str(path.resolve()),
        "documents": len(docs),
        "added": added,
    }
    with audit.open("a", encoding="utf-8") as fh:
        fh.write(json.dumps(entry, ensure_ascii=False) + "\n")
    out.write(f"promoted {len(added)} records from {len(docs)} cached responses; audit: {audit}\n")
    return 0


def cmd_trace_export(args: argparse.Namespace, out: TextIO) -> int:
    text = _need_text(args)
    pipe = _pipeline(args)
    result = pipe.run(QueryInput.from_path(text, args.image))
    csv = result.trace.to_csv()
    if args.out:
        from .plotting import figure_path, plot_trace

        Path(args.out).write_text(csv, encoding="utf-8")
        fig = plot_trace(result.trace, figure_path(args.out))
        out.write(f"query_id {result.query_id}: wrote {args.out} and {fig}\n")
    else:
        out.write(csv)
    return 0


COMMANDS = {
    "index-build": cmd_index_build,
    "index-add": cmd_index_add,
    "query": cmd_query,
    "repl": cmd_repl,
    "eval": cmd_eval,
    "serve": cmd_serve,
    "promote-cache": cmd_promote_cache,
    "trace-export": cmd_trace_export,
}


def run(argv: Sequence[str] | None = None, out: TextIO | None = None, err: TextIO | None = None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        args = build_parser().parse_args(list(argv) if argv is not None else None)
    except UsageError as exc:
        err.write(f"{exc}\n")
        return 1
    random.seed(args.seed)
    np.random.seed(args.seed)
    try:
        return COMMANDS[args.verb](args, out)
    except UsageError as exc:
        err.write(f"usage error: {exc}\n")
        return 1
    except (ConfigError, CorruptIndexError) as exc:
        err.write(f"config error: {exc}\n")
        return 2
    except ProviderError as exc:
        err.write(f"provider failure: {exc}\n")
        return 3
    except (ValueError, RecordParseError, OSError) as exc:
        err.write(f"error: {exc}\n")
        return 1
    except MiraError as exc:
        err.write(f"provider failure: {exc}\n")
        return 3


def main(argv: Sequence[str] | None = None) -> int:
    _setup_logging()
    return run(argv)


if __name__ == "__main__":
    sys.exit(main())

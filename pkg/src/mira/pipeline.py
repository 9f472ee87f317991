"""End-to-end wiring: rewrite, encode, retrieve, fuse, then the RTRA chain."""

from __future__ import annotations

import datetime as dt
import hashlib
import json
import logging
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from .core import ImageRef, PipelineConfig, Query, RagBundle, dump_config, sha256_hex
from .encode import EncoderSpec, Encoders, load_payload
from .errors import ConfigError, MiraError, ProviderError
from .fusion import AttentionTrace, FusedEmbedding, fuse_bundle
from .metrics import GeneratorJudge
from .retrieve import RetrievalPlan, retrieve
from .rewrite import FixtureRewriter, HttpRewriter, Rewriter, RewriteResult, rewrite_query
from .rtra import (
    EchoGenerator,
    FixtureGenerator,
    Generator,
    HttpGenerator,
    LexicalFactualScorer,
    NegationCoherenceScorer,
    RewardWeights,
    RtraRecord,
    StageGenerators,
    label_pool,
    reward,
    run_rtra,
    serialize_record,
)
from .store import IndexRecord, VectorIndex
from .websearch import DuckDuckGoProvider, FixtureSearchProvider, OnlineClient, SearchProvider, parse_response

log = logging.getLogger(__name__)

FIXTURE = "fixture:"
TRACE_CACHE = 1024


def _resolve(path: str, base_dir: Path) -> Path:
    p = Path(path).expanduser()
    return p if p.is_absolute() else base_dir / p


def _is_http(url: str) -> bool:
    return url.startswith(("http://", "https://"))


def _bad_endpoint(role: str, url: str) -> ConfigError:
    return ConfigError(f"unsupported endpoint for {role}: {url!r}", f"endpoints.{role}")


def make_rewriter(url: str | None, base_dir: Path) -> Rewriter | None:
    if url is None or url in ("rule", "none"):
        return None
    if url.startswith(FIXTURE):
        return FixtureRewriter(_resolve(url[len(FIXTURE):], base_dir))
    if _is_http(url):
        return HttpRewriter(url)
    raise _bad_endpoint("rewriter", url)


def make_encoder(role: str, modality: str, url: str | None, dim: int) -> EncoderSpec:
    if url is None or url == "reference":
        return EncoderSpec(modality, dim)
    if _is_http(url):
        return EncoderSpec(modality, dim, endpoint=url, kind="external")
    raise _bad_endpoint(role, url)


def make_generator(role: str, url: str | None, base_dir: Path) -> Generator | None:
    if url is None:
        return None
    if url == "echo":
        return EchoGenerator()
    if url.startswith(FIXTURE):
        return FixtureGenerator(_resolve(url[len(FIXTURE):], base_dir))
    if _is_http(url):
        return HttpGenerator(url)
    raise _bad_endpoint(role, url)


def make_search(url: str | None, base_dir: Path) -> SearchProvider | None:
    if url is None or url == "duckduckgo":
        return DuckDuckGoProvider()
    if url == "none":
        return None
    if url.startswith(FIXTURE):
        return FixtureSearchProvider(_resolve(url[len(FIXTURE):], base_dir))
    if _is_http(url):
        return DuckDuckGoProvider(url)
    raise _bad_endpoint("search", url)


@dataclass
class Providers:
    """Everything behind a provider contract."""

    encoders: Encoders
    generators: StageGenerators
    rewriter: Rewriter | None = None
    search: SearchProvider | None = None
    judge: Generator | None = None

    @classmethod
    def from_config(cls, cfg: PipelineConfig, base_dir: str | Path = ".") -> "Providers":
        """Build providers from ``endpoints.<role>`` URLs.

        Accepted forms:

        * ``http(s)://...``: a remote service
        * ``fixture:<path>``: canned answers, relative to ``base_dir``
        * ``echo``: the generator stub
        * ``reference``: the hashing encoders
        * ``duckduckgo`` / ``none``: search
        """
        base = Path(base_dir)
        ep = cfg.endpoints
        encoders = Encoders(
            make_encoder("text_encoder", "text", ep.get("text_encoder"), cfg.embed_dim),
            make_encoder("image_encoder", "image", ep.get("image_encoder"), cfg.embed_dim),
        )
        initial = make_generator("generator", ep.get("generator", "echo"), base)
        assert initial is not None
        generators = StageGenerators(
            initial,
            make_generator("rethink", ep.get("rethink"), base),
            make_generator("finalize", ep.get("finalize"), base),
        )
        return cls(
            encoders=encoders,
            generators=generators,
            rewriter=make_rewriter(ep.get("rewriter"), base),
            search=make_search(ep.get("search"), base),
            judge=make_generator("judge", ep.get("judge"), base),
        )

    def judge_fn(self) -> GeneratorJudge | None:
        return GeneratorJudge(self.judge) if self.judge is not None else None


@dataclass(frozen=True)
class QueryInput:
    text: str
    image: bytes | None = None
    image_id: str = "input"
    image_uri: str = ""

    @classmethod
    def from_path(cls, text: str, image_path: str | Path | None) -> "QueryInput":
        if image_path is None:
            return cls(text)
        path = Path(image_path)
        try:
            data = path.read_bytes()
        except OSError as exc:
            raise ValueError(f"cannot read image {path}: {exc}") from exc
        return cls(text, data, path.stem, path.resolve().as_uri())


@dataclass(frozen=True)
class PipelineResult:
    query_id: str
    record: RtraRecord
    bundle: RagBundle
    fused: FusedEmbedding
    rewrite: RewriteResult
    reward: float
    flags: tuple[str, ...]

    @property
    def trace(self) -> AttentionTrace:
        assert self.fused.trace is not None
        return self.fused.trace

    @property
    def serialized(self) -> str:
        return serialize_record(self.record)


def query_id(cfg: PipelineConfig, inp: QueryInput) -> str:
    h = hashlib.sha256()
    h.update(inp.text.encode("utf-8"))
    h.update(b"\0")
    h.update(sha256_hex(inp.image).encode() if inp.image is not None else b"-")
    h.update(b"\0")
    h.update(dump_config(cfg).encode("utf-8"))
    return h.hexdigest()[:16]


class Pipeline:
    """One configured pipeline. ``run`` is safe to call from several threads."""

    def __init__(
        self,
        cfg: PipelineConfig,
        providers: Providers,
        index: VectorIndex | None = None,
        online: OnlineClient | None = None,
    ):
        if index is not None and index.dim != cfg.embed_dim:
            raise ConfigError(f"embed_dim {cfg.embed_dim} does not match index dim {index.dim}", "embed_dim")
        if providers.encoders.dim != cfg.embed_dim:
            raise ConfigError("encoder dimension differs from embed_dim", "embed_dim")
        self.cfg = cfg
        self.providers = providers
        self.index = index
        self.online = online
        self._traces: OrderedDict[str, AttentionTrace] = OrderedDict()
        self._trace_lock = threading.Lock()

    @classmethod
    def from_config(
        cls,
        cfg: PipelineConfig,
        *,
        index: VectorIndex | None = None,
        base_dir: str | Path = ".",
        providers: Providers | None = None,
    ) -> "Pipeline":
        providers = providers or Providers.from_config(cfg, base_dir)
        online = None
        if cfg.online_enabled and providers.search is not None:
            online = OnlineClient(providers.search, cache_dir=_resolve(cfg.cache_dir, Path(base_dir)))
        return cls(cfg, providers, index, online)

    def remember_trace(self, qid: str, trace: AttentionTrace) -> None:
        with self._trace_lock:
            self._traces[qid] = trace
            self._traces.move_to_end(qid)
            while len(self._traces) > TRACE_CACHE:
                self._traces.popitem(last=False)

    def trace_for(self, qid: str) -> AttentionTrace | None:
        with self._trace_lock:
            return self._traces.get(qid)

    def run(self, inp: QueryInput, cfg: PipelineConfig | None = None) -> PipelineResult:
        """Answer one query. Raises ProviderError when an encoder is unusable."""
        cfg = cfg or self.cfg
        q = Query(inp.text)
        mode = cfg.modality_mode
        image = inp.image if mode != "text_only" else None
        if mode == "vision_only" and image is None:
            raise ValueError("vision-only mode needs an input image")

        rw = rewrite_query(q, self.providers.rewriter, cfg)
        flags: list[str] = []
        if self.providers.rewriter is not None and rw.provider_used == "rule_based":
            flags.append("rewrite_fallback")

        enc = self.providers.encoders
        image_ref = None
        try:
            e_text = enc.embed_text(rw.rewritten.text)
            e_image = None
            if image is not None:
                image_ref = ImageRef.from_bytes(image, id=inp.image_id, source="user", payload_uri=inp.image_uri)
                e_image = enc.embed_image(image)
        except MiraError as exc:
            raise ProviderError(f"encoder failure: {exc}") from exc

        plan = RetrievalPlan.from_config(cfg)
        online = self.online if cfg.online_enabled else None
        res = retrieve(
            e_text,
            e_image,
            self.index if cfg.offline_enabled else None,
            online,
            plan,
            query=q,
            encoders=enc,
            search_text=rw.rewritten.text,
            original_image=image_ref,
        )
        flags += res.flags
        bundle = res.bundle
        fused = fuse_bundle(e_text, e_image, bundle, cfg.alpha)
        pool = label_pool(bundle.retrieved_texts, bundle.retrieved_images, bundle.api_text, res.overflow)
        record = run_rtra(
            q,
            pool,
            self.providers.generators,
            threshold=cfg.relevance_threshold,
            f_v=e_image,
            f_t=e_text,
            images=(image,) if image is not None else (),
            image_digest=image_ref.bytes_digest if image_ref is not None else None,
            flags=flags,
        )
        r = 0.0
        if not record.is_none:
            evidence = [ev.text for ev in record.rearrange_selected or ()]
            r = reward(
                record.rethink_points,
                record.final,
                RewardWeights(cfg.lambda1, cfg.lambda2),
                LexicalFactualScorer(evidence),
                NegationCoherenceScorer(),
            )
        qid = query_id(cfg, inp)
        assert fused.trace is not None
        self.remember_trace(qid, fused.trace)
        log.info("query_id=%s flags=%s reward=%.4f", qid, ",".join(record.degraded_flags) or "-", r)
        return PipelineResult(qid, record, bundle, fused, rw, r, record.degraded_flags)


def record_to_dict(rec: RtraRecord) -> dict[str, Any]:
    return {
        "query": rec.query.text,
        "rearrange_selected": None
        if rec.rearrange_selected is None
        else [
            {"label": e.label, "modality": e.modality, "digest": e.digest, "text": e.text}
            for e in rec.rearrange_selected
        ],
        "initial": rec.initial,
        "rethink_points": list(rec.rethink_points),
        "final": rec.final,
        "citations": [{"span": c.span, "evidence_id": c.evidence_id} for c in rec.citations],
        "degraded_flags": list(rec.degraded_flags),
        "coverage": rec.coverage(),
    }


def result_to_dict(res: PipelineResult) -> dict[str, Any]:
    return {
        "query_id": res.query_id,
        "record": record_to_dict(res.record),
        "serialized": res.serialized,
        "reward": res.reward,
        "trace": res.trace.to_dict(),
    }


# Knowledge-base manifests: one JSON object per line, either
#   {"id": ..., "text": ..., "metadata": {...}}  or
#   {"id": ..., "image": "<path>", "caption": ..., "metadata": {...}}
# Relative image paths resolve against the manifest's directory.


@dataclass
class ManifestEntry:
    id: str
    text: str | None = None
    image_path: Path | None = None
    metadata: dict[str, str] = field(default_factory=dict)


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    path = Path(path)
    out = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        try:
            obj = json.loads(line)
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
        if not isinstance(obj, dict) or "id" not in obj or ("text" in obj) == ("image" in obj):
            raise ValueError(f"{path}:{lineno}: need an id and exactly one of text / image")
        meta = {str(k): str(v) for k, v in (obj.get("metadata") or {}).items()}
        if "caption" in obj:
            meta["caption"] = str(obj["caption"])
        image = _resolve(obj["image"], path.parent) if "image" in obj else None
        out.append(ManifestEntry(str(obj["id"]), obj.get("text"), image, meta))
    return out


def make_record(entry: ManifestEntry, encoders: Encoders) -> IndexRecord:
    if entry.text is not None:
        return IndexRecord(entry.id, "text", encoders.embed_text(entry.text), entry.text, entry.metadata)
    assert entry.image_path is not None
    try:
        data = entry.image_path.read_bytes()
    except OSError as exc:
        raise ValueError(f"cannot read image {entry.image_path}: {exc}") from exc
    ref = ImageRef.from_bytes(
        data, id=entry.id, source="offline_index", payload_uri=entry.image_path.resolve().as_uri()
    )
    return IndexRecord(entry.id, "image", encoders.embed_image(data), ref, entry.metadata)


def add_entries(idx: VectorIndex, entries: Iterable[ManifestEntry], encoders: Encoders) -> list[str]:
    added = []
    for entry in entries:
        idx.add(make_record(entry, encoders))
        added.append(entry.id)
    return added


def promote_cached(
    idx: VectorIndex, docs: Iterable[Mapping[str, Any]], encoders: Encoders
) -> list[str]:
    """Add cached online paragraphs (and loadable images) to ``idx``; returns new ids.

    Ids match the ones retrieval gives online candidates, so promoted entries
    deduplicate cleanly against later live results.
    """
    added: list[str] = []
    epoch = dt.datetime(1970, 1, 1, tzinfo=dt.timezone.utc)
    for doc in docs:
        for res in parse_response(dict(doc), epoch):
            meta = {"source": "online", "url": res.url, "title": res.title, "query": str(doc.get("query", ""))}
            rid = f"online:{res.url}"
            if res.paragraph and rid not in idx:
                idx.add(IndexRecord(rid, "text", encoders.embed_text(res.paragraph), res.paragraph, meta))
                added.append(rid)
            if res.image is not None:
                iid = f"online-image:{res.image.id}"
                if iid in idx:
                    continue
                try:
                    data = load_payload(res.image)
                except (MiraError, ValueError) as exc:
                    log.warning("not promoting image %s: %s", res.image.id, exc)
                    continue
                ref = ImageRef(
                    iid, "offline_index", res.image.width, res.image.height,
                    res.image.bytes_digest, res.image.payload_uri,
                )
                idx.add(IndexRecord(iid, "image", encoders.embed_image(data), ref, {**meta, "caption": res.title}))
                added.append(iid)
    return added

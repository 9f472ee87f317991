"""HTTP service exposing the pipeline.

Routes:
  POST /v1/query                 multipart ``text`` (+ optional ``image`` file and overrides)
  GET  /v1/health
  POST /v1/index/records         JSON ``{"records": [...]}``
  GET  /v1/trace/{query_id}
"""

from __future__ import annotations

import base64
import binascii
import logging
import threading
from pathlib import Path
from typing import Any, Optional

from fastapi import FastAPI, File, Form, HTTPException, Request, UploadFile
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from .core import ImageRef, sha256_hex
from .errors import ConfigError, MiraError, ProviderError
from .pipeline import Pipeline, QueryInput, result_to_dict
from .store import IndexRecord, VectorIndex

log = logging.getLogger(__name__)


def _overrides(
    k_text: int | None,
    k_image: int | None,
    alpha: float | None,
    no_online: bool,
    no_offline: bool,
    text_only: bool,
    vision_only: bool,
) -> dict[str, Any]:
    out: dict[str, Any] = {}
    if k_text is not None:
        out["k_text"] = k_text
    if k_image is not None:
        out["k_image"] = k_image
    if alpha is not None:
        out["alpha"] = alpha
    if no_online:
        out["online_enabled"] = False
    if no_offline:
        out["offline_enabled"] = False
    if text_only:
        out["text_only"] = True
    if vision_only:
        out["vision_only"] = True
    return out


def _parse_records(body: Any, pipeline: Pipeline, blob_dir: Path | None) -> list[IndexRecord]:
    if not isinstance(body, dict) or not isinstance(body.get("records"), list) or not body["records"]:
        raise ValueError('expected {"records": [...]} with at least one record')
    enc = pipeline.providers.encoders
    out = []
    for i, item in enumerate(body["records"]):
        if not isinstance(item, dict) or not isinstance(item.get("id"), str):
            raise ValueError(f"record {i}: needs a string id")
        has_text, has_image = "text" in item, "image_base64" in item
        if has_text == has_image:
            raise ValueError(f"record {i}: give exactly one of text / image_base64")
        meta = {str(k): str(v) for k, v in (item.get("metadata") or {}).items()}
        if "caption" in item:
            meta["caption"] = str(item["caption"])
        if has_text:
            text = item["text"]
            if not isinstance(text, str) or not text.strip():
                raise ValueError(f"record {i}: text must be a non-empty string")
            out.append(IndexRecord(item["id"], "text", enc.embed_text(text), text, meta))
            continue
        try:
            data = base64.b64decode(item["image_base64"], validate=True)
        except (binascii.Error, TypeError) as exc:
            raise ValueError(f"record {i}: bad base64 image") from exc
        uri = ""
        if blob_dir is not None:
            blob_dir.mkdir(parents=True, exist_ok=True)
            blob = blob_dir / f"{sha256_hex(data)}.bin"
            if not blob.exists():
                blob.write_bytes(data)
            uri = blob.resolve().as_uri()
        ref = ImageRef.from_bytes(data, id=item["id"], source="offline_index", payload_uri=uri)
        out.append(IndexRecord(item["id"], "image", enc.embed_image(data), ref, meta))
    return out


def create_app(pipeline: Pipeline, index_path: str | Path | None = None) -> FastAPI:
    """Build the app. Index writes are serialized and saved to ``index_path`` when given."""
    app = FastAPI(title="mira", version="1.0")
    if pipeline.index is None:
        pipeline.index = VectorIndex(pipeline.cfg.embed_dim)
    write_lock = threading.Lock()
    index_file = Path(index_path) if index_path is not None else None
    blob_dir = index_file.with_name(index_file.name + ".blobs") if index_file is not None else None

    @app.exception_handler(RequestValidationError)
    async def _bad_request(request: Request, exc: RequestValidationError) -> JSONResponse:
        return JSONResponse(status_code=400, content={"detail": exc.errors()})

    @app.get("/v1/health")
    def health() -> dict[str, Any]:
        return {"status": "ok", "index_records": len(pipeline.index or ())}

    @app.post("/v1/query")
    def query(
        text: Optional[str] = Form(None),
        image: Optional[UploadFile] = File(None),
        k_text: Optional[int] = Form(None),
        k_image: Optional[int] = Form(None),
        alpha: Optional[float] = Form(None),
        no_online: bool = Form(False),
        no_offline: bool = Form(False),
        text_only: bool = Form(False),
        vision_only: bool = Form(False),
    ) -> dict[str, Any]:
        if text is None or not text.strip():
            raise HTTPException(400, "field 'text' is required")
        try:
            cfg = pipeline.cfg.with_overrides(
                **_overrides(k_text, k_image, alpha, no_online, no_offline, text_only, vision_only)
            )
        except ConfigError as exc:
            raise HTTPException(400, str(exc)) from exc
        inp = QueryInput(text)
        if image is not None:
            data = image.file.read()
            stem = Path(image.filename or "input").stem or "input"
            inp = QueryInput(text, data, stem)
        try:
            result = pipeline.run(inp, cfg)
        except ProviderError as exc:
            return JSONResponse(status_code=503, content={"detail": str(exc), "degraded": ["provider_error"]})
        except ValueError as exc:
            raise HTTPException(400, str(exc)) from exc
        return result_to_dict(result)

    @app.post("/v1/index/records")
    async def add_records(request: Request) -> dict[str, Any]:
        try:
            body = await request.json()
        except ValueError as exc:
            raise HTTPException(400, "body must be JSON") from exc
        try:
            records = _parse_records(body, pipeline, blob_dir)
        except ValueError as exc:
            raise HTTPException(400, str(exc)) from exc
        except MiraError as exc:
            return JSONResponse(status_code=503, content={"detail": str(exc), "degraded": ["encoder_error"]})
        idx = pipeline.index
        assert idx is not None
        with write_lock:
            ids = [r.id for r in records]
            dupes = [i for i in ids if i in idx] + [i for n, i in enumerate(ids) if i in ids[:n]]
            if dupes:
                raise HTTPException(400, f"duplicate record ids: {sorted(set(dupes))}")
            for rec in records:
                idx.add(rec)
            if index_file is not None:
                idx.save(index_file)
        log.info("added %d records to the index", len(records))
        return {"added": ids, "index_records": len(idx)}

    @app.get("/v1/trace/{query_id}")
    def trace(query_id: str) -> dict[str, Any]:
        tr = pipeline.trace_for(query_id)
        if tr is None:
            raise HTTPException(404, f"no trace for query {query_id}")
        return {"query_id": query_id, **tr.to_dict()}

    return app

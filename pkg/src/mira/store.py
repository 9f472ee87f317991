"""Offline knowledge base: an exact cosine top-k multimodal vector index.

File layout (all integers little-endian)::

    magic "MIRAIDX1" | u32 version | u32 dim | u64 record_count
    per record: u16 id_len, id, u8 modality, f32 x dim,
                u32 payload_len, payload, u32 metadata_len, metadata
    u64 FNV-1a checksum of every preceding byte

Text payloads are UTF-8; image payloads and metadata are compact JSON.
"""

from __future__ import annotations

import json
import os
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .core import Embedding, ImageRef, RetrievedEntry
from .errors import CorruptIndexError

MAGIC = b"MIRAIDX1"
VERSION = 1
_HEADER = struct.Struct("<8sIIQ")
_MODALITY_CODES = {"text": 0, "image": 1}
_MODALITY_NAMES = {v: k for k, v in _MODALITY_CODES.items()}

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a64(data: bytes, h: int = FNV_OFFSET) -> int:
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & _MASK64
    return h


@dataclass(frozen=True)
class IndexRecord:
    id: str
    modality: str
    embedding: Embedding
    payload: str | ImageRef
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("record id must be non-empty")
        if self.modality not in _MODALITY_CODES:
            raise ValueError(f"record modality must be text or image, got {self.modality!r}")
        if (self.modality == "text") != isinstance(self.payload, str):
            raise ValueError("payload type does not match modality")
        if not self.embedding.is_normalized():
            raise ValueError(f"record {self.id!r}: embedding is not normalized")
        object.__setattr__(self, "metadata", {str(k): str(v) for k, v in self.metadata.items()})

    def to_entry(self, score: float, source: str = "offline") -> RetrievedEntry:
        is_text = isinstance(self.payload, str)
        return RetrievedEntry(
            id=self.id,
            modality=self.modality,
            source=source,
            embedding=self.embedding,
            score=score,
            content_text=self.payload if is_text else None,  # type: ignore[arg-type]
            image=None if is_text else self.payload,  # type: ignore[arg-type]
            metadata=self.metadata,
        )


class VectorIndex:
    """Exact brute-force cosine index.

    Embeddings are stored as float32 (the on-disk precision) so that search
    results are identical before and after a save/load round trip. Writers
    are serialized by a lock; searches work on an immutable snapshot.
    """

    def __init__(self, dim: int):
        if dim < 1:
            raise ValueError("index dim must be positive")
        self.dim = dim
        self._records: list[IndexRecord] = []
        self._ids: dict[str, int] = {}
        self._rows: list[np.ndarray] = []
        self._matrix: np.ndarray | None = np.zeros((0, dim), dtype=np.float32)
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self) -> Iterator[IndexRecord]:
        return iter(list(self._records))

    def __contains__(self, record_id: object) -> bool:
        return record_id in self._ids

    @property
    def records(self) -> list[IndexRecord]:
        return list(self._records)

    @property
    def count_by_modality(self) -> dict[str, int]:
        counts = {"text": 0, "image": 0}
        for rec in self._records:
            counts[rec.modality] += 1
        return counts

    def get(self, record_id: str) -> IndexRecord:
        return self._records[self._ids[record_id]]

    def add(self, rec: IndexRecord) -> "VectorIndex":
        if rec.embedding.dim != self.dim:
            raise ValueError(f"record {rec.id!r} has dim {rec.embedding.dim}, index dim is {self.dim}")
        row = rec.embedding.values.astype(np.float32)
        stored = IndexRecord(
            rec.id, rec.modality, Embedding(rec.embedding.modality, row.astype(np.float64)), rec.payload, rec.metadata
        )
        with self._lock:
            if rec.id in self._ids:
                raise ValueError(f"duplicate record id {rec.id!r}")
            self._ids[rec.id] = len(self._records)
            self._records.append(stored)
            self._rows.append(row)
            self._matrix = None
        return self

    def _snapshot(self) -> tuple[list[IndexRecord], np.ndarray]:
        with self._lock:
            if self._matrix is None:
                self._matrix = np.vstack(self._rows).astype(np.float64) if self._rows else np.zeros((0, self.dim))
            return list(self._records), self._matrix

    def search(
        self, query: Embedding, k: int, modality: str | None = None
    ) -> list[tuple[IndexRecord, float]]:
        """Top-``k`` records by cosine similarity, best first, ties by ascending id."""
        if query.dim != self.dim:
            raise ValueError(f"query dim {query.dim} does not match index dim {self.dim}")
        if k < 1:
            raise ValueError("k must be positive")
        records, matrix = self._snapshot()
        if not records:
            return []
        q = query.values / query.norm if query.norm > 0 else query.values
        # Row-wise reduction (not BLAS) so identical rows give identical scores.
        scores = np.clip((matrix * q).sum(axis=1), -1.0, 1.0)
        candidates = np.arange(len(records))
        if modality is not None:
            candidates = np.array([i for i, r in enumerate(records) if r.modality == modality], dtype=np.intp)
            if candidates.size == 0:
                return []
        cand_scores = scores[candidates]
        if candidates.size > k:
            kth = np.partition(-cand_scores, k - 1)[k - 1]
            keep = -cand_scores <= kth
            candidates, cand_scores = candidates[keep], cand_scores[keep]
        order = sorted(zip(candidates.tolist(), cand_scores.tolist()), key=lambda p: (-p[1], records[p[0]].id))
        return [(records[i], s) for i, s in order[:k]]

    def search_entries(self, query: Embedding, k: int, modality: str | None = None) -> list[RetrievedEntry]:
        return [rec.to_entry(score) for rec, score in self.search(query, k, modality)]

    # persistence

    def to_bytes(self) -> bytes:
        records, _ = self._snapshot()
        parts = [_HEADER.pack(MAGIC, VERSION, self.dim, len(records))]
        for rec in records:
            rid = rec.id.encode("utf-8")
            if isinstance(rec.payload, str):
                payload = rec.payload.encode("utf-8")
            else:
                payload = _compact_json(rec.payload.to_dict())
            meta = _compact_json(dict(rec.metadata))
            parts.append(struct.pack("<H", len(rid)))
            parts.append(rid)
            parts.append(struct.pack("<B", _MODALITY_CODES[rec.modality]))
            parts.append(rec.embedding.values.astype("<f4").tobytes())
            parts.append(struct.pack("<I", len(payload)))
            parts.append(payload)
            parts.append(struct.pack("<I", len(meta)))
            parts.append(meta)
        body = b"".join(parts)
        return body + struct.pack("<Q", fnv1a64(body))

    @classmethod
    def from_bytes(cls, data: bytes) -> "VectorIndex":
        if len(data) < _HEADER.size + 8:
            raise CorruptIndexError("index file is truncated")
        body, trailer = data[:-8], data[-8:]
        magic, version, dim, count = _HEADER.unpack_from(body, 0)
        if magic != MAGIC:
            raise CorruptIndexError("bad magic; not an index file")
        if version != VERSION:
            raise CorruptIndexError(f"unsupported index version {version}")
        if struct.unpack("<Q", trailer)[0] != fnv1a64(body):
            raise CorruptIndexError("checksum mismatch")
        if dim < 1:
            raise CorruptIndexError("index dim must be positive")
        idx = cls(dim)
        pos = _HEADER.size
        try:
            for _ in range(count):
                (id_len,) = struct.unpack_from("<H", body, pos)
                pos += 2
                rid = _take(body, pos, id_len).decode("utf-8")
                pos += id_len
                (code,) = struct.unpack_from("<B", body, pos)
                pos += 1
                vec = np.frombuffer(_take(body, pos, 4 * dim), dtype="<f4").astype(np.float64)
                pos += 4 * dim
                (plen,) = struct.unpack_from("<I", body, pos)
                pos += 4
                raw_payload = _take(body, pos, plen)
                pos += plen
                (mlen,) = struct.unpack_from("<I", body, pos)
                pos += 4
                meta = json.loads(_take(body, pos, mlen).decode("utf-8"))
                pos += mlen
                modality = _MODALITY_NAMES[code]
                payload: str | ImageRef
                if modality == "text":
                    payload = raw_payload.decode("utf-8")
                else:
                    payload = ImageRef.from_dict(json.loads(raw_payload.decode("utf-8")))
                idx.add(IndexRecord(rid, modality, Embedding(modality, vec), payload, meta))
        except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError, ValueError) as exc:
            raise CorruptIndexError(f"malformed record data: {exc}") from exc
        if pos != len(body):
            raise CorruptIndexError("trailing bytes after last record")
        return idx

    def save(self, path: str | Path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | Path) -> "VectorIndex":
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise CorruptIndexError(f"cannot read index {path}: {exc}") from exc
        return cls.from_bytes(data)


def _take(buf: bytes, pos: int, n: int) -> bytes:
    if pos + n > len(buf):
        raise CorruptIndexError("record runs past end of file")
    return buf[pos : pos + n]


def _compact_json(obj: object) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def index_add(idx: VectorIndex, rec: IndexRecord) -> VectorIndex:
    return idx.add(rec)


def index_search(
    idx: VectorIndex, query: Embedding, k: int, modality: str | None = None
) -> list[tuple[IndexRecord, float]]:
    return idx.search(query, k, modality)


def index_save(idx: VectorIndex, path: str | Path) -> None:
    idx.save(path)


def index_load(path: str | Path) -> VectorIndex:
    return VectorIndex.load(path)

from __future__ import annotations

import io
import shutil
from pathlib import Path

import numpy as np
import pytest

from mira.core import Embedding, ImageRef, RetrievedEntry, sha256_hex

DATA = Path(__file__).parent / "data"
SESSION = DATA / "session"
QUERY = "Is it a malignant lesion?"


def rand_unit(rng: np.random.Generator, dim: int, modality: str = "text") -> Embedding:
    v = rng.standard_normal(dim)
    return Embedding(modality, v / np.linalg.norm(v))


def text_entry(id: str, score: float, emb: Embedding | None = None, text: str | None = None, source="offline"):
    emb = emb or Embedding("text", np.eye(4)[0])
    return RetrievedEntry(id, "text", source, emb, score, content_text=text if text is not None else f"text of {id}")


def image_entry(id: str, score: float, emb: Embedding | None = None, caption: str = "", source="offline"):
    emb = emb or Embedding("image", np.eye(4)[1])
    ref = ImageRef(id, "offline_index", 8, 8, sha256_hex(id.encode()), "")
    return RetrievedEntry(id, "image", source, emb, score, image=ref, metadata={"caption": caption} if caption else {})


@pytest.fixture
def session(tmp_path: Path) -> Path:
    """A private copy of the fixture session with its index built."""
    from mira.cli import run

    dst = tmp_path / "session"
    shutil.copytree(SESSION, dst)
    code = run(["index-build", "--config", str(dst / "session.cfg"), "--index", str(dst / "kb.idx"),
                "--corpus", str(dst / "index.jsonl")], out=io.StringIO())
    assert code == 0
    return dst


ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, title = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {title}")

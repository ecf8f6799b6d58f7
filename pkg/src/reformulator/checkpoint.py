"""Versioned ``.npz`` checkpoints bound to a vocabulary.

A checkpoint stores named float64 arrays, the vocabulary tokens, their sha256
digest and a sha256 over the whole payload.  Loading re-derives both digests
and refuses anything that does not match.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import tempfile
import zipfile
from pathlib import Path
from typing import Mapping

import numpy as np

from .text import Vocabulary

FORMAT = "reformulator-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _payload_digest(arrays: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype=np.float64)
        h.update(name.encode())
        h.update(repr(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_arrays(path: str | Path, kind: str, arrays: Mapping[str, np.ndarray], vocab: Vocabulary, config: dict | None = None) -> None:
    meta = {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "vocab": list(vocab.tokens),
        "vocab_sha256": vocab.digest(),
        "payload_sha256": _payload_digest(arrays),
        "config": config or {},
    }
    buf = io.BytesIO()
    np.savez(
        buf,
        __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8),
        **{f"p.{k}": np.asarray(v, dtype=np.float64) for k, v in arrays.items()},
    )
    atomic_write_bytes(path, buf.getvalue())


def load_arrays(path: str | Path, kind: str, vocab: Vocabulary | None = None):
    """Returns (arrays, vocabulary, config).  Raises CheckpointError on any mismatch."""
    try:
        with np.load(path, allow_pickle=False) as z:
            files = {k: z[k] for k in z.files}
    except (OSError, ValueError, zipfile.BadZipFile, EOFError, KeyError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if "__meta__" not in files:
        raise CheckpointError(f"{path}: missing metadata")
    try:
        meta = json.loads(files.pop("__meta__").tobytes().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt metadata") from exc
    if meta.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} file")
    if meta.get("version") != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {meta.get('version')} != supported {VERSION}")
    if meta.get("kind") != kind:
        raise CheckpointError(f"{path}: holds a {meta.get('kind')!r} model, expected {kind!r}")
    arrays = {k[2:]: v for k, v in files.items() if k.startswith("p.")}
    if _payload_digest(arrays) != meta.get("payload_sha256"):
        raise CheckpointError(f"{path}: payload hash mismatch (file modified?)")
    stored = Vocabulary(meta["vocab"])
    if stored.digest() != meta.get("vocab_sha256"):
        raise CheckpointError(f"{path}: vocabulary hash mismatch")
    if vocab is not None and vocab.digest() != stored.digest():
        raise CheckpointError(f"{path}: checkpoint was saved with a different vocabulary")
    return arrays, stored, meta.get("config", {})

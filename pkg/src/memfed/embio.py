"""Embedding set files.

Text format (version 1)::

    # memfed-embeddings format_version=1 dim=256
    id,class,e0,e1,...,e255
    g-0,3,0.0123,...

One row per sample, floats written with ``repr`` so a round trip is exact.
Bulk sets may instead use ``.npz`` with arrays ``format_version``, ``ids``,
``classes`` and ``embeddings``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embedding import EMBED_DIM

EMB_FORMAT_VERSION = 1
_MAGIC = "# memfed-embeddings"


class EmbeddingFileError(ValueError):
    pass


@dataclass
class EmbeddingSet:
    ids: list[str]
    classes: np.ndarray
    embeddings: np.ndarray

    def __post_init__(self):
        self.classes = np.asarray(self.classes, dtype=np.int64)
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2:
            raise EmbeddingFileError("embeddings must be a 2-D array")
        if not len(self.ids) == len(self.classes) == len(self.embeddings):
            raise EmbeddingFileError("ids, classes and embeddings differ in length")
        if len(set(self.ids)) != len(self.ids):
            raise EmbeddingFileError("duplicate sample ids")

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def __len__(self) -> int:
        return len(self.ids)


def dumps(es: EmbeddingSet) -> str:
    buf = io.StringIO()
    buf.write(f"{_MAGIC} format_version={EMB_FORMAT_VERSION} dim={es.dim}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "class", *(f"e{j}" for j in range(es.dim))])
    for i, c, row in zip(es.ids, es.classes, es.embeddings):
        w.writerow([i, int(c), *(repr(float(v)) for v in row)])
    return buf.getvalue()


def _header(line: str) -> dict[str, str]:
    if not line.startswith(_MAGIC):
        raise EmbeddingFileError(f"line 1: expected header starting with {_MAGIC!r}")
    fields = {}
    for tok in line[len(_MAGIC):].split():
        key, sep, val = tok.partition("=")
        if not sep:
            raise EmbeddingFileError(f"line 1: malformed header field {tok!r}")
        fields[key] = val
    return fields


def loads(text: str) -> EmbeddingSet:
    lines = text.splitlines()
    if not lines:
        raise EmbeddingFileError("empty file")
    head = _header(lines[0])
    if head.get("format_version") != str(EMB_FORMAT_VERSION):
        raise EmbeddingFileError(f"line 1: unsupported format_version {head.get('format_version')!r}")
    try:
        dim = int(head["dim"])
    except (KeyError, ValueError):
        raise EmbeddingFileError("line 1: header needs an integer dim=") from None
    rows = list(csv.reader(lines[1:]))
    expected = ["id", "class", *(f"e{j}" for j in range(dim))]
    if not rows or rows[0] != expected:
        raise EmbeddingFileError(f"line 2: column header must be id,class,e0..e{dim - 1}")
    ids, classes, emb = [], [], []
    for n, row in enumerate(rows[1:], start=3):
        if not row:
            continue
        if len(row) != dim + 2:
            raise EmbeddingFileError(f"line {n}: expected {dim + 2} columns, found {len(row)}")
        try:
            classes.append(int(row[1]))
            emb.append([float(v) for v in row[2:]])
        except ValueError as exc:
            raise EmbeddingFileError(f"line {n}: {exc}") from None
        ids.append(row[0])
    arr = np.array(emb, dtype=np.float64).reshape(len(emb), dim)
    if not np.isfinite(arr).all():
        raise EmbeddingFileError("non-finite embedding values")
    return EmbeddingSet(ids, np.array(classes, dtype=np.int64), arr)


def save(es: EmbeddingSet, path) -> None:
    path = Path(path)
    if path.suffix == ".npz":
        np.savez(path, format_version=EMB_FORMAT_VERSION, ids=np.array(es.ids, dtype=str),
                 classes=es.classes, embeddings=es.embeddings)
    else:
        path.write_text(dumps(es), encoding="utf-8")


def load(path, expect_dim: int | None = EMBED_DIM) -> EmbeddingSet:
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path, allow_pickle=False) as z:
            missing = {"format_version", "ids", "classes", "embeddings"} - set(z.files)
            if missing:
                raise EmbeddingFileError(f"{path}: missing arrays {sorted(missing)}")
            if int(z["format_version"]) != EMB_FORMAT_VERSION:
                raise EmbeddingFileError(f"{path}: unsupported format_version {int(z['format_version'])}")
            es = EmbeddingSet([str(i) for i in z["ids"]], z["classes"], z["embeddings"])
    else:
        try:
            es = loads(path.read_text(encoding="utf-8"))
        except EmbeddingFileError as exc:
            raise EmbeddingFileError(f"{path}: {exc}") from None
    if expect_dim is not None and es.dim != expect_dim:
        raise EmbeddingFileError(f"{path}: embeddings have dim {es.dim}, expected {expect_dim}")
    return es

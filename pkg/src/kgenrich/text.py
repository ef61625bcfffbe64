"""Pretrained word vectors and label/neighbourhood entity representations.

An entity is represented by three blocks of word-vector space: the mean
vector of its own label tokens, the mean over its distinct out-neighbours'
label vectors and the same over its in-neighbours.  ``concat`` mode stacks
the blocks; ``average`` mode averages them and repeats the result three times
so both modes have the same width.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Union

import numpy as np

from .kg import KnowledgeGraph

__all__ = [
    "MODES",
    "WordVectorTable",
    "VectorParseError",
    "load_word_vectors",
    "embed_label",
    "entity_representation",
    "entity_representations",
    "write_representations",
    "read_representations",
]

MODES = ("concat", "average")

_CACHE_MAGIC = b"KGXR"
_CACHE_HEADER = struct.Struct("<4sII")


class VectorParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True, eq=False)
class WordVectorTable:
    dim: int
    tokens: dict  # token -> row in ``matrix``
    matrix: np.ndarray

    def __post_init__(self):
        if self.dim <= 0:
            raise ValueError("dim must be positive")
        if self.matrix.shape != (len(self.tokens), self.dim):
            raise ValueError("matrix shape does not match token table")
        self.matrix.setflags(write=False)

    def __contains__(self, token: str) -> bool:
        return token in self.tokens

    def __len__(self) -> int:
        return len(self.tokens)

    def __getitem__(self, token: str) -> np.ndarray:
        return self.matrix[self.tokens[token]]

    @classmethod
    def from_dict(cls, vectors: dict[str, np.ndarray], dim: int | None = None) -> "WordVectorTable":
        if dim is None:
            dim = len(next(iter(vectors.values())))
        mat = np.zeros((len(vectors), dim), dtype=np.float64)
        index = {}
        for i, (tok, vec) in enumerate(vectors.items()):
            vec = np.asarray(vec, dtype=np.float64)
            if vec.shape != (dim,):
                raise ValueError(f"vector for {tok!r} has shape {vec.shape}, expected ({dim},)")
            mat[i] = vec
            index[tok] = i
        return cls(dim, index, mat)

    def scaled(self, s: float) -> "WordVectorTable":
        return WordVectorTable(self.dim, dict(self.tokens), self.matrix * s)


def load_word_vectors(source: Union[bytes, str, Path, IO[bytes]]) -> WordVectorTable:
    """Read the ``count dim`` header text format used by common vector dumps.

    Later duplicates of a token overwrite earlier ones.
    """
    if isinstance(source, Path):
        source = source.read_bytes()
    if isinstance(source, (bytes, bytearray)):
        text = bytes(source).decode("utf-8")
    elif isinstance(source, str):
        text = source
    else:
        text = source.read().decode("utf-8")

    lines = text.split("\n")
    try:
        _count, dim = (int(x) for x in lines[0].split())
    except ValueError:
        raise VectorParseError(1, "header must be 'count dim'") from None
    if dim <= 0:
        raise VectorParseError(1, "dimension must be positive")

    index: dict[str, int] = {}
    rows: list[np.ndarray] = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.rstrip().split(" ")
        if parts == [""]:
            continue
        token, values = parts[0], parts[1:]
        if len(values) != dim:
            raise VectorParseError(lineno, f"expected {dim} values, found {len(values)}")
        try:
            vec = np.array([float(v) for v in values], dtype=np.float64)
        except ValueError:
            raise VectorParseError(lineno, "non-numeric value") from None
        if token in index:
            rows[index[token]] = vec
        else:
            index[token] = len(rows)
            rows.append(vec)
    matrix = np.array(rows, dtype=np.float64).reshape(len(rows), dim)
    return WordVectorTable(dim, index, matrix)


def embed_label(table: WordVectorTable, label: str) -> np.ndarray:
    """Mean of the in-vocabulary token vectors; zeros if none are known."""
    acc = np.zeros(table.dim, dtype=np.float64)
    n = 0
    for tok in label.split(" "):
        row = table.tokens.get(tok) if tok else None
        if row is not None:
            acc += table.matrix[row]
            n += 1
    return acc / n if n else acc


def _neighbour_sets(graph: KnowledgeGraph) -> tuple[np.ndarray, np.ndarray]:
    """Distinct (entity, neighbour) pairs sorted by entity then neighbour id."""
    tr = graph.triples
    out_pairs = np.unique(tr[:, [0, 2]], axis=0) if len(tr) else np.zeros((0, 2), np.int64)
    in_pairs = np.unique(tr[:, [2, 0]], axis=0) if len(tr) else np.zeros((0, 2), np.int64)
    return out_pairs, in_pairs


def _block_means(pairs: np.ndarray, labels: np.ndarray, n: int) -> np.ndarray:
    acc = np.zeros((n, labels.shape[1]), dtype=np.float64)
    # ufunc.at accumulates sequentially, so each row sums neighbours in ascending id order
    np.add.at(acc, pairs[:, 0], labels[pairs[:, 1]])
    counts = np.bincount(pairs[:, 0], minlength=n).astype(np.float64)
    nz = counts > 0
    acc[nz] /= counts[nz, None]
    return acc


def _combine(b0: np.ndarray, b1: np.ndarray, b2: np.ndarray, mode: str) -> np.ndarray:
    if mode == "concat":
        return np.concatenate([b0, b1, b2], axis=-1)
    if mode == "average":
        avg = (b0 + b1 + b2) / 3.0
        return np.concatenate([avg, avg, avg], axis=-1)
    raise ValueError(f"unknown representation mode {mode!r}")


def entity_representations(graph: KnowledgeGraph, table: WordVectorTable, mode: str = "concat") -> np.ndarray:
    """Representations of every entity, shape ``(num_entities, 3 * dim)``."""
    if mode not in MODES:
        raise ValueError(f"unknown representation mode {mode!r}")
    labels = np.array([embed_label(table, lab) for lab in graph.entities], dtype=np.float64)
    labels = labels.reshape(graph.num_entities, table.dim)
    out_pairs, in_pairs = _neighbour_sets(graph)
    b1 = _block_means(out_pairs, labels, graph.num_entities)
    b2 = _block_means(in_pairs, labels, graph.num_entities)
    return _combine(labels, b1, b2, mode)


def entity_representation(graph: KnowledgeGraph, table: WordVectorTable, entity: int, mode: str = "concat") -> np.ndarray:
    if not 0 <= entity < graph.num_entities:
        raise KeyError(f"unknown entity id {entity}")
    if mode not in MODES:
        raise ValueError(f"unknown representation mode {mode!r}")
    tr = graph.triples
    outs = np.unique(tr[tr[:, 0] == entity, 2])
    ins = np.unique(tr[tr[:, 2] == entity, 0])

    def mean_over(ids: np.ndarray) -> np.ndarray:
        acc = np.zeros(table.dim, dtype=np.float64)
        for i in ids.tolist():
            acc += embed_label(table, graph.entities[i])
        return acc / len(ids) if len(ids) else acc

    b0 = embed_label(table, graph.entities[entity])
    return _combine(b0, mean_over(outs), mean_over(ins), mode)


def write_representations(path: str | Path, reprs: np.ndarray, ids: np.ndarray | None = None) -> None:
    """Binary cache: header (magic, dim, count) then (uint32 id, float32[3*dim]) records."""
    reprs = np.asarray(reprs)
    if reprs.ndim != 2 or reprs.shape[1] % 3:
        raise ValueError("representations must be (n, 3*dim)")
    n, width = reprs.shape
    if ids is None:
        ids = np.arange(n)
    rec = np.dtype([("id", "<u4"), ("vec", "<f4", (width,))])
    out = np.empty(n, dtype=rec)
    out["id"] = ids
    out["vec"] = reprs
    with open(path, "wb") as f:
        f.write(_CACHE_HEADER.pack(_CACHE_MAGIC, width // 3, n))
        f.write(out.tobytes())


def read_representations(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(ids, vectors)`` from a representation cache file."""
    data = Path(path).read_bytes()
    magic, dim, n = _CACHE_HEADER.unpack_from(data)
    if magic != _CACHE_MAGIC:
        raise ValueError(f"{path}: not a representation cache")
    rec = np.dtype([("id", "<u4"), ("vec", "<f4", (3 * dim,))])
    body = np.frombuffer(data, dtype=rec, count=n, offset=_CACHE_HEADER.size)
    return body["id"].astype(np.int64), body["vec"].astype(np.float64)

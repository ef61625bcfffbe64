"""Multi-relational graph model, triple-file I/O and label normalization.

Triple files are UTF-8, one triple per line, fields separated by a single tab.
Lines starting with ``#`` are comments.  Entity and relation labels are
normalized at load time and interned into dense 0-based ids in first-seen
order.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, NamedTuple, Sequence, Union

import numpy as np

__all__ = [
    "Triple",
    "KnowledgeGraph",
    "Dataset",
    "SplitStats",
    "GraphStats",
    "TripleParseError",
    "parse_triples",
    "read_triples",
    "serialize_triples",
    "write_triples",
    "normalize_label",
    "build_dataset",
    "load_dataset",
    "write_dataset",
    "graph_stats",
]

RawTriple = tuple[str, str, str]
Source = Union[bytes, str, IO[bytes]]

COLUMN_ORDERS = ("hrt", "htr")

_SENSE_SUFFIX = re.compile(r"\.[A-Za-z]\.\d{2}$")


class TripleParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class Triple(NamedTuple):
    head: int
    relation: int
    tail: int


def _as_text(source: Source) -> str:
    if isinstance(source, str):
        return source
    if isinstance(source, (bytes, bytearray)):
        return bytes(source).decode("utf-8")
    return source.read().decode("utf-8")


def parse_triples(source: Source, order: str = "hrt") -> list[RawTriple]:
    """Parse tab-separated triples into ``(head, relation, tail)`` strings.

    ``order`` is ``"hrt"`` (default) or ``"htr"`` for dumps that put the tail
    before the relation.  Blank and ``#`` lines are skipped.
    """
    if order not in COLUMN_ORDERS:
        raise ValueError(f"unknown column order {order!r}")
    out: list[RawTriple] = []
    for lineno, line in enumerate(_as_text(source).split("\n"), start=1):
        if line.endswith("\r"):
            line = line[:-1]
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise TripleParseError(lineno, f"expected 3 fields, found {len(fields)}")
        if any(not f for f in fields):
            raise TripleParseError(lineno, "empty field")
        if order == "hrt":
            h, r, t = fields
        else:
            h, t, r = fields
        out.append((h, r, t))
    return out


def read_triples(path: str | Path, order: str = "hrt") -> list[RawTriple]:
    with open(path, "rb") as f:
        return parse_triples(f, order)


def serialize_triples(triples: Iterable[RawTriple]) -> bytes:
    return "".join(f"{h}\t{r}\t{t}\n" for h, r, t in triples).encode("utf-8")


def write_triples(path: str | Path, triples: Iterable[RawTriple]) -> None:
    Path(path).write_bytes(serialize_triples(triples))


def normalize_label(raw: str) -> str:
    """Strip WordNet-style sense suffixes and canonicalize spacing and case.

    >>> normalize_label("absorb.v.01")
    'absorb'
    >>> normalize_label("New_York")
    'new york'
    """
    label = raw.replace("_", " ").lower()
    while True:
        # iterate to a fixpoint so normalizing twice changes nothing
        stripped = _SENSE_SUFFIX.sub("", label.strip())
        if stripped == label:
            return label
        label = stripped


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def _triple_array(rows: Sequence[Sequence[int]] | np.ndarray) -> np.ndarray:
    arr = np.asarray(rows, dtype=np.int64)
    if arr.size == 0:
        arr = np.zeros((0, 3), dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"triples must have shape (n, 3), got {arr.shape}")
    return arr


def unique_rows(triples: np.ndarray) -> np.ndarray:
    """Drop duplicate rows, keeping the first occurrence and original order."""
    if len(triples) == 0:
        return triples
    _, first = np.unique(triples, axis=0, return_index=True)
    return triples[np.sort(first)]


@dataclass(frozen=True, eq=False)
class KnowledgeGraph:
    """Entities, relations and an ``(n, 3)`` array of id triples.

    Instances are read-only after construction.
    """

    entities: tuple[str, ...]
    relations: tuple[str, ...]
    triples: np.ndarray
    _entity_index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        triples = _triple_array(self.triples)
        if len(triples):
            if triples[:, [0, 2]].min() < 0 or triples[:, [0, 2]].max() >= len(self.entities):
                raise ValueError("entity id out of range")
            if triples[:, 1].min() < 0 or triples[:, 1].max() >= len(self.relations):
                raise ValueError("relation id out of range")
        object.__setattr__(self, "entities", tuple(self.entities))
        object.__setattr__(self, "relations", tuple(self.relations))
        object.__setattr__(self, "triples", _frozen(triples.copy()))
        object.__setattr__(self, "_entity_index", {})

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    def __len__(self) -> int:
        return len(self.triples)

    def entity_id(self, label: str) -> int:
        """Id of the first entity carrying ``label``."""
        if not self._entity_index:
            index = self._entity_index
            for i, lab in enumerate(self.entities):
                index.setdefault(lab, i)
        return self._entity_index[label]

    def raw_triples(self, triples: np.ndarray | None = None) -> list[RawTriple]:
        rows = self.triples if triples is None else triples
        E, R = self.entities, self.relations
        return [(E[h], R[r], E[t]) for h, r, t in rows.tolist()]


@dataclass(frozen=True, eq=False)
class Dataset:
    """Train graph plus val/test triples sharing the train id tables."""

    train: KnowledgeGraph
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        for name in ("val", "test"):
            arr = _triple_array(getattr(self, name))
            if len(arr):
                if arr[:, [0, 2]].max() >= self.train.num_entities or arr.min() < 0:
                    raise ValueError(f"{name} references unknown entity")
                if arr[:, 1].max() >= self.train.num_relations:
                    raise ValueError(f"{name} references unknown relation")
            object.__setattr__(self, name, _frozen(arr.copy()))

    @property
    def entities(self) -> tuple[str, ...]:
        return self.train.entities

    @property
    def relations(self) -> tuple[str, ...]:
        return self.train.relations

    def split(self, name: str) -> np.ndarray:
        if name == "train":
            return self.train.triples
        if name in ("val", "test"):
            return getattr(self, name)
        raise KeyError(name)

    def all_triples(self) -> np.ndarray:
        return np.concatenate([self.train.triples, self.val, self.test])


class _Interner:
    def __init__(self):
        self.ids: dict[str, int] = {}
        self.labels: list[str] = []

    def __call__(self, raw: str) -> int:
        # a raw string made only of separators keeps its raw form
        label = normalize_label(raw) or raw
        i = self.ids.get(label)
        if i is None:
            i = self.ids[label] = len(self.labels)
            self.labels.append(label)
        return i


def build_dataset(
    train: Iterable[RawTriple],
    val: Iterable[RawTriple] = (),
    test: Iterable[RawTriple] = (),
) -> Dataset:
    """Intern raw string triples (train, then val, then test) into a Dataset.

    Labels are normalized before interning, so two raw strings that normalize
    to the same label share one id.  Duplicate triples within a split are
    dropped.
    """
    ents, rels = _Interner(), _Interner()
    splits = []
    for raw in (train, val, test):
        rows = []
        for h, r, t in raw:
            hid = ents(h)
            rid = rels(r)
            tid = ents(t)
            rows.append((hid, rid, tid))
        splits.append(unique_rows(_triple_array(rows)))
    graph = KnowledgeGraph(tuple(ents.labels), tuple(rels.labels), splits[0])
    return Dataset(graph, splits[1], splits[2])


def load_dataset(
    train: str | Path,
    val: str | Path | None = None,
    test: str | Path | None = None,
    order: str = "hrt",
) -> Dataset:
    parts = [read_triples(p, order) if p is not None else [] for p in (train, val, test)]
    return build_dataset(*parts)


SPLIT_FILES = {"train": "train.txt", "val": "valid.txt", "test": "test.txt"}


def write_dataset(directory: str | Path, dataset: Dataset) -> dict[str, Path]:
    """Write the three splits as label triple files; returns the paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split, name in SPLIT_FILES.items():
        paths[split] = directory / name
        write_triples(paths[split], dataset.train.raw_triples(dataset.split(split)))
    return paths


class SplitStats(NamedTuple):
    triples: int
    entities: int
    relations: int


@dataclass(frozen=True)
class GraphStats:
    train: SplitStats
    val: SplitStats
    test: SplitStats

    def records(self) -> list[dict]:
        return [{"split": s, **getattr(self, s)._asdict()} for s in ("train", "val", "test")]

    def to_text(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.records())


def _split_stats(triples: np.ndarray) -> SplitStats:
    if len(triples) == 0:
        return SplitStats(0, 0, 0)
    n_ent = len(np.unique(triples[:, [0, 2]]))
    n_rel = len(np.unique(triples[:, 1]))
    return SplitStats(len(triples), n_ent, n_rel)


def graph_stats(dataset: Dataset) -> GraphStats:
    """Per-split triple, distinct-entity and distinct-relation counts."""
    return GraphStats(*(_split_stats(dataset.split(s)) for s in ("train", "val", "test")))

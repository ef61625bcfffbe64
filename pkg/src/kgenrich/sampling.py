"""Simulated early-stage graphs: triple, node and relation sampling.

All randomness comes from numpy's ``Generator(PCG64(seed))``.  Per-element
uniforms are drawn in id order (train triples in stored order, entities and
relations by id) so results only depend on the dataset and the spec.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .kg import Dataset, KnowledgeGraph, graph_stats, write_dataset

__all__ = [
    "STRATEGIES",
    "SamplingSpec",
    "SampledDataset",
    "PreservationError",
    "preserve_cover",
    "sample",
    "write_sampled",
]

STRATEGIES = ("triple", "node", "relation")


class PreservationError(RuntimeError):
    """A val/test entity or relation has no train triple to keep it alive."""


@dataclass(frozen=True)
class SamplingSpec:
    strategy: str
    p: float
    seed: int = 0
    # "exact": triple sampling keeps exactly round(p*|T|) triples;
    # "bernoulli": each non-cover triple kept with the cover-adjusted probability.
    size_mode: str = "exact"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown sampling strategy {self.strategy!r}")
        if not 0.0 < self.p <= 1.0:
            raise ValueError(f"keep probability must be in (0, 1], got {self.p}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.size_mode not in ("exact", "bernoulli"):
            raise ValueError(f"unknown size mode {self.size_mode!r}")


@dataclass(frozen=True, eq=False)
class SampledDataset:
    dataset: Dataset
    spec: SamplingSpec
    preserved_cover: np.ndarray


def _first_by_key(keys: np.ndarray, n: int) -> np.ndarray:
    """For sorted-order ``keys``, position of the first occurrence of each value (-1 if absent)."""
    first = np.full(n, -1, dtype=np.int64)
    vals, idx = np.unique(keys, return_index=True)
    first[vals] = idx
    return first


def _cover(dataset: Dataset) -> tuple[np.ndarray, dict[int, int]]:
    """Greedy cover; returns train row indices and, per val/test entity, its covering row."""
    train = dataset.train.triples
    held = np.concatenate([dataset.val, dataset.test])
    if len(held) == 0:
        return np.zeros(0, dtype=np.int64), {}
    n_ent, n_rel = dataset.train.num_entities, dataset.train.num_relations

    # lexicographic (h, r, t) order of train rows
    order = np.lexsort((train[:, 2], train[:, 1], train[:, 0]))
    ranked = train[order]
    first_h = _first_by_key(ranked[:, 0], n_ent)
    first_t = _first_by_key(ranked[:, 2], n_ent)
    first_r = _first_by_key(ranked[:, 1], n_rel)
    # smallest incident triple per entity, as a position in lexicographic order
    big = np.iinfo(np.int64).max
    inc = np.minimum(np.where(first_h < 0, big, first_h), np.where(first_t < 0, big, first_t))

    ent_cov = np.zeros(n_ent, dtype=bool)
    rel_cov = np.zeros(n_rel, dtype=bool)
    chosen: list[int] = []
    owner: dict[int, int] = {}

    def take(pos: int) -> int:
        h, r, t = ranked[pos]
        ent_cov[h] = ent_cov[t] = True
        rel_cov[r] = True
        row = int(order[pos])
        chosen.append(row)
        return row

    held_ents = np.unique(held[:, [0, 2]])
    held_rels = np.unique(held[:, 1])
    labels = dataset.train
    for e in held_ents.tolist():
        if ent_cov[e]:
            continue
        if inc[e] == big:
            raise PreservationError(f"entity {labels.entities[e]!r} has no train triple")
        take(int(inc[e]))
    # record which chosen row covers each held-out entity
    for row in chosen:
        h, _, t = train[row]
        owner.setdefault(int(h), row)
        owner.setdefault(int(t), row)
    for r in held_rels.tolist():
        if rel_cov[r]:
            continue
        if first_r[r] < 0:
            raise PreservationError(f"relation {labels.relations[r]!r} has no train triple")
        take(int(first_r[r]))
    owner = {e: owner[e] for e in held_ents.tolist()}
    return np.array(sorted(set(chosen)), dtype=np.int64), owner


def preserve_cover(dataset: Dataset, strategy: str) -> np.ndarray:
    """Train triples that keep every val/test entity and relation represented.

    Val/test entities are visited in id order, then relations; each one not
    yet covered takes the lexicographically smallest train triple touching it.
    """
    if strategy not in ("triple", "node"):
        raise ValueError(f"cover is defined for triple/node sampling, not {strategy!r}")
    rows, _ = _cover(dataset)
    return dataset.train.triples[rows]


def _with_train(dataset: Dataset, mask: np.ndarray, val=None, test=None) -> Dataset:
    g = dataset.train
    train = KnowledgeGraph(g.entities, g.relations, g.triples[mask])
    return Dataset(train, dataset.val if val is None else val, dataset.test if test is None else test)


def sample(dataset: Dataset, spec: SamplingSpec) -> SampledDataset:
    rng = np.random.Generator(np.random.PCG64(int(spec.seed)))
    train = dataset.train.triples
    n = len(train)

    if spec.strategy == "triple":
        rows, _ = _cover(dataset)
        in_cover = np.zeros(n, dtype=bool)
        in_cover[rows] = True
        u = rng.random(n)
        if spec.size_mode == "exact":
            extra = max(0, int(round(spec.p * n)) - len(rows))
            rest = np.flatnonzero(~in_cover)
            picked = rest[np.argsort(u[rest], kind="stable")[:extra]]
            mask = in_cover.copy()
            mask[picked] = True
        else:
            free = n - len(rows)
            p_adj = max(0.0, (spec.p * n - len(rows)) / free) if free else 0.0
            mask = in_cover | (u < p_adj)
        return SampledDataset(_with_train(dataset, mask), spec, train[rows])

    if spec.strategy == "node":
        rows, owner = _cover(dataset)
        keep = rng.random(dataset.train.num_entities) < spec.p
        for e, row in owner.items():
            h, _, t = train[row]
            keep[e] = True
            keep[t if h == e else h] = True
        mask = keep[train[:, 0]] | keep[train[:, 2]]
        mask[rows] = True
        return SampledDataset(_with_train(dataset, mask), spec, train[rows])

    keep_rel = rng.random(dataset.train.num_relations) < spec.p
    mask = keep_rel[train[:, 1]]
    alive = np.zeros(dataset.train.num_entities, dtype=bool)
    alive[train[mask][:, [0, 2]].ravel()] = True

    def evaluable(split: np.ndarray) -> np.ndarray:
        ok = keep_rel[split[:, 1]] & alive[split[:, 0]] & alive[split[:, 2]]
        return split[ok]

    sampled = _with_train(dataset, mask, evaluable(dataset.val), evaluable(dataset.test))
    return SampledDataset(sampled, spec, np.zeros((0, 3), dtype=np.int64))


def write_sampled(directory: str | Path, sampled: SampledDataset) -> dict[str, Path]:
    """Write the sampled splits plus ``sample_manifest.json``."""
    paths = write_dataset(directory, sampled.dataset)
    stats = graph_stats(sampled.dataset)
    manifest = {
        "strategy": sampled.spec.strategy,
        "p": sampled.spec.p,
        "seed": int(sampled.spec.seed),
        "size_mode": sampled.spec.size_mode,
        "cover_size": int(len(sampled.preserved_cover)),
        "counts": {r["split"]: {k: r[k] for k in ("triples", "entities", "relations")} for r in stats.records()},
    }
    paths["manifest"] = Path(directory) / "sample_manifest.json"
    paths["manifest"].write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return paths

"""Small generated knowledge graphs with labelled entities and word vectors.

Entities belong to latent clusters arranged on a ring and every relation
shifts the head cluster by a fixed offset, a pattern that rotations can
express, so link prediction is learnable from structure.  Each
entity label is a unique combination of vocabulary tokens, and each token has
a random unit word vector.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .kg import RawTriple, write_triples
from .text import WordVectorTable

__all__ = ["SyntheticKG", "generate", "write_vectors"]


@dataclass
class SyntheticKG:
    train: list[RawTriple]
    val: list[RawTriple]
    test: list[RawTriple]
    labels: list[str]
    vectors: WordVectorTable

    def write(self, directory: str | Path) -> dict[str, Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        paths = {"train": d / "train.txt", "val": d / "valid.txt", "test": d / "test.txt", "vectors": d / "vectors.vec"}
        write_triples(paths["train"], self.train)
        write_triples(paths["val"], self.val)
        write_triples(paths["test"], self.test)
        write_vectors(paths["vectors"], self.vectors)
        return paths


def write_vectors(path: str | Path, table: WordVectorTable) -> None:
    inv = sorted(table.tokens.items(), key=lambda kv: kv[1])
    lines = [f"{len(inv)} {table.dim}\n"]
    for tok, row in inv:
        lines.append(tok + " " + " ".join(repr(float(x)) for x in table.matrix[row]) + "\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def generate(
    num_entities: int = 500,
    num_relations: int = 8,
    num_triples: int = 4000,
    num_held: int = 400,
    num_clusters: int = 20,
    tokens_per_label: int = 3,
    vocab_size: int | None = None,
    vector_dim: int = 32,
    seed: int = 0,
) -> SyntheticKG:
    """Generate a clustered graph; ``num_held`` triples are split evenly into val and test.

    Held-out triples only use entities and relations that also occur in train.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    vocab_size = vocab_size or max(4 * num_entities, 64)
    vocab = [f"w{i}" for i in range(vocab_size)]

    labels, seen = [], set()
    while len(labels) < num_entities:
        combo = tuple(sorted(rng.choice(vocab_size, size=tokens_per_label, replace=False).tolist()))
        if combo not in seen:
            seen.add(combo)
            labels.append(" ".join(vocab[i] for i in combo))

    vecs = rng.standard_normal((vocab_size, vector_dim))
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    table = WordVectorTable(vector_dim, {w: i for i, w in enumerate(vocab)}, vecs)

    cluster = rng.permutation(num_entities) % num_clusters
    members = [np.flatnonzero(cluster == c) for c in range(num_clusters)]
    shifts = rng.choice(np.arange(1, num_clusters), size=num_relations, replace=num_relations >= num_clusters)
    target = (np.arange(num_clusters)[None, :] + shifts[:, None]) % num_clusters

    triples: dict[tuple[int, int, int], None] = {}
    limit = num_entities * num_entities * num_relations
    while len(triples) < min(num_triples, limit):
        h = int(rng.integers(num_entities))
        r = int(rng.integers(num_relations))
        pool = members[target[r, cluster[h]]]
        t = int(pool[rng.integers(len(pool))])
        triples.setdefault((h, r, t), None)
    rows = np.array(list(triples), dtype=np.int64)
    rows = rows[rng.permutation(len(rows))]

    train_rows = list(map(tuple, rows[num_held:].tolist()))
    held = []
    ent_deg = np.bincount(rows[num_held:, [0, 2]].ravel(), minlength=num_entities)
    rel_deg = np.bincount(rows[num_held:, 1], minlength=num_relations)
    for h, r, t in rows[:num_held].tolist():
        if ent_deg[h] and ent_deg[t] and rel_deg[r]:
            held.append((h, r, t))
        else:
            train_rows.append((h, r, t))
            ent_deg[[h, t]] += 1
            rel_deg[r] += 1
    half = len(held) // 2

    def raw(items):
        return [(labels[h], f"r{r}", labels[t]) for h, r, t in items]

    return SyntheticKG(raw(train_rows), raw(held[:half]), raw(held[half:]), labels, table)

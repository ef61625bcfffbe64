"""Exact kNN alignment, link weights, c-hop cropping and graph linking."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .kg import KnowledgeGraph

__all__ = [
    "METRICS",
    "LINK_RELATION",
    "AlignmentPair",
    "LinkedGraph",
    "align",
    "weight",
    "crop",
    "link",
    "write_alignment",
    "read_alignment",
    "write_linked",
    "read_linked",
]

METRICS = ("euclidean", "cosine")
LINK_RELATION = "<link>"

DOMAIN, GENERAL, LINK = 0, 1, 2
ORIGIN_TAGS = ("domain", "general", "link")


class AlignmentPair(NamedTuple):
    dkg: int
    gkg: int
    distance: float
    weight: float


def weight(distance: float) -> float:
    """Similarity weight ``1 / (1 + distance)`` of an aligned pair."""
    if not distance >= 0:
        raise ValueError(f"distance must be non-negative, got {distance}")
    return 1.0 / (1.0 + distance)


def _distance_block(q: np.ndarray, g: np.ndarray, metric: str, gnorm: np.ndarray | None) -> np.ndarray:
    if metric == "euclidean":
        # direct differences keep identical vectors at exactly zero distance
        diff = q[:, None, :] - g[None, :, :]
        return np.sqrt(np.einsum("qgd,qgd->qg", diff, diff))
    qnorm = np.sqrt(np.einsum("qd,qd->q", q, q))
    denom = qnorm[:, None] * gnorm[None, :]
    dots = q @ g.T
    with np.errstate(invalid="ignore", divide="ignore"):
        dist = 1.0 - dots / denom
    dist[denom == 0] = 1.0
    # rounding can push 1 - cos slightly below zero for parallel vectors
    return np.maximum(dist, 0.0)


def align(
    dkg_repr: np.ndarray,
    gkg_repr: np.ndarray,
    k: int = 1,
    metric: str = "euclidean",
    chunk_elems: int = 1 << 24,
) -> list[AlignmentPair]:
    """Exact k nearest GKG rows for every DKG row.

    Ties are broken by the smaller GKG id; output is sorted by
    ``(dkg, distance, gkg)``.
    """
    q_all = np.asarray(dkg_repr, dtype=np.float64)
    g = np.asarray(gkg_repr, dtype=np.float64)
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    if k < 1:
        raise ValueError("k must be >= 1")
    if g.ndim != 2 or len(g) == 0:
        raise ValueError("GKG representation set is empty")
    if q_all.ndim != 2 or q_all.shape[1] != g.shape[1]:
        raise ValueError(f"dimension mismatch: {q_all.shape} vs {g.shape}")

    kk = min(k, len(g))
    gnorm = np.sqrt(np.einsum("gd,gd->g", g, g)) if metric == "cosine" else None
    step = max(1, chunk_elems // max(1, g.shape[0] * g.shape[1]))
    pairs: list[AlignmentPair] = []
    for start in range(0, len(q_all), step):
        dist = _distance_block(q_all[start:start + step], g, metric, gnorm)
        kth = np.partition(dist, kk - 1, axis=1)[:, kk - 1]
        for row, (drow, bound) in enumerate(zip(dist, kth)):
            cand = np.flatnonzero(drow <= bound)
            best = cand[np.argsort(drow[cand], kind="stable")[:kk]]
            qid = start + row
            for j in best.tolist():
                d = float(drow[j])
                pairs.append(AlignmentPair(qid, j, d, weight(d)))
    return pairs


def crop(gkg: KnowledgeGraph, aligned: Iterable[int], c: int | None) -> KnowledgeGraph:
    """Keep aligned entities and everything within ``c`` undirected hops.

    ``c=None`` means no cropping.  Triples survive when both endpoints do;
    relations without surviving triples are dropped and ids are compacted in
    original order.
    """
    seeds = np.unique(np.fromiter(aligned, dtype=np.int64))
    if len(seeds) and (seeds.min() < 0 or seeds.max() >= gkg.num_entities):
        raise ValueError("aligned set contains ids outside the GKG")
    if c is None:
        return gkg
    if c < 1:
        raise ValueError("c must be a positive integer or None")

    tr = gkg.triples
    src = np.concatenate([tr[:, 0], tr[:, 2]])
    dst = np.concatenate([tr[:, 2], tr[:, 0]])
    reached = np.zeros(gkg.num_entities, dtype=bool)
    reached[seeds] = True
    frontier = reached.copy()
    for _ in range(c):
        nxt = np.zeros_like(reached)
        nxt[dst[frontier[src]]] = True
        nxt &= ~reached
        if not nxt.any():
            break
        reached |= nxt
        frontier = nxt

    keep_tr = tr[reached[tr[:, 0]] & reached[tr[:, 2]]]
    ent_ids = np.flatnonzero(reached)
    rel_ids = np.unique(keep_tr[:, 1])
    ent_map = np.full(gkg.num_entities, -1, dtype=np.int64)
    ent_map[ent_ids] = np.arange(len(ent_ids))
    rel_map = np.full(gkg.num_relations, -1, dtype=np.int64)
    rel_map[rel_ids] = np.arange(len(rel_ids))
    new_tr = np.stack([ent_map[keep_tr[:, 0]], rel_map[keep_tr[:, 1]], ent_map[keep_tr[:, 2]]], axis=1)
    return KnowledgeGraph(
        tuple(gkg.entities[i] for i in ent_ids),
        tuple(gkg.relations[i] for i in rel_ids),
        new_tr,
    )


@dataclass(frozen=True, eq=False)
class LinkedGraph:
    """Union of a DKG and a GKG plus directed DKG->GKG link triples.

    DKG entities keep ids ``0..|E_d|-1`` and GKG entities follow; relations
    are laid out the same way with the link relation last.
    """

    graph: KnowledgeGraph
    link_relation: int
    origins: np.ndarray
    weights: np.ndarray
    num_dkg_entities: int
    num_dkg_relations: int
    dropped_pairs: int = 0

    @property
    def link_mask(self) -> np.ndarray:
        return self.origins == LINK

    @property
    def link_triples(self) -> list[tuple[tuple[int, int, int], float]]:
        m = self.link_mask
        return [(tuple(t), float(w)) for t, w in zip(self.graph.triples[m].tolist(), self.weights[m])]

    @property
    def dkg_entities(self) -> np.ndarray:
        return np.arange(self.num_dkg_entities)


def link(
    dkg: KnowledgeGraph,
    gkg: KnowledgeGraph,
    pairs: Sequence[AlignmentPair],
    source: KnowledgeGraph | None = None,
) -> LinkedGraph:
    """Build the linked graph from ``pairs``.

    When ``source`` is given, pair GKG ids refer to that (uncropped) graph and
    are mapped onto ``gkg`` by label; pairs whose entity was cropped away are
    dropped and counted.
    """
    n_d, n_g = dkg.num_entities, gkg.num_entities
    r_d, r_g = dkg.num_relations, gkg.num_relations
    r_link = r_d + r_g

    rows, ws, dropped = [], [], 0
    for p in pairs:
        if not 0 <= p.dkg < n_d:
            raise ValueError(f"pair references unknown DKG entity {p.dkg}")
        g = p.gkg
        if source is not None and source is not gkg:
            try:
                g = gkg.entity_id(source.entities[p.gkg])
            except KeyError:
                dropped += 1
                continue
        elif not 0 <= g < n_g:
            dropped += 1
            continue
        if not 0.0 < p.weight <= 1.0:
            raise ValueError(f"link weight {p.weight} outside (0, 1]")
        rows.append((p.dkg, r_link, n_d + g))
        ws.append(p.weight)

    gt = gkg.triples + np.array([n_d, r_d, n_d], dtype=np.int64)
    lt = np.array(rows, dtype=np.int64).reshape(-1, 3)
    triples = np.concatenate([dkg.triples, gt, lt])
    origins = np.concatenate([
        np.full(len(dkg.triples), DOMAIN, np.int8),
        np.full(len(gt), GENERAL, np.int8),
        np.full(len(lt), LINK, np.int8),
    ])
    weights = np.ones(len(triples), dtype=np.float64)
    weights[len(triples) - len(lt):] = ws
    graph = KnowledgeGraph(dkg.entities + gkg.entities, dkg.relations + gkg.relations + (LINK_RELATION,), triples)
    origins.setflags(write=False)
    weights.setflags(write=False)
    return LinkedGraph(graph, r_link, origins, weights, n_d, r_d, dropped)


def write_alignment(
    path: str | Path,
    pairs: Sequence[AlignmentPair],
    dkg: KnowledgeGraph,
    gkg: KnowledgeGraph,
    k: int,
    metric: str,
    mode: str,
) -> None:
    lines = [f"# k={k}\tmetric={metric}\tmode={mode}\n", "# dkg\tgkg\tdistance\tweight\n"]
    for p in pairs:
        lines.append(f"{dkg.entities[p.dkg]}\t{gkg.entities[p.gkg]}\t{float(p.distance)!r}\t{float(p.weight)!r}\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_alignment(path: str | Path, dkg: KnowledgeGraph, gkg: KnowledgeGraph) -> tuple[list[AlignmentPair], dict]:
    """Parse an alignment file back into id pairs; labels resolve through the given graphs."""
    header: dict = {}
    pairs = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").split("\n"), start=1):
        if not line:
            continue
        if line.startswith("#"):
            for item in line[1:].strip().split("\t"):
                if "=" in item:
                    key, val = item.split("=", 1)
                    header[key] = int(val) if key == "k" else val
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 fields")
        d, w = float(fields[2]), float(fields[3])
        if not math.isclose(w, weight(d), rel_tol=0, abs_tol=0):
            raise ValueError(f"{path}:{lineno}: weight does not match distance")
        pairs.append(AlignmentPair(dkg.entity_id(fields[0]), gkg.entity_id(fields[1]), d, w))
    return pairs, header


def write_linked(directory: str | Path, lg: LinkedGraph) -> None:
    """Write the linked graph as id tables, an id triple file and weight/origin sidecars."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    g = lg.graph
    ent_src = ["domain" if i < lg.num_dkg_entities else "general" for i in range(g.num_entities)]
    rel_src = [
        "link" if i == lg.link_relation else ("domain" if i < lg.num_dkg_relations else "general")
        for i in range(g.num_relations)
    ]
    (d / "entities.tsv").write_text("".join(f"{i}\t{s}\t{lab}\n" for i, (s, lab) in enumerate(zip(ent_src, g.entities))))
    (d / "relations.tsv").write_text("".join(f"{i}\t{s}\t{lab}\n" for i, (s, lab) in enumerate(zip(rel_src, g.relations))))
    (d / "triples.tsv").write_text("".join(f"{h}\t{r}\t{t}\n" for h, r, t in g.triples.tolist()))
    link_idx = np.flatnonzero(lg.link_mask)
    (d / "weights.tsv").write_text("".join(f"{i}\t{float(lg.weights[i])!r}\n" for i in link_idx.tolist()))
    (d / "origins.tsv").write_text("".join(f"{i}\t{ORIGIN_TAGS[o]}\n" for i, o in enumerate(lg.origins.tolist())))
    (d / "meta.tsv").write_text(f"dropped_pairs\t{lg.dropped_pairs}\n")


def _read_table(path: Path) -> list[tuple[str, str]]:
    rows = []
    for line in path.read_text().split("\n"):
        if line:
            _, src, label = line.split("\t", 2)
            rows.append((src, label))
    return rows


def read_linked(directory: str | Path) -> LinkedGraph:
    d = Path(directory)
    ents = _read_table(d / "entities.tsv")
    rels = _read_table(d / "relations.tsv")
    text = (d / "triples.tsv").read_text()
    triples = np.array([list(map(int, ln.split("\t"))) for ln in text.split("\n") if ln], dtype=np.int64).reshape(-1, 3)
    tag_ids = {t: i for i, t in enumerate(ORIGIN_TAGS)}
    origins = np.zeros(len(triples), dtype=np.int8)
    for ln in (d / "origins.tsv").read_text().split("\n"):
        if ln:
            i, tag = ln.split("\t")
            origins[int(i)] = tag_ids[tag]
    weights = np.ones(len(triples), dtype=np.float64)
    for ln in (d / "weights.tsv").read_text().split("\n"):
        if ln:
            i, w = ln.split("\t")
            weights[int(i)] = float(w)
    dropped = 0
    meta = d / "meta.tsv"
    if meta.exists():
        dropped = int(meta.read_text().split("\t")[1])
    link_rel = [i for i, (s, _) in enumerate(rels) if s == "link"]
    if len(link_rel) != 1:
        raise ValueError(f"{d}: expected exactly one link relation")
    graph = KnowledgeGraph(tuple(l for _, l in ents), tuple(l for _, l in rels), triples)
    origins.setflags(write=False)
    weights.setflags(write=False)
    return LinkedGraph(
        graph,
        link_rel[0],
        origins,
        weights,
        sum(s == "domain" for s, _ in ents),
        sum(s == "domain" for s, _ in rels),
        dropped,
    )

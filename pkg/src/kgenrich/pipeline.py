"""Config-driven experiment pipeline.

Stages run in order ``sample -> represent -> align -> link -> train ->
evaluate`` and talk to each other only through files in the output
directory, so any stage can be re-run on its own.  The single-graph scenario
skips the representation, alignment and linking stages.
"""
from __future__ import annotations

import hashlib
import json
import os
import platform
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .align import (
    METRICS,
    align,
    crop,
    link,
    read_alignment,
    read_linked,
    write_alignment,
    write_linked,
)
from .evaluation import KnownTriples, evaluate
from .kg import COLUMN_ORDERS, Dataset, build_dataset, load_dataset, read_triples, write_dataset
from .rotate import TrainConfig, load_checkpoint, save_checkpoint, train, write_history
from .sampling import STRATEGIES, SamplingSpec, sample, write_sampled
from .text import MODES, entity_representations, load_word_vectors, read_representations, write_representations

__all__ = [
    "ConfigError",
    "StageError",
    "ExperimentConfig",
    "load_config",
    "STAGES",
    "run",
    "run_stage",
    "compare",
]

SCENARIOS = ("single", "linked")
STAGES = ("sample", "represent", "align", "link", "train", "evaluate")
LINKED_ONLY = ("represent", "align", "link")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, error: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(error).__name__}: {error}")
        self.stage = stage
        self.error = error


@dataclass(frozen=True)
class DataConfig:
    dkg_train: str
    dkg_val: str | None = None
    dkg_test: str | None = None
    gkg_train: str | None = None
    word_vectors: str | None = None
    column_order: str = "hrt"


@dataclass(frozen=True)
class SamplingConfig:
    strategy: str
    p: float
    seed: int | None = None
    size_mode: str = "exact"


@dataclass(frozen=True)
class AlignmentConfig:
    k: int = 1
    metric: str = "euclidean"
    mode: str = "concat"
    crop: int | None = None  # spelled "none" in config files


@dataclass(frozen=True)
class EvalConfig:
    ks: tuple[int, ...] = (1, 3, 10)
    split: str = "test"


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str
    output_dir: str
    data: DataConfig
    train: TrainConfig
    seed: int = 0
    sampling: SamplingConfig | None = None
    alignment: AlignmentConfig | None = None
    eval: EvalConfig = field(default_factory=EvalConfig)

    def snapshot(self) -> dict:
        out = asdict(self)
        if self.alignment is not None and self.alignment.crop is None:
            out["alignment"]["crop"] = "none"
        out["eval"]["ks"] = list(self.eval.ks)
        return out

    def fingerprint(self) -> str:
        snap = self.snapshot()
        snap.pop("output_dir")
        return hashlib.sha256(json.dumps(snap, sort_keys=True).encode()).hexdigest()

    @property
    def sampling_spec(self) -> SamplingSpec | None:
        if self.sampling is None:
            return None
        s = self.sampling
        return SamplingSpec(s.strategy, s.p, self.seed if s.seed is None else s.seed, s.size_mode)


def _section(cls, raw: Any, where: str, base: Path | None = None, overrides: dict | None = None):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    values = dict(raw)
    if overrides:
        values.update(overrides)
    if base is not None:
        for key, val in values.items():
            if isinstance(val, str) and key != "column_order" and not Path(val).is_absolute():
                values[key] = os.path.normpath(base / val)
    try:
        return cls(**values)
    except TypeError as err:
        raise ConfigError(f"{where}: {err}") from None
    except ValueError as err:
        raise ConfigError(f"{where}: {err}") from None


def parse_config(raw: dict, base: Path | None = None) -> ExperimentConfig:
    """Validate a config mapping; relative paths resolve against ``base``."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be an object")
    top = {"scenario", "output_dir", "seed", "data", "sampling", "alignment", "train", "eval"}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    for key in ("scenario", "output_dir", "data"):
        if key not in raw:
            raise ConfigError(f"missing required key {key!r}")
    scenario = raw["scenario"]
    if scenario not in SCENARIOS:
        raise ConfigError(f"scenario must be one of {SCENARIOS}, got {scenario!r}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")

    data = _section(DataConfig, raw["data"], "data", base)
    if data.column_order not in COLUMN_ORDERS:
        raise ConfigError(f"data.column_order must be one of {COLUMN_ORDERS}")
    sampling = None
    if raw.get("sampling") is not None:
        sp = dict(raw["sampling"]) if isinstance(raw["sampling"], dict) else raw["sampling"]
        if isinstance(sp, dict) and sp.get("seed") is None:
            sp["seed"] = seed
        sampling = _section(SamplingConfig, sp, "sampling")
        if sampling.strategy not in STRATEGIES:
            raise ConfigError(f"sampling.strategy must be one of {STRATEGIES}")
    alignment = None
    if raw.get("alignment") is not None:
        al = dict(raw["alignment"]) if isinstance(raw["alignment"], dict) else raw["alignment"]
        if isinstance(al, dict) and "crop" in al:
            c = al["crop"]
            if c == "none":
                al["crop"] = None
            elif not (isinstance(c, int) and not isinstance(c, bool) and c >= 1):
                raise ConfigError('alignment.crop must be a positive integer or "none"')
        alignment = _section(AlignmentConfig, al, "alignment")
        if alignment.metric not in METRICS:
            raise ConfigError(f"alignment.metric must be one of {METRICS}")
        if alignment.mode not in MODES:
            raise ConfigError(f"alignment.mode must be one of {MODES}")
        if not isinstance(alignment.k, int) or alignment.k < 1:
            raise ConfigError("alignment.k must be a positive integer")

    tr = dict(raw.get("train", {}))
    tr.setdefault("seed", seed)
    train_cfg = _section(TrainConfig, tr, "train")
    ev = dict(raw.get("eval", {}))
    if "ks" in ev:
        ev["ks"] = tuple(ev["ks"])
    eval_cfg = _section(EvalConfig, ev, "eval")
    if eval_cfg.split not in ("val", "test") or not all(isinstance(k, int) and k >= 1 for k in eval_cfg.ks):
        raise ConfigError("eval.split must be val/test and eval.ks positive integers")

    if scenario == "single":
        if data.gkg_train is not None or data.word_vectors is not None or alignment is not None:
            raise ConfigError("scenario 'single' does not accept gkg_train, word_vectors or alignment")
    else:
        if data.gkg_train is None or data.word_vectors is None:
            raise ConfigError("scenario 'linked' requires data.gkg_train and data.word_vectors")
        if alignment is None:
            alignment = AlignmentConfig()

    out = raw["output_dir"]
    if base is not None and not Path(out).is_absolute():
        out = os.path.normpath(base / out)
    return ExperimentConfig(scenario, out, data, train_cfg, seed, sampling, alignment, eval_cfg)


def _apply_override(raw: dict, assignment: str) -> None:
    key, sep, value = assignment.partition("=")
    if not sep:
        raise ConfigError(f"override {assignment!r} must look like key=value")
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    parts = key.split(".")
    if len(parts) > 2:
        raise ConfigError(f"override key {key!r} nests deeper than one level")
    node = raw
    if len(parts) == 2:
        node = raw.setdefault(parts[0], {})
        if node is None:
            node = raw[parts[0]] = {}
    node[parts[-1]] = parsed


def load_config(path: str | Path, overrides: list[str] | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: {err}") from None
    for item in overrides or []:
        _apply_override(raw, item)
    return parse_config(raw, path.resolve().parent)


# stage plumbing ----------------------------------------------------------

def _out(cfg: ExperimentConfig) -> Path:
    return Path(cfg.output_dir)


def _dkg(cfg: ExperimentConfig) -> Dataset:
    d = _out(cfg) / "dkg"
    return load_dataset(d / "train.txt", d / "valid.txt", d / "test.txt")


def _gkg(cfg: ExperimentConfig):
    return build_dataset(read_triples(cfg.data.gkg_train, cfg.data.column_order)).train


def _sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def stage_sample(cfg: ExperimentConfig) -> dict:
    d = cfg.data
    source = load_dataset(d.dkg_train, d.dkg_val, d.dkg_test, d.column_order)
    out = _out(cfg) / "dkg"
    spec = cfg.sampling_spec
    if spec is None:
        write_dataset(out, source)
        dataset = source
    else:
        sampled = sample(source, spec)
        write_sampled(out, sampled)
        dataset = sampled.dataset
    return {
        "dkg_entities": dataset.train.num_entities,
        "dkg_relations": dataset.train.num_relations,
        "dkg_train_triples": len(dataset.train),
        "source_train_triples": len(source.train),
    }


def stage_represent(cfg: ExperimentConfig) -> dict:
    table = load_word_vectors(Path(cfg.data.word_vectors))
    dkg, gkg = _dkg(cfg).train, _gkg(cfg)
    rdir = _out(cfg) / "repr"
    rdir.mkdir(parents=True, exist_ok=True)
    write_representations(rdir / "dkg.bin", entity_representations(dkg, table, cfg.alignment.mode))
    write_representations(rdir / "gkg.bin", entity_representations(gkg, table, cfg.alignment.mode))
    return {"dkg_entities": dkg.num_entities, "gkg_entities": gkg.num_entities}


def stage_align(cfg: ExperimentConfig) -> dict:
    rdir = _out(cfg) / "repr"
    _, xd = read_representations(rdir / "dkg.bin")
    _, xg = read_representations(rdir / "gkg.bin")
    al = cfg.alignment
    pairs = align(xd, xg, al.k, al.metric)
    write_alignment(_out(cfg) / "alignment.tsv", pairs, _dkg(cfg).train, _gkg(cfg), al.k, al.metric, al.mode)
    return {"alignment_pairs": len(pairs)}


def stage_link(cfg: ExperimentConfig) -> dict:
    dkg, gkg = _dkg(cfg).train, _gkg(cfg)
    pairs, _ = read_alignment(_out(cfg) / "alignment.tsv", dkg, gkg)
    cropped = crop(gkg, [p.gkg for p in pairs], cfg.alignment.crop)
    lg = link(dkg, cropped, pairs, source=gkg)
    write_linked(_out(cfg) / "linked", lg)
    return {
        "cropped_gkg_entities": cropped.num_entities,
        "cropped_gkg_triples": len(cropped),
        "link_triples": int(lg.link_mask.sum()),
        "dropped_pairs": lg.dropped_pairs,
    }


def _training_graph(cfg: ExperimentConfig):
    if cfg.scenario == "linked":
        return read_linked(_out(cfg) / "linked")
    return _dkg(cfg).train


def stage_train(cfg: ExperimentConfig) -> dict:
    graph = _training_graph(cfg)
    params, history = train(graph, cfg.train)
    save_checkpoint(_out(cfg) / "checkpoint.bin", params)
    write_history(_out(cfg) / "history.tsv", history)
    n = len(graph.graph) if hasattr(graph, "graph") else len(graph)
    return {"trained_triples": n, "final_mean_loss": history[-1].mean_loss}


def stage_evaluate(cfg: ExperimentConfig) -> dict:
    dkg = _dkg(cfg)
    ckpt = _out(cfg) / "checkpoint.bin"
    params = load_checkpoint(ckpt)
    known = [dkg.train.triples, dkg.val, dkg.test]
    if cfg.scenario == "linked":
        known.append(read_linked(_out(cfg) / "linked").graph.triples)
    candidates = np.arange(dkg.train.num_entities)
    report = evaluate(params, dkg.split(cfg.eval.split), candidates, KnownTriples(known), cfg.eval.ks)
    record = report.to_dict()
    record.update(
        split=cfg.eval.split,
        scenario=cfg.scenario,
        config_fingerprint=cfg.fingerprint(),
        checkpoint_sha256=_sha256(ckpt),
    )
    (_out(cfg) / "report.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return {"evaluated_triples": report.count}


_STAGE_FUNCS = {
    "sample": stage_sample,
    "represent": stage_represent,
    "align": stage_align,
    "link": stage_link,
    "train": stage_train,
    "evaluate": stage_evaluate,
}


def run_stage(cfg: ExperimentConfig, stage: str) -> dict:
    if stage not in _STAGE_FUNCS:
        raise ValueError(f"unknown stage {stage!r}")
    if stage in LINKED_ONLY and cfg.scenario != "linked":
        raise ConfigError(f"stage {stage!r} only applies to the linked scenario")
    _out(cfg).mkdir(parents=True, exist_ok=True)
    try:
        return _STAGE_FUNCS[stage](cfg)
    except Exception as err:
        raise StageError(stage, err) from err


def _versions() -> dict:
    import numba

    return {"kgenrich": __version__, "python": platform.python_version(), "numpy": np.__version__, "numba": numba.__version__}


def _input_digests(cfg: ExperimentConfig) -> dict:
    paths = [cfg.data.dkg_train, cfg.data.dkg_val, cfg.data.dkg_test, cfg.data.gkg_train, cfg.data.word_vectors]
    return {p: _sha256(p) for p in paths if p is not None}


def run(cfg: ExperimentConfig) -> Path:
    """Run every stage the scenario needs and write ``manifest.json``."""
    out = _out(cfg)
    out.mkdir(parents=True, exist_ok=True)
    manifest: dict = {
        "config": cfg.snapshot(),
        "config_fingerprint": cfg.fingerprint(),
        "versions": _versions(),
        "inputs": _input_digests(cfg),
        "counts": {},
        "stages": [],
        "status": "partial",
    }
    stages = [s for s in STAGES if cfg.scenario == "linked" or s not in LINKED_ONLY]
    try:
        for stage in stages:
            t0 = time.perf_counter()
            try:
                counts = run_stage(cfg, stage)
            except StageError:
                manifest["stages"].append({"name": stage, "status": "failed", "seconds": time.perf_counter() - t0})
                raise
            manifest["stages"].append({"name": stage, "status": "ok", "seconds": time.perf_counter() - t0})
            manifest["counts"].update(counts)
        manifest["status"] = "complete"
    finally:
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def verify_inputs(manifest_path: str | Path) -> dict[str, bool]:
    """Recompute input digests recorded in a manifest."""
    manifest = json.loads(Path(manifest_path).read_text())
    return {p: Path(p).exists() and _sha256(p) == digest for p, digest in manifest["inputs"].items()}


def compare(single: dict, linked: dict) -> dict:
    """Relative boost of the linked model over the single-graph model.

    Hits@k and MRR improve upwards; MR improves downwards.  A boost over a
    zero baseline is undefined and reported as ``None``.
    """
    if single.get("count") != linked.get("count"):
        raise ValueError("reports cover different test sets")
    boost = {}
    for key in sorted(single):
        if key.startswith("hits@") or key == "mrr":
            base = single[key]
            boost[key] = (linked[key] - base) / base if base else None
    boost["mr"] = (single["mr"] - linked["mr"]) / single["mr"]
    return boost

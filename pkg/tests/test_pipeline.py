import json

import numpy as np
import pytest

from kgenrich import cli
from kgenrich.pipeline import (
    ConfigError,
    StageError,
    compare,
    load_config,
    parse_config,
    run,
    run_stage,
    verify_inputs,
)
from kgenrich.synthetic import generate

TRAIN = {"dim": 8, "epochs": 2, "batch_size": 64, "negatives": 4}


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    generate(num_entities=60, num_relations=3, num_triples=400, num_held=40, vector_dim=8, seed=1).write(d)
    return d


def config(data, out, scenario="linked", **extra):
    raw = {
        "scenario": scenario,
        "output_dir": str(out),
        "seed": 3,
        "data": {"dkg_train": str(data / "train.txt"), "dkg_val": str(data / "valid.txt"), "dkg_test": str(data / "test.txt")},
        "sampling": {"strategy": "triple", "p": 0.5},
        "train": dict(TRAIN),
    }
    if scenario == "linked":
        raw["data"] |= {"gkg_train": str(data / "train.txt"), "word_vectors": str(data / "vectors.vec")}
        raw["alignment"] = {"k": 1, "metric": "euclidean", "mode": "concat", "crop": "none"}
    for key, val in extra.items():
        raw[key] = val
    return raw


def test_single_forbids_linked_fields(data, tmp_path):
    raw = config(data, tmp_path, "single")
    raw["alignment"] = {"k": 1}
    with pytest.raises(ConfigError):
        parse_config(raw)
    raw = config(data, tmp_path, "single")
    raw["data"]["gkg_train"] = "x"
    with pytest.raises(ConfigError):
        parse_config(raw)


def test_linked_requires_gkg(data, tmp_path):
    raw = config(data, tmp_path)
    del raw["data"]["word_vectors"]
    with pytest.raises(ConfigError):
        parse_config(raw)


@pytest.mark.parametrize(
    "section, key, value",
    [(None, "typo", 1), ("train", "lr", 0.1), ("alignment", "crop", 0), ("alignment", "crop", "inf"),
     ("alignment", "metric", "l1"), (None, "scenario", "both"), ("sampling", "strategy", "edge")],
)
def test_invalid_configs(data, tmp_path, section, key, value):
    raw = config(data, tmp_path)
    (raw if section is None else raw[section])[key] = value
    with pytest.raises(ConfigError):
        parse_config(raw)


def test_crop_spelling_and_seed_defaults(data, tmp_path):
    cfg = parse_config(config(data, tmp_path))
    assert cfg.alignment.crop is None and cfg.snapshot()["alignment"]["crop"] == "none"
    assert cfg.sampling.seed == 3 and cfg.train.seed == 3
    raw = config(data, tmp_path)
    raw["alignment"]["crop"] = 2
    assert parse_config(raw).alignment.crop == 2


def test_load_config_resolves_relative_paths_and_overrides(data, tmp_path):
    raw = config(data, "out")
    raw["data"]["dkg_train"] = "train.txt"
    path = data / "exp.json"
    path.write_text(json.dumps(raw))
    cfg = load_config(path, ["train.epochs=7", "alignment.crop=1", "seed=9"])
    assert cfg.data.dkg_train == str(data / "train.txt")
    assert cfg.output_dir == str(data / "out")
    assert cfg.train.epochs == 7 and cfg.alignment.crop == 1 and cfg.seed == 9
    with pytest.raises(ConfigError):
        load_config(path, ["train.epochs"])


def test_fingerprint_ignores_output_dir(data, tmp_path):
    a = parse_config(config(data, tmp_path / "a"))
    b = parse_config(config(data, tmp_path / "b"))
    c = parse_config(config(data, tmp_path / "a", seed=4))
    assert a.fingerprint() == b.fingerprint() != c.fingerprint()


def test_single_run_artifacts(data, tmp_path):
    out = run(parse_config(config(data, tmp_path / "s", "single")))
    names = {p.name for p in out.iterdir()}
    assert {"manifest.json", "checkpoint.bin", "history.tsv", "report.json", "dkg"} <= names
    assert not {"alignment.tsv", "linked", "repr"} & names
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "complete"
    assert [s["name"] for s in manifest["stages"]] == ["sample", "train", "evaluate"]
    report = json.loads((out / "report.json").read_text())
    assert report["scenario"] == "single" and report["count"] == 20
    assert all(verify_inputs(out / "manifest.json").values())


@pytest.fixture(scope="module")
def linked_run(data, tmp_path_factory):
    out = tmp_path_factory.mktemp("linked")
    cfg = parse_config(config(data, out))
    run(cfg)
    return cfg, out


def test_linked_run_accounting(linked_run):
    cfg, out = linked_run
    manifest = json.loads((out / "manifest.json").read_text())
    counts = manifest["counts"]
    rows = [ln for ln in (out / "alignment.tsv").read_text().splitlines() if not ln.startswith("#")]
    assert len(rows) == counts["dkg_entities"]  # k = 1
    assert counts["trained_triples"] == counts["dkg_train_triples"] + counts["cropped_gkg_triples"] + counts["link_triples"]
    assert counts["link_triples"] <= cfg.alignment.k * counts["dkg_entities"]
    assert [s["name"] for s in manifest["stages"]] == ["sample", "represent", "align", "link", "train", "evaluate"]
    assert manifest["versions"]["numpy"] == np.__version__


def test_stages_rerun_from_files(linked_run, tmp_path):
    cfg, out = linked_run
    before = (out / "checkpoint.bin").read_bytes()
    report = (out / "report.json").read_bytes()
    run_stage(cfg, "train")
    run_stage(cfg, "evaluate")
    assert (out / "checkpoint.bin").read_bytes() == before
    assert (out / "report.json").read_bytes() == report


def test_rerun_is_byte_identical(data, tmp_path):
    for name in ("a", "b"):
        run(parse_config(config(data, tmp_path / "x")))
        (tmp_path / "x").rename(tmp_path / name)
    for f in ("checkpoint.bin", "report.json", "alignment.tsv", "linked/triples.tsv", "linked/weights.tsv", "dkg/train.txt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_crop_reduces_gkg(data, tmp_path):
    raw = config(data, tmp_path)
    raw["alignment"]["crop"] = 1
    raw["sampling"] = {"strategy": "node", "p": 0.1}
    cfg = parse_config(raw)
    run(cfg)
    counts = json.loads((tmp_path / "manifest.json").read_text())["counts"]
    assert counts["cropped_gkg_entities"] <= counts["gkg_entities"]
    assert counts["link_triples"] + counts["dropped_pairs"] == counts["alignment_pairs"]


def test_stage_failure_is_flagged(data, tmp_path):
    raw = config(data, tmp_path)
    raw["data"]["word_vectors"] = str(tmp_path / "missing.vec")
    (tmp_path / "missing.vec").write_text("1 8\nw0 1 2\n")
    cfg = parse_config(raw)
    with pytest.raises(StageError) as err:
        run(cfg)
    assert err.value.stage == "represent"
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["status"] == "partial"
    assert [(s["name"], s["status"]) for s in manifest["stages"]] == [("sample", "ok"), ("represent", "failed")]


def test_linked_only_stage_rejected_for_single(data, tmp_path):
    with pytest.raises(ConfigError):
        run_stage(parse_config(config(data, tmp_path, "single")), "align")


def test_compare_examples():
    single = {"hits@10": 0.347, "mrr": 0.2, "mr": 7681.0, "count": 5}
    linked = {"hits@10": 0.502, "mrr": 0.25, "mr": 1245.0, "count": 5}
    boost = compare(single, linked)
    assert boost["hits@10"] == pytest.approx(0.4467, abs=1e-4)
    assert boost["mr"] == pytest.approx(0.838, abs=1e-3)
    assert boost["mrr"] == pytest.approx(0.25)
    assert all(v == 0 for v in compare(single, single).values())
    with pytest.raises(ValueError):
        compare(single, linked | {"count": 6})


def test_cli_run_stats_compare(data, tmp_path, capsys):
    for scenario in ("single", "linked"):
        path = tmp_path / f"{scenario}.json"
        path.write_text(json.dumps(config(data, tmp_path / scenario, scenario)))
        assert cli.main(["run", "--config", str(path), "--set", "train.epochs=1"]) == 0
    capsys.readouterr()
    assert cli.main(["stats", "--config", str(tmp_path / "single.json")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert json.loads(lines[0])["split"] == "train" and "# sampled" in lines
    assert cli.main(["compare", str(tmp_path / "single/report.json"), str(tmp_path / "linked/report.json")]) == 0
    assert "hits@10" in json.loads(capsys.readouterr().out)
    assert cli.main(["evaluate", "--config", str(tmp_path / "single.json")]) == 0


def test_cli_error_record(data, tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(config(data, tmp_path / "o", "single") | {"extra": 1}))
    assert cli.main(["run", "--config", str(path)]) != 0
    record = json.loads(capsys.readouterr().err)
    assert record["error"] == "ConfigError" and "extra" in record["message"]
    path.write_text(json.dumps(config(data, tmp_path / "o", "single")))
    assert cli.main(["train", "--config", str(path)]) != 0
    record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert record["stage"] == "train"

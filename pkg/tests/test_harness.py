import copy
import csv
import json
import re

import pytest

from sdlab.cli import EXIT_CONFIG, EXIT_OK, EXIT_STAGE, main
from sdlab.config import PROFILES, ConfigError, from_dict, load_config, profile
from sdlab.harness import INDEX_NAME, ArtifactIndex, StageError, file_sha256, run_pipeline, stages_for
from sdlab.reports import (
    HESSIAN_COLUMNS,
    LANDSCAPE_COLUMNS,
    LMC_COLUMNS,
    REPORT_KINDS,
    SCATTER_COLUMNS,
    SPARSITY_COLUMNS,
    MissingArtifactError,
    emit_report,
    scatter_rows,
)


def tiny(out, **over) -> dict:
    raw = copy.deepcopy(PROFILES["quick"])
    raw["train"]["epochs"] = 5
    raw["distill"] = {"ipc": 5, "outer_steps": 20}
    raw["analysis"].update(num_alphas=5, grid_resolution=[6, 5], hessian_probes=5, eval_seeds=[1, 2])
    raw["prune"]["rounds"] = 2
    raw["output_dir"] = str(out)
    raw.update(over)
    return raw


@pytest.fixture(scope="module")
def quick_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("quick")
    cfg = from_dict({**PROFILES["quick"], "output_dir": str(out)})
    return cfg, run_pipeline(cfg)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    return run_pipeline(from_dict(tiny(out)))


def header(path):
    with open(path) as fh:
        return tuple(next(csv.reader(fh)))


def test_quick_index_lists_curves_for_every_family_and_round(quick_run):
    cfg, index = quick_run
    assert index.status == "ok" and cfg.seeds == (1, 2)
    curves = {(e.meta["family"], e.meta["round"]) for e in index.of_kind("curve")}
    expected = {("dense", 0)} | {(f, r) for f in ("imp", "distilled") for r in (1, 2, 3)}
    assert curves == expected
    for e in index.of_kind("curve"):
        assert e.meta["ordering_seeds"] == [1, 2]


def test_every_written_file_is_indexed_with_its_hash(quick_run):
    _, index = quick_run
    on_disk = {str(p.relative_to(index.root)) for p in index.root.rglob("*") if p.is_file()}
    assert on_disk - {INDEX_NAME} == set(index.hashes())
    for e in index.entries:
        assert file_sha256(index.resolve(e)) == e.sha256


def test_index_roundtrip_and_no_timestamps(quick_run):
    _, index = quick_run
    text = index.path.read_text()
    assert not re.search(r"\d{4}-\d{2}-\d{2}T", text)
    loaded = ArtifactIndex.load(index.root)
    assert loaded.hashes() == index.hashes() and loaded.config_hash == index.config_hash


def test_golden_csv_headers(quick_run):
    _, index = quick_run
    r = index.root / "reports"
    assert header(r / "lmc_imp.csv") == LMC_COLUMNS == ("round", "alpha", "train_loss", "val_accuracy")
    assert header(r / "landscape_imp_round3.csv") == LANDSCAPE_COLUMNS == ("x", "y", "loss")
    assert header(r / "sparsity_accuracy.csv") == SPARSITY_COLUMNS
    assert header(r / "barrier_scatter.csv") == SCATTER_COLUMNS
    assert header(r / "hessian_table.csv") == HESSIAN_COLUMNS
    assert len(HESSIAN_COLUMNS) == 5
    assert header(index.root / "curves/imp_round1_pair0.csv") == ("alpha", "train_loss", "val_accuracy")


def test_landscape_svg_marks_three_reference_models(quick_run):
    _, index = quick_run
    for fam in ("imp", "distilled"):
        svg = (index.root / f"reports/landscape_{fam}_round3.svg").read_text()
        assert svg.count('class="ref-marker"') == 3


def test_hessian_table_rows(quick_run):
    _, index = quick_run
    with open(index.root / "reports/hessian_table.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["subnetwork"] for r in rows][:1] == ["Dense"]
    assert {r["subnetwork"] for r in rows} == {"Dense", "IMP", "Synthetic"}
    for r in rows:
        assert r["sparsity"].endswith("%") and " / " in r["min_max"] and " ± " in r["mean_std"]


def test_data_cost_rows(quick_run):
    cfg, index = quick_run
    summary = json.loads((index.root / "prune/summary.json").read_text())
    by = {(r["family"], r["round"]): r for r in summary["rows"]}
    for rnd in (1, 2, 3):
        assert by[("imp", rnd)]["points_to_find_mask"] == rnd * cfg.train.epochs * summary["train_rows"]
        assert by[("distilled", rnd)]["points_to_find_mask"] == rnd * cfg.train.epochs * summary["synthetic_rows"]


def test_scatter_rows_use_matched_rounds(quick_run):
    _, index = quick_run
    stab = json.loads((index.root / "stability/summary.json").read_text())
    prune = json.loads((index.root / "prune/summary.json").read_text())
    rows = scatter_rows(stab, prune)
    assert [r["round"] for r in rows] == [1, 2, 3]
    for r in rows:
        assert r["compression"] == pytest.approx(prune["train_rows"] / prune["synthetic_rows"])


def test_rerun_gives_identical_hashes(tiny_run, tmp_path):
    again = run_pipeline(from_dict(tiny(tmp_path)))
    assert again.hashes() == tiny_run.hashes()
    assert again.path.read_bytes() == tiny_run.path.read_bytes()


def test_output_dir_does_not_change_config_hash(tmp_path):
    assert from_dict(tiny(tmp_path / "a")).digest() == from_dict(tiny(tmp_path / "b")).digest()


def test_failed_stage_is_marked(tmp_path):
    raw = tiny(tmp_path)
    raw["dataset"] = {"kind": "idx", "images": str(tmp_path / "none"), "labels": str(tmp_path / "none2")}
    with pytest.raises(StageError) as exc:
        run_pipeline(from_dict(raw))
    assert exc.value.stage == "data"
    index = ArtifactIndex.load(tmp_path)
    assert index.status == "FAILED" and index.failed_stage == "data" and index.error


def test_report_requires_its_artifacts(tmp_path):
    index = run_pipeline(from_dict(tiny(tmp_path)), until="prune", families=("imp",))
    with pytest.raises(MissingArtifactError) as exc:
        emit_report(index, "hessian_table")
    assert "hessian_stats" in exc.value.missing
    emit_report(index, "sparsity_accuracy")
    assert "reports/sparsity_accuracy.csv" in ArtifactIndex.load(tmp_path).hashes()


def test_stage_selection():
    assert stages_for("prune") == ("data", "distill", "prune")
    assert stages_for("prune", families=("imp",)) == ("data", "prune")
    assert stages_for("hessian") == ("data", "distill", "prune", "hessian")
    with pytest.raises(ValueError):
        stages_for("train")


def test_reports_cover_every_kind(tiny_run):
    produced = {e.meta.get("report") for e in tiny_run.entries if e.kind.startswith("report")}
    assert produced == set(REPORT_KINDS)


# -- config ----------------------------------------------------------------


def test_profiles_parse():
    for name in PROFILES:
        cfg = profile(name)
        assert cfg.seed_pairs and len(cfg.seeds) % 2 == 0
    with pytest.raises(ConfigError):
        profile("nope")


@pytest.mark.parametrize(
    "patch",
    [
        {"bogus": 1},
        {"version": 2},
        {"seeds": [1]},
        {"seeds": [1, 1]},
        {"seeds": [-1, 2]},
        {"train": {"epochs": 1, "batch_size": 1, "learning_rate": 0.1, "speed": 3}},
        {"dataset": {"kind": "moons"}},
        {"arch": {"kind": "mlp", "layer_sizes": [2]}},
        {"prune": {"rate": 1.5}},
        {"analysis": {"num_alphas": 2}},
    ],
)
def test_bad_configs_rejected(patch, tmp_path):
    with pytest.raises(ConfigError):
        from_dict({**tiny(tmp_path), **patch})


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(bad)


# -- cli -------------------------------------------------------------------


def write_cfg(tmp_path, **over):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(tiny(tmp_path / "out", **over)))
    return path


def test_cli_prune_and_report(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    assert main(["prune", "--mode", "imp", "--config", str(cfg)]) == EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert summary["status"] == "ok" and summary["artifacts"]["mask"] == 2
    assert "synthetic_dataset" not in summary["artifacts"]
    assert main(["report", "--kind", "hessian_table", "--config", str(cfg)]) == EXIT_STAGE
    assert main(["report", "--kind", "sparsity_accuracy", "--config", str(cfg)]) == EXIT_OK


def test_cli_config_errors(tmp_path):
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG
    assert main(["run", "--config", str(write_cfg(tmp_path, bogus=1))]) == EXIT_CONFIG
    assert main(["report", "--output-dir", str(tmp_path / "empty")]) == EXIT_CONFIG
    assert main(["run", "--seed", "-1", "--output-dir", str(tmp_path / "x")]) == EXIT_CONFIG


def test_cli_stage_failure(tmp_path):
    cfg = write_cfg(tmp_path, dataset={"kind": "idx", "images": "/nonexistent", "labels": "/nonexistent"})
    assert main(["prune", "--mode", "imp", "--config", str(cfg)]) == EXIT_STAGE
    assert ArtifactIndex.load(tmp_path / "out").status == "FAILED"


def test_cli_seed_override_changes_init(tmp_path):
    cfg = write_cfg(tmp_path)
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert main(["prune", "--mode", "imp", "--config", str(cfg), "--output-dir", str(out_a)]) == EXIT_OK
    assert main(["prune", "--mode", "imp", "--config", str(cfg), "--output-dir", str(out_b), "--seed", "9"]) == EXIT_OK
    ha, hb = ArtifactIndex.load(out_a).hashes(), ArtifactIndex.load(out_b).hashes()
    assert ha["models/init.sdlab"] != hb["models/init.sdlab"]


def test_cli_requires_mode_for_prune():
    with pytest.raises(SystemExit) as exc:
        main(["prune"])
    assert exc.value.code == 2

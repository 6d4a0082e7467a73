import csv
import json

import numpy as np
import pytest

from corrprior.cli import main
from corrprior.cohort import load_cohort
from corrprior.formats import read_particles, write_nrrd, write_particles
from corrprior.geometry import farthest_point_subsample
from corrprior.metrics import evaluate_cohort
from corrprior.pipeline import recompute_val_cd, prepare_data
from corrprior.config import load_config

from conftest import tiny_model_config


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory, tiny_cohort):
    path = tmp_path_factory.mktemp("cfg") / "config.json"
    path.write_text(json.dumps({
        "data": {"cohort": str(tiny_cohort), "split": [0.5, 0.25, 0.25]},
        "model": tiny_model_config().to_dict(),
        "train": {"learning_rate": 1e-3, "batch_size": 2, "surface_epochs": 2, "align_epochs": 1,
                  "refine_epochs": 1},
        "eval": {"specificity_samples": 50},
    }))
    return path


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory, tiny_config):
    runs = tmp_path_factory.mktemp("runs")
    assert main(["train", "--config", str(tiny_config), "--runs-dir", str(runs), "--name", "t", "--phase", "all",
                 "--with-baseline"]) == 0
    return runs / "t"


def test_generate(tmp_path, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"n_samples": 3, "volume_shape": [32, 32, 32], "radii_ranges": [[4, 10]] * 3,
                                "mesh_frequency": 2}))
    assert main(["generate", "--spec", str(spec), "--out", str(tmp_path / "c")]) == 0
    manifest = capsys.readouterr().out.strip()
    assert manifest.endswith("manifest.csv")
    assert len(list(csv.DictReader(open(manifest)))) == 3
    assert main(["generate", "--spec", str(spec), "--out", str(tmp_path / "d")]) == 0
    for sub in ("meshes/s000.ply", "images/s002.nrrd"):
        assert (tmp_path / "c" / sub).read_bytes() == (tmp_path / "d" / sub).read_bytes()


def test_generate_default_spec_sample_count():
    from corrprior.cohort import SyntheticSpec

    assert SyntheticSpec().validate().n_samples == 60


def test_generate_bad_radii(tmp_path, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"radii_ranges": [[-1, 3]] * 3}))
    assert main(["generate", "--spec", str(spec), "--out", str(tmp_path / "c")]) == 2
    assert "radius" in capsys.readouterr().err


def test_bad_arguments_exit_2():
    assert main(["train", "--phase", "warmup"]) == 2


def test_train_writes_phase_dirs(trained_run):
    for sub in ("phase1", "phase2", "phase3", "baseline"):
        assert (trained_run / sub / "manifest.json").exists()
        assert (trained_run / sub / "log.jsonl").exists()
        assert (trained_run / sub / "steps.jsonl").exists()
    assert (trained_run / "config.json").exists() and (trained_run / "splits.csv").exists()
    assert (trained_run / "template.particles").exists()


def test_logged_val_cd_matches_recompute(trained_run, tiny_config):
    cfg = load_config(tiny_config)
    data = prepare_data(cfg)
    for sub in ("phase1", "phase3", "baseline"):
        manifest = json.loads((trained_run / sub / "manifest.json").read_text())
        assert recompute_val_cd(trained_run / sub, data) == pytest.approx(manifest["val_cd"], abs=1e-6)


def test_refine_without_align_exit_3(tmp_path, tiny_config):
    assert main(["train", "--config", str(tiny_config), "--runs-dir", str(tmp_path), "--name", "x",
                 "--phase", "refine"]) == 3


def test_unknown_override_exit_2(tmp_path, tiny_config):
    assert main(["train", "--config", str(tiny_config), "--runs-dir", str(tmp_path), "--set", "train.lr=1"]) == 2


def test_infer_outputs(trained_run, tiny_cohort, tmp_path):
    images = tiny_cohort.parent / "images"
    assert main(["infer", "--checkpoint", str(trained_run / "phase3"), "--images", str(images),
                 "--out", str(tmp_path / "a")]) == 0
    assert main(["infer", "--checkpoint", str(trained_run / "phase3"), "--images", str(images),
                 "--out", str(tmp_path / "b")]) == 0
    files = sorted((tmp_path / "a").glob("*.particles"))
    assert len(files) == 8
    for f in files:
        assert len(f.read_text().splitlines()) == 16
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_infer_shape_mismatch_exit_2(trained_run, tmp_path):
    write_nrrd(tmp_path / "small.nrrd", np.zeros((16, 16, 16)))
    assert main(["infer", "--checkpoint", str(trained_run / "phase3"), "--images", str(tmp_path / "small.nrrd"),
                 "--out", str(tmp_path / "o")]) == 2


def test_infer_missing_checkpoint_exit_3(tmp_path, tiny_cohort):
    assert main(["infer", "--checkpoint", str(tmp_path / "none"), "--images", str(tiny_cohort.parent / "images"),
                 "--out", str(tmp_path / "o")]) == 3


def _vertex_subset_predictions(cohort, out):
    for sid in cohort.ids:
        write_particles(out / f"{sid}.particles", farthest_point_subsample(cohort.load_mesh(sid).vertices, 16).points)


def test_evaluate_vertex_subsets(tiny_cohort, tmp_path):
    cohort = load_cohort(tiny_cohort)
    pred = tmp_path / "pred"
    pred.mkdir()
    _vertex_subset_predictions(cohort, pred)
    out = tmp_path / "report.json"
    assert main(["evaluate", "--pred", str(pred), "--cohort", str(tiny_cohort), "--out", str(out),
                 "--specificity-samples", "40"]) == 0
    report = json.loads(out.read_text())
    assert {"cd", "p2m", "s2s", "compactness", "specificity", "generalization"} <= set(report)
    assert report["p2m_point_to_face"]["mean"] == 0.0
    assert out.with_suffix(".csv").exists()
    # same numbers as calling the library directly
    test_ids, train_ids = cohort.split_ids("test"), cohort.split_ids("train")
    direct = evaluate_cohort([read_particles(pred / f"{i}.particles") for i in test_ids],
                             [cohort.load_mesh(i) for i in test_ids],
                             [read_particles(pred / f"{i}.particles") for i in train_ids], ids=test_ids,
                             train_meshes=[cohort.load_mesh(i) for i in train_ids], n_specificity=40)
    assert json.loads(direct.to_json()) == report


def test_evaluate_unpaired_exit_2(tiny_cohort, tmp_path):
    cohort = load_cohort(tiny_cohort)
    pred = tmp_path / "pred"
    pred.mkdir()
    _vertex_subset_predictions(cohort, pred)
    write_particles(pred / "stranger.particles", np.zeros((16, 3)))
    assert main(["evaluate", "--pred", str(pred), "--cohort", str(tiny_cohort), "--out",
                 str(tmp_path / "r.json")]) == 2
    (pred / "stranger.particles").unlink()
    (pred / f"{cohort.split_ids('test')[0]}.particles").unlink()
    assert main(["evaluate", "--pred", str(pred), "--cohort", str(tiny_cohort), "--out",
                 str(tmp_path / "r.json")]) == 2


def test_modes(tmp_path):
    rng = np.random.default_rng(0)
    pred = tmp_path / "pred"
    pred.mkdir()
    base, dirs = rng.normal(size=(10, 3)), rng.normal(size=(5, 10, 3))
    for i in range(12):
        write_particles(pred / f"x{i}.particles", base + np.tensordot(rng.normal(size=5) * [5, 4, 3, 2, 1], dirs, 1))
    out = tmp_path / "modes"
    assert main(["modes", "--pred", str(pred), "--out", str(out), "--variance", "0.999"]) == 0
    mean = np.mean([read_particles(p) for p in sorted(pred.glob("*.particles"))], axis=0)
    np.testing.assert_allclose(read_particles(out / "mode1_+0sd.particles"), mean, atol=1e-12)
    for k in range(1, 5):
        plus = read_particles(out / f"mode{k}_+1sd.particles")
        minus = read_particles(out / f"mode{k}_-1sd.particles")
        np.testing.assert_allclose(plus - mean, mean - minus, atol=1e-10)
        assert np.loadtxt(out / f"mode{k}_+2sd.scalars").shape == (10,)
    assert json.loads((out / "modes.json").read_text())["n_modes"] == 4


def test_modes_k_too_large_exit_2(tmp_path):
    pred = tmp_path / "pred"
    pred.mkdir()
    for i in range(3):
        write_particles(pred / f"x{i}.particles", np.full((4, 3), float(i)) + np.eye(4, 3) * i ** 2)
    assert main(["modes", "--pred", str(pred), "--out", str(tmp_path / "m"), "--k", "4"]) == 2


def test_modes_from_checkpoint(trained_run, tiny_cohort, tmp_path):
    assert main(["modes", "--checkpoint", str(trained_run / "phase3"), "--cohort", str(tiny_cohort),
                 "--k", "1", "--out", str(tmp_path / "m")]) == 0
    assert read_particles(tmp_path / "m" / "mode1_+2sd.particles").shape == (16, 3)
    assert main(["modes", "--checkpoint", str(trained_run / "phase3"), "--out", str(tmp_path / "n")]) == 2

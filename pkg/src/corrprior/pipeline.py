"""Cohort-level runs with on-disk checkpoints: ``<run_dir>/{phase1,phase2,phase3,baseline}``."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cohort import Cohort, build_template, load_cohort, load_template, pointcloud_view, save_template
from .config import hash_config, save_config
from .geometry import CorrespondenceSet, farthest_point_subsample
from .metrics import MetricReport, evaluate_cohort
from .nets import ModelConfig, init_parameters, load_checkpoint, save_checkpoint
from .training import (PHASE_FUNCTIONS, PhaseResult, TrainConfig, build_samples, infer, validation_cd,
                       write_phase_log)

log = logging.getLogger(__name__)

PHASE_DIRS = {"surface": "phase1", "align": "phase2", "refine": "phase3", "baseline": "baseline"}
UPSTREAM = {"align": "surface", "refine": "align"}


class MissingCheckpointError(FileNotFoundError):
    pass


@dataclass
class CohortData:
    cohort: Cohort
    ids: dict
    meshes: dict
    shapes: dict
    samples: dict = field(default_factory=dict)

    @property
    def coord_scale(self) -> float:
        return float(max(np.abs(s.vertices).max() for s in self.samples["train"]))


def prepare_data(cfg: dict, cohort: Cohort | None = None) -> CohortData:
    """Load meshes and normalised images for every split and build first-block graphs."""
    d = cfg["data"]
    if cohort is None:
        if not d["cohort"]:
            raise ValueError("data.cohort (manifest path) is not set")
        cohort = load_cohort(d["cohort"], d["split"], d["split_seed"], d["split_file"], validate=False)
    cohort.normalization = {"method": d["normalization"]}
    k = cfg["model"]["k"]
    ids, meshes, shapes, samples = {}, {}, {}, {}
    for split in ("train", "val", "test"):
        ids[split] = cohort.split_ids(split)
        meshes[split] = [cohort.load_mesh(i) for i in ids[split]]
        if d["representation"] == "pointcloud":
            seed = [d["pointcloud_seed"], ("train", "val", "test").index(split)]
            shapes[split] = pointcloud_view(meshes[split], d["n_points"], seed=seed)
        else:
            shapes[split] = meshes[split]
        images = [cohort.load_image(i) for i in ids[split]]
        samples[split] = build_samples(shapes[split], images, ids[split], k)
    return CohortData(cohort, ids, meshes, shapes, samples)


def ensure_template(run_dir, data: CohortData, cfg: dict) -> CorrespondenceSet:
    """Build the medoid template once per run and reuse it for every phase."""
    run_dir = Path(run_dir)
    m = cfg["model"]["n_correspondences"]
    if (run_dir / "template.particles").exists():
        _, template = load_template(run_dir)
        if len(template) != m:
            raise ValueError(f"stored template has {len(template)} points, config asks for {m}")
        return template
    medoid, _ = build_template(data.meshes["train"], m, data.ids["train"])
    j = data.ids["train"].index(medoid)
    template = farthest_point_subsample(data.shapes["train"][j].vertices, m)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_template(run_dir, medoid, template)
    return template


def checkpoint_dir(run_dir, phase) -> Path:
    return Path(run_dir) / PHASE_DIRS[phase]


def has_checkpoint(run_dir, phase) -> bool:
    return (checkpoint_dir(run_dir, phase) / "manifest.json").exists()


def run_phase(run_dir, phase: str, data: CohortData, cfg: dict) -> PhaseResult:
    """Train one phase, writing its checkpoint, epoch log and step log under ``run_dir``."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, run_dir / "config.json")
    data.cohort.save_splits(run_dir / "splits.csv")
    tcfg = TrainConfig.from_dict(cfg["train"])
    upstream = UPSTREAM.get(phase)
    if upstream is not None:
        if not has_checkpoint(run_dir, upstream):
            raise MissingCheckpointError(f"{phase} needs the {upstream} checkpoint in {checkpoint_dir(run_dir, upstream)}")
        net, _ = load_checkpoint(checkpoint_dir(run_dir, upstream))
    else:
        template = ensure_template(run_dir, data, cfg)
        net = init_parameters(ModelConfig.from_dict(cfg["model"]), tcfg.seed, template.points, data.coord_scale)
    out = checkpoint_dir(run_dir, phase)
    out.mkdir(parents=True, exist_ok=True)
    result = PHASE_FUNCTIONS[phase](net, data.samples["train"], data.samples["val"], tcfg,
                                    log_path=out / "steps.jsonl")
    save_checkpoint(net, out, phase=phase, epoch=result.best_epoch, val_cd=result.best_val_cd,
                    seed=tcfg.seed, config=cfg, config_hash=hash_config(cfg),
                    branch="surface" if phase == "surface" else "image")
    write_phase_log(out / "log.jsonl", result)
    log.info("%s: best validation CD %.6g at epoch %d", phase, result.best_val_cd, result.best_epoch)
    return result


def recompute_val_cd(checkpoint, data: CohortData) -> float:
    net, manifest = load_checkpoint(checkpoint)
    return validation_cd(net, data.samples["val"], manifest["branch"])


def predict_split(checkpoint, data: CohortData, split: str) -> np.ndarray:
    net, _ = load_checkpoint(checkpoint)
    return infer(net, np.stack([s.image for s in data.samples[split]]))


def evaluate_checkpoint(checkpoint, data: CohortData, cfg: dict, split: str = "test") -> MetricReport:
    """Image-branch predictions scored against the split's meshes, PCA on training predictions."""
    e = cfg["eval"]
    train_pred = predict_split(checkpoint, data, "train")
    pred = predict_split(checkpoint, data, split)
    return evaluate_cohort(pred, data.meshes[split], train_pred, ids=data.ids[split],
                           train_meshes=data.meshes["train"], variance=e["variance"],
                           n_specificity=e["specificity_samples"], seed=e["seed"])


def write_predictions(out_dir, ids, predictions) -> list:
    from .formats import write_particles

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for sid, p in zip(ids, predictions):
        path = out_dir / f"{sid}.particles"
        write_particles(path, np.asarray(p, dtype=np.float64))
        paths.append(path)
    return paths


def phase_summary(run_dir) -> dict:
    out = {}
    for phase, name in PHASE_DIRS.items():
        manifest = Path(run_dir) / name / "manifest.json"
        if manifest.exists():
            info = json.loads(manifest.read_text())
            out[phase] = {"val_cd": info["val_cd"], "epoch": info["epoch"]}
    return out

"""Phased optimisation: surface prior, embedding alignment, prediction refinement, and the no-prior baseline."""
from __future__ import annotations

import contextlib
import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .geometry import PointCloud, SurfaceMesh, euclidean_knn, geodesic_knn, jitter_vertices
from .losses import (LossWeights, chamfer, embedding_alignment_loss, prediction_refinement_loss,
                     surface_loss, total_loss)
from .nets import CorrespondenceNet

log = logging.getLogger(__name__)

PHASES = ("surface", "align", "refine", "baseline")
PHASE_PREREQUISITE = {"align": "surface", "refine": "align"}


class DivergenceError(RuntimeError):
    """Loss became non-finite; ``last_good_epoch`` names the best state kept so far."""

    def __init__(self, phase, epoch, last_good_epoch):
        super().__init__(f"{phase} phase diverged at epoch {epoch}; last good epoch {last_good_epoch}")
        self.phase = phase
        self.epoch = epoch
        self.last_good_epoch = last_good_epoch


class PhaseOrderError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 6
    patience: int = 200
    max_epochs: int = 2000
    surface_epochs: int | None = None
    align_epochs: int | None = None
    refine_epochs: int | None = None
    baseline_epochs: int | None = None
    jitter: float = 0.01
    alpha: float = 1e-3
    normalize_alignment: bool = False
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.patience <= 0 or self.max_epochs <= 0:
            raise ValueError("learning_rate, batch_size, patience and max_epochs must be positive")
        if self.jitter < 0 or self.alpha < 0:
            raise ValueError("jitter and alpha must be non-negative")

    def epochs(self, phase: str) -> int:
        if phase == "baseline" and self.baseline_epochs is None:
            # same image-branch budget as alignment + refinement together
            if self.align_epochs is not None or self.refine_epochs is not None:
                return self.epochs("align") + self.epochs("refine")
        value = getattr(self, f"{phase}_epochs")
        return self.max_epochs if value is None else int(value)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Sample:
    """One training example in world units; ``graph`` indexes the first EdgeConv block."""

    id: str
    vertices: np.ndarray
    graph: np.ndarray
    image: np.ndarray | None = None


@dataclass
class PhaseResult:
    phase: str
    best_epoch: int
    best_val_cd: float
    history: list
    epochs_run: int
    stopped_early: bool
    log: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def surface_graph(shape, k: int) -> np.ndarray:
    """First-block neighbourhoods: geodesic on meshes, Euclidean on point clouds."""
    if isinstance(shape, SurfaceMesh):
        graph = geodesic_knn(shape, k)
    elif isinstance(shape, PointCloud):
        graph = euclidean_knn(shape, k)
    else:
        graph = euclidean_knn(np.asarray(shape, dtype=np.float64), k)
    # writable copy: the graph's own array is read-only and torch wants writable buffers
    return np.array(graph.indices)


def build_samples(shapes, images=None, ids=None, k: int = 20) -> list:
    shapes = list(shapes)
    ids = list(ids) if ids is not None else [str(i) for i in range(len(shapes))]
    out = []
    for i, shape in enumerate(shapes):
        v = shape.vertices if isinstance(shape, (SurfaceMesh, PointCloud)) else np.asarray(shape, np.float64)
        img = None if images is None else np.asarray(images[i], dtype=np.float32)
        out.append(Sample(ids[i], np.array(v, dtype=np.float64), surface_graph(shape, k), img))
    return out


def early_stop_monitor(history, patience: int):
    """``('stop' | 'continue', best_epoch)``; best is the earliest minimum of ``history``."""
    if len(history) == 0:
        raise ValueError("early stopping needs a non-empty history")
    best = int(np.argmin(history))
    stale = len(history) - 1 - best
    return ("stop" if stale >= patience else "continue"), best


@contextlib.contextmanager
def deterministic_mode(enabled: bool = True):
    previous = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(enabled)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(previous)


def freeze(*modules):
    for m in modules:
        m.eval()
        for p in m.parameters():
            p.requires_grad_(False)


def unfreeze(*modules):
    for m in modules:
        for p in m.parameters():
            p.requires_grad_(True)


def _vertices_tensor(samples, scale):
    return [torch.as_tensor(s.vertices / scale, dtype=torch.float32) for s in samples]


def _groups(samples):
    """Split into runs of equal vertex count so each group can be stacked."""
    groups = {}
    for i, s in enumerate(samples):
        groups.setdefault(len(s.vertices), []).append(i)
    return list(groups.values())


def _images(samples):
    if any(s.image is None for s in samples):
        raise ValueError("image-branch training needs an image for every sample")
    return torch.as_tensor(np.stack([s.image for s in samples]), dtype=torch.float32)


def _chamfer_world(vertices: np.ndarray, pred: torch.Tensor) -> float:
    return float(chamfer(torch.as_tensor(vertices, dtype=torch.float64), pred.detach().to(torch.float64)))


@torch.no_grad()
def surface_predictions(net: CorrespondenceNet, samples) -> list:
    """Surface-branch correspondences (world units) for each sample, evaluation mode."""
    net.surface_encoder.eval()
    net.decoder.eval()
    out = []
    for s in samples:
        x = torch.as_tensor(s.vertices / net.scale, dtype=torch.float32)[None]
        g = torch.as_tensor(s.graph)[None]
        z, _ = net.surface_encoder(x, g)
        out.append((net.decode(z) * net.coord_scale)[0])
    return out


@torch.no_grad()
def surface_latents(net: CorrespondenceNet, samples) -> torch.Tensor:
    net.surface_encoder.eval()
    zs = []
    for s in samples:
        x = torch.as_tensor(s.vertices / net.scale, dtype=torch.float32)[None]
        zs.append(net.surface_encoder(x, torch.as_tensor(s.graph)[None])[0][0])
    return torch.stack(zs)


@torch.no_grad()
def image_predictions(net: CorrespondenceNet, images, batch_size: int = 6) -> torch.Tensor:
    """Image-branch correspondences (world units), evaluation mode."""
    net.image_encoder.eval()
    net.decoder.eval()
    images = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    out = [net.predict_image_world(images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
    return torch.cat(out)


def validation_cd(net: CorrespondenceNet, samples, branch: str) -> float:
    """Mean Chamfer distance (world units) between predictions and sample vertices."""
    if branch == "surface":
        preds = surface_predictions(net, samples)
    elif branch == "image":
        preds = image_predictions(net, np.stack([s.image for s in samples]))
    else:
        raise ValueError(f"unknown branch {branch!r}")
    return float(np.mean([_chamfer_world(s.vertices, p) for s, p in zip(samples, preds)]))


def infer(net: CorrespondenceNet, images, batch_size: int = 6) -> np.ndarray:
    """Correspondences (n, M, 3) in world units predicted from normalised images."""
    return image_predictions(net, images, batch_size).numpy()


class _StepLog:
    def __init__(self, path, phase):
        self.phase = phase
        self.fh = open(path, "w") if path is not None else None

    def write(self, epoch, step, terms, total):
        if self.fh is not None:
            rec = {"phase": self.phase, "epoch": epoch, "step": step,
                   **{k: float(v.detach()) for k, v in terms.items()}, "total": float(total.detach())}
            self.fh.write(json.dumps(rec) + "\n")

    def close(self):
        if self.fh is not None:
            self.fh.close()


def _run_phase(phase, net, train, val, cfg: TrainConfig, params, step_fn, branch, log_path=None, eval_net=None):
    """Generic epoch loop with best-validation model selection and early stopping."""
    eval_net = eval_net or net
    weights = LossWeights.for_phase(phase, cfg.alpha)
    rng = np.random.default_rng([cfg.seed, PHASES.index(phase)])
    optimizer = torch.optim.Adam(params, lr=cfg.learning_rate, betas=(0.9, 0.999))
    history = [validation_cd(eval_net, val, branch)]
    best_state = copy.deepcopy(net.state_dict())
    records = [{"phase": phase, "epoch": 0, "val_cd": history[0]}]
    steps = _StepLog(log_path, phase)
    n_epochs = cfg.epochs(phase)
    stopped = False
    epoch = 0
    try:
        for epoch in range(1, n_epochs + 1):
            order = rng.permutation(len(train))
            losses = []
            for step, start in enumerate(range(0, len(order), cfg.batch_size)):
                batch = [train[i] for i in order[start:start + cfg.batch_size]]
                optimizer.zero_grad()
                terms = step_fn(batch, epoch, order[start:start + cfg.batch_size])
                loss = total_loss(terms, weights)
                if not torch.isfinite(loss):
                    net.load_state_dict(best_state)
                    raise DivergenceError(phase, epoch, int(np.argmin(history)))
                loss.backward()
                optimizer.step()
                losses.append(loss.item())
                steps.write(epoch, step, terms, loss)
            cd = validation_cd(eval_net, val, branch)
            if not math.isfinite(cd):
                net.load_state_dict(best_state)
                raise DivergenceError(phase, epoch, int(np.argmin(history)))
            if cd < min(history):
                best_state = copy.deepcopy(net.state_dict())
            history.append(cd)
            records.append({"phase": phase, "epoch": epoch, "train_loss": float(np.mean(losses)), "val_cd": cd})
            log.info("%s epoch %d loss %.5g val CD %.5g", phase, epoch, np.mean(losses), cd)
            decision, _ = early_stop_monitor(history, cfg.patience)
            if decision == "stop":
                stopped = True
                break
    finally:
        steps.close()
    net.load_state_dict(best_state)
    best = int(np.argmin(history))
    return PhaseResult(phase, best, float(history[best]), history, epoch, stopped, records)


def _completed(net) -> list:
    return net.completed_phases


def _require(net, phase):
    need = PHASE_PREREQUISITE.get(phase)
    if need and need not in _completed(net):
        raise PhaseOrderError(f"the {phase} phase needs a completed {need} phase first")


def _check_template(net):
    if not torch.any(net.template != 0):
        raise ValueError("template has not been constructed (all zeros)")


def train_phase_surface(net: CorrespondenceNet, train, val, cfg: TrainConfig, log_path=None) -> PhaseResult:
    """Fit surface encoder and decoder on the Chamfer + reconstruction objective.

    Inputs are jittered vertices, targets the clean ones. ``net`` ends up
    holding the parameters from the best validation epoch.
    """
    _check_template(net)
    scale = net.scale
    clean = _vertices_tensor(train, scale)
    graphs = [torch.as_tensor(s.graph) for s in train]
    unfreeze(net.surface_encoder, net.decoder)
    freeze(net.image_encoder)

    def step(batch, epoch, idx):
        net.surface_encoder.train()
        net.decoder.train()
        noisy = [torch.as_tensor(jitter_vertices(train[i].vertices, cfg.jitter, seed=[cfg.seed, epoch, int(i)]) / scale,
                                 dtype=torch.float32) for i in idx]

        def loss():
            parts = []
            for group in _groups(batch):
                x = torch.stack([noisy[j] for j in group])
                v = torch.stack([clean[idx[j]] for j in group])
                g = torch.stack([graphs[idx[j]] for j in group])
                z, v_hat = net.surface_encoder(x, g)
                parts.append(surface_loss(v, net.decode(z), v_hat, cfg.alpha) * len(group))
            return sum(parts) / len(batch)

        return {"surface": loss()}

    params = list(net.surface_encoder.parameters()) + list(net.decoder.parameters())
    with deterministic_mode(cfg.deterministic):
        result = _run_phase("surface", net, train, val, cfg, params, step, "surface", log_path)
    _completed(net).append("surface")
    return result


def train_phase_align(net: CorrespondenceNet, train, val, cfg: TrainConfig, log_path=None) -> PhaseResult:
    """Regress image latents onto the frozen teacher's surface latents."""
    _require(net, "align")
    freeze(net.surface_encoder, net.decoder)
    unfreeze(net.image_encoder)
    # the teacher is frozen and inputs are clean, so its latents are constant over the phase
    targets = surface_latents(net, train)
    images = _images(train)

    def step(batch, epoch, idx):
        net.image_encoder.train()
        z_img = net.image_encoder(images[idx])
        return {"alignment": embedding_alignment_loss(targets[idx], z_img, cfg.normalize_alignment)}

    with deterministic_mode(cfg.deterministic):
        result = _run_phase("align", net, train, val, cfg, list(net.image_encoder.parameters()), step, "image", log_path)
    _completed(net).append("align")
    return result


def train_phase_refine(net: CorrespondenceNet, train, val, cfg: TrainConfig, log_path=None) -> PhaseResult:
    """Alignment plus Chamfer refinement of image-branch correspondences; teacher frozen."""
    _require(net, "refine")
    freeze(net.surface_encoder, net.decoder)
    unfreeze(net.image_encoder)
    targets = surface_latents(net, train)
    images = _images(train)
    clean = _vertices_tensor(train, net.scale)

    def step(batch, epoch, idx):
        net.image_encoder.train()
        z_img = net.image_encoder(images[idx])
        pred = net.decode(z_img)
        refine = sum(prediction_refinement_loss(clean[i], pred[j]) for j, i in enumerate(idx)) / len(idx)
        return {"alignment": embedding_alignment_loss(targets[idx], z_img, cfg.normalize_alignment),
                "refinement": refine}

    with deterministic_mode(cfg.deterministic):
        result = _run_phase("refine", net, train, val, cfg, list(net.image_encoder.parameters()), step, "image", log_path)
    _completed(net).append("refine")
    return result


def train_baseline(net: CorrespondenceNet, train, val, cfg: TrainConfig, log_path=None) -> PhaseResult:
    """Image encoder and decoder trained end-to-end on Chamfer alone (no surface prior)."""
    _check_template(net)
    freeze(net.surface_encoder)
    unfreeze(net.image_encoder, net.decoder)
    images = _images(train)
    clean = _vertices_tensor(train, net.scale)

    def step(batch, epoch, idx):
        net.image_encoder.train()
        net.decoder.train()
        pred = net.decode(net.image_encoder(images[idx]))
        return {"refinement": sum(prediction_refinement_loss(clean[i], pred[j]) for j, i in enumerate(idx)) / len(idx)}

    params = list(net.image_encoder.parameters()) + list(net.decoder.parameters())
    with deterministic_mode(cfg.deterministic):
        result = _run_phase("baseline", net, train, val, cfg, params, step, "image", log_path)
    _completed(net).append("baseline")
    return result


PHASE_FUNCTIONS = {
    "surface": train_phase_surface,
    "align": train_phase_align,
    "refine": train_phase_refine,
    "baseline": train_baseline,
}


def write_phase_log(path, result: PhaseResult) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in result.log:
            fh.write(json.dumps(rec) + "\n")

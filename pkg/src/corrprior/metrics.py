"""Shape-model evaluation: CD / P2M / S2S per sample and the PCA compactness, generalization, specificity triad."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .geometry import (SurfaceMesh, chamfer_terms, point_to_mesh_distance, surface_to_surface_distance,
                       tps_warp)
from .validation import check_correspondence_stack


class ShapePCA(TransformerMixin, BaseEstimator):
    """PCA point distribution model over flattened (3M) correspondence vectors.

    Parameters
    ----------
    variance : float
        Fraction of total variance the retained modes must reach.

    Attributes
    ----------
    mean_ : ndarray (3M,)
    components_ : ndarray (r, 3M)
        All non-degenerate modes, orthonormal rows, by descending eigenvalue;
        each row's largest-magnitude entry is positive.
    explained_variance_ : ndarray (r,)
        Sample-covariance eigenvalues (``ddof=1``).
    n_components_ : int
        Retained modes, the smallest count whose cumulative share reaches ``variance``.
    """

    def __init__(self, variance=0.95):
        self.variance = variance

    def fit(self, X, y=None):
        X = check_correspondence_stack(X, min_samples=1)
        n, m = X.shape[0], X.shape[1]
        flat = X.reshape(n, -1)
        self.n_points_ = m
        self.mean_ = flat.mean(axis=0)
        centred = flat - self.mean_
        _, s, vt = np.linalg.svd(centred, full_matrices=False)
        eig = s ** 2 / max(n - 1, 1)
        tol = max(eig.max(initial=0.0), 1.0) * 1e-12 * flat.shape[1]
        keep = eig > tol
        # sign convention: the largest-magnitude entry of every mode is positive
        vt = vt * np.sign(vt[np.arange(len(vt)), np.argmax(np.abs(vt), axis=1)])[:, None]
        self.components_ = vt[keep]
        self.explained_variance_ = eig[keep]
        total = self.explained_variance_.sum()
        if total == 0:
            self.cumulative_variance_ = np.zeros(0)
            self.n_components_ = 0
        else:
            self.cumulative_variance_ = np.cumsum(self.explained_variance_) / total
            self.n_components_ = int(np.searchsorted(self.cumulative_variance_, self.variance - 1e-12) + 1)
        return self

    @property
    def basis_(self):
        return self.components_[:self.n_components_]

    def transform(self, X):
        check_is_fitted(self, "mean_")
        X = check_correspondence_stack(X, n_points=self.n_points_)
        return (X.reshape(len(X), -1) - self.mean_) @ self.basis_.T

    def inverse_transform(self, coefficients):
        check_is_fitted(self, "mean_")
        flat = self.mean_ + np.asarray(coefficients, dtype=np.float64) @ self.basis_
        return flat.reshape(len(flat), self.n_points_, 3)

    def reconstruct(self, X):
        return self.inverse_transform(self.transform(X))


def fit_pca(train_correspondences, variance=0.95) -> ShapePCA:
    return ShapePCA(variance=variance).fit(train_correspondences)


def compactness(model: ShapePCA) -> int:
    """Number of modes needed to reach the model's retained-variance share."""
    check_is_fitted(model, "mean_")
    return int(model.n_components_)


def generalization(model: ShapePCA, heldout) -> float:
    """Mean over held-out shapes of the squared L2 error of their PCA reconstruction."""
    X = check_correspondence_stack(heldout, n_points=model.n_points_)
    resid = X - model.reconstruct(X)
    return float(np.mean(np.sum(resid.reshape(len(X), -1) ** 2, axis=1)))


def specificity(model: ShapePCA, train_correspondences, n_samples: int = 1000, seed=0, coefficients=None) -> float:
    """Mean over generated shapes of the squared L2 distance to the closest training shape, per point.

    Shapes are ``mean + sum_d sqrt(lambda_d) g_d v_d`` with ``g ~ N(0, 1)``;
    pass ``coefficients`` (J, d) to pin the standard-normal draws.
    """
    train = check_correspondence_stack(train_correspondences, n_points=model.n_points_)
    d = model.n_components_
    if coefficients is None:
        if n_samples < 1:
            raise ValueError("n_samples must be at least 1")
        g = np.random.default_rng(seed).standard_normal((n_samples, d))
    else:
        g = np.asarray(coefficients, dtype=np.float64).reshape(-1, d)
    generated = model.mean_ + (g * np.sqrt(model.explained_variance_[:d])) @ model.basis_
    flat_train = train.reshape(len(train), -1)
    sq = (np.sum(generated ** 2, axis=1)[:, None] + np.sum(flat_train ** 2, axis=1)[None, :]
          - 2.0 * generated @ flat_train.T)
    nearest = np.argmin(sq, axis=1)
    exact = np.sum((generated - flat_train[nearest]) ** 2, axis=1)
    return float(np.mean(exact) / model.n_points_)


def export_modes(model: ShapePCA, mode: int, stds=(-2.0, -1.0, 0.0, 1.0, 2.0)):
    """Sweep ``mean + s * sqrt(lambda) * v`` along one retained mode (0-based).

    Returns a list of ``(s, points (M, 3), displacement magnitude (M,))``.
    """
    check_is_fitted(model, "mean_")
    if not 0 <= mode < model.n_components_:
        raise ValueError(f"mode {mode} out of range: the model retains {model.n_components_} modes")
    direction = np.sqrt(model.explained_variance_[mode]) * model.components_[mode]
    mean = model.mean_.reshape(-1, 3)
    out = []
    for s in stds:
        disp = (s * direction).reshape(-1, 3)
        out.append((float(s), mean + disp, np.linalg.norm(disp, axis=1)))
    return out


@dataclass
class MeanShape:
    """Mean correspondences with a dense mesh lying on the mean shape (used for S2S warps)."""

    correspondences: np.ndarray
    mesh: SurfaceMesh


def mean_shape_assets(train_predictions, train_meshes) -> MeanShape:
    """Mean of the training predictions and a mesh warped onto it.

    The reference is the training sample whose prediction is closest to the
    mean; its mesh is carried onto the mean by the TPS between the two point sets.
    """
    preds = check_correspondence_stack(train_predictions, min_samples=1)
    mean = preds.mean(axis=0)
    ref = int(np.argmin(np.sum((preds - mean) ** 2, axis=(1, 2))))
    warp = tps_warp(preds[ref], mean)
    mesh = train_meshes[ref]
    return MeanShape(mean, mesh.with_vertices(warp(mesh.vertices)))


REPORT_KEYS = ("cd", "p2m", "s2s", "compactness", "specificity", "generalization")


def _summary(values):
    values = [float(v) for v in values]
    return {"mean": float(np.mean(values)), "std": float(np.std(values)), "values": values}


@dataclass
class MetricReport:
    ids: list
    cd: dict
    p2m: dict
    s2s: dict
    compactness: int
    specificity: float
    generalization: float
    p2m_point_to_face: dict = field(default_factory=dict)
    p2m_face_to_point: dict = field(default_factory=dict)
    cd_components: dict = field(default_factory=dict)
    cumulative_variance: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(**d)

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, text_or_path) -> "MetricReport":
        p = Path(text_or_path) if not str(text_or_path).lstrip().startswith("{") else None
        text = p.read_text() if p is not None else str(text_or_path)
        return cls.from_dict(json.loads(text))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "cd", "p2m", "p2m_point_to_face", "p2m_face_to_point", "s2s"])
            for i, sid in enumerate(self.ids):
                w.writerow([sid, repr(self.cd["values"][i]), repr(self.p2m["values"][i]),
                            repr(self.p2m_point_to_face["values"][i]), repr(self.p2m_face_to_point["values"][i]),
                            repr(self.s2s["values"][i])])


def evaluate_cohort(predictions, meshes, train_predictions, mean_shape: MeanShape | None = None, ids=None,
                    train_meshes=None, variance=0.95, n_specificity=1000, seed=0) -> MetricReport:
    """Per-sample CD / P2M / S2S of ``predictions`` against ``meshes`` plus the PCA triad.

    The PCA model is fitted on ``train_predictions``; generalization is measured
    on ``predictions``. ``mean_shape`` defaults to :func:`mean_shape_assets` of
    the training predictions and ``train_meshes``.
    """
    preds = check_correspondence_stack(predictions, min_samples=1)
    train = check_correspondence_stack(train_predictions, n_points=preds.shape[1], min_samples=1)
    meshes = list(meshes)
    if len(meshes) != len(preds):
        raise ValueError(f"{len(preds)} predictions but {len(meshes)} meshes")
    ids = [str(i) for i in range(len(preds))] if ids is None else list(ids)
    if len(ids) != len(preds):
        raise ValueError("ids and predictions differ in length")
    if mean_shape is None:
        if train_meshes is None or len(train_meshes) != len(train):
            raise ValueError("mean_shape or train_meshes aligned with train_predictions is required")
        mean_shape = mean_shape_assets(train, list(train_meshes))
    cd, fwd, bwd, p2m, p2f, f2p, s2s = [], [], [], [], [], [], []
    for p, mesh in zip(preds, meshes):
        a, b = chamfer_terms(p, mesh.vertices)
        cd.append(a + b)
        fwd.append(a)
        bwd.append(b)
        _, summary = point_to_mesh_distance(p, mesh, seed=seed)
        p2m.append(summary["p2m"])
        p2f.append(summary["point_to_face"])
        f2p.append(summary["face_to_point"])
        s2s.append(surface_to_surface_distance(p, mean_shape.correspondences, mean_shape.mesh, mesh))
    model = fit_pca(train, variance)
    return MetricReport(
        ids=ids, cd=_summary(cd), p2m=_summary(p2m), s2s=_summary(s2s),
        compactness=compactness(model),
        specificity=specificity(model, train, n_specificity, seed),
        generalization=generalization(model, preds),
        p2m_point_to_face=_summary(p2f), p2m_face_to_point=_summary(f2p),
        cd_components={"prediction_to_mesh": _summary(fwd), "mesh_to_prediction": _summary(bwd)},
        cumulative_variance=[float(x) for x in model.cumulative_variance_],
        meta={"variance": variance, "specificity_samples": n_specificity, "seed": seed,
              "n_train": len(train), "n_points": int(preds.shape[1])},
    )

"""scikit-learn style estimators wrapping the phased training.

``PriorCorrespondenceRegressor`` learns a surface prior (teacher), aligns an
image encoder to it (student) and refines the image-driven correspondences.
``DirectCorrespondenceRegressor`` is the same image pipeline trained
end-to-end without a prior.

Both follow the usual contract: hyper-parameters in ``__init__``,
learned state in trailing-underscore attributes, ``fit`` returns ``self``.
"""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .cohort import assign_splits
from .geometry import CorrespondenceSet, SurfaceMesh, chamfer_distance, farthest_point_subsample, medoid_index
from .nets import ModelConfig, init_parameters
from .training import (TrainConfig, build_samples, infer, surface_latents, surface_predictions,
                       train_baseline, train_phase_align, train_phase_refine, train_phase_surface)
from .validation import check_shapes, check_volumes


def _chamfer_medoid(shapes) -> int:
    n = len(shapes)
    d = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d[i, j] = d[j, i] = chamfer_distance(shapes[i].vertices, shapes[j].vertices)
    return int(np.argmin(d.sum(axis=1)))


class _CorrespondenceBase(BaseEstimator):
    def __init__(self, latent_dim=256, n_correspondences=1024, n_neighbors=20, edge_widths=(64, 64, 64),
                 dynamic_knn=True, decoder_widths=(512, 256, 128), image_channels=(12, 24, 48, 96, 192),
                 kernel_size=5, fc_widths=(384, 96), batch_norm=True, learning_rate=1e-5, batch_size=6,
                 patience=200, max_epochs=2000, surface_epochs=None, align_epochs=None, refine_epochs=None,
                 jitter=0.01, alpha=1e-3, normalize_alignment=False, validation_fraction=0.1,
                 random_state=0, deterministic=True):
        self.latent_dim = latent_dim
        self.n_correspondences = n_correspondences
        self.n_neighbors = n_neighbors
        self.edge_widths = edge_widths
        self.dynamic_knn = dynamic_knn
        self.decoder_widths = decoder_widths
        self.image_channels = image_channels
        self.kernel_size = kernel_size
        self.fc_widths = fc_widths
        self.batch_norm = batch_norm
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.patience = patience
        self.max_epochs = max_epochs
        self.surface_epochs = surface_epochs
        self.align_epochs = align_epochs
        self.refine_epochs = refine_epochs
        self.jitter = jitter
        self.alpha = alpha
        self.normalize_alignment = normalize_alignment
        self.validation_fraction = validation_fraction
        self.random_state = random_state
        self.deterministic = deterministic

    def _model_config(self, image_shape) -> ModelConfig:
        return ModelConfig(latent_dim=self.latent_dim, n_correspondences=self.n_correspondences, k=self.n_neighbors,
                           edge_widths=self.edge_widths, dynamic_knn=self.dynamic_knn,
                           decoder_widths=self.decoder_widths, image_shape=image_shape,
                           image_channels=self.image_channels, kernel_size=self.kernel_size,
                           fc_widths=self.fc_widths, batch_norm=self.batch_norm)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, batch_size=self.batch_size, patience=self.patience,
                           max_epochs=self.max_epochs, surface_epochs=self.surface_epochs,
                           align_epochs=self.align_epochs, refine_epochs=self.refine_epochs, jitter=self.jitter,
                           alpha=self.alpha, normalize_alignment=self.normalize_alignment,
                           seed=self.random_state, deterministic=self.deterministic)

    def _split(self, images, shapes, val_images, val_shapes):
        images = check_volumes(images)
        shapes = check_shapes(shapes, self.n_neighbors)
        if len(images) != len(shapes):
            raise ValueError(f"{len(images)} images but {len(shapes)} shapes")
        if val_images is None:
            ids = list(range(len(shapes)))
            frac = self.validation_fraction
            splits = assign_splits(ids, (1.0 - frac, frac, 0.0), self.random_state)
            tr = [i for i in ids if splits[i] == "train"]
            va = [i for i in ids if splits[i] == "val"]
            if not va:
                raise ValueError("validation split is empty; pass val_images/val_shapes or raise validation_fraction")
            val_images, val_shapes = images[va], [shapes[i] for i in va]
            images, shapes = images[tr], [shapes[i] for i in tr]
        else:
            val_images = check_volumes(val_images, images.shape[1:])
            val_shapes = check_shapes(val_shapes, self.n_neighbors)
        return images, shapes, val_images, val_shapes

    def _init_net(self, images, shapes, template):
        if template is None:
            if all(isinstance(s, SurfaceMesh) for s in shapes):
                j = medoid_index(shapes)
            else:
                j = _chamfer_medoid(shapes)
            self.medoid_index_ = j
            template = farthest_point_subsample(shapes[j].vertices, self.n_correspondences)
        template = template.points if isinstance(template, CorrespondenceSet) else np.asarray(template, np.float64)
        scale = float(max(np.abs(s.vertices).max() for s in shapes))
        self.template_ = template
        self.net_ = init_parameters(self._model_config(images.shape[1:]), self.random_state, template, scale)

    def predict(self, images) -> np.ndarray:
        """Correspondences (n, M, 3) in world units from normalised images."""
        check_is_fitted(self, "net_")
        return infer(self.net_, check_volumes(images, self.net_.config.image_shape), self.batch_size)

    def transform(self, images) -> np.ndarray:
        """Image latents (n, L)."""
        check_is_fitted(self, "net_")
        x = torch.as_tensor(check_volumes(images, self.net_.config.image_shape))
        self.net_.image_encoder.eval()
        with torch.no_grad():
            return self.net_.image_encoder(x).numpy()

    def score(self, images, shapes) -> float:
        """Negative mean Chamfer distance between predictions and shape vertices."""
        pred = self.predict(images)
        shapes = check_shapes(shapes)
        return -float(np.mean([chamfer_distance(p, s.vertices) for p, s in zip(pred, shapes)]))


class PriorCorrespondenceRegressor(_CorrespondenceBase):
    """Image-to-correspondence regressor guided by a surface-learned shape prior.

    ``fit(images, shapes)`` runs the three phases in order; ``shapes`` may be
    ``SurfaceMesh`` objects (geodesic first-block neighbourhoods) or point
    clouds (Euclidean neighbourhoods).
    """

    def fit(self, images, shapes, val_images=None, val_shapes=None, template=None):
        images, shapes, val_images, val_shapes = self._split(images, shapes, val_images, val_shapes)
        self._init_net(images, shapes, template)
        k = self.n_neighbors
        train = build_samples(shapes, images, k=k)
        val = build_samples(val_shapes, val_images, k=k)
        cfg = self._train_config()
        self.history_ = {
            "surface": train_phase_surface(self.net_, train, val, cfg),
            "align": train_phase_align(self.net_, train, val, cfg),
            "refine": train_phase_refine(self.net_, train, val, cfg),
        }
        return self

    def encode_surfaces(self, shapes) -> np.ndarray:
        """Teacher latents (n, L) for meshes or point clouds."""
        check_is_fitted(self, "net_")
        samples = build_samples(check_shapes(shapes, self.n_neighbors), k=self.n_neighbors)
        return surface_latents(self.net_, samples).numpy()

    def predict_surfaces(self, shapes) -> np.ndarray:
        """Teacher correspondences (n, M, 3) predicted from the shapes themselves."""
        check_is_fitted(self, "net_")
        samples = build_samples(check_shapes(shapes, self.n_neighbors), k=self.n_neighbors)
        return np.stack([p.numpy() for p in surface_predictions(self.net_, samples)])


class DirectCorrespondenceRegressor(_CorrespondenceBase):
    """Image encoder and implicit decoder trained end-to-end on Chamfer distance, no prior.

    With ``align_epochs``/``refine_epochs`` set, the epoch budget is their sum so
    it matches the prior-guided image branch.
    """

    def fit(self, images, shapes, val_images=None, val_shapes=None, template=None):
        images, shapes, val_images, val_shapes = self._split(images, shapes, val_images, val_shapes)
        self._init_net(images, shapes, template)
        k = self.n_neighbors
        train = build_samples(shapes, images, k=k)
        val = build_samples(val_shapes, val_images, k=k)
        self.history_ = {"baseline": train_baseline(self.net_, train, val, self._train_config())}
        return self

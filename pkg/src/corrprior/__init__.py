"""Image-to-correspondence shape modelling with a surface-learned prior."""
from .cohort import Cohort, SyntheticSpec, generate_synthetic, load_cohort
from .estimators import DirectCorrespondenceRegressor, PriorCorrespondenceRegressor
from .geometry import (CorrespondenceSet, NeighborhoodGraph, PointCloud, SurfaceMesh, chamfer_distance,
                       euclidean_knn, geodesic_knn, point_to_mesh_distance, surface_to_surface_distance)
from .losses import (LossWeights, chamfer, embedding_alignment_loss, prediction_refinement_loss, surface_loss,
                     total_loss)
from .metrics import MetricReport, ShapePCA, compactness, evaluate_cohort, generalization, specificity
from .nets import CorrespondenceNet, ModelConfig, init_parameters, load_checkpoint, save_checkpoint
from .training import (TrainConfig, train_baseline, train_phase_align, train_phase_refine,
                       train_phase_surface)

__all__ = [
    "Cohort", "SyntheticSpec", "generate_synthetic", "load_cohort",
    "DirectCorrespondenceRegressor", "PriorCorrespondenceRegressor",
    "CorrespondenceSet", "NeighborhoodGraph", "PointCloud", "SurfaceMesh", "chamfer_distance",
    "euclidean_knn", "geodesic_knn", "point_to_mesh_distance", "surface_to_surface_distance",
    "LossWeights", "chamfer", "embedding_alignment_loss", "prediction_refinement_loss", "surface_loss", "total_loss",
    "MetricReport", "ShapePCA", "compactness", "evaluate_cohort", "generalization", "specificity",
    "CorrespondenceNet", "ModelConfig", "init_parameters", "load_checkpoint", "save_checkpoint",
    "TrainConfig", "train_baseline", "train_phase_align", "train_phase_refine", "train_phase_surface",
]

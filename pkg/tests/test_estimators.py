import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from corrprior.cohort import load_cohort, pointcloud_view
from corrprior.estimators import DirectCorrespondenceRegressor, PriorCorrespondenceRegressor
from corrprior.validation import check_correspondence_stack, check_shapes, check_volumes

TINY = dict(latent_dim=8, n_correspondences=16, n_neighbors=4, edge_widths=(8, 8), decoder_widths=(16, 16),
            image_channels=(2, 2, 2, 2, 2), kernel_size=3, fc_widths=(8, 8), learning_rate=1e-3, batch_size=2,
            surface_epochs=2, align_epochs=1, refine_epochs=1)


@pytest.fixture(scope="module")
def arrays(tiny_cohort):
    c = load_cohort(tiny_cohort)
    return np.stack([c.load_image(i) for i in c.ids]), [c.load_mesh(i) for i in c.ids]


def test_get_params_and_clone():
    est = PriorCorrespondenceRegressor(**TINY)
    params = est.get_params()
    assert params["latent_dim"] == 8 and params["random_state"] == 0
    other = clone(est)
    assert other.get_params() == params
    est.set_params(latent_dim=4)
    assert est.latent_dim == 4


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        PriorCorrespondenceRegressor(**TINY).predict(np.zeros((1, 32, 32, 32)))


def test_fit_predict_transform(arrays):
    images, meshes = arrays
    est = PriorCorrespondenceRegressor(**TINY, validation_fraction=0.25).fit(images, meshes)
    assert set(est.history_) == {"surface", "align", "refine"}
    pred = est.predict(images[:3])
    assert pred.shape == (3, 16, 3)
    assert est.transform(images[:3]).shape == (3, 8)
    assert est.encode_surfaces(meshes[:2]).shape == (2, 8)
    assert est.predict_surfaces(meshes[:2]).shape == (2, 16, 3)
    assert est.score(images[:3], meshes[:3]) < 0


def test_pointcloud_fit_uses_chamfer_medoid(arrays):
    images, meshes = arrays
    clouds = pointcloud_view(meshes, seed=0)
    est = PriorCorrespondenceRegressor(**TINY, validation_fraction=0.25).fit(images, clouds)
    assert 0 <= est.medoid_index_ < len(clouds)
    assert est.predict(images[:1]).shape == (1, 16, 3)


def test_baseline_fit(arrays):
    images, meshes = arrays
    est = DirectCorrespondenceRegressor(**TINY, validation_fraction=0.25).fit(images, meshes)
    assert list(est.history_) == ["baseline"]
    assert est.history_["baseline"].epochs_run == 2


def test_input_validation(arrays):
    images, meshes = arrays
    est = PriorCorrespondenceRegressor(**TINY)
    with pytest.raises(ValueError, match="images but"):
        est.fit(images[:3], meshes)
    with pytest.raises(ValueError):
        check_volumes(np.zeros((2, 4, 4)), shape=(32, 32, 32))
    with pytest.raises(ValueError, match="non-finite"):
        check_volumes(np.full((1, 2, 2, 2), np.nan))
    with pytest.raises(ValueError, match="fewer than"):
        check_shapes([np.zeros((3, 3))], k=4)
    with pytest.raises(ValueError, match="inconsistent"):
        check_correspondence_stack([np.zeros((3, 3)), np.zeros((4, 3))])
    assert check_correspondence_stack(np.zeros((2, 12))).shape == (2, 4, 3)

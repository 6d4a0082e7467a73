import numpy as np
import pytest

from corrprior.geometry import SurfaceMesh, icosphere
from corrprior.nets import ModelConfig


def octahedron(scale=1.0) -> SurfaceMesh:
    v = scale * np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], float)
    f = np.array([[0, 2, 4], [2, 1, 4], [1, 3, 4], [3, 0, 4], [2, 0, 5], [1, 2, 5], [3, 1, 5], [0, 3, 5]])
    return SurfaceMesh(v, f)


def unit_cube() -> SurfaceMesh:
    v = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], float)
    f = np.array([
        [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3], [0, 4, 5], [0, 5, 1],
        [2, 3, 7], [2, 7, 6], [0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5]])
    return SurfaceMesh(v, f)


def ellipsoid(a, b, c, frequency=3) -> SurfaceMesh:
    s = icosphere(frequency)
    return s.with_vertices(s.vertices * np.array([a, b, c], float))


def tiny_model_config(**kw) -> ModelConfig:
    base = dict(latent_dim=8, n_correspondences=16, k=4, edge_widths=(8, 8), vertex_head_width=8,
                decoder_widths=(16, 16), image_shape=(32, 32, 32), image_channels=(2, 2, 2, 2, 2),
                kernel_size=3, fc_widths=(8, 8))
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_cohort(tmp_path_factory):
    """Eight small ellipsoids in 32^3 volumes, written to disk once per session."""
    from corrprior.cohort import SyntheticSpec, generate_synthetic

    spec = SyntheticSpec(n_samples=8, radii_ranges=((4, 12),) * 3, mesh_frequency=3, volume_shape=(32, 32, 32),
                         seed=5)
    return generate_synthetic(spec, tmp_path_factory.mktemp("cohort"))


_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion covered by the test")


def pytest_runtest_logreport(report):
    if report.when == "setup" and report.passed:
        return
    if report.when == "teardown" and report.passed:
        return
    for key in getattr(report, "criteria", ()):
        ok = report.passed and not report.skipped
        prev = _CRITERIA.get(key, True)
        _CRITERIA[key] = prev and ok


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    report.criteria = [m.args[0] for m in item.iter_markers("criterion")]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_CRITERIA, key=lambda k: (int(k.rstrip("abcd")), k)):
        terminalreporter.write_line(f"criterion {key}: {'PASS' if _CRITERIA[key] else 'FAIL'}")

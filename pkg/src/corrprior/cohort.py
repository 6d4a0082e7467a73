"""Cohort ingestion, splitting, image normalisation, templates and the synthetic cohort generator."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .formats import read_nrrd, read_particles, read_ply, write_nrrd, write_particles, write_ply
from .geometry import (CorrespondenceSet, PointCloud, SurfaceMesh, farthest_point_subsample,
                       icosphere, medoid_index, sample_surface)

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


class CohortError(ValueError):
    pass


@dataclass
class SyntheticSpec:
    """Parameters of the synthetic ellipsoid cohort.

    World units are millimetres; the volume is centred on the origin.
    Radii are drawn independently and uniformly from ``radii_ranges``. With
    ``bump_amplitude`` > 0 every shape also gets a smooth radial bump of
    uniform random relative height in ``[0, bump_amplitude]``.
    """

    n_samples: int = 60
    radii_ranges: tuple = ((8.0, 28.0), (8.0, 28.0), (8.0, 28.0))
    bump_amplitude: float = 0.0
    bump_width: float = 0.3
    mesh_frequency: int = 10
    volume_shape: tuple = (64, 64, 64)
    spacing: float = 1.0
    blur_sigma: float = 1.0
    noise_std: float = 0.1
    intensity_gradient: float = 0.2
    seed: int = 0

    def __post_init__(self):
        self.radii_ranges = tuple(tuple(float(x) for x in r) for r in self.radii_ranges)
        self.volume_shape = tuple(int(x) for x in self.volume_shape)

    def validate(self) -> "SyntheticSpec":
        if self.n_samples < 1:
            raise CohortError("n_samples must be at least 1")
        if len(self.radii_ranges) != 3 or any(len(r) != 2 for r in self.radii_ranges):
            raise CohortError("radii_ranges must be three (low, high) pairs")
        for lo, hi in self.radii_ranges:
            if not 0 < lo <= hi:
                raise CohortError(f"invalid radius range ({lo}, {hi}): radii must be positive and ordered")
        if len(self.volume_shape) != 3 or min(self.volume_shape) < 32:
            raise CohortError(f"volume_shape must be three dims >= 32, got {self.volume_shape}")
        if self.spacing <= 0 or self.mesh_frequency < 1:
            raise CohortError("spacing and mesh_frequency must be positive")
        if min(self.blur_sigma, self.noise_std, self.bump_amplitude) < 0:
            raise CohortError("blur_sigma, noise_std and bump_amplitude must be non-negative")
        half = 0.5 * self.spacing * min(self.volume_shape)
        reach = max(hi for _, hi in self.radii_ranges) * (1 + self.bump_amplitude)
        if reach >= half:
            raise CohortError(f"largest shape extent {reach} does not fit in the volume half-width {half}")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise CohortError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @property
    def origin(self) -> np.ndarray:
        return -0.5 * self.spacing * np.asarray(self.volume_shape, dtype=np.float64)


@dataclass
class Cohort:
    """Paired mesh/image samples with a train/val/test assignment."""

    root: Path
    ids: list
    mesh_paths: dict
    image_paths: dict
    splits: dict = field(default_factory=dict)
    normalization: dict = field(default_factory=lambda: {"method": "zscore"})

    def split_ids(self, split: str) -> list:
        return [i for i in self.ids if self.splits.get(i) == split]

    def load_mesh(self, sample_id) -> SurfaceMesh:
        try:
            return read_ply(self.mesh_paths[sample_id])
        except Exception as exc:
            raise CohortError(f"sample {sample_id}: invalid mesh ({exc})") from exc

    def load_image(self, sample_id, normalize: bool = True) -> np.ndarray:
        vol, _ = read_nrrd(self.image_paths[sample_id])
        if not normalize:
            return vol
        return normalize_image(vol, self.normalization.get("method", "zscore"))

    def save_splits(self, path=None) -> Path:
        path = Path(path or self.root / "splits.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "split"])
            for i in self.ids:
                w.writerow([i, self.splits[i]])
        return path


def split_counts(n: int, fractions) -> tuple:
    """Floor each share, then hand the remainder out by largest fractional part (train first on ties)."""
    fractions = np.asarray(fractions, dtype=np.float64)
    if len(fractions) != 3 or np.any(fractions < 0) or abs(fractions.sum() - 1.0) > 1e-9:
        raise CohortError(f"split fractions must be three non-negative values summing to 1, got {fractions.tolist()}")
    raw = fractions * n
    counts = np.floor(raw + 1e-9).astype(int)
    remainder = n - counts.sum()
    order = np.lexsort((np.arange(3), -(raw - counts)))
    counts[order[:remainder]] += 1
    return tuple(int(c) for c in counts)


def assign_splits(ids, fractions=(0.8, 0.1, 0.1), seed=0) -> dict:
    counts = split_counts(len(ids), fractions)
    perm = np.random.default_rng(seed).permutation(len(ids))
    labels = np.repeat(SPLITS, counts)
    return {ids[p]: str(lab) for p, lab in zip(perm, labels)}


def _resolve(base: Path, p: str) -> Path:
    path = Path(p)
    return path if path.is_absolute() else base / path


def load_cohort(manifest, fractions=(0.8, 0.1, 0.1), seed=0, split_file=None, validate: bool = True) -> Cohort:
    """Read a cohort manifest (CSV: id, mesh_path, image_path) and assign splits.

    If ``split_file`` (CSV: id, split) is given it is used verbatim; otherwise a
    seeded shuffle assigns ``fractions``.
    """
    manifest = Path(manifest)
    if not manifest.exists():
        raise CohortError(f"manifest {manifest} does not exist")
    base = manifest.parent
    ids, meshes, images = [], {}, {}
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            sid = row["id"]
            if sid in meshes:
                raise CohortError(f"duplicate sample id {sid}")
            if not row.get("image_path"):
                raise CohortError(f"sample {sid}: no paired image")
            ids.append(sid)
            meshes[sid] = _resolve(base, row["mesh_path"])
            images[sid] = _resolve(base, row["image_path"])
    for sid in ids:
        for kind, p in (("mesh", meshes[sid]), ("image", images[sid])):
            if not p.exists():
                raise CohortError(f"sample {sid}: missing {kind} file {p}")
    if split_file is not None:
        splits = {}
        with open(split_file, newline="") as fh:
            for row in csv.DictReader(fh):
                splits[row["id"]] = row["split"]
        missing = set(ids) - set(splits)
        if missing:
            raise CohortError(f"split file has no entry for samples {sorted(missing)}")
    else:
        splits = assign_splits(ids, fractions, seed)
    cohort = Cohort(base, ids, meshes, images, splits)
    stats = base / "normalization.json"
    if stats.exists():
        cohort.normalization = json.loads(stats.read_text())
    if validate:
        for sid in ids:
            cohort.load_mesh(sid)
    return cohort


def normalize_image(image, method: str = "zscore") -> np.ndarray:
    """Per-volume standardisation (``zscore``) or rescaling to [0, 1] (``minmax``)."""
    x = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise CohortError("image contains non-finite intensities")
    if method == "zscore":
        return (x - x.mean()) / max(x.std(), 1e-8)
    if method == "minmax":
        lo, hi = x.min(), x.max()
        return (x - lo) / max(hi - lo, 1e-8)
    raise CohortError(f"unknown normalisation method {method!r}")


def build_template(meshes, m: int, ids=None):
    """Medoid of ``meshes`` and its farthest-point subsample of ``m`` vertices.

    Returns ``(medoid id or index, CorrespondenceSet)``.
    """
    meshes = list(meshes)
    if len(meshes) < 2:
        raise CohortError("template construction needs at least two training meshes")
    j = medoid_index(meshes)
    template = farthest_point_subsample(meshes[j].vertices, m)
    return (ids[j] if ids is not None else j), template


def save_template(directory, medoid_id, template: CorrespondenceSet) -> None:
    directory = Path(directory)
    write_particles(directory / "template.particles", template.points)
    (directory / "template.json").write_text(json.dumps({"medoid_id": medoid_id, "n_points": len(template)}))


def load_template(directory):
    directory = Path(directory)
    info = json.loads((directory / "template.json").read_text())
    return info["medoid_id"], CorrespondenceSet(read_particles(directory / "template.particles"))


def pointcloud_view(meshes, n_points=None, seed=0) -> list:
    """Area-uniform point clouds sampled from each mesh (``n_points`` defaults to its vertex count)."""
    clouds = []
    for i, mesh in enumerate(meshes):
        n = mesh.n_vertices if n_points is None else n_points
        clouds.append(PointCloud(sample_surface(mesh, n, seed=(seed, i))))
    return clouds


def voxelize_mesh(mesh: SurfaceMesh, shape, spacing: float = 1.0, origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Binary occupancy of voxel centres by ray parity along the last axis.

    Voxel ``(i, j, k)`` has centre ``origin + (idx + 0.5) * spacing``. The mesh
    must be closed.
    """
    shape = tuple(int(s) for s in shape)
    origin = np.asarray(origin, dtype=np.float64)
    centres = [origin[d] + (np.arange(shape[d]) + 0.5) * spacing for d in range(3)]
    # tiny irrational offset keeps rays off mesh edges and vertices
    rx = centres[0] + 1.234567e-7 * spacing
    ry = centres[1] + 2.718281e-7 * spacing
    tri = mesh.vertices[mesh.faces]
    cols_i, cols_j, zs = [], [], []
    for a, b, c in tri:
        lo = np.minimum(np.minimum(a, b), c)
        hi = np.maximum(np.maximum(a, b), c)
        i0, i1 = np.searchsorted(rx, [lo[0], hi[0]])
        j0, j1 = np.searchsorted(ry, [lo[1], hi[1]])
        if i0 >= i1 or j0 >= j1:
            continue
        gx, gy = np.meshgrid(rx[i0:i1], ry[j0:j1], indexing="ij")
        v0, v1 = b[:2] - a[:2], c[:2] - a[:2]
        det = v0[0] * v1[1] - v0[1] * v1[0]
        if det == 0:
            continue
        px, py = gx - a[0], gy - a[1]
        u = (px * v1[1] - py * v1[0]) / det
        v = (v0[0] * py - v0[1] * px) / det
        inside = (u >= 0) & (v >= 0) & (u + v <= 1)
        if not inside.any():
            continue
        z = a[2] + u[inside] * (b[2] - a[2]) + v[inside] * (c[2] - a[2])
        ii, jj = np.nonzero(inside)
        cols_i.append(ii + i0)
        cols_j.append(jj + j0)
        zs.append(z)
    occ = np.zeros(shape, dtype=bool)
    if not zs:
        return occ
    ci, cj, z = np.concatenate(cols_i), np.concatenate(cols_j), np.concatenate(zs)
    col = ci * shape[1] + cj
    order = np.lexsort((z, col))
    col, z = col[order], z[order]
    starts = np.flatnonzero(np.r_[True, col[1:] != col[:-1]])
    ends = np.r_[starts[1:], len(col)]
    zc = centres[2]
    for s, e in zip(starts, ends):
        crossings = np.searchsorted(z[s:e], zc)
        i, j = divmod(int(col[s]), shape[1])
        occ[i, j] = (crossings % 2) == 1
    return occ


def synthetic_shape(params: dict, frequency: int = 10, bump_width: float = 0.3) -> SurfaceMesh:
    """Ellipsoid mesh with radii ``a, b, c`` and an optional radial bump of relative height ``bump``."""
    sphere = icosphere(frequency)
    u = sphere.vertices
    bump = params.get("bump", 0.0)
    if bump:
        direction = np.ones(3) / np.sqrt(3.0)
        u = u * (1.0 + bump * np.exp(-(1.0 - u @ direction) / bump_width))[:, None]
    return sphere.with_vertices(u * np.array([params["a"], params["b"], params["c"]]))


def synthetic_image(mesh: SurfaceMesh, spec: SyntheticSpec, rng) -> np.ndarray:
    occ = voxelize_mesh(mesh, spec.volume_shape, spec.spacing, spec.origin).astype(np.float64)
    img = gaussian_filter(occ, spec.blur_sigma) if spec.blur_sigma > 0 else occ
    if spec.intensity_gradient:
        ramp = np.linspace(-0.5, 0.5, spec.volume_shape[0])[:, None, None]
        img = img + spec.intensity_gradient * ramp
    if spec.noise_std > 0:
        img = img + rng.normal(0.0, spec.noise_std, size=img.shape)
    return img


def draw_parameters(spec: SyntheticSpec, rng) -> dict:
    (a0, a1), (b0, b1), (c0, c1) = spec.radii_ranges
    p = {"a": rng.uniform(a0, a1), "b": rng.uniform(b0, b1), "c": rng.uniform(c0, c1)}
    p["bump"] = rng.uniform(0.0, spec.bump_amplitude) if spec.bump_amplitude > 0 else 0.0
    return p


def generate_synthetic(spec: SyntheticSpec, out_dir) -> Path:
    """Write a synthetic cohort (PLY meshes, NRRD volumes, manifest and parameter table).

    Output depends only on ``spec``; returns the manifest path.
    """
    spec.validate()
    out = Path(out_dir)
    (out / "meshes").mkdir(parents=True, exist_ok=True)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rows, params_rows = [], []
    width = max(3, len(str(spec.n_samples - 1)))
    for i in range(spec.n_samples):
        sid = f"s{i:0{width}d}"
        rng = np.random.default_rng([spec.seed, i])
        params = draw_parameters(spec, rng)
        mesh = synthetic_shape(params, spec.mesh_frequency, spec.bump_width)
        image = synthetic_image(mesh, spec, rng)
        write_ply(out / "meshes" / f"{sid}.ply", mesh)
        write_nrrd(out / "images" / f"{sid}.nrrd", image, spec.spacing, spec.origin)
        rows.append((sid, f"meshes/{sid}.ply", f"images/{sid}.nrrd"))
        params_rows.append((sid, repr(params["a"]), repr(params["b"]), repr(params["c"]), repr(params["bump"])))
        log.debug("generated %s %s", sid, params)
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "mesh_path", "image_path"])
        w.writerows(rows)
    with open(out / "parameters.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "a", "b", "c", "bump"])
        w.writerows(params_rows)
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2))
    (out / "normalization.json").write_text(json.dumps({"method": "zscore"}))
    return out / "manifest.csv"

"""Readers and writers for meshes (PLY), point sets (``.particles``) and volumes (NRRD)."""
from __future__ import annotations

import os
import tempfile
from pathlib import Path

import nrrd
import numpy as np
from plyfile import PlyData, PlyElement

from .geometry import SurfaceMesh, as_points


def _atomic_write(path, write):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        write(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def read_ply(path, validate: bool = True) -> SurfaceMesh:
    """Load a triangle mesh from ASCII or binary PLY."""
    ply = PlyData.read(str(path))
    v = ply["vertex"]
    vertices = np.column_stack([v["x"], v["y"], v["z"]]).astype(np.float64)
    face_el = ply["face"]
    prop = "vertex_indices" if "vertex_indices" in face_el.data.dtype.names else "vertex_index"
    raw = face_el[prop]
    lengths = np.fromiter((len(r) for r in raw), dtype=np.int64, count=len(raw))
    if np.any(lengths != 3):
        raise ValueError(f"{path}: only triangle faces are supported")
    faces = np.vstack(raw).astype(np.int64) if len(raw) else np.zeros((0, 3), np.int64)
    mesh = SurfaceMesh(vertices, faces)
    return mesh.validate() if validate else mesh


def write_ply(path, mesh: SurfaceMesh, binary: bool = True) -> None:
    vert = np.empty(mesh.n_vertices, dtype=[("x", "f8"), ("y", "f8"), ("z", "f8")])
    vert["x"], vert["y"], vert["z"] = mesh.vertices.T
    face = np.empty(len(mesh.faces), dtype=[("vertex_indices", "i4", (3,))])
    face["vertex_indices"] = mesh.faces
    data = PlyData([PlyElement.describe(vert, "vertex"), PlyElement.describe(face, "face")],
                   text=not binary, byte_order="<")
    _atomic_write(path, lambda tmp: data.write(tmp))


def read_particles(path) -> np.ndarray:
    pts = np.loadtxt(path, dtype=np.float64, ndmin=2)
    return as_points(pts)


def write_particles(path, points) -> None:
    pts = as_points(points)
    # repr-precision floats so reloading is bit-exact
    text = "".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in pts.tolist())
    _atomic_write(path, lambda tmp: Path(tmp).write_text(text))


def write_nrrd(path, volume, spacing: float = 1.0, origin=(0.0, 0.0, 0.0)) -> None:
    vol = np.asarray(volume, dtype=np.float32)
    if vol.ndim != 3:
        raise ValueError(f"expected a 3-D volume, got shape {vol.shape}")
    header = {
        "space": "left-posterior-superior",
        "space directions": np.eye(3) * float(spacing),
        "space origin": np.asarray(origin, dtype=np.float64),
        "encoding": "raw",
    }
    _atomic_write(path, lambda tmp: _write_nrrd_reproducible(tmp, vol, header))


def _write_nrrd_reproducible(tmp, vol, header) -> None:
    # pynrrd stamps the write time into a header comment; drop it so identical volumes give identical files
    nrrd.write(tmp, vol, header, index_order="C")
    raw = Path(tmp).read_bytes()
    end = raw.index(b"\n\n") + 2
    lines = [ln for ln in raw[:end].split(b"\n") if not (ln.startswith(b"# on ") and ln.endswith(b"(GMT)."))]
    Path(tmp).write_bytes(b"\n".join(lines) + raw[end:])


def read_nrrd(path) -> tuple[np.ndarray, dict]:
    """Return the volume (float64, C index order) and a dict with ``spacing``/``origin``."""
    data, header = nrrd.read(str(path), index_order="C")
    dirs = header.get("space directions")
    spacing = float(np.abs(np.asarray(dirs, dtype=np.float64)).max()) if dirs is not None else 1.0
    origin = np.asarray(header.get("space origin", np.zeros(3)), dtype=np.float64)
    return np.asarray(data, dtype=np.float64), {"spacing": spacing, "origin": origin}

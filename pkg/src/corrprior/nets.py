"""Surface encoder, image encoder and template-deforming implicit decoder."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn


@dataclass
class ModelConfig:
    latent_dim: int = 256
    n_correspondences: int = 1024
    k: int = 20
    edge_widths: tuple = (64, 64, 64)
    dynamic_knn: bool = True
    vertex_head_width: int = 128
    decoder_widths: tuple = (512, 256, 128)
    image_shape: tuple = (64, 64, 64)
    image_channels: tuple = (12, 24, 48, 96, 192)
    kernel_size: int = 5
    fc_widths: tuple = (384, 96)
    batch_norm: bool = True

    def __post_init__(self):
        for name in ("edge_widths", "decoder_widths", "image_shape", "image_channels", "fc_widths"):
            setattr(self, name, tuple(int(x) for x in getattr(self, name)))
        if self.latent_dim <= 0 or self.n_correspondences <= 0 or self.k <= 0:
            raise ValueError("latent_dim, n_correspondences and k must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=list)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def gather_neighbors(x, idx):
    """``x`` (B, N, C), ``idx`` (B, N, k) -> (B, N, k, C)."""
    b, n, k = idx.shape
    flat = idx.reshape(b, n * k, 1).expand(-1, -1, x.shape[-1])
    return torch.gather(x, 1, flat).reshape(b, n, k, x.shape[-1])


@torch.no_grad()
def feature_knn(h, k):
    """k nearest neighbours in feature space, excluding the point itself."""
    sq = (h * h).sum(-1)
    d = sq[:, :, None] + sq[:, None, :] - 2.0 * h @ h.transpose(1, 2)
    d.diagonal(dim1=1, dim2=2).fill_(float("inf"))
    return d.topk(k, dim=-1, largest=False).indices


class EdgeConvBlock(nn.Module):
    """Shared two-layer transform of ``[x_i, x_j - x_i]`` followed by a max over neighbours."""

    def __init__(self, in_dim, width, batch_norm=True):
        super().__init__()
        self.in_dim = in_dim
        self.edge = nn.Linear(2 * in_dim, width)
        self.mix = nn.Linear(width, width)
        self.bn1 = nn.BatchNorm1d(width) if batch_norm else nn.Identity()
        self.bn2 = nn.BatchNorm1d(width) if batch_norm else nn.Identity()
        self.act = nn.LeakyReLU(0.2)

    def _norm(self, bn, e):
        shape = e.shape
        return bn(e.reshape(-1, shape[-1])).reshape(shape)

    def forward(self, h, idx):
        w_center, w_diff = self.edge.weight[:, :self.in_dim], self.edge.weight[:, self.in_dim:]
        # W [x_i, x_j - x_i] = (W_c - W_d) x_i + W_d x_j, evaluated per vertex before gathering
        center = h @ (w_center - w_diff).T + self.edge.bias
        neigh = gather_neighbors(h @ w_diff.T, idx)
        e = self.act(self._norm(self.bn1, center[:, :, None, :] + neigh))
        e = self.act(self._norm(self.bn2, self.mix(e)))
        return e.max(dim=2).values


class SurfaceEncoder(nn.Module):
    """Dynamic-graph EdgeConv autoencoder trunk.

    ``forward(x, graph)`` takes vertices ``x`` (B, N, 3) and the first-block
    neighbour indices ``graph`` (B, N, k); it returns the latent (B, L) and the
    per-vertex reconstruction (B, N, 3) in input order.
    """

    def __init__(self, k, widths=(64, 64, 64), latent_dim=256, dynamic=True, head_width=128, batch_norm=True):
        super().__init__()
        self.k = k
        self.dynamic = dynamic
        dims = (3,) + tuple(widths)
        self.blocks = nn.ModuleList(EdgeConvBlock(a, b, batch_norm) for a, b in zip(dims[:-1], dims[1:]))
        cat = sum(widths)
        self.to_latent = nn.Linear(cat, latent_dim)
        self.vertex_head = nn.Sequential(nn.Linear(cat + latent_dim, head_width), nn.LeakyReLU(0.2),
                                         nn.Linear(head_width, 3))

    def forward(self, x, graph):
        if graph.shape[-1] != self.k:
            raise ValueError(f"neighbourhood graph has k={graph.shape[-1]}, encoder expects k={self.k}")
        if graph.shape[:2] != x.shape[:2]:
            raise ValueError(f"graph shape {tuple(graph.shape)} does not match vertices {tuple(x.shape)}")
        feats, h, idx = [], x, graph
        for i, block in enumerate(self.blocks):
            if i > 0 and self.dynamic:
                idx = feature_knn(h, self.k)
            h = block(h, idx)
            feats.append(h)
        cat = torch.cat(feats, dim=-1)
        z = self.to_latent(cat.max(dim=1).values)
        per_vertex = torch.cat([cat, z[:, None, :].expand(-1, cat.shape[1], -1)], dim=-1)
        return z, self.vertex_head(per_vertex)


class ImageEncoder(nn.Module):
    """3-D conv stack (conv -> norm -> ReLU -> 2x max-pool per block) and a PReLU FC head."""

    def __init__(self, image_shape=(64, 64, 64), channels=(12, 24, 48, 96, 192), kernel_size=5,
                 fc_widths=(384, 96), latent_dim=256, batch_norm=True, channels_last=True):
        super().__init__()
        self.image_shape = tuple(image_shape)
        layers, c_in, spatial = [], 1, np.array(image_shape)
        for c in channels:
            layers += [nn.Conv3d(c_in, c, kernel_size, padding=kernel_size // 2),
                       nn.BatchNorm3d(c) if batch_norm else nn.Identity(), nn.ReLU(), nn.MaxPool3d(2)]
            c_in, spatial = c, spatial // 2
        if np.any(spatial < 1):
            raise ValueError(f"image shape {self.image_shape} is too small for {len(channels)} pooling stages")
        self.features = nn.Sequential(*layers)
        self.flat_dim = int(c_in * np.prod(spatial))
        widths = (self.flat_dim,) + tuple(fc_widths) + (latent_dim,)
        head = []
        for a, b in zip(widths[:-1], widths[1:]):
            head += [nn.Linear(a, b), nn.PReLU()]
        self.head = nn.Sequential(*head)
        self.channels_last = channels_last
        if channels_last:
            self.features.to(memory_format=torch.channels_last_3d)

    def forward(self, image):
        if image.dim() == 4:
            image = image[:, None]
        if image.dim() != 5 or tuple(image.shape[2:]) != self.image_shape or image.shape[1] != 1:
            raise ValueError(f"expected images of shape (B, {', '.join(map(str, self.image_shape))}), "
                             f"got {tuple(image.shape)}")
        if self.channels_last:
            image = image.contiguous(memory_format=torch.channels_last_3d)
        return self.head(self.features(image).flatten(1))


class ImplicitDecoder(nn.Module):
    """Coordinate-conditioned MLP predicting a displacement for every template point."""

    def __init__(self, latent_dim=256, widths=(512, 256, 128), negative_slope=0.02):
        super().__init__()
        d_in = latent_dim + 3
        self.hidden = nn.ModuleList()
        prev = 0
        for i, w in enumerate(widths):
            self.hidden.append(nn.Linear(d_in + prev, w))
            prev = w
        self.out = nn.Linear(prev, 3)
        self.act = nn.LeakyReLU(negative_slope)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, z, template):
        """``z`` (B, L), ``template`` (M, 3) or (B, M, 3) -> displacements (B, M, 3)."""
        if template.dim() == 2:
            template = template[None].expand(z.shape[0], -1, -1)
        inp = torch.cat([z[:, None, :].expand(-1, template.shape[1], -1), template], dim=-1)
        h = None
        for layer in self.hidden:
            h = self.act(layer(inp if h is None else torch.cat([h, inp], dim=-1)))
        return self.out(h)


class CorrespondenceNet(nn.Module):
    """Container for the three maps plus the frozen template.

    Networks operate in normalised coordinates (world / ``coord_scale``);
    the ``*_world`` helpers convert at the boundary.
    """

    def __init__(self, config: ModelConfig, template=None, coord_scale: float = 1.0):
        super().__init__()
        self.config = config
        c = config
        self.surface_encoder = SurfaceEncoder(c.k, c.edge_widths, c.latent_dim, c.dynamic_knn,
                                              c.vertex_head_width, c.batch_norm)
        self.image_encoder = ImageEncoder(c.image_shape, c.image_channels, c.kernel_size, c.fc_widths,
                                          c.latent_dim, c.batch_norm)
        self.decoder = ImplicitDecoder(c.latent_dim, c.decoder_widths)
        if template is None:
            template = np.zeros((c.n_correspondences, 3))
        template = torch.tensor(np.array(template, dtype=np.float64), dtype=torch.get_default_dtype())
        if template.shape != (c.n_correspondences, 3):
            raise ValueError(f"template must have shape ({c.n_correspondences}, 3), got {tuple(template.shape)}")
        self.register_buffer("template", template.clone())
        self.register_buffer("coord_scale", torch.tensor(float(coord_scale), dtype=torch.float64))
        self.completed_phases = []

    @property
    def scale(self) -> float:
        return float(self.coord_scale)

    def decode(self, z):
        """Normalised correspondences ``t_m + delta(z, t_m)`` for every template point."""
        t = (self.template / self.coord_scale).to(z.dtype)
        return t + self.decoder(z, t)

    def encode_surface(self, x, graph):
        return self.surface_encoder(x, graph)

    def encode_image(self, image):
        return self.image_encoder(image)

    def predict_surface_world(self, x_world, graph):
        z, _ = self.surface_encoder(x_world / self.coord_scale, graph)
        return self.decode(z) * self.coord_scale

    def predict_image_world(self, image):
        return self.decode(self.image_encoder(image)) * self.coord_scale


def decode_correspondences(z, template, decoder: ImplicitDecoder):
    """Functional form: ``template + decoder(z, template)``."""
    return template + decoder(z, template)


def init_parameters(config: ModelConfig, seed: int, template=None, coord_scale: float = 1.0) -> CorrespondenceNet:
    """Build a network with deterministic initial weights for ``seed``.

    The decoder's last layer starts at zero so the initial output is the template.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = CorrespondenceNet(config, template, coord_scale)
    return net


def state_arrays(module: nn.Module) -> dict:
    return {k: v.detach().cpu().contiguous().numpy().copy() for k, v in module.state_dict().items()}


def save_checkpoint(net: CorrespondenceNet, directory, **manifest) -> Path:
    """Write ``params.npz`` and ``manifest.json`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = state_arrays(net)
    np.savez(directory / "params.npz", **arrays)
    info = {
        "model": net.config.to_dict(),
        "coord_scale": net.scale,
        "shapes": {k: list(v.shape) for k, v in arrays.items()},
        "completed_phases": list(net.completed_phases),
        **manifest,
    }
    info.setdefault("config_hash", config_hash(info["model"]))
    (directory / "manifest.json").write_text(json.dumps(info, indent=2, sort_keys=True, default=list))
    return directory


def load_checkpoint(directory) -> tuple[CorrespondenceNet, dict]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no checkpoint manifest in {directory}")
    manifest = json.loads(manifest_path.read_text())
    net = CorrespondenceNet(ModelConfig.from_dict(manifest["model"]), coord_scale=manifest["coord_scale"])
    with np.load(directory / "params.npz") as data:
        state = {k: torch.from_numpy(data[k]) for k in data.files}
    net.load_state_dict(state)
    net.completed_phases = list(manifest.get("completed_phases", []))
    net.eval()
    return net, manifest

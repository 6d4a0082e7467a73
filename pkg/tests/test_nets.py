import numpy as np
import pytest
import torch

from corrprior.geometry import euclidean_knn, geodesic_knn, icosphere
from corrprior.nets import (CorrespondenceNet, ImageEncoder, ImplicitDecoder, ModelConfig, SurfaceEncoder,
                            config_hash, decode_correspondences, init_parameters, load_checkpoint,
                            save_checkpoint)

from conftest import tiny_model_config


def _mesh_batch(frequency=3, k=4):
    mesh = icosphere(frequency)
    x = torch.tensor(mesh.vertices * [1.0, 0.8, 0.6], dtype=torch.float32)[None]
    g = torch.tensor(geodesic_knn(mesh, k).indices)[None]
    return x, g


def test_encoder_permutation_invariance():
    torch.manual_seed(0)
    enc = SurfaceEncoder(k=4, widths=(16, 16), latent_dim=8, head_width=8).eval()
    x, g = _mesh_batch()
    perm = torch.randperm(x.shape[1])
    inv = torch.argsort(perm)
    z1, v1 = enc(x, g)
    z2, v2 = enc(x[:, perm], inv[g[:, perm]])
    assert torch.max(torch.abs(z1 - z2)) <= 1e-5
    assert torch.allclose(v1[:, perm], v2, atol=1e-5)


def test_encoder_continuity_under_tiny_jitter():
    torch.manual_seed(0)
    enc = SurfaceEncoder(k=4, widths=(16, 16), latent_dim=8, head_width=8).eval()
    x, g = _mesh_batch()
    noise = 1e-6 * torch.randn_like(x)
    assert torch.linalg.norm(enc(x, g)[0] - enc(x + noise, g)[0]) < 1e-3


def test_encoder_rejects_wrong_k():
    enc = SurfaceEncoder(k=5)
    x, g = _mesh_batch(k=4)
    with pytest.raises(ValueError, match="k=4"):
        enc(x, g)


def test_encoder_smoke_on_100_vertex_cloud():
    net = init_parameters(tiny_model_config(), 0)
    pts = np.random.default_rng(0).normal(size=(100, 3))
    g = torch.tensor(euclidean_knn(pts, 4).indices)[None]
    net.eval()
    with torch.no_grad():
        z, v = net.surface_encoder(torch.tensor(pts, dtype=torch.float32)[None], g)
    assert torch.all(torch.isfinite(z)) and float(torch.linalg.norm(z)) > 0
    assert v.shape == (1, 100, 3)


def test_image_encoder_shapes_and_determinism():
    torch.manual_seed(0)
    enc = ImageEncoder((32, 32, 32), (2, 2, 2, 2, 2), 3, (8, 8), 6).eval()
    img = torch.zeros(2, 32, 32, 32)
    with torch.no_grad():
        z = enc(img)
    assert z.shape == (2, 6) and torch.all(torch.isfinite(z))
    assert torch.equal(z[0], z[1])


def test_image_encoder_fc_stack():
    enc = ImageEncoder((64, 64, 64), latent_dim=256)
    linear = [m for m in enc.head if isinstance(m, torch.nn.Linear)]
    assert [(m.in_features, m.out_features) for m in linear] == [(192 * 8, 384), (384, 96), (96, 256)]
    assert sum(isinstance(m, torch.nn.PReLU) for m in enc.head) == 3


def test_image_encoder_shape_mismatch():
    enc = ImageEncoder((32, 32, 32), (2, 2, 2, 2, 2), 3, (8, 8), 6)
    with pytest.raises(ValueError, match="32, 32, 32"):
        enc(torch.zeros(1, 32, 32, 16))


def test_image_encoder_too_small():
    with pytest.raises(ValueError):
        ImageEncoder((16, 16, 16))


def test_decoder_zero_init_returns_template():
    dec = ImplicitDecoder(latent_dim=5, widths=(7, 7))
    t = torch.randn(11, 3)
    z = torch.randn(3, 5)
    out = decode_correspondences(z, t, dec)
    assert out.shape == (3, 11, 3)
    assert torch.equal(out, t.expand(3, -1, -1))


def test_decoder_pointwise_equivariance():
    torch.manual_seed(1)
    dec = ImplicitDecoder(latent_dim=5, widths=(7, 7))
    torch.nn.init.normal_(dec.out.weight)
    t = torch.randn(11, 3)
    z = torch.randn(2, 5)
    perm = torch.randperm(11)
    assert torch.allclose(dec(z, t)[:, perm], dec(z, t[perm]), atol=1e-6)


def test_init_parameters_seeded():
    a = init_parameters(tiny_model_config(), 3)
    b = init_parameters(tiny_model_config(), 3)
    c = init_parameters(tiny_model_config(), 4)
    for (ka, va), (_, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(va, vb), ka
    assert not all(torch.equal(x, y) for x, y in zip(a.parameters(), c.parameters()))


def test_init_does_not_touch_global_rng():
    torch.manual_seed(9)
    expected = torch.rand(1)
    torch.manual_seed(9)
    init_parameters(tiny_model_config(), 0)
    assert torch.equal(torch.rand(1), expected)


def test_output_cardinality_is_m():
    cfg = tiny_model_config(n_correspondences=13)
    t = np.random.default_rng(0).normal(size=(13, 3))
    net = init_parameters(cfg, 0, t, coord_scale=2.0).eval()
    with torch.no_grad():
        out = net.predict_image_world(torch.randn(2, 32, 32, 32))
    assert out.shape == (2, 13, 3)
    np.testing.assert_allclose(out[0].numpy(), t, atol=1e-6)


def test_template_shape_checked():
    with pytest.raises(ValueError):
        CorrespondenceNet(tiny_model_config(), np.zeros((5, 3)))


def test_config_roundtrip_and_unknown_keys():
    cfg = tiny_model_config()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError, match="unknown"):
        ModelConfig.from_dict({"latent": 3})
    assert config_hash(cfg.to_dict()) == config_hash(ModelConfig.from_dict(cfg.to_dict()).to_dict())


def test_checkpoint_roundtrip(tmp_path):
    t = np.random.default_rng(0).normal(size=(16, 3))
    net = init_parameters(tiny_model_config(), 0, t, 3.5)
    net.completed_phases.append("surface")
    save_checkpoint(net, tmp_path / "ck", phase="surface", val_cd=1.25)
    loaded, manifest = load_checkpoint(tmp_path / "ck")
    assert manifest["val_cd"] == 1.25 and loaded.scale == 3.5
    assert loaded.completed_phases == ["surface"]
    for k, v in net.state_dict().items():
        assert torch.equal(v, loaded.state_dict()[k]), k


def test_load_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path)

import numpy as np
import pytest
import torch

from neuralpath.errors import ConfigError, StructuralError
from neuralpath.geometry import aux_points_closed, circle_path, polygon_path
from neuralpath.vae import (
    NeuralPathVAE,
    VaeConfig,
    decoded_to_path,
    interpolate,
    kl_divergence,
    load_checkpoint,
    path_tensors,
    sample_prior,
    save_checkpoint,
    vae_loss,
)


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return NeuralPathVAE(VaeConfig()).eval()


def _batch(paths):
    pts, mask = path_tensors(paths)
    img = torch.rand(len(paths), 1, 64, 64)
    return pts, mask, img


def test_padding_garbage_is_masked(model):
    pts, mask, _ = _batch([circle_path()])
    noisy = pts.clone()
    noisy[0, 12:] = 0.77
    with torch.no_grad():
        assert torch.equal(model.encode_sequence(pts, mask), model.encode_sequence(noisy, mask))


def test_branch_shapes_and_determinism(model):
    pts, mask, img = _batch([circle_path(), polygon_path([(0.1, 0.1), (0.9, 0.2), (0.5, 0.9)])])
    with torch.no_grad():
        zs = model.encode_sequence(pts, mask)
        zi = model.encode_image(img)
        mu, logvar = model.fuse(zs, zi)
        assert zs.shape == (2, 32) and zi.shape == (2, 64) and mu.shape == (2, 24)
        assert torch.isfinite(zs).all()
        assert torch.equal(model.decode_points(mu), model.decode_points(mu))
        assert torch.equal(model.reparameterize(mu, logvar), mu)
        out = model.decode_image(mu)
    assert out.shape == (2, 1, 64, 64) and out.min() >= 0 and out.max() <= 1
    assert torch.equal(model.encode_image(img[:1]), model.encode_image(img[:1].clone()))


def test_decoder_output_is_valid_closed_path(model):
    with torch.no_grad():
        pts = model.decode_points(sample_prior(0, 4))
    for p in pts:
        path = decoded_to_path(p)
        assert path.closed and path.length == 48
        path.validate(check_range=True)


def test_encoder_rejects_unnormalized_input(model):
    pts, mask, img = _batch([circle_path(0.5, 0.5, 0.7)])
    with pytest.raises(StructuralError):
        model.encode_sequence(pts, mask)
    with pytest.raises(StructuralError):
        model.encode_image(torch.rand(1, 1, 32, 32))


def test_kl_properties():
    assert float(kl_divergence(torch.zeros(3, 24), torch.zeros(3, 24)).abs().max()) == 0.0
    g = torch.Generator().manual_seed(0)
    assert (kl_divergence(torch.randn(50, 24, generator=g), torch.randn(50, 24, generator=g)) >= 0).all()


def test_perfect_reconstruction_loss_is_zero():
    cfg = VaeConfig()
    pred = torch.rand(2, 48, 2, dtype=torch.float64)
    aux = aux_points_closed(pred, cfg.aux_n)
    img = torch.rand(2, 1, 64, 64, dtype=torch.float64)
    batch = {"aux": aux, "aux_mask": torch.ones(aux.shape[:2], dtype=torch.bool), "images": img}
    total, *_ = vae_loss(cfg, pred, img, torch.zeros(2, 24), torch.zeros(2, 24), batch)
    assert float(total) == 0.0
    assert (cfg.w_chamfer, cfg.w_image, cfg.w_kl) == (1.0, 0.1, 0.01)
    assert cfg.dropout == 0.1 and cfg.epochs == 100


def test_chamfer_gradient_matches_finite_differences():
    cfg = VaeConfig()
    g = torch.Generator().manual_seed(4)
    target = torch.rand(1, 30, 2, generator=g, dtype=torch.float64)
    batch = {"aux": target, "aux_mask": torch.ones(1, 30, dtype=torch.bool), "images": torch.zeros(1, 1, 64, 64)}
    pred = torch.rand(1, 48, 2, generator=g, dtype=torch.float64, requires_grad=True)

    def loss(p):
        return vae_loss(cfg, p, torch.zeros(1, 1, 64, 64), torch.zeros(1, 24), torch.zeros(1, 24), batch)[1]

    (grad,) = torch.autograd.grad(loss(pred), pred)
    fd = torch.zeros_like(grad).reshape(-1)
    base = pred.detach().reshape(-1)
    h = 1e-6
    for k in range(base.numel()):
        e = torch.zeros_like(base)
        e[k] = h
        fd[k] = (loss((base + e).reshape(pred.shape)) - loss((base - e).reshape(pred.shape))) / (2 * h)
    rel = float((grad.reshape(-1) - fd).abs().max() / fd.abs().max())
    assert rel < 1e-4


def test_interpolation_endpoints(model):
    z1, z2 = sample_prior(1), sample_prior(2)
    assert torch.equal(interpolate(z1, z2, 0.0), z1)
    assert torch.equal(interpolate(z1, z2, 1.0), z2)
    with torch.no_grad():
        decoded_to_path(model.decode_points(interpolate(z1, z2, 0.5)[None])[0]).validate(check_range=True)
    with pytest.raises(ValueError):
        interpolate(z1, z2, 1.5)


def test_prior_sampling_is_seeded():
    assert torch.equal(sample_prior(5, 3), sample_prior(5, 3))
    assert not torch.equal(sample_prior(5, 3), sample_prior(6, 3))


def test_checkpoint_round_trip(model, tmp_path):
    save_checkpoint(model, tmp_path / "m.pt", epoch=3, dataset_hash="abc")
    loaded, meta = load_checkpoint(tmp_path / "m.pt")
    z = sample_prior(0, 2)
    with torch.no_grad():
        assert torch.equal(loaded.decode_points(z), model.decode_points(z))
    assert meta == {"epoch": 3, "dataset_hash": "abc"}


def test_checkpoint_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "missing.pt")
    torch.save({"format": "other"}, tmp_path / "bad.pt")
    with pytest.raises(StructuralError):
        load_checkpoint(tmp_path / "bad.pt")


def test_config_validation():
    with pytest.raises(ConfigError):
        VaeConfig(decoded_points=47)
    with pytest.raises(ConfigError):
        VaeConfig(image_size=32)
    with pytest.raises(ConfigError):
        VaeConfig.from_dict({"d_hiden": 3})


def test_training_loop_runs_and_logs(tmp_path):
    from neuralpath.corpus import make_corpus
    from neuralpath.dataset import build_dataset
    from neuralpath.train import train

    make_corpus(tmp_path / "c", n_files=12, seed=0)
    ds = build_dataset(tmp_path / "c")
    cfg = VaeConfig(epochs=2, d_hidden=32, n_layers=1, d_ff=32, batch_size=16)
    _, rows = train(ds, cfg, log_path=tmp_path / "log.jsonl", checkpoint_path=tmp_path / "m.pt")
    assert [r["epoch"] for r in rows] == [1, 2]
    assert all(np.isfinite(r["L_kl"]) for r in rows)
    assert len((tmp_path / "log.jsonl").read_text().splitlines()) == 2
    assert load_checkpoint(tmp_path / "m.pt")[1]["epoch"] == 2

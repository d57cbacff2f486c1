import math

import numpy as np
import pytest
import torch

from neuralpath.errors import BackendError
from neuralpath.guidance import (
    T_RANGE,
    ForcedNoiseLoRA,
    GuidanceContext,
    NoiseSchedule,
    ToyBackend,
    add_noise,
    backprop_score,
    ddim_refine,
    draw_noise,
    get_backend,
    guided_noise,
    lora_step,
    sds_gradient,
    step_generator,
    vsd_gradient,
    weight,
)

SCHED = NoiseSchedule.scaled_linear()


def _toy(seed=0, size=16):
    g = torch.Generator().manual_seed(seed)
    return ToyBackend(torch.rand(3, size, size, generator=g, dtype=torch.float64), size=size)


def test_schedule_limits():
    x = torch.rand(3, 8, 8, dtype=torch.float64)
    eps = torch.randn_like(x)
    assert torch.equal(add_noise(x, 0, eps, SCHED), x)
    assert float(SCHED.ab(1)) == pytest.approx(1 - 0.00085)
    near = add_noise(x, SCHED.t_max, eps, SCHED)
    assert float((near - eps).abs().max()) < 0.1
    assert float(SCHED.ab(SCHED.t_max)) < 0.005
    with pytest.raises(ValueError):
        SCHED.ab(SCHED.t_max + 1)


def test_timestep_sampling_range():
    ts = [SCHED.sample_t(step_generator(0, i)) for i in range(3000)]
    assert min(ts) == T_RANGE[0] and max(ts) == T_RANGE[1]


def test_noised_variance_matches_schedule():
    gen = torch.Generator().manual_seed(0)
    for t in (50, 300, 700, 950):
        eps = torch.randn(20000, generator=gen, dtype=torch.float64)
        var = float(add_noise(torch.zeros(20000, dtype=torch.float64), t, eps, SCHED).var())
        assert var == pytest.approx(1 - float(SCHED.ab(t)), rel=0.05)


def test_context_validation():
    with pytest.raises(ValueError):
        GuidanceContext("x", scale=0.5)
    ctx = GuidanceContext("x", weighting="sds")
    assert weight(500, ctx, SCHED) == pytest.approx(1 - float(SCHED.ab(500)))
    with pytest.raises(ValueError):
        weight(500, GuidanceContext("x", weighting="nope"), SCHED)


def test_toy_latent_is_identity_at_native_size():
    img = torch.rand(64, 64, 3, dtype=torch.float64)
    b = ToyBackend(img)
    assert torch.equal(b.x_target, img.permute(2, 0, 1))
    assert torch.equal(b.decode_latent(b.encode_latent(img)), img)
    assert b.encode_latent(torch.rand(512, 512, 3)).shape == (3, 64, 64)


def test_exact_noise_oracle_gives_zero_gradient():
    b = _toy()
    grad, _ = sds_gradient(b, b.x_target.clone(), GuidanceContext("x"), step_generator(0, 0))
    assert float(grad.abs().max()) < 1e-9


def test_toy_sds_closed_form():
    b = _toy()
    x = torch.rand(b.shape, dtype=torch.float64)
    ctx = GuidanceContext("x", scale=10)
    for step in range(5):
        grad, d = sds_gradient(b, x, ctx, step_generator(1, step))
        ab = float(SCHED.ab(d.t))
        expected = math.sqrt(ab) / math.sqrt(1 - ab) * (x - b.x_target)
        assert torch.allclose(grad, expected, rtol=1e-8, atol=1e-10)


def test_gradients_are_seeded_and_shaped():
    b = _toy()
    x = torch.rand(b.shape, dtype=torch.float64)
    g1, d1 = sds_gradient(b, x, GuidanceContext("x"), step_generator(3, 9))
    g2, d2 = sds_gradient(b, x, GuidanceContext("x"), step_generator(3, 9))
    assert g1.shape == x.shape and torch.equal(g1, g2) and d1.t == d2.t


def test_cfg_scale_one_is_conditional_branch():
    b = _toy()
    x_t = torch.rand(b.shape, dtype=torch.float64)
    ctx = GuidanceContext("x", scale=1)
    assert torch.equal(guided_noise(b, x_t, 400, ctx), b.predict(x_t, 400, ctx))


def test_fresh_lora_vsd_is_zero_on_toy():
    b = _toy()
    x = torch.rand(b.shape, dtype=torch.float64)
    lora = b.make_lora()
    assert float(lora.delta().detach().abs().max()) == 0.0
    grad, _ = vsd_gradient(b, x, GuidanceContext("x", scale=10), lora, step_generator(0, 0))
    assert float(grad.abs().max()) == 0.0


def test_forced_lora_reproduces_sds_bitwise():
    b = _toy()
    x = torch.rand(b.shape, dtype=torch.float64)
    ctx = GuidanceContext("x")
    for step in range(10):
        gs, ds = sds_gradient(b, x, ctx, step_generator(2, step))
        gv, dv = vsd_gradient(b, x, ctx, ForcedNoiseLoRA(), step_generator(2, step))
        assert ds.t == dv.t and torch.equal(ds.eps, dv.eps) and torch.equal(gs, gv)


def test_vsd_differs_once_lora_moves():
    b = _toy()
    x = torch.rand(b.shape, dtype=torch.float64)
    lora = b.make_lora()
    with torch.no_grad():
        lora.B.normal_()
    ctx = GuidanceContext("x")
    gs, _ = sds_gradient(b, x, ctx, step_generator(0, 0))
    gv, _ = vsd_gradient(b, x, ctx, lora, step_generator(0, 0))
    assert not torch.equal(gs, gv)


def test_lora_training_leaves_base_alone_and_learns():
    b = _toy()
    base = [p.clone() for p in b.base_parameters()]
    x = torch.rand(b.shape, dtype=torch.float64)
    lora = b.make_lora()
    assert lora.A.shape[0] == 4
    opt = torch.optim.Adam(lora.parameters(), lr=1e-2)
    losses = [lora_step(b, lora, opt, x, GuidanceContext("x"), step_generator(0, s, 1)) for s in range(100)]
    assert all(torch.equal(a, c) for a, c in zip(base, b.base_parameters()))
    ma = np.convolve(losses, np.ones(20) / 20, mode="valid")
    assert ma[-1] < ma[0]
    assert math.isnan(lora_step(b, lora, None, x, GuidanceContext("x"), step_generator(0, 0, 1)))


@pytest.mark.parametrize("mode", ["sds", "vsd"])
def test_toy_distillation_converges(mode):
    b = _toy(size=16)
    x = torch.rand(b.shape, dtype=torch.float64, requires_grad=True)
    d0 = float((x - b.x_target).detach().norm())
    opt = torch.optim.Adam([x], lr=0.01)
    lora = b.make_lora()
    lopt = torch.optim.Adam(lora.parameters(), lr=1e-2)
    ctx = GuidanceContext("x")
    for s in range(200):
        if mode == "sds":
            g, _ = sds_gradient(b, x, ctx, step_generator(0, s))
        else:
            g, _ = vsd_gradient(b, x, ctx, lora, step_generator(0, s))
            lora_step(b, lora, lopt, x, ctx, step_generator(0, s, 1))
        opt.zero_grad()
        backprop_score(x, g)
        opt.step()
    ratio = float((x - b.x_target).detach().norm()) / d0
    assert ratio < (0.2 if mode == "sds" else 0.5)


def test_ddim_refine_recovers_toy_target():
    b = _toy()
    ctx = GuidanceContext("x")
    x0 = torch.rand(b.shape, dtype=torch.float64)
    assert torch.equal(ddim_refine(b, x0, ctx, 0.0, 10, torch.Generator().manual_seed(0)), x0)
    out = ddim_refine(b, x0, ctx, 0.5, 10, torch.Generator().manual_seed(0))
    assert torch.allclose(out, b.x_target, atol=1e-6)


def test_draws_live_on_input_device():
    x = torch.zeros(3, 4, 4, dtype=torch.float64)
    d = draw_noise(x, SCHED, step_generator(0, 0))
    assert d.eps.device == x.device and d.x_t.shape == x.shape


def test_backend_registry():
    with pytest.raises(BackendError):
        get_backend("toy")
    with pytest.raises(BackendError):
        get_backend("nope")
    assert isinstance(get_backend("toy", x_target=torch.zeros(3, 8, 8), size=8), ToyBackend)


@pytest.fixture(scope="module")
def tiny_diffusion():
    diffusers = pytest.importorskip("diffusers")
    from neuralpath.diffusion import LatentDiffusionBackend

    torch.manual_seed(0)
    unet = diffusers.UNet2DConditionModel(
        sample_size=8, in_channels=4, out_channels=4, layers_per_block=1, block_out_channels=(32, 64),
        down_block_types=("CrossAttnDownBlock2D", "DownBlock2D"), up_block_types=("UpBlock2D", "CrossAttnUpBlock2D"),
        cross_attention_dim=16, norm_num_groups=8, attention_head_dim=4)
    vae = diffusers.AutoencoderKL(
        block_out_channels=(8, 8, 8, 8), down_block_types=("DownEncoderBlock2D",) * 4,
        up_block_types=("UpDecoderBlock2D",) * 4, latent_channels=4, norm_num_groups=4, layers_per_block=1)

    def text(prompts):
        return torch.stack([torch.randn(5, 16, generator=torch.Generator().manual_seed(len(p))) for p in prompts])

    return LatentDiffusionBackend(vae, unet, text, SCHED.alpha_bar[1:])


def test_latent_backend_contract(tiny_diffusion):
    b = tiny_diffusion
    img = torch.rand(64, 64, 3, requires_grad=True)
    x = b.encode_latent(img)
    assert x.shape == (1, 4, 8, 8)
    assert torch.equal(x, b.encode_latent(img))
    ctx = GuidanceContext("a cat")
    lora = b.make_lora()
    g, _ = vsd_gradient(b, x, ctx, lora, step_generator(0, 0))
    base = [p.clone() for p in b.base_parameters()]
    opt = torch.optim.Adam(lora.parameters(), lr=1e-3)
    assert math.isfinite(lora_step(b, lora, opt, x, ctx, step_generator(0, 0, 1)))
    assert all(torch.equal(a, c) for a, c in zip(base, b.base_parameters()))
    assert len(list(lora.parameters())) > 0
    g2, _ = vsd_gradient(b, x, ctx, lora, step_generator(0, 0))
    assert not torch.equal(g, g2)
    backprop_score(x, g)
    assert img.grad is not None and img.grad.abs().sum() > 0


def test_latent_backend_refine_shape(tiny_diffusion):
    out = tiny_diffusion.refine_image(torch.rand(64, 64, 3), GuidanceContext("a cat"), 0.4, 4,
                                      torch.Generator().manual_seed(0))
    assert out.shape == (64, 64, 3) and out.min() >= 0 and out.max() <= 1


def test_missing_weights_raise_backend_error(tmp_path):
    pytest.importorskip("diffusers")
    from neuralpath.diffusion import LatentDiffusionBackend

    with pytest.raises(BackendError):
        LatentDiffusionBackend.from_pretrained(str(tmp_path / "no-such-model"), device="cpu")

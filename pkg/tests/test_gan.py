import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from mitbench.complex_nn import grad_check
from mitbench.gan import (DiscriminatorNet, GanConfig, GeneratorNet, build_discriminator,
                          build_generator, d_accuracy, enhance, gan_losses, load_gan,
                          read_pgm, recalibrate_batchnorm, reconstruction_penalty, save_gan,
                          train_gan, write_pgm)
from mitbench.geometry import Phantom, rasterize_phantom_to_image
from mitbench.mitnet import TrainingDiverged

SMALL = GanConfig(base_width=2, epochs=1, batch_size=4)


def _toy_pairs(n=8):
    """Blurred discs as conditions, sharp discs as truths."""
    rng = np.random.default_rng(0)
    truths = []
    for _ in range(n):
        pos = tuple(rng.uniform(-50, 50, 2))
        truths.append(rasterize_phantom_to_image(Phantom("cylinder", 35, 2.0, pos)).astype(np.float32))
    truths = np.stack(truths)
    t = torch.as_tensor(truths)[:, None]
    blurred = F.avg_pool2d(t, 9, stride=1, padding=4, count_include_pad=False)[:, 0].numpy()
    return blurred, truths


def test_generator_shape_and_range():
    G = build_generator(SMALL)
    G.eval()
    out = G(torch.rand(2, 1, 256, 256))
    assert out.shape == (2, 1, 256, 256)
    assert out.min() >= 0 and out.max() <= 1


def test_generator_layer_counts_and_bottleneck():
    G = build_generator(SMALL)
    convs = [m for m in G.modules() if isinstance(m, torch.nn.Conv2d) and m.kernel_size == (3, 3)]
    ups = [m for m in G.modules() if isinstance(m, torch.nn.ConvTranspose2d)]
    bns = [m for m in G.modules() if isinstance(m, torch.nn.BatchNorm2d)]
    assert len(convs) == 10 and len(ups) == 4
    assert len(bns) == 14
    x = torch.rand(1, 1, 256, 256)
    G.eval()
    with torch.no_grad():
        for stage in G.stages:
            x = F.max_pool2d(stage(x), 2)
    assert x.shape[-2:] == (8, 8)   # 256 / 2**5


def test_generator_seeded():
    x = torch.rand(1, 1, 256, 256)
    a, b = build_generator(SMALL), build_generator(SMALL)
    a.eval()
    b.eval()
    assert torch.equal(a(x), b(x))
    c = build_generator(GanConfig(base_width=2, seed=5))
    c.eval()
    assert not torch.equal(a(x), c(x))


def test_discriminator_patch_map():
    D = build_discriminator(SMALL)
    D.eval()
    cond, cand = torch.rand(2, 1, 256, 256), torch.rand(2, 1, 256, 256)
    s = D(cond, cand)
    assert s.shape == (2, 1, 16, 16)
    assert s.min() > 0 and s.max() < 1
    assert not torch.equal(s, D(cand, cond))


def test_losses_at_half():
    half = torch.full((2, 1, 16, 16), 0.5)
    img = torch.rand(2, 1, 256, 256)
    loss_g, loss_d = gan_losses(half, half, half, img, img, lam=100.0)
    assert loss_g.item() == pytest.approx(math.log(2), abs=1e-6)    # reconstruction term is 0
    assert loss_d.item() == pytest.approx(2 * math.log(2), abs=1e-6)


def test_losses_linear_in_lambda():
    rng = torch.Generator().manual_seed(0)
    d = torch.rand(2, 1, 16, 16, generator=rng)
    fake, truth = torch.rand(2, 1, 256, 256, generator=rng), torch.rand(2, 1, 256, 256, generator=rng)
    adv = -torch.log(d).mean().item()
    g1, _ = gan_losses(d, d, d, fake, truth, lam=3.0)
    g2, _ = gan_losses(d, d, d, fake, truth, lam=6.0)
    assert (g2.item() - adv) == pytest.approx(2 * (g1.item() - adv), rel=1e-6)
    with pytest.raises(ValueError):
        gan_losses(d, d, d, fake, truth[:, :, :128])


def test_reconstruction_penalty_values():
    a = torch.zeros(2, 1, 4, 4)
    b = torch.zeros(2, 1, 4, 4)
    b[0, 0, 0, :] = 1          # four unit errors in the first image, none in the second
    assert reconstruction_penalty(a, a).item() == 0
    assert reconstruction_penalty(a, b).item() == pytest.approx((2 + 0) / 2)
    assert reconstruction_penalty(a, b, "l1").item() == pytest.approx((4 + 0) / 2)


def test_d_accuracy():
    real = torch.tensor([0.9, 0.4])
    fake = torch.tensor([0.1, 0.6])
    assert d_accuracy(real, fake) == 0.5


def test_config_validation():
    with pytest.raises(ValueError):
        GanConfig(lam=-1.0)
    with pytest.raises(ValueError):
        GanConfig(recon="l3")


def _block_check(block, shape, seed=0):
    torch.manual_seed(seed)
    block = block.double()
    block.train()
    x = torch.randn(*shape, dtype=torch.float64)
    return grad_check(lambda v: block(v), (x,), list(block.parameters()))


def test_generator_encoder_block_gradient():
    G = GeneratorNet(GanConfig(base_width=2))
    assert _block_check(G.stages[1], (2, 2, 6, 6)) <= 1e-4


def test_generator_decoder_block_gradient():
    G = GeneratorNet(GanConfig(base_width=2))
    up = G.ups[3]
    assert _block_check(up, (2, up[0].in_channels, 3, 3)) <= 1e-4


def test_generator_output_head_gradient():
    G = GeneratorNet(GanConfig(base_width=2)).double()
    x = torch.randn(1, G.out.in_channels, 4, 4, dtype=torch.float64)
    assert grad_check(lambda v: torch.sigmoid(G.out(v)), (x,), list(G.out.parameters())) <= 1e-4


def test_discriminator_gradient():
    D = DiscriminatorNet(GanConfig(base_width=1)).double()
    D.train()
    torch.manual_seed(1)
    a = torch.randn(2, 1, 32, 32, dtype=torch.float64)
    b = torch.randn(2, 1, 32, 32, dtype=torch.float64)
    assert grad_check(lambda u, v: D(u, v), (a, b), list(D.parameters())) <= 1e-4


def test_training_reduces_reconstruction_error():
    cond, truth = _toy_pairs()
    G, D, hist = train_gan(cond, truth, GanConfig(base_width=2, epochs=6, batch_size=4))
    recon = hist.column("recon")
    assert len(recon) == 6 and recon[-1] < recon[0]
    assert all(0 <= r["d_acc"] <= 1 for r in hist.rows)
    out = enhance(G, cond)
    assert out.shape == cond.shape and out.min() >= 0 and out.max() <= 1


def test_epoch_one_losses_reproducible():
    cond, truth = _toy_pairs(4)
    a = train_gan(cond, truth, SMALL)[2].rows[0]
    b = train_gan(cond, truth, SMALL)[2].rows[0]
    for key in ("loss_g", "loss_d"):
        assert f"{a[key]:.6g}" == f"{b[key]:.6g}"


def test_nan_input_aborts():
    cond, truth = _toy_pairs(4)
    cond[0, 0, 0] = np.nan
    with pytest.raises(TrainingDiverged):
        train_gan(cond, truth, SMALL)


def test_training_input_validation():
    cond, truth = _toy_pairs(4)
    with pytest.raises(ValueError):
        train_gan(cond, truth[:3], SMALL)
    with pytest.raises(ValueError):
        train_gan(cond[:, :128, :128], truth[:, :128, :128], SMALL)


def test_enhance_is_pure_and_roundtrips(tmp_path):
    cond, _ = _toy_pairs(3)
    G = build_generator(SMALL)
    a = enhance(G, cond)
    assert np.array_equal(a, enhance(G, cond))
    assert np.array_equal(enhance(G, cond[1]), a[1])
    save_gan(tmp_path / "gan.pt", G)
    assert np.array_equal(enhance(load_gan(tmp_path / "gan.pt"), cond), a)


def test_pgm_roundtrip(tmp_path):
    img = np.linspace(0, 1, 256 * 256).reshape(256, 256)
    img[0, :4] = [-1, 2, 10 / 255, 0.5]
    write_pgm(tmp_path / "x.pgm", img)
    back = read_pgm(tmp_path / "x.pgm")
    assert back.shape == (256, 256) and back.dtype == np.uint8
    assert back[0, :4].tolist() == [0, 255, 10, 128]
    assert np.array_equal(back, np.round(np.clip(img, 0, 1) * 255).astype(np.uint8))
    head = (tmp_path / "x.pgm").read_bytes()[:15]
    assert head.startswith(b"P5\n256 256\n255\n")
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "y.pgm", np.zeros((2, 2, 2)))


def test_batchnorm_recalibration_uses_whole_set():
    net = torch.nn.Sequential(torch.nn.Conv2d(1, 2, 1), torch.nn.BatchNorm2d(2))
    torch.manual_seed(0)
    x = torch.randn(12, 1, 5, 5) * 3 + 1
    with torch.no_grad():
        net[1].running_mean.fill_(7.0)
        feats = net[0](x)
    recalibrate_batchnorm(net, x, batch_size=4)
    assert torch.allclose(net[1].running_mean, feats.mean(dim=(0, 2, 3)), atol=1e-6)
    assert net[1].momentum == 0.1 and net[1].num_batches_tracked == 3


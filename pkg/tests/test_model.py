import numpy as np
import pytest
import torch
import torch.nn.functional as F

from iprnet.episodes import Episode, EpisodeSampler, generate_shapes_dataset
from iprnet.exceptions import ShapeError
from iprnet.losses import LossWeights
from iprnet.model import (
    Encoder,
    IPRNet,
    ModelConfig,
    MultiScaleDecoder,
    RespectiveClassifier,
    parameter_checksum,
)
from iprnet.training import compute_losses, make_optimizer, train_step, TrainConfig


@pytest.fixture(scope="module")
def dataset():
    return generate_shapes_dataset(n_classes=8, images_per_class=10, image_size=32, seed=5)


def test_encoder_output_shape_and_determinism():
    torch.manual_seed(0)
    enc = Encoder()
    zeros = torch.zeros(2, 3, 32, 32)
    a, b = enc(zeros), enc(zeros)
    assert a.shape == (2, 96, 8, 8)
    assert enc.config.out_channels == 96
    assert torch.equal(a, b)
    assert enc(torch.zeros(3, 32, 32)).shape == (96, 8, 8)


def test_encoder_rejects_non_divisible_size():
    with pytest.raises(ShapeError, match="divisible by 4"):
        Encoder()(torch.zeros(1, 3, 30, 32))


def _receptive_box(geometry, pos):
    # walk the operator stack backwards from one output index to its input interval
    lo = hi = pos
    for k, s, p in reversed(geometry):
        lo = lo * s - p
        hi = hi * s - p + k - 1
    return lo, hi


@pytest.mark.oracle
def test_receptive_field_by_perturbation():
    torch.manual_seed(1)
    enc = Encoder()
    geometry = enc.geometry()
    rng = np.random.default_rng(0)
    image = torch.tensor(rng.random((1, 3, 64, 64)), dtype=torch.float32)
    for y, x in [(0, 0), (7, 9), (15, 15)]:
        y0, y1 = _receptive_box(geometry, y)
        x0, x1 = _receptive_box(geometry, x)
        inside = torch.zeros(64, 64, dtype=torch.bool)
        inside[max(y0, 0):y1 + 1, max(x0, 0):x1 + 1] = True
        assert not inside.all()
        noise = torch.tensor(rng.random((1, 3, 64, 64)), dtype=torch.float32)
        other = torch.where(inside, image, noise)
        torch.testing.assert_close(enc(other)[0, :, y, x], enc(image)[0, :, y, x], rtol=0, atol=1e-5)
        # perturbing inside the box does change the feature
        bumped = image.clone()
        bumped[..., 4 * y + 1, 4 * x + 1] += 1.0
        assert not torch.allclose(enc(bumped)[0, :, y, x], enc(image)[0, :, y, x])


def _episodes(dataset, n, k=2, seed=0):
    return EpisodeSampler(dataset, {1, 2, 3, 4, 5, 6}, k, seed=seed, hidden_classes=(7, 8)).sample_batch(n)


def test_frozen_encoder_unchanged_after_training(dataset):
    torch.manual_seed(0)
    model = IPRNet()
    opt = make_optimizer(model, TrainConfig())
    enc_before = parameter_checksum(model.encoder)
    trainable_before = parameter_checksum(model.trainable_parameters())
    for i in range(10):
        train_step(model, _episodes(dataset, 2, seed=i), LossWeights(), opt)
    assert parameter_checksum(model.encoder) == enc_before
    assert parameter_checksum(model.trainable_parameters()) != trainable_before
    assert all(not p.requires_grad for p in model.encoder.parameters())


def test_decoder_scale_sizes():
    x = torch.randn(1, 8, 32, 32)
    s = torch.randn(1, 32, 32)
    dec3 = MultiScaleDecoder(8, hidden=8, n_scales=3)
    fused, logits = dec3(x, x, s, s)
    assert [tuple(lg.shape[-2:]) for lg in logits] == [(32, 32), (16, 16), (8, 8)]
    assert all(lg.shape[1] == 2 for lg in logits)
    assert fused.shape[-2:] == (32, 32)
    dec1 = MultiScaleDecoder(8, hidden=8, n_scales=1)
    fused, logits = dec1(x[0], x[0], s[0], s[0])
    assert len(logits) == 1 and logits[0].shape == (2, 32, 32)
    assert fused.shape[-2:] == (32, 32)
    with pytest.raises(ShapeError):
        dec3(x, x, s[:, :16, :16], s)


def test_pool_then_upsample_restores_shape():
    for h, w in [(32, 32), (16, 8), (12, 20)]:
        x = torch.randn(1, 3, h, w)
        pooled = F.avg_pool2d(x, 2)
        assert F.interpolate(pooled, size=(h, w), mode="bilinear").shape == x.shape


@pytest.mark.gradient
def test_decoder_gradient_wrt_similarity_map():
    torch.manual_seed(3)
    dec = MultiScaleDecoder(4, hidden=6, n_scales=3).double()
    support, query = torch.randn(4, 8, 8, dtype=torch.float64), torch.randn(4, 8, 8, dtype=torch.float64)
    sim_bg = torch.rand(8, 8, dtype=torch.float64)
    weights = torch.randn(6, 8, 8, dtype=torch.float64)
    sim_fg = torch.rand(8, 8, dtype=torch.float64, requires_grad=True)

    def scalar(sf):
        return (dec(support, query, sf, sim_bg)[0] * weights).sum()

    scalar(sim_fg).backward()
    h = 1e-6
    for idx in [(0, 0), (3, 4), (7, 7), (2, 6), (5, 1)]:
        plus, minus = sim_fg.detach().clone(), sim_fg.detach().clone()
        plus[idx] += h
        minus[idx] -= h
        fd = (scalar(plus) - scalar(minus)).item() / (2 * h)
        g = sim_fg.grad[idx].item()
        assert abs(fd - g) <= 1e-3 * max(abs(fd), abs(g), 1e-6)


def test_heads_are_normalised():
    torch.manual_seed(0)
    outs = RespectiveClassifier(16, 8)(torch.randn(3, 16, 8, 8) * 5)
    for V in (outs.V1, outs.V0, outs.Vf):
        assert V.shape == (3, 2, 8, 8)
        assert (V.sum(dim=1) - 1).abs().max() <= 1e-5


def test_zeroed_target_branch_is_uniform():
    rcm = RespectiveClassifier(16, 8)
    with torch.no_grad():
        for p in rcm.fg.parameters():
            p.zero_()
    V1 = rcm(torch.randn(16, 8, 8)).V1
    assert torch.equal(V1, torch.full_like(V1, 0.5))


@pytest.mark.oracle
def test_background_branch_changes_fusion_only():
    torch.manual_seed(2)
    rcm = RespectiveClassifier(16, 8)
    x = torch.randn(1, 16, 8, 8)
    before = rcm(x)
    with torch.no_grad():
        for p in rcm.bg.parameters():
            p.add_(torch.randn_like(p))
    after = rcm(x)
    assert torch.equal(before.V1, after.V1)
    assert not torch.equal(before.V0, after.V0)
    assert not torch.allclose(before.Vf, after.Vf)


def test_forward_is_finite_for_extreme_inputs():
    torch.manual_seed(0)
    model = IPRNet(ModelConfig(hidden=8, head_hidden=8, proj_channels=8))
    gen = torch.Generator().manual_seed(0)
    for _ in range(100):
        q = torch.rand(2, 3, 16, 16, generator=gen) * 20 - 10
        s = torch.rand(2, 2, 3, 16, 16, generator=gen) * 20 - 10
        masks = torch.randint(0, 3, (2, 2, 16, 16), generator=gen)
        masks[..., :8, :8] = 1
        out = model(q, s, masks, torch.tensor([1, 2]))
        for t in (out["relation"], *out["logits"], out["outs"].V1, out["outs"].V0, out["outs"].Vf):
            assert torch.isfinite(t).all()


def test_ablated_models_have_expected_heads():
    assert IPRNet(ModelConfig(rcm=False))(
        torch.rand(1, 3, 16, 16), torch.rand(1, 1, 3, 16, 16), torch.ones(1, 1, 16, 16, dtype=torch.long),
        torch.tensor([1]),
    )["outs"].V1 is None
    assert not hasattr(IPRNet(ModelConfig(rcm=False)).classifier, "fg")


def test_background_prototype_depends_on_iprm_switch():
    feat = torch.zeros(1, 1, 1, 1, 4)
    feat[..., 0] = 1.0  # target
    feat[..., 1] = 2.0  # background
    feat[..., 2] = 4.0  # other class
    feat[..., 3] = 8.0  # ignored
    masks = torch.tensor([[[[1, 0, 3, 255]]]])
    on = IPRNet(ModelConfig(iprm=True)).episode_prototypes(feat, masks, [1])
    off = IPRNet(ModelConfig(iprm=False)).episode_prototypes(feat, masks, [1])
    assert on[0].item() == off[0].item() == 1.0
    assert on[1].item() == 2.0
    assert off[1].item() == 3.0


def _probe_episode(rng, size=16, k=2):
    def pair(cls):
        img = rng.random((3, size, size)).astype(np.float32)
        m = np.zeros((size, size), dtype=np.uint8)
        y, x = rng.integers(0, size // 2, 2)
        m[y:y + size // 2, x:x + size // 2] = cls
        return img, m
    supports = [pair(1) for _ in range(k)]
    q_img, q_mask = pair(1)
    return Episode(q_img, q_mask, supports, 1)


@pytest.mark.gradient
def test_end_to_end_gradient_probe():
    torch.manual_seed(0)
    model = IPRNet(ModelConfig(hidden=8, head_hidden=8, proj_channels=8)).double()
    rng = np.random.default_rng(0)
    batch = [_probe_episode(rng) for _ in range(2)]
    batch[1].supports[0][1][:2, :2] = 2
    probes = [
        (model.projection[0].weight, (3, 5, 0, 0)),
        (model.decoder.input[0].weight, (1, 2, 0, 0)),
        (model.decoder.scales[1].body[0].weight, (0, 4, 1, 1)),
        (model.classifier.fg.conv1.weight, (2, 3, 1, 0)),
        (model.classifier.fusion.conv2.bias, (1,)),
    ]

    def loss():
        return compute_losses(model, batch, LossWeights())["total"]

    model.zero_grad()
    loss().backward()
    h = 1e-6
    with torch.no_grad():
        for param, idx in probes:
            g = param.grad[idx].item()
            orig = param[idx].item()
            param[idx] = orig + h
            up = loss().item()
            param[idx] = orig - h
            down = loss().item()
            param[idx] = orig
            fd = (up - down) / (2 * h)
            assert abs(fd - g) <= 1e-3 * max(abs(fd), abs(g), 1e-6), (idx, fd, g)

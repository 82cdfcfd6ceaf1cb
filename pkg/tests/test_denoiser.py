import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F

from src.models.denoiser import (
    SPADE,
    Attention,
    DenoiserConfig,
    EncoderResBlock,
    SemanticEncoder,
    TimeScaleShift,
    UNet,
    attention,
    encoder_resblock,
    group_norm,
    level_strides,
    predict_noise,
    semantic_encode,
    spade_modulate,
    time_embed,
)
from src.models.diffusion import simple_loss
from src.utils.errors import ConfigError, ShapeError


def _one_hot_map(n, num_classes, shape, seed):
    gen = torch.Generator().manual_seed(seed)
    labels = torch.randint(0, num_classes, (n, *shape), generator=gen)
    return F.one_hot(labels, num_classes).permute(0, 4, 1, 2, 3).float()


def _randomize_output(model: UNet) -> None:
    with torch.no_grad():
        nn.init.normal_(model.conv_out.weight, std=0.2)
        nn.init.normal_(model.conv_out.bias, std=0.2)


def test_time_embedding():
    emb = time_embed(torch.tensor([0, 1, 50]), 8)
    assert tuple(emb.shape) == (3, 8)
    assert emb[0, :4].tolist() == [0.0] * 4
    assert emb[0, 4:].tolist() == [1.0] * 4
    assert not torch.allclose(emb[1], emb[2])
    assert torch.equal(time_embed(7, 8), time_embed(torch.tensor([7]), 8))


def test_group_norm_statistics():
    f = torch.randn(2, 6, 3, 3, 2, dtype=torch.float64) * 4 + 2
    out = group_norm(f, 3)
    grouped = out.view(2, 3, -1)
    assert torch.allclose(grouped.mean(-1), torch.zeros(2, 3, dtype=torch.float64), atol=1e-10)
    assert torch.allclose(grouped.var(-1, unbiased=False), torch.ones(2, 3, dtype=torch.float64), atol=1e-3)
    assert torch.equal(group_norm(torch.full((1, 4, 2, 2, 2), 3.0), 2), torch.zeros(1, 4, 2, 2, 2))
    with pytest.raises(ConfigError):
        group_norm(f, 4)


def test_group_norm_against_loop():
    f = torch.randn(1, 4, 2, 2, 2, dtype=torch.float64)
    out = group_norm(f, 2)
    for g in range(2):
        block = f[0, 2 * g:2 * g + 2]
        mu = float(block.mean())
        var = float(((block - mu) ** 2).mean())
        expected = (block - mu) / (var + 1e-5) ** 0.5
        assert torch.allclose(out[0, 2 * g:2 * g + 2], expected, atol=1e-12)


def test_time_scale_shift_identity_and_absorbing():
    mod = TimeScaleShift(8, 4)
    f = torch.randn(2, 4, 3, 3, 2)
    emb = torch.randn(2, 8)
    with torch.no_grad():
        mod.out.weight.zero_()
    assert torch.allclose(mod(f, emb), f)
    with torch.no_grad():
        mod.out.bias[:4].zero_()
        mod.out.bias[4:].fill_(0.5)
    assert torch.equal(mod(f, emb), torch.full_like(f, 0.5))
    with pytest.raises(ShapeError):
        mod(torch.randn(2, 3, 3, 3, 2), emb)


def test_spade_identity_modulation():
    spade = SPADE(channels=4, map_channels=3, hidden=4, num_groups=2)
    with torch.no_grad():
        spade.gamma.weight.zero_()
        spade.beta.weight.zero_()
        spade.beta.bias.zero_()
    f = torch.randn(2, 4, 4, 4, 2)
    feats = torch.randn(2, 3, 4, 4, 2)
    assert torch.allclose(spade_modulate(f, feats, spade), group_norm(f, 2), atol=1e-6)


def test_spade_resamples_and_checks_shapes():
    spade = SPADE(channels=4, map_channels=3, hidden=4, num_groups=2)
    f = torch.randn(1, 4, 4, 4, 2)
    assert spade(f, torch.randn(1, 3, 2, 2, 1)).shape == f.shape
    with pytest.raises(ShapeError):
        spade(f, torch.randn(1, 3, 3, 3, 1))
    with pytest.raises(ShapeError):
        spade(f, torch.randn(2, 3, 4, 4, 2))


@pytest.mark.parametrize("mode", ["spatial", "cross_slice"])
def test_attention_uniform_when_scores_vanish(mode):
    attn = Attention(4, mode)
    with torch.no_grad():
        for lin in (attn.q, attn.k):
            lin.weight.zero_()
            lin.bias.zero_()
    f = torch.randn(1, 4, 3, 3, 2)
    weights = attn.attention_weights(f)
    tokens = 9 if mode == "spatial" else 2
    assert torch.allclose(weights, torch.full_like(weights, 1.0 / tokens))


def test_attention_rows_sum_to_one():
    attn = Attention(4, "spatial")
    f = torch.randn(2, 4, 3, 3, 2)
    assert torch.equal(attention(f, attn), attn(f))
    weights = attn.attention_weights(torch.randn(2, 4, 3, 3, 2))
    assert tuple(weights.shape) == (4, 9, 9)
    assert torch.allclose(weights.sum(-1), torch.ones(4, 9), atol=1e-6)
    with pytest.raises(ConfigError):
        Attention(4, "global")


def test_cross_slice_attention_is_local_to_site():
    attn = Attention(4, "cross_slice")
    f = torch.randn(1, 4, 3, 3, 4)
    g = f.clone()
    g[0, :, 1, 2, :] += 1.0
    diff = (attn(f) - attn(g)).abs().sum(dim=(0, 1, 4))
    assert diff[1, 2] > 0
    diff[1, 2] = 0
    assert float(diff.max()) == 0.0


def test_spatial_attention_is_local_to_slice():
    attn = Attention(4, "spatial")
    f = torch.randn(1, 4, 3, 3, 4)
    g = f.clone()
    g[0, :, :, :, 1] += 1.0
    diff = (attn(f) - attn(g)).abs().sum(dim=(0, 1, 2, 3))
    assert diff[1] > 0
    assert float(diff[[0, 2, 3]].max()) == 0.0


def test_level_strides():
    strides, shapes = level_strides((4, 4, 2), 3)
    assert strides == [(2, 2, 2), (2, 2, 1)]
    assert shapes == [(4, 4, 2), (2, 2, 1), (1, 1, 1)]


def test_semantic_encoder_levels(tiny_denoiser):
    enc = SemanticEncoder(tiny_denoiser)
    m = _one_hot_map(2, 3, (8, 8, 4), seed=0)
    feats = semantic_encode(m, enc)
    assert [tuple(f.shape) for f in feats] == [(2, 4, 4, 4, 2), (2, 4, 2, 2, 1)]
    other = semantic_encode(_one_hot_map(2, 3, (8, 8, 4), seed=1), enc)
    assert not torch.equal(feats[0], other[0])
    with pytest.raises(ShapeError):
        enc(torch.zeros(1, 2, 8, 8, 4))
    with pytest.raises(ShapeError):
        enc(torch.zeros(1, 3, 7, 8, 4))


def test_predict_noise_shape_and_zero_init(tiny_denoiser):
    model = UNet(tiny_denoiser)
    z = torch.randn(2, 2, 4, 4, 2)
    m = _one_hot_map(2, 3, (8, 8, 4), seed=0)
    out = predict_noise(z, torch.tensor([1, 4]), m, model)
    assert out.shape == z.shape
    assert float(out.abs().max()) == 0.0


def test_prediction_depends_on_map_and_step(tiny_denoiser):
    model = UNet(tiny_denoiser)
    _randomize_output(model)
    z = torch.randn(2, 2, 4, 4, 2)
    m0 = _one_hot_map(2, 3, (8, 8, 4), seed=0)
    m1 = _one_hot_map(2, 3, (8, 8, 4), seed=1)
    base = predict_noise(z, 3, m0, model)
    assert not torch.allclose(base, predict_noise(z, 3, m1, model))
    assert not torch.allclose(base, predict_noise(z, 4, m0, model))
    feats = model.semantic(m0)
    assert torch.equal(base, predict_noise(z, 3, None, model, map_features=feats))


def test_encoder_path_ignores_map(tiny_denoiser):
    model = UNet(tiny_denoiser)
    _randomize_output(model)
    seen = []
    hooks = [blk.register_forward_hook(lambda mod, inp, out: seen.append(out.detach().clone())) for blk in model.down_blocks]
    z = torch.randn(1, 2, 4, 4, 2)
    model(z, 2, m=_one_hot_map(1, 3, (8, 8, 4), seed=0))
    first = list(seen)
    seen.clear()
    model(z, 2, m=_one_hot_map(1, 3, (8, 8, 4), seed=1))
    for h in hooks:
        h.remove()
    assert len(first) == len(seen) == tiny_denoiser.num_levels
    for a, b in zip(first, seen):
        assert torch.equal(a, b)


def test_unet_input_contracts(tiny_denoiser):
    model = UNet(tiny_denoiser)
    m = _one_hot_map(1, 3, (8, 8, 4), seed=0)
    with pytest.raises(ShapeError):
        model(torch.randn(1, 2, 4, 4, 4), 1, m=m)
    with pytest.raises(ShapeError):
        model(torch.randn(1, 2, 4, 4, 2), 1)
    with pytest.raises(ShapeError):
        model(torch.randn(2, 2, 4, 4, 2), torch.tensor([1, 2, 3]), m=torch.cat([m, m]))


def test_config_validation(tiny_denoiser):
    from dataclasses import replace

    with pytest.raises(ConfigError):
        replace(tiny_denoiser, channels=(4, 6))
    with pytest.raises(ConfigError):
        replace(tiny_denoiser, attention_levels=(2,))
    with pytest.raises(ConfigError):
        replace(tiny_denoiser, spade_kernel=5)


def test_input_gradients_match_finite_differences(tiny_denoiser):
    model = UNet(tiny_denoiser).double()
    _randomize_output(model)
    m = _one_hot_map(1, 3, (8, 8, 4), seed=0).double()
    feats = [f.detach() for f in model.semantic(m)]
    z = torch.randn(1, 2, 4, 4, 2, dtype=torch.float64, requires_grad=True)
    weight = torch.randn(1, 2, 4, 4, 2, dtype=torch.float64)

    def objective(x):
        return (model(x, 3, map_features=feats) * weight).sum()

    (grad,) = torch.autograd.grad(objective(z), z)
    eps = 1e-6
    base = z.detach()
    for idx in [(0, 0, 0, 0, 0), (0, 1, 2, 3, 1), (0, 0, 3, 1, 0)]:
        up, down = base.clone(), base.clone()
        up[idx] += eps
        down[idx] -= eps
        numeric = (float(objective(up)) - float(objective(down))) / (2 * eps)
        assert numeric == pytest.approx(float(grad[idx]), rel=1e-4, abs=1e-7)


def test_encoder_resblock_residual_path():
    block = EncoderResBlock(4, 4, time_dim=8, num_groups=2)
    f = torch.randn(2, 4, 3, 3, 2)
    emb = torch.randn(2, 8)
    with torch.no_grad():
        block.conv2.weight.zero_()
        block.conv2.bias.zero_()
    assert torch.equal(encoder_resblock(f, emb, block), f)
    widen = EncoderResBlock(4, 8, time_dim=8, num_groups=2)
    assert tuple(encoder_resblock(f, emb, widen).shape) == (2, 8, 3, 3, 2)
    with pytest.raises(ShapeError):
        encoder_resblock(torch.randn(2, 3, 3, 3, 2), emb, block)


def test_attention_forward_uses_reported_weights():
    attn = Attention(4, "cross_slice").double()
    with torch.no_grad():
        for lin in (attn.v, attn.out):
            lin.weight.copy_(torch.eye(4, dtype=torch.float64))
            lin.bias.zero_()
    f = torch.randn(1, 4, 3, 3, 2, dtype=torch.float64)
    mixed = attn.attention_weights(f) @ attn.norm(attn._tokens(f))
    assert torch.allclose(attn(f), f + attn._untokens(mixed, f.shape), atol=1e-12)


def test_unit_spade_makes_prediction_map_free(tiny_denoiser):
    model = UNet(tiny_denoiser)
    _randomize_output(model)
    z = torch.randn(2, 2, 4, 4, 2)
    m0 = _one_hot_map(2, 3, (8, 8, 4), seed=0)
    m1 = _one_hot_map(2, 3, (8, 8, 4), seed=1)
    assert not torch.allclose(predict_noise(z, 3, m0, model), predict_noise(z, 3, m1, model))
    spades = [mod for mod in model.modules() if isinstance(mod, SPADE)]
    assert len(spades) == 2 * tiny_denoiser.num_levels
    with torch.no_grad():
        for spade in spades:
            spade.gamma.weight.zero_()
            spade.gamma.bias.fill_(1.0)
            spade.beta.weight.zero_()
            spade.beta.bias.zero_()
    assert torch.equal(predict_noise(z, 3, m0, model), predict_noise(z, 3, m1, model))


def test_loss_parameter_gradients_match_finite_differences():
    cfg = DenoiserConfig(
        n_z=1,
        num_classes=2,
        latent_shape=(2, 2, 2),
        t=1,
        channels=(2, 2),
        num_groups=1,
        time_dim=2,
        map_channels=1,
        spade_hidden=1,
        spade_kernel=1,
        attention_levels=(1,),
    )
    model = UNet(cfg).double()
    _randomize_output(model)
    params = [p for p in model.parameters() if p.requires_grad]
    assert sum(p.numel() for p in params) <= 2000

    m = _one_hot_map(2, 2, (2, 2, 2), seed=3).double()
    z = torch.randn(2, 1, 2, 2, 2, dtype=torch.float64)
    eps_true = torch.randn(2, 1, 2, 2, 2, dtype=torch.float64)
    t = torch.tensor([2, 7])

    def objective():
        return simple_loss(eps_true, predict_noise(z, t, m, model))

    model.zero_grad()
    objective().backward()
    gen = torch.Generator().manual_seed(0)
    step = 1e-6
    for p in params:
        flat, grad = p.data.view(-1), p.grad.view(-1)
        for i in torch.randint(0, flat.numel(), (2,), generator=gen).tolist():
            orig = float(flat[i])
            with torch.no_grad():
                flat[i] = orig + step
                up = float(objective())
                flat[i] = orig - step
                down = float(objective())
                flat[i] = orig
            numeric = (up - down) / (2 * step)
            assert numeric == pytest.approx(float(grad[i]), rel=1e-4, abs=1e-8)

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from figrepose.netgraph import (
    CONV_STD,
    ConfigError,
    DiscriminatorConfig,
    FCHourglass,
    GeneratorConfig,
    HourglassConfig,
    build_discriminator,
    build_generator,
    config_from_dict,
    config_to_dict,
    count_parameters,
    init_parameters,
    receptive_field,
    score_map_size,
)


def gen_cfg(stacks, res, depth, feat=8, mode="strided_conv"):
    return GeneratorConfig(n_stacks=stacks, resolution=res,
                           hourglass=HourglassConfig(depth, feat, feat), downsample_mode=mode)


def innermost(module):
    while isinstance(module.inner, FCHourglass):
        module = module.inner
    return module.inner


def test_full_size_generator_shapes():
    g = init_parameters(build_generator(gen_cfg(3, 128, 5, feat=8)), 0)
    seen = []
    innermost(g.hourglasses[0]).register_forward_hook(lambda m, i, o: seen.append(o.shape))
    outs = g(torch.randn(2, 19, 128, 128))
    assert len(outs) == 3
    assert all(o.shape == (2, 3, 128, 128) for o in outs)
    assert seen[0][-2:] == (4, 4)
    assert g.bottleneck_resolution() == 4


def test_tiny_generator_shape():
    g = build_generator(gen_cfg(1, 8, 2))
    outs = g(torch.randn(2, 19, 8, 8))
    assert len(outs) == 1 and outs[0].shape == (2, 3, 8, 8)


def closed_form_param_count(stacks, depth, f, in_ch=19, img=3):
    """Hand enumeration of the declared layers."""
    m = f // 2
    bn = lambda c: 2 * c
    residual = bn(f) + f * m + bn(m) + m * m * 9 + bn(m) + m * f
    sample = bn(f) + f * f * 16                  # BN + 4x4 conv (strided or transposed)
    level_own = residual + sample + residual + sample
    hourglass = depth * level_own + residual     # innermost residual at the bottom
    head = bn(f) + f * f
    to_image = f * img + img
    stem = in_ch * f * 9
    remaps = (stacks - 1) * (f * f + img * f)
    return stem + stacks * (hourglass + head + to_image) + remaps


def test_parameter_count_closed_form():
    g = build_generator(gen_cfg(1, 16, 2, feat=8))
    assert count_parameters(g) == closed_form_param_count(1, 2, 8) == 6835
    for stacks, depth, f in [(2, 3, 8), (3, 2, 16)]:
        g = build_generator(gen_cfg(stacks, 32, depth, feat=f))
        assert count_parameters(g) == closed_form_param_count(stacks, depth, f)


def test_maxpool_mode_drops_strided_conv_only():
    conv = build_generator(gen_cfg(1, 16, 2, feat=8))
    pool = build_generator(gen_cfg(1, 16, 2, feat=8, mode="max_pool"))
    assert count_parameters(conv) - count_parameters(pool) == 2 * 8 * 8 * 16
    assert pool(torch.randn(2, 19, 16, 16))[0].shape == (2, 3, 16, 16)


@pytest.mark.parametrize("bad", [
    dict(stacks=1, res=12, depth=3),
    dict(stacks=1, res=4, depth=3),
    dict(stacks=0, res=8, depth=2),
])
def test_generator_config_errors(bad):
    with pytest.raises(ConfigError):
        build_generator(gen_cfg(bad["stacks"], bad["res"], bad["depth"]))


def test_generator_rejects_unknown_mode():
    with pytest.raises(ConfigError):
        build_generator(gen_cfg(1, 8, 2, mode="avg_pool"))


def test_discriminator_score_map_shape():
    d = build_discriminator(DiscriminatorConfig(3, 8), cond_channels=19)
    u, x = torch.randn(2, 19, 128, 128), torch.randn(2, 3, 128, 128)
    out = d(u, x)
    assert out.shape == (2, 1, 16, 16) and score_map_size(128, 3) == 16
    assert torch.all((out > 0) & (out < 1))


@pytest.mark.parametrize("n", [1, 5])
def test_discriminator_layer_range(n):
    with pytest.raises(ConfigError):
        build_discriminator(DiscriminatorConfig(n, 8), 19)


def test_zero_discriminator_scores_half():
    d = build_discriminator(DiscriminatorConfig(3, 8), 19)
    with torch.no_grad():
        for p in d.parameters():
            p.zero_()
    out = d(torch.randn(2, 19, 32, 32), torch.randn(2, 3, 32, 32))
    torch.testing.assert_close(out, torch.full_like(out, 0.5))


@pytest.mark.parametrize("n_layers", [2, 3, 4])
def test_receptive_field_by_influence(n_layers):
    """Perturb single input pixels along a row and a column through one
    output unit; the span of pixels that change it is the patch size."""
    torch.manual_seed(0)
    d = build_discriminator(DiscriminatorConfig(n_layers, 2), 1, image_channels=1).double().eval()
    with torch.no_grad():
        # unit-scale weights so edge-of-patch influence stays above rounding
        for p in d.parameters():
            p.normal_()
    stride = 2 ** n_layers
    size = stride * 12
    cu = size // stride // 2
    base_u = torch.zeros(1, 1, size, size, dtype=torch.float64)
    base_x = torch.zeros_like(base_u)
    logits = lambda u, x: d.net(torch.cat([u, x], dim=1))  # sigmoid would saturate
    with torch.no_grad():
        ref = logits(base_u, base_x)[0, 0, cu, cu]
        spans = []
        for axis in (2, 3):
            xs = base_x.repeat(size, 1, 1, 1)
            for k in range(size):
                if axis == 2:
                    xs[k, 0, k, size // 2] = 1.0
                else:
                    xs[k, 0, size // 2, k] = 1.0
            changed = (logits(base_u.repeat(size, 1, 1, 1), xs)[:, 0, cu, cu] != ref).nonzero().ravel()
            spans.append(int(changed.max() - changed.min() + 1))
    assert spans == [receptive_field(n_layers)] * 2
    assert receptive_field(n_layers) == {2: 18, 3: 38, 4: 78}[n_layers]


def test_init_deterministic_and_seed_dependent():
    a = init_parameters(build_generator(gen_cfg(2, 16, 2)), 5)
    b = init_parameters(build_generator(gen_cfg(2, 16, 2)), 5)
    c = init_parameters(build_generator(gen_cfg(2, 16, 2)), 6)
    pa, pb, pc = (list(m.state_dict().values()) for m in (a, b, c))
    assert all(torch.equal(x, y) for x, y in zip(pa, pb))
    assert any(not torch.equal(x, y) for x, y in zip(pa, pc))


def test_init_distribution_ks():
    g = init_parameters(build_generator(gen_cfg(1, 16, 2, feat=16)), 0)
    conv = torch.cat([m.weight.detach().ravel() for m in g.modules()
                      if isinstance(m, (torch.nn.Conv2d, torch.nn.ConvTranspose2d))]).numpy()
    assert conv.size >= 10_000
    draws = conv[:10_000]
    assert stats.kstest(draws, "norm", args=(0.0, CONV_STD)).pvalue > 0.01
    bn = torch.cat([m.weight.detach() for m in g.modules()
                    if isinstance(m, torch.nn.BatchNorm2d)]).numpy()
    assert stats.kstest(bn, "norm", args=(1.0, CONV_STD)).pvalue > 0.01
    assert stats.kstest(draws, "norm", args=(0.0, 2 * CONV_STD)).pvalue < 1e-6


@settings(max_examples=12, deadline=None)
@given(stacks=st.integers(1, 3), depth=st.integers(1, 3), mult=st.integers(1, 2),
       feat=st.sampled_from([4, 8]), mode=st.sampled_from(["strided_conv", "max_pool"]),
       seed=st.integers(0, 1000))
def test_shape_and_bounds_property(stacks, depth, mult, feat, mode, seed):
    res = 2 ** depth * mult * 2
    g = init_parameters(build_generator(gen_cfg(stacks, res, depth, feat, mode)), seed)
    torch.manual_seed(seed)
    outs = g(10 * torch.randn(2, 19, res, res))
    assert len(outs) == stacks
    for o in outs:
        assert o.shape == (2, 3, res, res)
        assert o.abs().max() <= 1.0


def test_forward_is_pure():
    g = init_parameters(build_generator(gen_cfg(2, 16, 2)), 1).eval()
    x = torch.randn(2, 19, 16, 16)
    a, b = g(x), g(x.clone())
    assert all(torch.equal(p, q) for p, q in zip(a, b))


@pytest.mark.parametrize("mode", ["strided_conv", "max_pool"])
def test_gradient_liveness(mode):
    g = init_parameters(build_generator(gen_cfg(3, 16, 2, mode=mode)), 2)
    torch.manual_seed(0)
    x, target = torch.randn(3, 19, 16, 16), torch.rand(3, 3, 16, 16) * 2 - 1
    loss = sum((o - target).abs().mean() for o in g(x))
    loss.backward()
    dead = [n for n, p in g.named_parameters() if p.grad is None or p.grad.norm() == 0]
    assert dead == []


def test_config_dict_roundtrip():
    cfg = gen_cfg(2, 32, 3)
    d = config_to_dict(cfg)
    assert GeneratorConfig(**d) == cfg
    assert config_from_dict(DiscriminatorConfig, {"n_layers": 2}) == DiscriminatorConfig(2)
    with pytest.raises(ConfigError):
        config_from_dict(DiscriminatorConfig, {"layers": 2})

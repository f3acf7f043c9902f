import io

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cldenoise.errors import InvalidConfig
from cldenoise.models import (
    DiscriminatorConfig,
    GeneratorConfig,
    ProjectionHeadConfig,
    build_discriminator,
    build_generator,
    build_projection_head,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from cldenoise.training import generator_terms, init_state, TrainConfig, _weighted

from conftest import TINY_DISC, TINY_GEN


def analytic_generator_params(cfg: GeneratorConfig) -> int:
    """Closed-form parameter count: 4x4 kernels, biases only where no norm follows."""
    n = cfg.n_down
    ch = [min(cfg.base_channels * 2 ** i, cfg.max_channels) for i in range(n)]
    total = 0
    for i in range(n):
        c_in = cfg.in_channels if i == 0 else ch[i - 1]
        has_bias = i in (0, n - 1)
        total += c_in * ch[i] * 16 + (ch[i] if has_bias else 0)
    for j in range(n):
        width = ch[n - 1 - j]
        c_in = width if j == 0 or not cfg.skip_connections else 2 * width
        c_out = cfg.out_channels if j == n - 1 else ch[n - 2 - j]
        total += c_in * c_out * 16 + (c_out if j == n - 1 else 0)
    return total


def count(net) -> int:
    return sum(p.numel() for p in net.parameters())


# -- generator ----------------------------------------------------------------

def test_unet256_traces_seven_halvings():
    gen = build_generator(GeneratorConfig())
    x = torch.rand(1, 1, 256, 256)
    with torch.no_grad():
        feats = gen.encoder_features(x)
        out = gen(x)
    assert [f.shape[-1] for f in feats] == [128, 64, 32, 16, 8, 4, 2]
    assert tuple(feats[-1].shape) == (1, 512, 2, 2)
    assert out.shape == x.shape


@pytest.mark.parametrize("size", [16, 32, 48])
def test_generator_output_shape_equals_input(size):
    gen = build_generator(TINY_GEN)
    x = torch.rand(2, 1, size, size)
    assert gen(x).shape == x.shape


def test_generator_output_is_bounded():
    gen = build_generator(TINY_GEN)
    out = gen(torch.randn(3, 1, 16, 16) * 50)
    assert out.min() >= 0 and out.max() <= 1


def test_generator_rejects_indivisible_input():
    with pytest.raises(InvalidConfig):
        build_generator(TINY_GEN)(torch.rand(1, 1, 20, 20))
    with pytest.raises(InvalidConfig):
        GeneratorConfig(input_size=100)


@pytest.mark.parametrize("cfg", [GeneratorConfig(), TINY_GEN,
                                 GeneratorConfig(n_down=5, n_up=5, base_channels=16, max_channels=128,
                                                 input_size=64)])
def test_parameter_count_matches_closed_form(cfg):
    with_skips = build_generator(cfg)
    without = build_generator(GeneratorConfig(**{**cfg.__dict__, "skip_connections": False}))
    assert count(with_skips) == analytic_generator_params(cfg)
    assert count(without) == analytic_generator_params(without.cfg)
    n = cfg.n_down
    concat_widths = sum(
        with_skips.cfg.channels(n - 1 - j) * (with_skips.up[j][1].out_channels) * 16 for j in range(1, n)
    )
    assert count(with_skips) - count(without) == concat_widths


def test_dropout_is_off_at_inference_by_default():
    gen = build_generator(TINY_GEN).eval()
    x = torch.rand(1, 1, 16, 16)
    assert torch.equal(gen(x), gen(x))
    noisy = build_generator(GeneratorConfig(**{**TINY_GEN.__dict__, "dropout_at_inference": True})).eval()
    assert not torch.equal(noisy(x), noisy(x))


def test_every_parameter_receives_gradient():
    cfg = TrainConfig(batch_size=4, generator=TINY_GEN, discriminator=TINY_DISC, head_hidden_dim=8,
                      head_output_dim=8, use_tv=True, use_ssim=True, use_cl=True, seed=0)
    state = init_state(cfg)
    dead = {n for n, _ in state.generator.named_parameters()} | {
        "head." + n for n, _ in state.head.named_parameters()}
    for seed in range(3):
        torch.manual_seed(seed)
        noisy = torch.rand(2, 1, 16, 16)
        clean = noisy.clamp(0.2, 0.8)
        state.generator.zero_grad()
        state.head.zero_grad()
        fake = state.generator(noisy)
        total, _ = _weighted(generator_terms(state, noisy, clean, fake, cfg, seed), cfg)
        total.backward()
        for name, p in state.generator.named_parameters():
            if p.grad is not None and p.grad.abs().sum() > 0:
                dead.discard(name)
        for name, p in state.head.named_parameters():
            if p.grad is not None and p.grad.abs().sum() > 0:
                dead.discard("head." + name)
    assert not dead


# -- discriminator ------------------------------------------------------------

def test_discriminator_emits_30x30_on_256():
    disc = build_discriminator(DiscriminatorConfig())
    with torch.no_grad():
        out = disc(torch.rand(1, 1, 256, 256), torch.rand(1, 1, 256, 256))
    assert tuple(out.shape) == (1, 1, 30, 30)
    assert disc.cfg.receptive_field == 70
    assert disc.cfg.output_size(256) == 30


@pytest.mark.parametrize("size", [64, 96, 128, 256])
def test_score_map_follows_stride_arithmetic(size):
    cfg = DiscriminatorConfig(base_channels=4)
    stride_total = 1
    for s in cfg.strides:
        stride_total *= s
    # every padded layer widens the input by 2 * padding * (jump at that layer)
    jump, effective_pad = 1, 0
    for s in cfg.strides:
        effective_pad += cfg.padding * jump
        jump *= s
    expected = (size + 2 * effective_pad - cfg.receptive_field) // stride_total + 1
    out = build_discriminator(cfg)(torch.rand(1, 1, size, size), torch.rand(1, 1, size, size))
    assert out.shape[-1] == out.shape[-2] == expected == cfg.output_size(size)


def test_zero_parameters_give_zero_scores():
    disc = build_discriminator(DiscriminatorConfig(base_channels=8))
    with torch.no_grad():
        for p in disc.parameters():
            p.zero_()
        out = disc(torch.rand(2, 1, 64, 64), torch.rand(2, 1, 64, 64))
    assert torch.count_nonzero(out) == 0


def test_discriminator_is_shift_equivariant_away_from_borders():
    disc = build_discriminator(DiscriminatorConfig(base_channels=4, norm="none")).double()
    x = torch.rand(1, 2, 128, 136, dtype=torch.float64)
    with torch.no_grad():
        shifted = disc(x[..., 8:136])
        base = disc(x[..., 0:128])
    # one stride unit (8 px) moves the score map by one column; columns 3..9 see no padding
    torch.testing.assert_close(shifted[..., 3:10], base[..., 4:11], rtol=0, atol=1e-12)


# -- projection head ----------------------------------------------------------

def test_head_outputs_unit_norm():
    head = build_projection_head()
    z = head(torch.randn(5, 512, 2, 2) * 30)
    torch.testing.assert_close(z.norm(dim=1), torch.ones(5), rtol=0, atol=1e-6)


def test_head_is_deterministic_and_batch_independent():
    head = build_projection_head(ProjectionHeadConfig(16, 8, 4))
    feats = torch.randn(6, 16, 2, 2)
    alone = torch.cat([head(feats[i:i + 1]) for i in range(6)])
    torch.testing.assert_close(head(feats), alone, rtol=0, atol=1e-6)
    assert torch.equal(head(feats), head(feats))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 64), st.integers(1, 64), st.integers(1, 64), st.integers(1, 5))
def test_head_embedding_dimension(in_dim, hidden, out_dim, batch):
    head = build_projection_head(ProjectionHeadConfig(in_dim, hidden, out_dim))
    z = head(torch.randn(batch, in_dim, 2, 2))
    assert tuple(z.shape) == (batch, out_dim)


# -- checkpoints --------------------------------------------------------------

def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    torch.manual_seed(0)
    gen, disc = build_generator(TINY_GEN), build_discriminator(TINY_DISC)
    head = build_projection_head(ProjectionHeadConfig(16, 8, 4))
    save_checkpoint(tmp_path / "c.pt", gen, disc, head, seed=11)
    loaded = load_checkpoint(tmp_path / "c.pt")
    assert loaded["seed"] == 11
    for name, net in (("generator", gen), ("discriminator", disc), ("head", head)):
        assert loaded[name].cfg == net.cfg
        for (k, a), (_, b) in zip(net.state_dict().items(), loaded[name].state_dict().items()):
            assert torch.equal(a, b), k
    payload = read_checkpoint(tmp_path / "c.pt")
    assert all(k.split(".")[0] in ("generator", "discriminator", "head") for k in payload["params"])


def test_checkpoint_rejects_foreign_files(tmp_path):
    buf = io.BytesIO()
    torch.save({"weights": 1}, buf)
    (tmp_path / "x.pt").write_bytes(buf.getvalue())
    with pytest.raises(InvalidConfig):
        read_checkpoint(tmp_path / "x.pt")

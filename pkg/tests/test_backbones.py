"""Backbone networks: shapes, tap contracts, conditioning, and symmetries."""

import pytest
import torch

from repap.backbones import (
    BackboneConfigError,
    DiTConfig,
    UNetConfig,
    count_parameters,
    desk_dit_config,
    desk_unet_config,
    make_backbone,
    paper_unet_config,
    sinusoidal_embedding,
    symmetrize_x_flip,
)


def _unet():
    torch.manual_seed(0)
    return make_backbone(desk_unet_config(2, 2))


def _dit():
    torch.manual_seed(0)
    return make_backbone(desk_dit_config(2, 2))


class TestUNet:
    def test_output_and_tap_shapes(self):
        net = _unet()
        x = torch.randn(2, 2, 32, 32)
        out, taps = net(x, torch.tensor([3.0, 7.0]))
        assert out.shape == (2, 2, 32, 32)
        names = [t.position for t in taps]
        assert names == [
            "encoder_0", "encoder_1", "encoder_2",
            "bottleneck",
            "decoder_2", "decoder_1", "decoder_0",
        ]
        by_name = {t.position: t.tensor for t in taps}
        assert by_name["encoder_0"].shape == (2, 8, 32, 32)
        assert by_name["encoder_2"].shape == (2, 32, 8, 8)
        assert by_name["bottleneck"].shape == (2, 32, 8, 8)
        assert by_name["decoder_0"].shape == (2, 8, 32, 32)

    def test_taps_carry_gradients(self):
        net = _unet()
        _, taps = net(torch.randn(1, 2, 32, 32), torch.tensor([1.0]))
        loss = taps[3].tensor.pow(2).sum()
        loss.backward()
        assert net.stem.weight.grad is not None
        assert net.stem.weight.grad.abs().sum() > 0

    def test_conditioning_concat(self):
        net = _unet()  # in_channels=2 total
        out, _ = net(
            torch.randn(2, 1, 32, 32), torch.tensor([1.0]),
            cond=torch.randn(2, 1, 32, 32),
        )
        assert out.shape == (2, 2, 32, 32)

    def test_channel_mismatch_raises(self):
        net = _unet()
        with pytest.raises(BackboneConfigError, match="channels"):
            net(torch.randn(2, 3, 32, 32), torch.tensor([1.0]))

    def test_indivisible_sample_size_raises(self):
        with pytest.raises(BackboneConfigError, match="divisible"):
            make_backbone(UNetConfig(2, 2, mults=(1, 2, 4), sample_size=30))

    def test_deterministic_forward(self):
        net = _unet()
        x = torch.randn(1, 2, 32, 32)
        a, _ = net(x, torch.tensor([5.0]))
        b, _ = net(x, torch.tensor([5.0]))
        assert torch.equal(a, b)

    def test_scalar_t_broadcasts(self):
        net = _unet()
        x = torch.randn(3, 2, 32, 32)
        a, _ = net(x, torch.tensor(5.0))
        b, _ = net(x, torch.tensor([5.0, 5.0, 5.0]))
        assert torch.equal(a, b)

    def test_symmetrized_net_commutes_with_flip(self):
        net = symmetrize_x_flip(_unet())
        x = torch.randn(2, 2, 32, 32)
        t = torch.tensor([4.0, 9.0])
        out, _ = net(x, t)
        out_flipped, _ = net(x.flip(-1), t)
        assert torch.allclose(out.flip(-1), out_flipped, atol=1e-5)

    def test_paper_config_rejects_unknown_task(self):
        with pytest.raises(ValueError, match="task"):
            paper_unet_config("weather")


class TestDiT:
    def test_output_and_tap_shapes(self):
        net = _dit()
        x = torch.randn(2, 2, 32, 32)
        out, taps = net(x, torch.tensor([3.0, 7.0]))
        assert out.shape == (2, 2, 32, 32)
        assert [t.position for t in taps] == ["block_2"]
        # tokens reshaped onto the 8x8 patch grid
        assert taps[0].tensor.shape == (2, 64, 8, 8)

    def test_zero_init_output(self):
        # adaLN-zero plus zero-init unpatch: the fresh network maps to zero
        net = _dit()
        out, _ = net(torch.randn(2, 2, 32, 32), torch.tensor([1.0]))
        assert torch.all(out == 0.0)

    def test_tap_blocks_validated(self):
        with pytest.raises(BackboneConfigError, match="tap_blocks"):
            make_backbone(DiTConfig(2, 2, depth=4, tap_blocks=(9,)))

    def test_patch_divides_sample_size(self):
        with pytest.raises(BackboneConfigError, match="divisible"):
            make_backbone(DiTConfig(2, 2, patch=5, sample_size=32))

    def test_multiple_tap_blocks_ordered(self):
        torch.manual_seed(0)
        net = make_backbone(
            DiTConfig(2, 2, hidden=32, depth=4, heads=4, patch=4,
                      sample_size=16, tap_blocks=(1, 3))
        )
        _, taps = net(torch.randn(1, 2, 16, 16), torch.tensor([2.0]))
        assert [t.position for t in taps] == ["block_1", "block_3"]

    def test_conditioning_concat(self):
        net = _dit()
        out, _ = net(
            torch.randn(2, 1, 32, 32), torch.tensor([1.0]),
            cond=torch.randn(2, 1, 32, 32),
        )
        assert out.shape == (2, 2, 32, 32)


class TestEmbeddingAndCounts:
    def test_sinusoidal_shape_and_values(self):
        emb = sinusoidal_embedding(torch.tensor([0.0, 3.0]), 8)
        assert emb.shape == (2, 8)
        # frequency 0 is exp(0) = 1: first column is sin(t), fifth is cos(t)
        assert float(emb[0, 0]) == 0.0
        assert float(emb[0, 4]) == 1.0
        assert float(emb[1, 0]) == pytest.approx(torch.sin(torch.tensor(3.0)).item(), rel=1e-6)

    def test_sinusoidal_odd_dim_padded(self):
        emb = sinusoidal_embedding(torch.tensor([1.0]), 7)
        assert emb.shape == (1, 7)
        assert float(emb[0, -1]) == 0.0

    def test_count_parameters_exact_on_linear(self):
        assert count_parameters(torch.nn.Linear(3, 2)) == 8

    def test_count_parameters_config_matches_module(self):
        cfg = desk_unet_config(2, 2)
        assert count_parameters(cfg) == count_parameters(make_backbone(cfg))

    def test_unknown_kind_raises(self):
        class Fake:
            kind = "mlp"

        with pytest.raises(BackboneConfigError, match="kind"):
            make_backbone(Fake())

import pytest
import torch

from _helpers import check_param_gradients
from rkdsc.cat_codec import (CATBlock, CatConfig, ChannelDecoder, ChannelEncoder, SNREmbedding, channel_decode,
                             channel_encode, compressed_dim, snr_embedding)


def small_cfg(**kw):
    base = dict(embed_dim=16, num_heads=2, ffn_hidden=24, compression_ratio=0.5, snr_embed_hidden=8)
    base.update(kw)
    return CatConfig(**base)


class TestCompressedDim:
    @pytest.mark.parametrize("ratio, expected", [(0.8, 102), (0.2, 409), (0.1, 460), (0.9, 51), (0.0, 512)])
    def test_reference_dims(self, ratio, expected):
        assert compressed_dim(512, ratio) == expected

    def test_clamped_to_one(self):
        assert compressed_dim(10, 0.95) == 1

    @pytest.mark.parametrize("ratio", [-0.1, 1.0, 1.5])
    def test_out_of_range(self, ratio):
        with pytest.raises(ValueError):
            compressed_dim(512, ratio)

    def test_config_properties(self):
        cfg = small_cfg(compression_ratio=0.25)
        assert cfg.compressed_dim == 12 and cfg.snr_dim == 4

    def test_head_divisibility(self):
        with pytest.raises(ValueError):
            CatConfig(embed_dim=10, num_heads=3)


class TestShapes:
    def test_block_shapes(self):
        cfg = small_cfg()
        x = torch.randn(5, 16)
        assert CATBlock(cfg)(x, 10.0).shape == (5, 16)
        assert CATBlock(cfg, is_final_encoder=True)(x, 10.0).shape == (5, 8)

    def test_block_rejects_wrong_width(self):
        with pytest.raises(ValueError):
            CATBlock(small_cfg())(torch.randn(2, 15), 0.0)

    @pytest.mark.parametrize("tokens", [1, 2])
    def test_roundtrip_shapes(self, tokens):
        cfg = small_cfg(tokens=tokens, num_heads=2)
        enc, dec = ChannelEncoder(cfg), ChannelDecoder(cfg)
        h = torch.randn(4, 16)
        z = channel_encode(enc, h, 5.0)
        assert z.shape == (4, cfg.compressed_dim)
        assert channel_decode(dec, z, 5.0).shape == (4, 16)

    def test_decoder_rejects_wrong_width(self):
        with pytest.raises(ValueError):
            ChannelDecoder(small_cfg())(torch.randn(2, 7), 0.0)

    def test_encoder_composition(self):
        cfg = small_cfg(encoder_blocks=3)
        enc = ChannelEncoder(cfg)
        assert len(enc.blocks) == 3
        assert [b.is_final_encoder for b in enc.blocks] == [False, False, True]
        calls = []
        for b in enc.blocks:
            b.register_forward_hook(lambda m, i, o: calls.append(o.shape[-1]))
        enc(torch.randn(2, 16), 0.0)
        assert calls == [16, 16, 8]

    def test_ratio_zero_has_no_snr_slot(self):
        cfg = small_cfg(compression_ratio=0.0)
        assert cfg.snr_dim == 0
        enc, dec = ChannelEncoder(cfg), ChannelDecoder(cfg)
        out = dec(enc(torch.randn(3, 16), 0.0), 0.0)
        assert out.shape == (3, 16) and torch.isfinite(out).all()

    def test_per_sample_snr(self):
        cfg = small_cfg()
        block = CATBlock(cfg)
        x = torch.randn(1, 16).expand(3, 16)
        out = block(x, torch.tensor([0.0, 10.0, 0.0]))
        assert torch.equal(out[0], out[2])
        assert not torch.equal(out[0], out[1])


class TestSnrEmbedding:
    def test_range(self):
        torch.manual_seed(0)
        emb = SNREmbedding(6, 8)
        for snr in (-100.0, -10.0, 0.0, 25.0, 100.0):
            v = snr_embedding(emb, snr)
            assert v.shape == (6,)
            assert ((v > 0) & (v < 1)).all()

    def test_distinct(self):
        torch.manual_seed(0)
        emb = SNREmbedding(6, 8)
        assert not torch.allclose(snr_embedding(emb, 0.0), snr_embedding(emb, 20.0))

    def test_snr_changes_decoder_output(self):
        torch.manual_seed(0)
        dec = ChannelDecoder(small_cfg())
        z = torch.randn(2, 8)
        assert not torch.allclose(dec(z, -5.0), dec(z, 20.0))


class TestGradients:
    def test_attention_and_ffn_finite_difference(self):
        torch.manual_seed(0)
        cfg = small_cfg()
        block = CATBlock(cfg).double()
        x = torch.randn(4, 16, dtype=torch.float64)
        probe = torch.randn(4, 16, dtype=torch.float64)

        def loss():
            return (block(x, 7.0) * probe).sum()

        params = [block.attn.in_proj_weight, block.attn.out_proj.weight, block.ffn_up.weight,
                  block.snr_embed.net[0].weight]
        assert check_param_gradients(loss, params, samples_per_param=4) < 1e-5

    def test_codec_finite_difference(self):
        torch.manual_seed(1)
        cfg = small_cfg(tokens=2)
        enc, dec = ChannelEncoder(cfg).double(), ChannelDecoder(cfg).double()
        h = torch.randn(3, 16, dtype=torch.float64)

        def loss():
            return (dec(enc(h, 3.0), 3.0) - h).square().mean()

        params = [enc.blocks[0].attn.in_proj_weight, dec.lift.net[2].weight, dec.blocks[1].ffn_down.bias,
                  dec.out.weight]
        assert check_param_gradients(loss, params) < 1e-5

    def test_all_parameters_receive_gradient(self):
        torch.manual_seed(0)
        cfg = small_cfg(tokens=2)
        enc, dec = ChannelEncoder(cfg), ChannelDecoder(cfg)
        dec(enc(torch.randn(3, 16), 4.0), 4.0).square().sum().backward()
        for m in (enc, dec):
            for name, p in m.named_parameters():
                assert p.grad is not None and p.grad.abs().sum() > 0, name

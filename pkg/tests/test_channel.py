import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from rkdsc.channel import (ChannelConfig, ChannelError, SymbolBlock, make_generator, noise_variance,
                           normalize_power, pack_features, rayleigh_gains, sample_training_snr, send_features,
                           transmit, unpack_features)


def block(values):
    t = torch.tensor(values, dtype=torch.complex128)
    return SymbolBlock(t, 2 * len(values))


def unit_block(n, seed=0):
    g = make_generator(seed)
    parts = torch.randn(n, 2, generator=g, dtype=torch.float64)
    return normalize_power(SymbolBlock(torch.complex(parts[:, 0], parts[:, 1]), 2 * n))


class TestNormalizePower:
    def test_unit_power_unchanged(self):
        out = normalize_power(block([1 + 0j, 1 + 0j]))
        assert torch.allclose(out.symbols, block([1 + 0j, 1 + 0j]).symbols)

    def test_scale_by_inverse_rms(self):
        out = normalize_power(block([2 + 0j, 2j]))
        assert torch.allclose(out.symbols, torch.tensor([1 + 0j, 1j], dtype=torch.complex128), atol=1e-12)

    @pytest.mark.parametrize("scale", [1e-170, 1e-300, 1e200])
    def test_extreme_magnitudes(self, scale):
        out = normalize_power(block([scale * (1 + 1j), scale + 0j]))
        assert torch.isfinite(out.symbols).all()
        assert abs((out.symbols.abs() ** 2).mean().item() - 1.0) < 1e-12

    def test_zero_block(self):
        with pytest.raises(ChannelError, match="zero-power block cannot be normalized"):
            normalize_power(block([0j, 0j]))

    @given(st.lists(st.complex_numbers(max_magnitude=1e3, allow_nan=False, allow_infinity=False),
                    min_size=1, max_size=50))
    def test_mean_power_one(self, values):
        b = block(values)
        if (b.symbols.abs() == 0).all():
            return
        out = normalize_power(b)
        assert abs((out.symbols.abs() ** 2).mean().item() - 1.0) < 1e-9
        # direction preserved: output is a positive multiple of the input
        ratio = out.symbols[b.symbols.abs() > 0] / b.symbols[b.symbols.abs() > 0]
        assert torch.allclose(ratio.imag, torch.zeros_like(ratio.imag), atol=1e-9)
        assert (ratio.real > 0).all()


class TestPacking:
    def test_odd_length(self):
        b = pack_features(torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64))
        assert b.symbols.tolist() == [1 + 2j, 3 + 0j]
        assert unpack_features(b, 3).tolist() == [1.0, 2.0, 3.0]

    def test_empty(self):
        b = pack_features(torch.zeros(0))
        assert len(b) == 0
        assert unpack_features(b, 0).numel() == 0

    def test_length_101_roundtrip(self):
        v = torch.randn(101, generator=make_generator(3), dtype=torch.float64)
        assert torch.equal(unpack_features(pack_features(v), 101), v)

    @settings(max_examples=50)
    @given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), max_size=64))
    def test_roundtrip_property(self, values):
        v = torch.tensor(values, dtype=torch.float64)
        assert torch.equal(unpack_features(pack_features(v), len(values)), v)

    def test_batched(self):
        v = torch.arange(10.0).reshape(2, 5)
        b = pack_features(v)
        assert b.symbols.shape == (2, 3)
        assert torch.equal(unpack_features(b, 5), v)

    def test_dimension_mismatch(self):
        with pytest.raises(ChannelError):
            unpack_features(pack_features(torch.ones(4)), 6)

    def test_block_length_invariant(self):
        with pytest.raises(ChannelError):
            SymbolBlock(torch.zeros(3, dtype=torch.complex64), 3)


class TestTransmit:
    def test_awgn_noiseless_limit(self):
        b = unit_block(1000)
        out = transmit(b, ChannelConfig("awgn", 200.0), make_generator(0))
        assert torch.allclose(out.symbols, b.symbols, atol=1e-8, rtol=0)

    def test_awgn_noise_power_at_0db(self):
        b = unit_block(10**6, seed=1)
        out = transmit(b, ChannelConfig("awgn", 0.0), make_generator(2))
        p = ((out.symbols - b.symbols).abs() ** 2).mean().item()
        assert 0.99 <= p <= 1.01

    def test_noise_split_evenly(self):
        b = unit_block(10**5)
        n = transmit(b, ChannelConfig("awgn", 3.0), make_generator(1)).symbols - b.symbols
        var = noise_variance(3.0)
        assert n.real.var().item() == pytest.approx(var / 2, rel=0.03)
        assert n.imag.var().item() == pytest.approx(var / 2, rel=0.03)

    @pytest.mark.parametrize("granularity", ["per_block", "per_symbol"])
    def test_rayleigh_equalized_noiseless(self, granularity):
        b = unit_block(500)
        cfg = ChannelConfig("rayleigh", 200.0, granularity, "perfect_csi")
        out = transmit(b, cfg, make_generator(4))
        assert torch.allclose(out.symbols, b.symbols, atol=1e-6, rtol=0)

    def test_rayleigh_without_equalization_scales_block(self):
        b = unit_block(64)
        cfg = ChannelConfig("rayleigh", 200.0, "per_block", "none")
        out = transmit(b, cfg, make_generator(5))
        ratio = out.symbols / b.symbols
        assert torch.allclose(ratio, ratio[0].expand_as(ratio), atol=1e-6)

    def test_rayleigh_gain_moments(self):
        h = rayleigh_gains((10**6,), make_generator(7))
        assert (h.abs() ** 2).mean().item() == pytest.approx(1.0, rel=0.02)
        assert h.real.var().item() == pytest.approx(0.5, rel=0.02)
        assert h.imag.var().item() == pytest.approx(0.5, rel=0.02)
        assert h.abs().mean().item() == pytest.approx(math.sqrt(math.pi) / 2, rel=0.02)

    def test_non_finite_input(self):
        b = block([complex(float("nan"), 0), 1 + 0j])
        with pytest.raises(ChannelError, match="non-finite channel input"):
            transmit(b, ChannelConfig("awgn", 10.0), make_generator(0))

    def test_range_snr_rejected(self):
        with pytest.raises(ChannelError):
            transmit(unit_block(4), ChannelConfig("awgn", (0.0, 10.0)), make_generator(0))

    @pytest.mark.parametrize("family", ["awgn", "rayleigh"])
    def test_deterministic(self, family):
        b = unit_block(256)
        cfg = ChannelConfig(family, 5.0)
        a = transmit(b, cfg, make_generator(11)).symbols
        c = transmit(b, cfg, make_generator(11)).symbols
        assert torch.equal(a, c)

    def test_send_features_is_differentiable(self):
        x = torch.randn(3, 7, dtype=torch.float64, requires_grad=True)
        y = send_features(x, ChannelConfig("awgn", 10.0), make_generator(0))
        y.sum().backward()
        assert x.grad is not None and torch.isfinite(x.grad).all()


class TestConfig:
    def test_range_order(self):
        with pytest.raises(ChannelError):
            ChannelConfig("awgn", (20.0, 5.0))

    def test_awgn_keeps_fading_fields(self):
        cfg = ChannelConfig("awgn", 10.0, "per_symbol", "none")
        assert cfg.fading_granularity.value == "per_symbol"


class TestTrainingSnr:
    def test_degenerate(self):
        assert sample_training_snr((7, 7), make_generator(0)) == 7.0

    def test_mean(self):
        g = make_generator(0)
        draws = np.array([sample_training_snr((5, 20), g) for _ in range(10**5)])
        assert abs(draws.mean() - 12.5) < 0.1
        assert draws.min() >= 5 and draws.max() <= 20

    def test_reversed(self):
        with pytest.raises(ChannelError):
            sample_training_snr((20, 5), make_generator(0))

    def test_deterministic(self):
        assert sample_training_snr((5, 20), make_generator(9)) == sample_training_snr((5, 20), make_generator(9))

"""Channel-aware transformer (CAT) channel encoder and decoder.

A CAT block is a pre-norm transformer encoder block whose feed-forward stage
projects down to ``compressed_dim``.  Non-final blocks refill the remaining
``embed_dim - compressed_dim`` slots with a learned embedding of the SNR; the
last encoder block sends the compact vector straight to the channel.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

# SNR in dB is divided by this before entering the embedding network
SNR_SCALE = 10.0


def compressed_dim(embed_dim: int, ratio: float) -> int:
    """floor(embed_dim * (1 - ratio)), never below one."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"compression ratio must lie in [0, 1), got {ratio}")
    if embed_dim < 1:
        raise ValueError("embed_dim must be positive")
    # round the product first so e.g. 512 * 0.9 = 460.8000000000001 floors correctly
    return max(1, math.floor(round(embed_dim * (1.0 - ratio), 9)))


@dataclass(frozen=True)
class CatConfig:
    embed_dim: int = 32
    num_heads: int = 4
    ffn_hidden: int = 64
    compression_ratio: float = 0.5
    encoder_blocks: int = 1
    decoder_blocks: int = 2
    snr_embed_hidden: int = 16
    tokens: int = 1
    dropout: float = 0.0
    # linear d -> d map after the decoder blocks; see DESIGN note in README
    output_proj: bool = True

    def __post_init__(self):
        if self.embed_dim % self.tokens:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by tokens {self.tokens}")
        if (self.embed_dim // self.tokens) % self.num_heads:
            raise ValueError(
                f"token dim {self.embed_dim // self.tokens} not divisible by num_heads {self.num_heads}"
            )
        if self.encoder_blocks < 1 or self.decoder_blocks < 1:
            raise ValueError("need at least one encoder and one decoder block")
        compressed_dim(self.embed_dim, self.compression_ratio)

    @property
    def compressed_dim(self) -> int:
        return compressed_dim(self.embed_dim, self.compression_ratio)

    @property
    def snr_dim(self) -> int:
        return self.embed_dim - self.compressed_dim


def _snr_column(snr_db, batch: int, like: torch.Tensor) -> torch.Tensor:
    snr = torch.as_tensor(snr_db, dtype=like.dtype, device=like.device)
    if snr.ndim == 0:
        snr = snr.expand(batch)
    return (snr / SNR_SCALE).reshape(batch, 1)


class SNREmbedding(nn.Module):
    """scalar SNR -> hidden -> out_dim, squashed into (0, 1)."""

    def __init__(self, out_dim: int, hidden: int):
        super().__init__()
        self.out_dim = out_dim
        self.net = nn.Sequential(nn.Linear(1, hidden), nn.ReLU(), nn.Linear(hidden, out_dim)) if out_dim else None

    def forward(self, snr_db, batch: int, like: torch.Tensor) -> torch.Tensor:
        if self.net is None:
            return like.new_zeros(batch, 0)
        return torch.sigmoid(self.net(_snr_column(snr_db, batch, like)))


def snr_embedding(module: SNREmbedding, snr_db: float, like: torch.Tensor = None) -> torch.Tensor:
    """Embedding of a single SNR value as a 1-D vector."""
    if like is None:
        like = next(module.parameters()) if module.net is not None else torch.zeros(())
    return module(snr_db, 1, like)[0]


class CATBlock(nn.Module):
    def __init__(self, cfg: CatConfig, is_final_encoder: bool = False):
        super().__init__()
        self.cfg = cfg
        self.is_final_encoder = is_final_encoder
        d, t = cfg.embed_dim, cfg.tokens
        self.token_dim = d // t
        self.norm1 = nn.LayerNorm(self.token_dim)
        self.attn = nn.MultiheadAttention(self.token_dim, cfg.num_heads, dropout=cfg.dropout, batch_first=True)
        self.norm2 = nn.LayerNorm(d)
        self.ffn_up = nn.Linear(d, cfg.ffn_hidden)
        self.ffn_down = nn.Linear(cfg.ffn_hidden, cfg.compressed_dim)
        self.snr_embed = None if is_final_encoder else SNREmbedding(cfg.snr_dim, cfg.snr_embed_hidden)

    @property
    def out_dim(self) -> int:
        return self.cfg.compressed_dim if self.is_final_encoder else self.cfg.embed_dim

    def forward(self, x: torch.Tensor, snr_db) -> torch.Tensor:
        d = self.cfg.embed_dim
        if x.shape[-1] != d:
            raise ValueError(f"CAT block expects {d} features, got {x.shape[-1]}")
        b = x.shape[0]
        tok = x.reshape(b, self.cfg.tokens, self.token_dim)
        q = self.norm1(tok)
        a, _ = self.attn(q, q, q, need_weights=False)
        tok = tok + a
        h = tok.reshape(b, d)
        f = self.ffn_down(F.gelu(self.ffn_up(self.norm2(h))))
        if self.is_final_encoder:
            return f
        return torch.cat([f, self.snr_embed(snr_db, b, f)], dim=-1)


def cat_block(block: CATBlock, x: torch.Tensor, snr_db) -> torch.Tensor:
    return block(x, snr_db)


class ChannelEncoder(nn.Module):
    def __init__(self, cfg: CatConfig):
        super().__init__()
        self.cfg = cfg
        n = cfg.encoder_blocks
        self.blocks = nn.ModuleList([CATBlock(cfg, is_final_encoder=(i == n - 1)) for i in range(n)])

    def forward(self, h: torch.Tensor, snr_db) -> torch.Tensor:
        for block in self.blocks:
            h = block(h, snr_db)
        return h


class ChannelDecoder(nn.Module):
    """Lift the received vector back to embed_dim with an SNR embedding, then CAT blocks."""

    def __init__(self, cfg: CatConfig):
        super().__init__()
        self.cfg = cfg
        self.lift = SNREmbedding(cfg.snr_dim, cfg.snr_embed_hidden)
        self.blocks = nn.ModuleList([CATBlock(cfg) for _ in range(cfg.decoder_blocks)])
        self.out = nn.Linear(cfg.embed_dim, cfg.embed_dim) if cfg.output_proj else None

    def forward(self, z: torch.Tensor, snr_db) -> torch.Tensor:
        c = self.cfg.compressed_dim
        if z.shape[-1] != c:
            raise ValueError(f"channel decoder expects {c} features, got {z.shape[-1]}")
        h = torch.cat([z, self.lift(snr_db, z.shape[0], z)], dim=-1)
        for block in self.blocks:
            h = block(h, snr_db)
        return self.out(h) if self.out is not None else h


def channel_encode(encoder: ChannelEncoder, h: torch.Tensor, snr_db) -> torch.Tensor:
    return encoder(h, snr_db)


def channel_decode(decoder: ChannelDecoder, z_noisy: torch.Tensor, snr_db) -> torch.Tensor:
    return decoder(z_noisy, snr_db)

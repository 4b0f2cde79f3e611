"""RGB patch embedding, gated token fusion and the transformer trunk."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .geometry import GeoTokens
from .nn import MLP, LayerNorm, Linear, Module, TransformerBlock
from .tensor import Tensor


@dataclass
class TokenSequence:
    tokens: Tensor          # (B, N, D)
    grid: tuple[int, int]
    provenance: str         # rgb | fused


class PatchEmbed(Module):
    def __init__(self, patch: int, dim: int, grid: tuple[int, int], rng: np.random.Generator):
        self.patch = patch
        self.grid = tuple(grid)
        self.proj = Linear(3 * patch * patch, dim, rng)
        self.pos = Tensor(rng.standard_normal((grid[0] * grid[1], dim)) * 0.02, requires_grad=True)

    def __call__(self, image) -> TokenSequence:
        img = image if isinstance(image, Tensor) else Tensor(image)
        b, c, h, w = img.shape
        p = self.patch
        if h % p or w % p:
            raise T.ShapeError(f"patch_embed: image {h}x{w} not divisible by patch {p}")
        hp, wp = h // p, w // p
        if (hp, wp) != self.grid:
            raise T.ShapeError(f"patch_embed: image grid {(hp, wp)} differs from configured {self.grid}")
        x = img.reshape(b, c, hp, p, wp, p).transpose(0, 2, 4, 1, 3, 5).reshape(b, hp * wp, c * p * p)
        return TokenSequence(self.proj(x) + self.pos, self.grid, "rgb")


class FusionGate(Module):
    """Scalar gate g and the two-layer projection from [LN(rgb); LN(geo)] back to D."""

    def __init__(self, dim: int, rng: np.random.Generator, gate_init: float = -2.0,
                 zero_init: bool = True):
        self.norm_rgb = LayerNorm(dim)
        self.norm_geo = LayerNorm(dim)
        self.proj = MLP(2 * dim, dim, dim, rng, zero_last=zero_init)
        self.g = Tensor(np.array([gate_init]), requires_grad=True)

    def sigma(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.g.data[0])))


def gated_fuse(rgb: TokenSequence, geo: GeoTokens, gate: FusionGate) -> TokenSequence:
    if rgb.tokens.shape != geo.tokens.shape:
        raise T.ShapeError(
            f"gated_fuse: rgb tokens {rgb.tokens.shape} vs geometry tokens {geo.tokens.shape} "
            "(token grids must match)")
    x = rgb.tokens
    delta = gate.proj(T.concat([gate.norm_rgb(x), gate.norm_geo(geo.tokens)], axis=-1))
    return TokenSequence(x + T.sigmoid(gate.g) * delta, rgb.grid, "fused")


def tokens_to_map(tokens: Tensor, grid: tuple[int, int]) -> Tensor:
    b, n, d = tokens.shape
    return tokens.transpose(0, 2, 1).reshape(b, d, grid[0], grid[1])


def map_to_tokens(fmap: Tensor) -> Tensor:
    b, d, h, w = fmap.shape
    return fmap.reshape(b, d, h * w).transpose(0, 2, 1)


class Backbone(Module):
    def __init__(self, patch: int, dim: int, depth: int, heads: int, mlp_ratio: float,
                 grid: tuple[int, int], rng: np.random.Generator, with_fusion: bool = True,
                 fusion_after_block: int = 0, gate_init: float = -2.0, fusion_zero_init: bool = True):
        self.grid = tuple(grid)
        self.fusion_after_block = fusion_after_block
        self.patch_embed = PatchEmbed(patch, dim, grid, rng)
        self.blocks = [TransformerBlock(dim, heads, mlp_ratio, rng) for _ in range(depth)]
        self.fusion = FusionGate(dim, rng, gate_init, fusion_zero_init) if with_fusion else None

    def encode(self, x: TokenSequence, blocks=None) -> Tensor:
        """Run trunk blocks (all by default) and reshape to (B, D, H_p, W_p)."""
        blocks = self.blocks if blocks is None else blocks
        h = x.tokens
        for blk in blocks:
            h = blk(h)
        return tokens_to_map(h, self.grid)

    def __call__(self, image, geo: GeoTokens | None = None, bypass: bool = False) -> Tensor:
        rgb = self.patch_embed(image)
        if geo is None or bypass or self.fusion is None:
            return self.encode(rgb)
        k = self.fusion_after_block
        h = rgb.tokens
        for blk in self.blocks[:k]:
            h = blk(h)
        fused = gated_fuse(TokenSequence(h, self.grid, "rgb"), geo, self.fusion)
        return self.encode(fused, self.blocks[k:])

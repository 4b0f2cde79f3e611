"""Geometry branch: frozen prior stand-in, GeoAdapter and geometry tokenizer."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Conv2d, GroupNorm, Module
from .tensor import Tensor, no_grad

# point map (x, y, z) followed by unit normals
GEOMETRY_CHANNELS = 6


class MissingGeometryError(ValueError):
    pass


@dataclass
class GeoFeatureMap:
    map: Tensor            # (B, C, H_g, W_g)
    kind: str              # raw | side | augmented
    raw_channels: int
    side_channels: int = 0

    @property
    def channels(self) -> int:
        return self.map.shape[1]


@dataclass
class GeoTokens:
    tokens: Tensor         # (B, N, D)
    grid: tuple[int, int]


def _patchify(image: np.ndarray, cell: tuple[int, int]) -> np.ndarray:
    """(B, C, H, W) -> (B, H/ch, W/cw, C*ch*cw), cells in row-major order."""
    b, c, h, w = image.shape
    ch, cw = cell
    x = image.reshape(b, c, h // ch, ch, w // cw, cw).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, h // ch, w // cw, c * ch * cw)


class GeometryStub:
    """Frozen stand-in for the monocular geometry network.

    ``oracle`` pools the sample's ground-truth point/normal map and pads the
    remaining channels with fixed random projections of image cells;
    ``frozen-random`` is a seed-fixed random conv stack over the image.
    Nothing here is a trainable parameter.
    """

    def __init__(self, mode: str, image_hw: tuple[int, int], geo_hw: tuple[int, int],
                 channels: int = 16, seed: int = 1234, hidden: int = 32):
        if mode not in ("oracle", "frozen-random"):
            raise ValueError(f"unknown geometry mode {mode!r}")
        if channels < GEOMETRY_CHANNELS:
            raise ValueError(f"need at least {GEOMETRY_CHANNELS} geometry channels, got {channels}")
        h, w = image_hw
        hg, wg = geo_hw
        if h % hg or w % wg:
            raise ValueError(f"geometry grid {geo_hw} must divide the image {image_hw}")
        self.mode = mode
        self.channels = channels
        self.geo_hw = geo_hw
        self.cell = (h // hg, w // wg)
        cell_dim = 3 * self.cell[0] * self.cell[1]
        rng = np.random.default_rng(seed)
        self.pad_proj = rng.standard_normal((cell_dim, channels - GEOMETRY_CHANNELS)) / np.sqrt(cell_dim)
        self.embed = rng.standard_normal((cell_dim, hidden)) * (2.0 / np.sqrt(cell_dim))
        self.conv_w = rng.standard_normal((channels, hidden, 3, 3)) / np.sqrt(9 * hidden)
        self.conv_b = rng.standard_normal(channels) * 0.1

    def buffers(self) -> dict[str, np.ndarray]:
        return {"pad_proj": self.pad_proj, "embed": self.embed,
                "conv_w": self.conv_w, "conv_b": self.conv_b}

    def __call__(self, image: np.ndarray, geometry: np.ndarray | None = None) -> GeoFeatureMap:
        image = np.asarray(image, dtype=np.float64)
        cells = _patchify(image, self.cell)                      # (B, Hg, Wg, cell_dim)
        with no_grad():
            if self.mode == "oracle":
                if geometry is None:
                    raise MissingGeometryError("oracle geometry mode needs the sample's geometry map")
                pooled = T.adaptive_avg_pool2d(Tensor(geometry), self.geo_hw).data
                pad = (cells @ self.pad_proj).transpose(0, 3, 1, 2)
                out = np.concatenate([pooled, pad], axis=1)
            else:
                hid = np.tanh(cells @ self.embed).transpose(0, 3, 1, 2)
                out = np.tanh(T.conv2d(Tensor(hid), Tensor(self.conv_w), Tensor(self.conv_b), 1).data)
        return GeoFeatureMap(Tensor(np.ascontiguousarray(out)), "raw", self.channels)


class GeoAdapter(Module):
    """[1x1 conv, GN, GELU, 3x3 conv, GN, GELU] x depth, then a zero-initialised 1x1 to C_s."""

    def __init__(self, c_in: int, c_side: int, depth: int, width: int, rng: np.random.Generator):
        self.c_in, self.c_side = c_in, c_side
        self.blocks = []
        c = c_in
        for _ in range(depth):
            self.blocks.append(_AdapterBlock(c, width, rng))
            c = width
        self.proj = Conv2d(c, c_side, 1, rng, zero=True)

    def side(self, raw: GeoFeatureMap) -> GeoFeatureMap:
        if raw.kind != "raw":
            raise ValueError(f"adapter expects a raw map, got {raw.kind}")
        if raw.channels != self.c_in:
            raise T.ShapeError(f"adapter configured for {self.c_in} channels, got {raw.channels}")
        x = raw.map
        for blk in self.blocks:
            x = blk(x)
        return GeoFeatureMap(self.proj(x), "side", raw.channels, self.c_side)

    def __call__(self, raw: GeoFeatureMap) -> GeoFeatureMap:
        side = self.side(raw)
        aug = T.concat([raw.map, side.map], axis=1)
        return GeoFeatureMap(aug, "augmented", raw.channels, self.c_side)


class _AdapterBlock(Module):
    def __init__(self, c_in: int, width: int, rng: np.random.Generator):
        self.conv1 = Conv2d(c_in, width, 1, rng)
        self.norm1 = GroupNorm(width)
        self.conv3 = Conv2d(width, width, 3, rng)
        self.norm2 = GroupNorm(width)

    def __call__(self, x: Tensor) -> Tensor:
        x = T.gelu(self.norm1(self.conv1(x)))
        return T.gelu(self.norm2(self.conv3(x)))


class GeoTokenizer(Module):
    """Pool to the patch grid, 1x1 project to D, flatten row-major, add grid embeddings."""

    def __init__(self, c_in: int, dim: int, grid: tuple[int, int], rng: np.random.Generator,
                 accept_raw: bool = False):
        self.grid = tuple(grid)
        self.accept_raw = accept_raw
        self.proj = Conv2d(c_in, dim, 1, rng)
        self.pos = Tensor(rng.standard_normal((grid[0] * grid[1], dim)) * 0.02, requires_grad=True)

    def __call__(self, fmap: GeoFeatureMap) -> GeoTokens:
        if fmap.kind != "augmented" and not (self.accept_raw and fmap.kind == "raw"):
            raise ValueError(f"tokenizer expects an augmented map, got {fmap.kind}")
        hp, wp = self.grid
        b, _, hg, wg = fmap.map.shape
        if hp > hg or wp > wg:
            raise T.ShapeError(f"token grid {self.grid} larger than geometry map {(hg, wg)}")
        x = self.proj(T.adaptive_avg_pool2d(fmap.map, self.grid))      # (B, D, Hp, Wp)
        d = x.shape[1]
        tokens = x.reshape(b, d, hp * wp).transpose(0, 2, 1) + self.pos
        return GeoTokens(tokens, self.grid)

"""Full pipeline assembly: geometry branch -> fusion trunk -> coarse decoder -> KQIR."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import Backbone
from .config import ModelConfig
from .decoder import DecoderState, KqirWeights, ManoDecoder, refine
from .geometry import GeoAdapter, GeometryStub, GeoTokenizer
from .hand_model import HandTemplate, build_template, decode
from .nn import Module
from .tensor import Tensor


def default_camera(template: HandTemplate, scale: float) -> tuple[float, float, float]:
    """Camera that centres the rest-pose joint bounding box in the [-1, 1]^2 image."""
    j = template.rest_joints()
    centre = 0.5 * (j[:, :2].min(axis=0) + j[:, :2].max(axis=0))
    return (scale, -scale * centre[0], -scale * centre[1])


@dataclass
class Prediction:
    stages: list[DecoderState]     # coarse estimate first, then each refinement step
    f_img: Tensor
    sigma_g: float | None

    @property
    def final(self) -> DecoderState:
        return self.stages[-1]

    @property
    def coarse(self) -> DecoderState:
        return self.stages[0]


class GeoHand(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, cam_scale: float = 8.0,
                 template: HandTemplate | None = None):
        self.cfg = cfg
        self.template = template or build_template(cfg.v_count, cfg.template_seed)
        grid = cfg.grid

        def stream(k: int) -> np.random.Generator:
            # one stream per component so an RGB-only model shares every other weight
            return np.random.default_rng([seed, k])

        self.stub = None
        self.adapter = None
        self.tokenizer = None
        if cfg.use_geometry:
            self.stub = GeometryStub(cfg.geo_mode, (cfg.image_h, cfg.image_w), cfg.geo_hw,
                                     cfg.geo_channels, cfg.geo_seed)
            c_tok = cfg.geo_channels
            if cfg.use_adapter:
                self.adapter = GeoAdapter(cfg.geo_channels, cfg.side_channels, cfg.adapter_depth,
                                          cfg.adapter_width, stream(1))
                c_tok += cfg.side_channels
            self.tokenizer = GeoTokenizer(c_tok, cfg.dim, grid, stream(2),
                                          accept_raw=not cfg.use_adapter)
        self.backbone = Backbone(cfg.patch, cfg.dim, cfg.depth, cfg.heads, cfg.mlp_ratio, grid,
                                 stream(3), with_fusion=cfg.use_geometry,
                                 fusion_after_block=cfg.fusion_after_block,
                                 gate_init=cfg.gate_init, fusion_zero_init=cfg.fusion_zero_init)
        self.decoder = ManoDecoder(cfg.dim, cfg.decoder_dim, cfg.decoder_layers, cfg.heads,
                                   stream(4), default_camera(self.template, cam_scale))
        n_kqir = 1 if cfg.kqir_shared else max(cfg.kqir_steps, 1)
        krng = stream(5)
        kq = [KqirWeights(cfg.dim, cfg.d_q, cfg.kqir_heads, cfg.kqir_hidden, krng) for _ in range(n_kqir)]
        self.kqir = kq[0] if cfg.kqir_shared else kq

    def sigma_g(self) -> float | None:
        fusion = self.backbone.fusion
        return None if fusion is None else fusion.sigma()

    def features(self, image: np.ndarray, geometry: np.ndarray | None = None) -> Tensor:
        geo = None
        if self.stub is not None and not self.cfg.gate_bypass:
            raw = self.stub(image, geometry)
            fmap = self.adapter(raw) if self.adapter is not None else raw
            geo = self.tokenizer(fmap)
        return self.backbone(image, geo, bypass=self.cfg.gate_bypass)

    def __call__(self, image: np.ndarray, geometry: np.ndarray | None = None,
                 kqir_steps: int | None = None) -> Prediction:
        f_img = self.features(image, geometry)
        params = self.decoder(f_img, self.cfg.ief_iterations)
        coarse = DecoderState(params, decode(self.template, params), 0)
        steps = self.cfg.kqir_steps if kqir_steps is None else kqir_steps
        states = refine(coarse, f_img, steps, self.kqir, self.template)
        return Prediction(states, f_img, self.sigma_g())

"""Coarse MANO decoder with iterative error feedback, and the keypoint-queried refiner."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import map_to_tokens
from .hand_model import (N_JOINTS, HandOutput, HandParams, HandTemplate, decode, identity_rot6d,
                         project)
from .nn import MLP, LayerNorm, Linear, Module, MultiHeadAttention
from .tensor import Tensor

PARAM_DIM = 96 + 10 + 3


def mean_params(batch: int, cam: tuple[float, float, float]) -> np.ndarray:
    """(B, 109) mean-pose vector: identity rotations, zero shape, the given camera."""
    vec = np.concatenate([identity_rot6d(1).reshape(1, 96), np.zeros((1, 10)),
                          np.asarray(cam, dtype=np.float64).reshape(1, 3)], axis=1)
    return np.repeat(vec, batch, axis=0)


class _DecoderLayer(Module):
    def __init__(self, dim: int, mem_dim: int, heads: int, rng: np.random.Generator):
        self.norm_q = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, mem_dim, dim, heads, rng)
        self.norm_mlp = LayerNorm(dim)
        self.mlp = MLP(dim, 2 * dim, dim, rng)

    def __call__(self, x: Tensor, memory: Tensor) -> Tensor:
        x = x + self.attn(self.norm_q(x), memory)
        return x + self.mlp(self.norm_mlp(x))


class ManoDecoder(Module):
    """A learnable parameter token conditioned on the current estimate attends over F_img.

    Each IEF iteration re-embeds the current parameter vector, runs the
    decoder layers and adds the head's residual to the estimate.
    """

    def __init__(self, mem_dim: int, dim: int, layers: int, heads: int, rng: np.random.Generator,
                 mean_cam=(8.0, 0.0, -0.75)):
        self.mean_cam = tuple(float(c) for c in mean_cam)
        self.token = Tensor(rng.standard_normal((1, 1, dim)) * 0.02, requires_grad=True)
        self.embed = Linear(PARAM_DIM, dim, rng)
        self.mem_norm = LayerNorm(mem_dim)
        self.layers = [_DecoderLayer(dim, mem_dim, heads, rng) for _ in range(layers)]
        self.out_norm = LayerNorm(dim)
        self.head = Linear(dim, PARAM_DIM, rng, gain=0.01)

    def __call__(self, f_img: Tensor, iterations: int) -> HandParams:
        b = f_img.shape[0]
        vec = Tensor(mean_params(b, self.mean_cam))
        if iterations == 0:
            return HandParams.from_vector(vec)
        memory = self.mem_norm(map_to_tokens(f_img))
        for _ in range(iterations):
            x = self.token + self.embed(vec).reshape(b, 1, -1)
            for layer in self.layers:
                x = layer(x, memory)
            vec = vec + self.head(self.out_norm(x).reshape(b, -1))
        return HandParams.from_vector(vec)


class KqirWeights(Module):
    def __init__(self, mem_dim: int, d_q: int, heads: int, hidden: int, rng: np.random.Generator,
                 zero_last: bool = True):
        self.d_q = d_q
        self.query = MLP(5, d_q, d_q, rng)
        self.attn = MultiHeadAttention(d_q, mem_dim, d_q, heads, rng, project_query=False,
                                       kv_bias=False)
        self.ref = MLP(N_JOINTS * d_q, hidden, PARAM_DIM, rng, zero_last=zero_last)

    @property
    def w_k(self) -> Tensor:
        return self.attn.k.weight

    @property
    def w_v(self) -> Tensor:
        return self.attn.v.weight


@dataclass
class DecoderState:
    params: HandParams
    output: HandOutput
    t: int = 0
    features: Tensor | None = None   # (B, 21, d_q)


def build_queries(joints: Tensor, projected: Tensor, weights: KqirWeights) -> Tensor:
    """Per-joint MLP on [J_j; U_j]; (B, 21, 3) and (B, 21, 2) -> (B, 21, d_q)."""
    return weights.query(T.concat([joints, projected], axis=-1))


def kqir_step(state: DecoderState, f_img: Tensor, weights: KqirWeights,
              template: HandTemplate) -> DecoderState:
    b = f_img.shape[0]
    joints = state.output.joints
    uv = project(joints, state.params.cam)
    queries = build_queries(joints, uv, weights)
    feats = weights.attn(queries, map_to_tokens(f_img))
    delta = weights.ref(feats.reshape(b, N_JOINTS * weights.d_q))
    params = HandParams.from_vector(state.params.vector() + delta)
    return DecoderState(params, decode(template, params), state.t + 1, feats)


def refine(coarse: DecoderState, f_img: Tensor, steps: int, weights, template: HandTemplate
           ) -> list[DecoderState]:
    """Apply ``steps`` refinement steps; returns every state including the coarse one.

    ``weights`` is one ``KqirWeights`` (shared across steps) or a list of them.
    """
    states = [coarse]
    for i in range(steps):
        w = weights[i] if isinstance(weights, (list, tuple)) else weights
        states.append(kqir_step(states[-1], f_img, w, template))
    return states

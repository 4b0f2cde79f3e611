"""Registry of finite-difference gradient checks, one or more per module.

Every check builds a tiny subgraph, randomises its parameters (zero-initialised
layers would otherwise hide upstream gradients) and compares backward against
central differences.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import PRIMITIVES, Tensor, grad_check

MODULES = ("tensorcore", "hand_model", "geometry_branch", "backbone_fusion", "decoder_kqir",
           "losses", "harness")


@dataclass
class Check:
    name: str
    module: str
    build: Callable[[np.random.Generator], tuple[Callable, list]]
    tol: float = 1e-5
    seeds: int = 1
    max_coords: int | None = None


@dataclass
class CheckResult:
    name: str
    module: str
    error: float
    tol: float
    worst_input: int
    worst_index: tuple
    coords: int
    seconds: float
    failure: str = ""

    @property
    def passed(self) -> bool:
        return not self.failure and self.error < self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        where = f" at input {self.worst_input} coord {self.worst_index}" if self.worst_input >= 0 else ""
        extra = f" ({self.failure})" if self.failure else ""
        return (f"{status} {self.module}/{self.name}: max_rel_err={self.error:.3e} tol={self.tol:.0e}"
                f"{where} [{self.coords} coords, {self.seconds:.2f}s]{extra}")


REGISTRY: dict[str, Check] = {}


def register(module: str, name: str, tol: float = 1e-5, seeds: int = 1, max_coords: int | None = None):
    if module not in MODULES:
        raise ValueError(f"unknown module {module!r}")

    def deco(build):
        key = f"{module}/{name}"
        if key in REGISTRY:
            raise ValueError(f"duplicate check {key}")
        REGISTRY[key] = Check(name, module, build, tol, seeds, max_coords)
        return build
    return deco


def _leaf(x) -> Tensor:
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def randomize(module, rng: np.random.Generator, scale: float = 0.3) -> None:
    for _, p in module.named_parameters():
        p.data = rng.standard_normal(p.shape) * scale


# ---------------------------------------------------------------------------
# tensorcore: one check per primitive, five seeds each
# ---------------------------------------------------------------------------

def _primitive_builds() -> dict[str, Callable]:
    def probe_fn(op):
        # scalar sum(out * W) with W fixed across calls, so no coordinate cancels by symmetry
        cache: dict = {}

        def fn(*xs):
            out = op(*xs)
            if "w" not in cache:
                cache["w"] = np.random.default_rng(99).standard_normal(out.shape)
            return T.tsum(out * Tensor(cache["w"]))
        return fn

    def b(op, make):
        def build(rng):
            return probe_fn(op), make(rng)
        return build

    n = lambda rng, *s: _leaf(rng.standard_normal(s))
    pos = lambda rng, *s: _leaf(np.abs(rng.standard_normal(s)) + 0.5)
    away = lambda rng, *s: _leaf(np.sign(r := rng.standard_normal(s)) * (np.abs(r) + 0.1))

    def clamp_leaf(rng):
        x = rng.uniform(-1, 2, (3, 4))
        x = np.where(np.abs(x - 1.0) < 0.05, x + 0.1, x)
        return [_leaf(x)]

    def getitem_basic(x):
        return x[1:, ::2]

    def getitem_adv(x):
        return x[np.array([0, 2, 2, 1])]

    return {
        "add": b(T.add, lambda r: [n(r, 3, 4), n(r, 4)]),
        "sub": b(T.sub, lambda r: [n(r, 3, 4), n(r, 3, 1)]),
        "mul": b(T.mul, lambda r: [n(r, 2, 3, 4), n(r, 3, 4)]),
        "div": b(T.div, lambda r: [n(r, 3, 4), pos(r, 4)]),
        "neg": b(lambda x: -x, lambda r: [n(r, 3, 4)]),
        "exp": b(T.exp, lambda r: [n(r, 3, 4)]),
        "log": b(T.log, lambda r: [pos(r, 3, 4)]),
        "sqrt": b(T.sqrt, lambda r: [pos(r, 3, 4)]),
        "abs": b(T.tabs, lambda r: [away(r, 3, 4)]),
        "square": b(T.square, lambda r: [n(r, 3, 4)]),
        "clamp_max": b(lambda x: T.clamp_max(x, 1.0), clamp_leaf),
        "sigmoid": b(T.sigmoid, lambda r: [n(r, 3, 4)]),
        "tanh": b(T.tanh, lambda r: [n(r, 3, 4)]),
        "gelu": b(T.gelu, lambda r: [n(r, 3, 4)]),
        "softmax": b(lambda x: T.softmax(x, axis=-1), lambda r: [n(r, 3, 5)]),
        "sum": b(lambda x: T.tsum(x, axis=1, keepdims=True), lambda r: [n(r, 3, 4, 2)]),
        "mean": b(lambda x: T.mean(x, axis=(0, 2)), lambda r: [n(r, 3, 4, 2)]),
        "reshape": b(lambda x: x.reshape(4, 3), lambda r: [n(r, 3, 4)]),
        "transpose": b(lambda x: x.transpose(2, 0, 1), lambda r: [n(r, 2, 3, 4)]),
        "getitem": b(lambda x: T.concat([getitem_basic(x), getitem_adv(x)[:, :2]], axis=0),
                     lambda r: [n(r, 3, 4)]),
        "concat": b(lambda x, y: T.concat([x, y], axis=1), lambda r: [n(r, 2, 3), n(r, 2, 2)]),
        "matmul": b(T.matmul, lambda r: [n(r, 2, 3, 4), n(r, 4, 5)]),
        "norm": b(lambda x: T.norm(x, axis=-1), lambda r: [n(r, 4, 3)]),
        "attention": b(T.attention, lambda r: [n(r, 2, 3, 4), n(r, 2, 5, 4), n(r, 2, 5, 3)]),
        "layer_norm": b(T.layer_norm, lambda r: [n(r, 3, 6), n(r, 6), n(r, 6)]),
        "group_norm": b(lambda x, w, bb: T.group_norm(x, w, bb, groups=2),
                        lambda r: [n(r, 2, 4, 3, 3), n(r, 4), n(r, 4)]),
        "conv2d": b(lambda x, w, bb: T.conv2d(x, w, bb, padding=1),
                    lambda r: [n(r, 2, 3, 5, 4), n(r, 2, 3, 3, 3), n(r, 2)]),
        "adaptive_avg_pool2d": b(lambda x: T.adaptive_avg_pool2d(x, (2, 3)), lambda r: [n(r, 1, 2, 5, 7)]),
    }


_SOFT = {"softmax", "attention"}
for _name, _build in _primitive_builds().items():
    register("tensorcore", _name, tol=1e-4 if _name in _SOFT else 1e-5, seeds=5)(_build)


# ---------------------------------------------------------------------------
# module subgraphs
# ---------------------------------------------------------------------------

def _fixed_weights(shape, seed=99):
    return Tensor(np.random.default_rng(seed).standard_normal(shape))


@register("hand_model", "rot6d_fk_project", tol=1e-5, max_coords=60)
def _hand(rng):
    from .hand_model import (HandParams, build_template, decode, identity_rot6d, rot6d_to_matrix)
    template = build_template(120, 7)
    r6 = _leaf(identity_rot6d(2).reshape(2, 16, 6) + 0.3 * rng.standard_normal((2, 16, 6)))
    betas = _leaf(rng.standard_normal((2, 10)) * 0.5)
    cam = _leaf(np.array([[8.0, 0.1, -0.7], [7.5, -0.2, -0.6]]))
    wj = _fixed_weights((2, 21, 2))
    wv = _fixed_weights((2, 120, 3), 98)

    def fn(r, b, c):
        out = decode(template, HandParams(rot6d_to_matrix(r), b, c, rot6d=r))
        return T.tsum(out.projected * wj) + T.tsum(out.vertices * wv)
    return fn, [r6, betas, cam]


@register("geometry_branch", "adapter", tol=1e-5, max_coords=40)
def _adapter(rng):
    from .geometry import GeoAdapter, GeoFeatureMap
    ad = GeoAdapter(4, 4, 2, 4, rng)
    randomize(ad, rng)
    x = _leaf(rng.standard_normal((2, 4, 4, 4)))
    params = [p for _, p in ad.named_parameters()]
    w = _fixed_weights((2, 8, 4, 4))

    def fn(inp, *_):
        return T.tsum(ad(GeoFeatureMap(inp, "raw", 4)).map * w)
    return fn, [x] + params


@register("geometry_branch", "tokenizer", tol=1e-5, max_coords=40)
def _tokenizer(rng):
    from .geometry import GeoFeatureMap, GeoTokenizer
    tok = GeoTokenizer(6, 8, (2, 2), rng, accept_raw=True)
    randomize(tok, rng)
    x = _leaf(rng.standard_normal((1, 6, 5, 4)))
    w = _fixed_weights((1, 4, 8))

    def fn(inp, *_):
        return T.tsum(tok(GeoFeatureMap(inp, "raw", 6)).tokens * w)
    return fn, [x] + [p for _, p in tok.named_parameters()]


@register("backbone_fusion", "gated_fusion", tol=1e-4, max_coords=40)
def _fusion(rng):
    from .backbone import FusionGate, TokenSequence, gated_fuse
    from .geometry import GeoTokens
    gate = FusionGate(8, rng, gate_init=-0.5, zero_init=False)
    randomize(gate, rng)
    rgb = _leaf(rng.standard_normal((2, 4, 8)))
    geo = _leaf(rng.standard_normal((2, 4, 8)))
    w = _fixed_weights((2, 4, 8))

    def fn(a, g, *_):
        return T.tsum(gated_fuse(TokenSequence(a, (2, 2), "rgb"), GeoTokens(g, (2, 2)), gate).tokens * w)
    return fn, [rgb, geo] + [p for _, p in gate.named_parameters()]


@register("backbone_fusion", "trunk_2_blocks", tol=1e-4, max_coords=30)
def _trunk(rng):
    from .backbone import Backbone
    bb = Backbone(4, 8, 2, 2, 2.0, (2, 2), rng, with_fusion=False)
    randomize(bb, rng)
    img = _leaf(rng.standard_normal((1, 3, 8, 8)))
    w = _fixed_weights((1, 8, 2, 2))

    def fn(x, *_):
        return T.tsum(bb(x) * w)
    return fn, [img] + [p for _, p in bb.named_parameters()]


@register("decoder_kqir", "mano_decoder_ief", tol=1e-4, max_coords=30)
def _decoder(rng):
    from .decoder import ManoDecoder
    dec = ManoDecoder(8, 8, 1, 2, rng)
    randomize(dec, rng, 0.2)
    f = _leaf(rng.standard_normal((2, 8, 2, 2)))
    w = _fixed_weights((2, 109))

    def fn(x, *_):
        return T.tsum(dec(x, 2).vector() * w)
    return fn, [f] + [p for _, p in dec.named_parameters()]


@register("decoder_kqir", "kqir_refine", tol=1e-4, max_coords=40)
def _kqir(rng):
    from .decoder import DecoderState, KqirWeights, refine
    from .hand_model import HandParams, build_template, decode, identity_rot6d
    template = build_template(120, 7)
    kw = KqirWeights(8, 4, 2, 8, rng, zero_last=False)
    randomize(kw, rng, 0.1)
    f = _leaf(rng.standard_normal((1, 8, 2, 2)))
    vec = np.concatenate([identity_rot6d(1).reshape(1, 96) + 0.1 * rng.standard_normal((1, 96)),
                          np.zeros((1, 10)), np.array([[8.0, 0.0, -0.7]])], axis=1)
    w = _fixed_weights((1, 21, 3))

    def fn(x, *_):
        params = HandParams.from_vector(Tensor(vec))
        coarse = DecoderState(params, decode(template, params), 0)
        return T.tsum(refine(coarse, x, 2, kw, template)[-1].output.joints * w)
    return fn, [f, kw.w_k, kw.w_v] + [p for _, p in kw.query.named_parameters()]


def _loss_batch(rng, b=2):
    from .data import synth_generate
    from .config import Config
    cfg = Config()
    cfg.model.image_h, cfg.model.image_w = 16, 16
    cfg.model.patch = 8
    ds = synth_generate(cfg, seed=int(rng.integers(1000)), n=b)
    return cfg, ds


def _term_check(term: str):
    def build(rng):
        from .hand_model import HandParams, build_template, decode
        from .decoder import DecoderState
        from .losses import stage_losses
        template = build_template(120, 7)
        cfg, ds = _loss_batch(rng)
        _, _, targets = ds.batch(np.arange(len(ds)), template)
        # start from a perturbed copy of the ground truth so every term is active
        from .hand_model import matrix_to_rot6d
        r6 = matrix_to_rot6d(Tensor(targets.rotmats)).data.reshape(len(ds), 96)
        vec = np.concatenate([r6 + 0.2 * rng.standard_normal(r6.shape),
                              targets.betas + 0.3 * rng.standard_normal(targets.betas.shape),
                              ds["cam"] + 0.05 * rng.standard_normal((len(ds), 3))], axis=1)
        leaf = _leaf(vec)

        def fn(v):
            params = HandParams.from_vector(v)
            st = DecoderState(params, decode(template, params), 0)
            return stage_losses(st, targets)[term]
        return fn, [leaf]
    return build


for _term in ("l2d", "l3d", "lbone", "lvert", "lglobal", "lpose", "lbetas", "lshape"):
    register("losses", _term, tol=1e-4, max_coords=60)(_term_check(_term))


@register("harness", "full_objective", tol=1e-4, max_coords=12)
def _full(rng):
    from .config import Config
    from .losses import objective
    from .model import GeoHand
    cfg = Config()
    m = cfg.model
    m.image_h = m.image_w = 16
    m.patch, m.dim, m.depth, m.heads = 8, 8, 1, 2
    m.geo_channels, m.geo_scale, m.side_channels = 8, 2, 4
    m.adapter_depth, m.adapter_width = 1, 4
    m.decoder_layers, m.decoder_dim, m.ief_iterations = 1, 8, 1
    m.kqir_steps, m.d_q, m.kqir_heads, m.kqir_hidden = 1, 4, 2, 8
    m.gate_init = 0.0
    model = GeoHand(m, seed=int(rng.integers(1000)))
    randomize(model, rng, 0.2)
    _, ds = _loss_batch(rng)
    image, geo, targets = ds.batch(np.arange(len(ds)), model.template)
    params = [p for _, p in model.named_parameters()]

    def fn(*_):
        return objective(model(image, geo).stages, targets, cfg.loss, True)[0]
    return fn, params


# ---------------------------------------------------------------------------

def run_checks(names=None, seed: int = 0, eps: float = 1e-6, log=None) -> list[CheckResult]:
    """Run the selected checks (all by default); never raises on a failing check."""
    keys = list(REGISTRY) if names is None else list(names)
    results = []
    for key in keys:
        chk = REGISTRY[key]
        t0 = time.perf_counter()
        worst = None
        coords = 0
        failure = ""
        try:
            for s in range(chk.seeds):
                rng = np.random.default_rng([seed, s])
                fn, inputs = chk.build(rng)
                r = grad_check(fn, inputs, eps=eps, seed=seed + s, detail=True, max_coords=chk.max_coords)
                coords += r.n_coords
                if worst is None or r.max_rel_err > worst.max_rel_err:
                    worst = r
        except Exception as exc:  # a crashing check is a failing check
            failure = f"{type(exc).__name__}: {exc}"
        res = CheckResult(chk.name, chk.module, worst.max_rel_err if worst else float("nan"), chk.tol,
                          worst.worst_input if worst else -1, worst.worst_index if worst else (),
                          coords, time.perf_counter() - t0, failure)
        results.append(res)
        if log is not None:
            log(res.line())
    return results


def report(results: list[CheckResult]) -> str:
    lines = [r.line() for r in results]
    failed = [r for r in results if not r.passed]
    per_module = {m: sum(r.module == m for r in results) for m in MODULES}
    lines.append("checks per module: " + ", ".join(f"{m}={c}" for m, c in per_module.items()))
    lines.append(f"{len(results) - len(failed)}/{len(results)} passed")
    return "\n".join(lines)


def uncovered_primitives() -> list[str]:
    """Registered primitives with no tensorcore check (should be empty)."""
    covered = {c.name for c in REGISTRY.values() if c.module == "tensorcore"}
    return sorted(set(PRIMITIVES) - covered)

import numpy as np
import pytest
from scipy.special import erf

from geohand.decoder import (DecoderState, KqirWeights, ManoDecoder, build_queries, kqir_step,
                             mean_params, refine)
from geohand.gradcheck import randomize, run_checks
from geohand.hand_model import (HandParams, bone_lengths, build_template, decode,
                                forward_kinematics, project)
from geohand.tensor import Tensor

TEMPLATE = build_template(120, 7)
CAM = (8.0, 0.1, -0.7)


def _ln(x, mod):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + mod.eps) * mod.weight.data + mod.bias.data


def _lin(x, mod):
    out = x @ mod.weight.data
    return out + mod.bias.data if mod.bias is not None else out


def _mlp(x, mod):
    h = _lin(x, mod.fc1)
    return _lin(0.5 * h * (1.0 + erf(h / np.sqrt(2.0))), mod.fc2)


def _mha(xq, xkv, mod):
    q = _lin(xq, mod.q) if mod.q is not None else xq
    k, v = _lin(xkv, mod.k), _lin(xkv, mod.v)
    b, nq, d = q.shape
    h = mod.heads
    hd = d // h
    split = lambda t: t.reshape(b, -1, h, hd).transpose(0, 2, 1, 3)
    q, k, v = split(q), split(k), split(v)
    s = q @ k.transpose(0, 1, 3, 2) / np.sqrt(hd)
    p = np.exp(s - s.max(-1, keepdims=True))
    p /= p.sum(-1, keepdims=True)
    o = (p @ v).transpose(0, 2, 1, 3).reshape(b, nq, d)
    return _lin(o, mod.out)


def decoder_oracle(dec, f_img, iterations):
    b, d, hp, wp = f_img.shape
    mem = _ln(f_img.reshape(b, d, hp * wp).transpose(0, 2, 1), dec.mem_norm)
    vec = mean_params(b, dec.mean_cam)
    for _ in range(iterations):
        x = dec.token.data + _lin(vec, dec.embed).reshape(b, 1, -1)
        for layer in dec.layers:
            x = x + _mha(_ln(x, layer.norm_q), mem, layer.attn)
            x = x + _mlp(_ln(x, layer.norm_mlp), layer.mlp)
        vec = vec + _lin(_ln(x, dec.out_norm).reshape(b, -1), dec.head)
    return vec


def test_zero_ief_is_mean_pose():
    dec = ManoDecoder(16, 16, 2, 2, np.random.default_rng(0), CAM)
    f = Tensor(np.random.default_rng(1).standard_normal((2, 16, 2, 2)))
    assert np.array_equal(dec(f, 0).vector().data, mean_params(2, CAM))


def test_ief_matches_unrolled_oracle():
    rng = np.random.default_rng(2)
    dec = ManoDecoder(16, 16, 2, 2, rng, CAM)
    randomize(dec, rng, 0.2)
    f = rng.standard_normal((2, 16, 4, 3))
    assert np.abs(dec(Tensor(f), 3).vector().data - decoder_oracle(dec, f, 3)).max() < 1e-10


def test_identical_rows_identical_outputs():
    dec = ManoDecoder(16, 16, 2, 2, np.random.default_rng(3), CAM)
    row = np.random.default_rng(4).standard_normal((1, 16, 2, 2))
    out = dec(Tensor(np.concatenate([row, row])), 3).vector().data
    assert np.array_equal(out[0], out[1])


def _coarse(batch=1, seed=5):
    rng = np.random.default_rng(seed)
    vec = mean_params(batch, CAM)
    vec[:, :96] += 0.1 * rng.standard_normal((batch, 96))
    vec[:, 96:106] = 0.3 * rng.standard_normal((batch, 10))
    params = HandParams.from_vector(Tensor(vec))
    return DecoderState(params, decode(TEMPLATE, params), 0)


def test_query_examples():
    rng = np.random.default_rng(6)
    kw = KqirWeights(16, 64, 4, 32, rng)
    j = Tensor(np.tile(rng.standard_normal(3), (2, 21, 1)))
    u = Tensor(np.tile(rng.standard_normal(2), (2, 21, 1)))
    q = build_queries(j, u, kw).data
    assert q.shape == (2, 21, 64)
    assert np.array_equal(q[:, 1:], np.broadcast_to(q[:, :1], q[:, 1:].shape))
    zero = build_queries(Tensor(np.zeros((1, 21, 3))), Tensor(np.zeros((1, 21, 2))), kw).data
    assert np.array_equal(zero, np.zeros((1, 21, 64)))


def test_zero_init_step_is_identity():
    kw = KqirWeights(16, 8, 2, 32, np.random.default_rng(7))
    state = _coarse()
    f = Tensor(np.random.default_rng(8).standard_normal((1, 16, 2, 2)))
    nxt = kqir_step(state, f, kw, TEMPLATE)
    assert nxt.t == 1
    assert np.array_equal(nxt.params.vector().data, state.params.vector().data)
    states = refine(state, f, 5, kw, TEMPLATE)
    assert np.array_equal(states[-1].output.joints.data, state.output.joints.data)


def test_uniform_attention_gives_mean_value():
    rng = np.random.default_rng(9)
    kw = KqirWeights(16, 8, 2, 32, rng)
    kw.attn.k.weight.data[:] = 0.0
    mem = rng.standard_normal((1, 6, 16))
    q = rng.standard_normal((1, 21, 8))
    h = kw.attn(Tensor(q), Tensor(mem)).data
    ref = _lin(_lin(mem, kw.attn.v).mean(axis=1, keepdims=True), kw.attn.out)
    assert np.allclose(h, np.broadcast_to(ref, h.shape), atol=1e-13)


def test_key_permutation_invariance():
    rng = np.random.default_rng(10)
    kw = KqirWeights(16, 8, 2, 32, rng)
    mem = rng.standard_normal((1, 6, 16))
    q = Tensor(rng.standard_normal((1, 21, 8)))
    perm = rng.permutation(6)
    a = kw.attn(q, Tensor(mem)).data
    b = kw.attn(q, Tensor(mem[:, perm])).data
    assert np.allclose(a, b, atol=1e-13)


def test_refine_composition():
    rng = np.random.default_rng(11)
    kw = KqirWeights(16, 8, 2, 32, rng, zero_last=False)
    randomize(kw, rng, 0.05)
    state = _coarse(2)
    f = Tensor(rng.standard_normal((2, 16, 2, 2)))
    assert refine(state, f, 0, kw, TEMPLATE)[-1] is state
    two = refine(state, f, 2, kw, TEMPLATE)[-1]
    manual = kqir_step(kqir_step(state, f, kw, TEMPLATE), f, kw, TEMPLATE)
    assert np.array_equal(two.params.vector().data, manual.params.vector().data)
    # queries see the module's own projection of the previous joints
    uv = project(state.output.joints, state.params.cam).data
    assert np.array_equal(uv, state.output.projected.data)


def test_refined_joints_keep_bone_rigidity():
    rng = np.random.default_rng(12)
    kw = KqirWeights(16, 8, 2, 32, rng, zero_last=False)
    randomize(kw, rng, 0.05)
    state = _coarse(1)
    out = refine(state, Tensor(rng.standard_normal((1, 16, 2, 2))), 2, kw, TEMPLATE)[-1]
    rest = forward_kinematics(TEMPLATE, Tensor(np.tile(np.eye(3), (1, 16, 1, 1))), out.params.betas)
    d0 = bone_lengths(rest.joints).data
    assert np.abs(bone_lengths(out.output.joints).data - d0).max() < 1e-9


def test_kqir_gradients():
    res = run_checks(["decoder_kqir/kqir_refine", "decoder_kqir/mano_decoder_ief"])
    assert all(r.error < 1e-4 for r in res)

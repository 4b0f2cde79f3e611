import numpy as np
import pytest

from geohand import tensor as T
from geohand.config import Config
from geohand.data import synth_generate
from geohand.geometry import (GeoAdapter, GeoFeatureMap, GeometryStub, GeoTokenizer,
                              MissingGeometryError)
from geohand.gradcheck import run_checks
from geohand.losses import objective
from geohand.model import GeoHand
from geohand.tensor import Tensor, backward


@pytest.fixture(scope="module")
def sample():
    cfg = Config()
    ds = synth_generate(cfg, n=2)
    return cfg, ds


def test_frozen_random_is_deterministic():
    img = np.random.default_rng(0).random((2, 3, 64, 48))
    a = GeometryStub("frozen-random", (64, 48), (16, 12), 16, seed=5)(img).map.data
    b = GeometryStub("frozen-random", (64, 48), (16, 12), 16, seed=5)(img).map.data
    assert a.tobytes() == b.tobytes()


def test_oracle_equals_pooled_ground_truth(sample):
    cfg, ds = sample
    geo = ds["geometry"].astype(np.float64)
    img = ds["image"].astype(np.float64)
    raw = GeometryStub("oracle", (64, 48), (16, 12), 16)(img, geo).map.data
    # independent pooling: mean over each 4x4 cell
    ref = geo.reshape(2, 6, 16, 4, 12, 4).mean(axis=(3, 5))
    assert np.allclose(raw[:, :6], ref, atol=1e-12)


def test_oracle_needs_geometry():
    with pytest.raises(MissingGeometryError):
        GeometryStub("oracle", (64, 48), (16, 12))(np.zeros((1, 3, 64, 48)))


def test_stub_receives_no_gradient(sample):
    cfg, ds = sample
    model = GeoHand(cfg.model)
    before = {k: v.copy() for k, v in model.stub.buffers().items()}
    assert not any(name.startswith("stub") for name, _ in model.named_parameters())
    img, geo, targets = ds.batch([0, 1], model.template)
    loss, _ = objective(model(img, geo).stages, targets, cfg.loss)
    backward(loss)
    for k, v in model.stub.buffers().items():
        assert np.array_equal(v, before[k])


def test_adapter_channel_counts():
    ad = GeoAdapter(16, 128, 2, 32, np.random.default_rng(0))
    raw = GeoFeatureMap(Tensor(np.random.default_rng(1).standard_normal((1, 16, 8, 6))), "raw", 16)
    aug = ad(raw)
    assert aug.kind == "augmented" and aug.channels == 144


def test_zero_init_adapter_is_residual_identity():
    ad = GeoAdapter(16, 8, 2, 32, np.random.default_rng(0))
    ad.proj.bias.data = np.arange(8.0)
    x = np.random.default_rng(1).standard_normal((2, 16, 8, 6))
    aug = ad(GeoFeatureMap(Tensor(x), "raw", 16)).map.data
    assert np.array_equal(aug[:, :16], x)
    assert np.array_equal(aug[:, 16:], np.broadcast_to(np.arange(8.0)[None, :, None, None], (2, 8, 8, 6)))


def test_adapter_channel_mismatch():
    ad = GeoAdapter(16, 8, 2, 32, np.random.default_rng(0))
    with pytest.raises(T.ShapeError, match="16"):
        ad(GeoFeatureMap(Tensor(np.zeros((1, 12, 4, 4))), "raw", 12))


def test_adapter_gradient():
    assert run_checks(["geometry_branch/adapter"])[0].error < 1e-5


def test_tokenizer_shapes():
    rng = np.random.default_rng(0)
    tok = GeoTokenizer(144, 128, (4, 3), rng)
    out = tok(GeoFeatureMap(Tensor(rng.standard_normal((2, 144, 16, 12))), "augmented", 16, 128))
    assert out.tokens.shape == (2, 12, 128)
    big = GeoTokenizer(144, 1280, (16, 12), rng)
    out = big(GeoFeatureMap(Tensor(rng.standard_normal((1, 144, 64, 48))), "augmented", 16, 128))
    assert out.tokens.shape == (1, 192, 1280)


def test_constant_map_tokens_differ_only_by_position():
    tok = GeoTokenizer(6, 8, (2, 3), np.random.default_rng(0), accept_raw=True)
    out = tok(GeoFeatureMap(Tensor(np.full((1, 6, 8, 9), 0.7)), "raw", 6)).tokens.data[0]
    base = out - tok.pos.data
    assert np.allclose(base, base[0], atol=1e-14)


def test_zero_map_zero_position_gives_bias():
    tok = GeoTokenizer(6, 8, (2, 3), np.random.default_rng(0), accept_raw=True)
    tok.pos.data = np.zeros_like(tok.pos.data)
    tok.proj.bias.data = np.arange(8.0)
    out = tok(GeoFeatureMap(Tensor(np.zeros((1, 6, 4, 6))), "raw", 6)).tokens.data[0]
    assert np.array_equal(out, np.tile(np.arange(8.0), (6, 1)))


def test_grid_larger_than_map():
    tok = GeoTokenizer(6, 8, (5, 3), np.random.default_rng(0), accept_raw=True)
    with pytest.raises(T.ShapeError):
        tok(GeoFeatureMap(Tensor(np.zeros((1, 6, 4, 6))), "raw", 6))


def test_row_major_impulse():
    tok = GeoTokenizer(1, 4, (3, 4), np.random.default_rng(0), accept_raw=True)
    tok.pos.data = np.zeros_like(tok.pos.data)
    for r in range(3):
        for c in range(4):
            m = np.zeros((1, 1, 3, 4))
            m[0, 0, r, c] = 1.0
            out = tok(GeoFeatureMap(Tensor(m), "raw", 1)).tokens.data[0]
            lit = np.flatnonzero(np.abs(out).sum(axis=1) > 0)
            assert lit.tolist() == [r * 4 + c]

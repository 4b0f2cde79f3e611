"""Synthetic hand samples and the ``GHDS`` dataset container.

Layout (little-endian): magic ``GHDS``, version u8, sample count u32,
image height/width u32, template v_count/seed u32, field count u16, then per
field: name (u8 length + ascii), dtype code u8 (0 = f4, 1 = f8), rank u8,
extents u32 each.  Records follow back to back, one per sample, fields in
header order.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import Config
from .hand_model import (N_BETAS, N_JOINTS, N_NODES, HandTemplate, axis_angle_to_matrix,
                         build_template, forward_kinematics, project)
from .losses import Targets
from .model import default_camera
from .tensor import Tensor, no_grad

MAGIC = b"GHDS"
VERSION = 1
_DTYPES = {0: "<f4", 1: "<f8"}
_CODES = {v: k for k, v in _DTYPES.items()}
LIGHT = np.array([0.3, 0.5, -1.0]) / np.linalg.norm([0.3, 0.5, -1.0])


class DatasetFormatError(ValueError):
    pass


def field_spec(h: int, w: int) -> list[tuple[str, str, tuple[int, ...]]]:
    return [
        ("image", "<f4", (3, h, w)),
        ("geometry", "<f4", (6, h, w)),
        ("joints2d", "<f8", (N_JOINTS, 2)),
        ("mask_uv", "<f8", (N_JOINTS,)),
        ("joints3d", "<f8", (N_JOINTS, 3)),
        ("mask_xyz", "<f8", ()),
        ("rotmats", "<f8", (N_NODES, 3, 3)),
        ("betas", "<f8", (N_BETAS,)),
        ("cam", "<f8", (3,)),
    ]


@dataclass
class Dataset:
    records: np.ndarray          # structured array, one row per sample
    image_hw: tuple[int, int]
    v_count: int
    template_seed: int

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.records[name]

    # -- serialisation ------------------------------------------------------
    def to_bytes(self) -> bytes:
        h, w = self.image_hw
        spec = field_spec(h, w)
        head = [MAGIC, struct.pack("<BIIIIIH", VERSION, len(self), h, w, self.v_count,
                                   self.template_seed, len(spec))]
        for name, dt, shape in spec:
            enc = name.encode("ascii")
            head.append(struct.pack("<B", len(enc)) + enc)
            head.append(struct.pack("<BB", _CODES[dt], len(shape)))
            head.append(struct.pack(f"<{len(shape)}I", *shape))
        return b"".join(head) + self.records.tobytes()

    def save(self, path: str | Path) -> None:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(self.to_bytes())
        except OSError as exc:
            raise OSError(f"cannot write dataset to {path}: {exc}") from exc

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Dataset":
        if buf[:4] != MAGIC:
            raise DatasetFormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
        off = 4
        version, count, h, w, v_count, tseed, n_fields = struct.unpack_from("<BIIIIIH", buf, off)
        off += struct.calcsize("<BIIIIIH")
        if version != VERSION:
            raise DatasetFormatError(f"unsupported dataset version {version}")
        fields = []
        for _ in range(n_fields):
            (n,) = struct.unpack_from("<B", buf, off)
            name = buf[off + 1:off + 1 + n].decode("ascii")
            off += 1 + n
            code, rank = struct.unpack_from("<BB", buf, off)
            off += 2
            shape = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            fields.append((name, _DTYPES[code], tuple(shape)))
        dtype = np.dtype(fields)
        expected = off + count * dtype.itemsize
        if len(buf) != expected:
            raise DatasetFormatError(f"dataset body is {len(buf) - off} bytes, header declares "
                                     f"{count} x {dtype.itemsize}")
        records = np.frombuffer(buf, dtype=dtype, count=count, offset=off).copy()
        return cls(records, (h, w), v_count, tseed)

    @classmethod
    def load(cls, path: str | Path) -> "Dataset":
        return cls.from_bytes(Path(path).read_bytes())

    # -- batching -----------------------------------------------------------
    def subset(self, indices) -> "Dataset":
        return Dataset(self.records[np.asarray(indices)], self.image_hw, self.v_count, self.template_seed)

    def batch(self, indices, template: HandTemplate) -> tuple[np.ndarray, np.ndarray, Targets]:
        """Images, geometry maps and targets; GT vertices are decoded from GT parameters."""
        if template.v_count != self.v_count:
            raise DatasetFormatError(
                f"dataset built for a {self.v_count}-vertex template, model uses {template.v_count}")
        r = self.records[np.asarray(indices)]
        with no_grad():
            gt = forward_kinematics(template, Tensor(r["rotmats"]), Tensor(r["betas"]))
        targets = Targets(r["joints2d"].copy(), r["mask_uv"].copy(), r["joints3d"].copy(),
                          r["mask_xyz"].copy(), r["rotmats"].copy(), r["betas"].copy(),
                          gt.vertices.data, gt.joints.data[:, 0])
        return r["image"].astype(np.float64), r["geometry"].astype(np.float64), targets


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def pixel_centres(h: int, w: int) -> np.ndarray:
    """(H*W, 2) normalised coordinates of pixel centres; +y points up, row 0 is the top."""
    cols = (np.arange(w) + 0.5) / w * 2.0 - 1.0
    rows = 1.0 - (np.arange(h) + 0.5) / h * 2.0
    xx, yy = np.meshgrid(cols, rows)
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


def rasterize(verts: np.ndarray, faces: np.ndarray, cam: np.ndarray, h: int, w: int
              ) -> tuple[np.ndarray, np.ndarray]:
    """Z-buffered flat-shaded rendering of one mesh.

    Returns the grayscale image (H, W) and the geometry map (6, H, W) holding
    the visible surface point and its camera-facing face normal; background
    pixels are 0 in every channel.
    """
    uv = verts[:, :2] * cam[0] + cam[1:3]
    pix = pixel_centres(h, w)
    depth = np.full(len(pix), np.inf)
    point = np.zeros((len(pix), 3))
    normal = np.zeros((len(pix), 3))
    tri = verts[faces]
    fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    fn_len = np.linalg.norm(fn, axis=1, keepdims=True)
    fn = np.where(fn_len > 0, fn / np.where(fn_len > 0, fn_len, 1.0), 0.0)
    fn = np.where(fn[:, 2:3] > 0, -fn, fn)
    t2 = uv[faces]                                            # (F, 3, 2)
    for start in range(0, len(faces), 256):
        sl = slice(start, start + 256)
        a, b, c = t2[sl, 0, None], t2[sl, 1, None], t2[sl, 2, None]   # (f, 1, 2)
        v0, v1 = b - a, c - a
        v2 = pix[None] - a                                    # (f, P, 2)
        den = v0[..., 0] * v1[..., 1] - v1[..., 0] * v0[..., 1]   # (f, 1)
        ok = np.abs(den) > 1e-12
        den = np.where(ok, den, 1.0)
        l1 = (v2[..., 0] * v1[..., 1] - v1[..., 0] * v2[..., 1]) / den
        l2 = (v0[..., 0] * v2[..., 1] - v2[..., 0] * v0[..., 1]) / den
        l0 = 1.0 - l1 - l2
        inside = ok & (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
        t3 = tri[sl]
        z = l0 * t3[:, 0, None, 2] + l1 * t3[:, 1, None, 2] + l2 * t3[:, 2, None, 2]
        z = np.where(inside, z, np.inf)
        best = z.argmin(axis=0)
        zbest = z[best, np.arange(len(pix))]
        upd = zbest < depth
        if not upd.any():
            continue
        k = best[upd]
        lam = np.stack([l0[k, upd], l1[k, upd], l2[k, upd]], axis=1)
        point[upd] = np.einsum("pk,pkc->pc", lam, t3[k])
        normal[upd] = fn[sl][k]
        depth[upd] = zbest[upd]
    fg = np.isfinite(depth)
    shade = np.where(fg, 0.2 + 0.8 * np.abs(normal @ LIGHT), 0.0)
    geo = np.concatenate([point, normal], axis=1).T.reshape(6, h, w)
    return shade.reshape(h, w), geo


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def sample_params(rng: np.random.Generator, n: int, cfg: Config, template: HandTemplate
                  ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    d = cfg.data
    axes = rng.standard_normal((n, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    root_aa = axes * rng.uniform(0.0, d.root_angle, (n, 1))
    pose_aa = rng.uniform(-d.pose_angle, d.pose_angle, (n, N_NODES - 1, 3))
    rot = axis_angle_to_matrix(np.concatenate([root_aa[:, None], pose_aa], axis=1))
    betas = np.clip(rng.standard_normal((n, N_BETAS)) * d.beta_std, -3 * d.beta_std, 3 * d.beta_std)
    base = np.array(default_camera(template, d.cam_scale))
    jit = rng.uniform(-d.cam_jitter, d.cam_jitter, (n, 3))
    cam = base + jit * np.array([d.cam_scale, 1.0, 1.0])
    return rot, betas, cam


def synth_generate(cfg: Config, seed: int | None = None, n: int | None = None,
                   template: HandTemplate | None = None) -> Dataset:
    """Deterministic synthetic dataset for (cfg, seed)."""
    seed = cfg.seed if seed is None else seed
    n = cfg.data.samples if n is None else n
    m, d = cfg.model, cfg.data
    template = template or build_template(m.v_count, m.template_seed)
    h, w = m.image_h, m.image_w
    rng = np.random.default_rng(seed)
    rot, betas, cam = sample_params(rng, n, cfg, template)
    with no_grad():
        out = forward_kinematics(template, Tensor(rot), Tensor(betas))
        uv = project(out.joints, Tensor(cam)).data
    rec = np.zeros(n, dtype=np.dtype(field_spec(h, w)))
    for i in range(n):
        shade, geo = rasterize(out.vertices.data[i], template.faces, cam[i], h, w)
        img = np.repeat(shade[None], 3, axis=0)
        if d.image_noise > 0:
            img = img + rng.standard_normal(img.shape) * d.image_noise
        rec["image"][i] = img
        rec["geometry"][i] = geo
    j2d = uv.copy()
    if d.joint2d_noise > 0:
        j2d = j2d + rng.standard_normal(j2d.shape) * d.joint2d_noise
    rec["joints2d"] = j2d
    rec["mask_uv"] = (rng.random((n, N_JOINTS)) >= d.mask_uv_rate).astype(np.float64)
    rec["joints3d"] = out.joints.data
    rec["mask_xyz"] = (rng.random(n) >= d.mask_xyz_rate).astype(np.float64)
    rec["rotmats"] = rot
    rec["betas"] = betas
    rec["cam"] = cam
    return Dataset(rec, (h, w), m.v_count, m.template_seed)

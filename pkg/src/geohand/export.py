"""Mesh (Wavefront OBJ) and 2D skeleton (SVG) export."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .hand_model import BONES, N_JOINTS


def write_obj(path: str | Path, vertices: np.ndarray, faces: np.ndarray) -> None:
    lines = [f"v {x:.7f} {y:.7f} {z:.7f}" for x, y, z in np.asarray(vertices, dtype=np.float64)]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(faces)]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


def to_pixels(uv: np.ndarray, h: int, w: int) -> np.ndarray:
    """Normalised [-1, 1] coordinates (+y up) to pixel coordinates (+y down)."""
    uv = np.asarray(uv, dtype=np.float64)
    return np.stack([(uv[:, 0] + 1.0) * 0.5 * w, (1.0 - uv[:, 1]) * 0.5 * h], axis=1)


def skeleton_svg(uv: np.ndarray, h: int, w: int, image: np.ndarray | None = None,
                 edges: np.ndarray = BONES) -> str:
    """SVG with the image extent as a rect, one <line> per bone and one <circle> per joint.

    When ``image`` (H, W) grayscale in [0, 1] is given, its pixels are drawn
    as rects underneath; only the bones use <line>.
    """
    if uv.shape != (N_JOINTS, 2):
        raise ValueError(f"expected ({N_JOINTS}, 2) joints, got {uv.shape}")
    px = to_pixels(uv, h, w)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
           f'<rect x="0" y="0" width="{w}" height="{h}" fill="black"/>']
    if image is not None:
        img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
        for r in range(h):
            for c in range(w):
                v = int(round(img[r, c] * 255))
                if v:
                    out.append(f'<rect x="{c}" y="{r}" width="1" height="1" fill="rgb({v},{v},{v})"/>')
    for a, b in edges:
        out.append(f'<line x1="{px[a, 0]:.3f}" y1="{px[a, 1]:.3f}" x2="{px[b, 0]:.3f}" '
                   f'y2="{px[b, 1]:.3f}" stroke="red" stroke-width="0.6"/>')
    for x, y in px:
        out.append(f'<circle cx="{x:.3f}" cy="{y:.3f}" r="0.8" fill="yellow"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def export_sample(model, dataset, index: int, out_dir: str | Path) -> tuple[Path, Path]:
    """Run the model on one sample; write ``sample_<i>.obj`` and ``sample_<i>.svg``."""
    from .tensor import no_grad
    if not 0 <= index < len(dataset):
        raise IndexError(f"sample index {index} out of range for a dataset of {len(dataset)}")
    image, geo, _ = dataset.batch([index], model.template)
    with no_grad():
        final = model(image, geo).final
    out_dir = Path(out_dir)
    obj = out_dir / f"sample_{index}.obj"
    svg = out_dir / f"sample_{index}.svg"
    write_obj(obj, final.output.vertices.data[0], model.template.faces)
    h, w = dataset.image_hw
    svg.write_text(skeleton_svg(final.output.projected.data[0], h, w, image[0, 0]))
    return obj, svg

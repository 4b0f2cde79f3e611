"""Training loop, evaluation and ablation switches."""
from __future__ import annotations

import hashlib
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .config import Config, ConfigError
from .data import Dataset, DatasetFormatError, synth_generate
from .hand_model import HandParams, HandTemplate, decode
from .losses import TERMS, _WEIGHT_KEYS, objective
from .metrics import METRIC_NAMES, aggregate, sample_metrics
from .model import GeoHand
from .optim import AdamW
from .tensor import Tensor, backward, no_grad

LOG_HEADER = ("step",) + ("total",) + TERMS + ("sigma_g",)


class NonFiniteLossError(FloatingPointError):
    pass


class FrozenPriorModified(RuntimeError):
    pass


def check_compatible(cfg: Config, dataset: Dataset) -> None:
    m = cfg.model
    if dataset.image_hw != (m.image_h, m.image_w):
        raise DatasetFormatError(f"dataset images are {dataset.image_hw[0]}x{dataset.image_hw[1]}, "
                                 f"config expects {m.image_h}x{m.image_w}")
    if dataset.v_count != m.v_count or dataset.template_seed != m.template_seed:
        raise DatasetFormatError(f"dataset template (v_count={dataset.v_count}, seed={dataset.template_seed}) "
                                 f"does not match config (v_count={m.v_count}, seed={m.template_seed})")


def build_model(cfg: Config, template: HandTemplate | None = None) -> GeoHand:
    return GeoHand(cfg.model, seed=cfg.seed, cam_scale=cfg.data.cam_scale, template=template)


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[GeoHand, Config]:
    cfg = ckpt.config
    model = build_model(cfg, ckpt.template())
    model.load_state_dict(ckpt.state_dict())
    return model, cfg


def stub_hash(model: GeoHand) -> str:
    h = hashlib.sha256()
    if model.stub is not None:
        for name, arr in sorted(model.stub.buffers().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def format_row(row: dict) -> str:
    vals = [str(int(row["step"]))]
    for k in LOG_HEADER[1:]:
        v = row[k]
        vals.append("" if v is None else f"{v:.9g}")
    return ",".join(vals)


@dataclass
class TrainResult:
    model: GeoHand
    checkpoint: Checkpoint
    log: list[dict] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def initial_loss(self) -> float:
        return self.log[0]["total"]

    @property
    def final_loss(self) -> float:
        return self.log[-1]["total"]


def train(cfg: Config, dataset: Dataset | None = None, log_path: str | Path | None = None,
          max_steps: int | None = None, progress=None) -> TrainResult:
    """Mini-batch AdamW over the full objective; one log row per step.

    Shuffling uses ``default_rng(seed + epoch)`` so a (config, seed) pair
    fixes every batch.  The logged total is the loss that produced that step's
    gradient, i.e. row 0 is the loss of the initial parameters.
    """
    cfg.validate()
    dataset = dataset if dataset is not None else synth_generate(cfg)
    check_compatible(cfg, dataset)
    model = build_model(cfg)
    opt = AdamW(model.named_parameters(), lr=cfg.optim.lr, betas=(cfg.optim.beta1, cfg.optim.beta2),
                eps=cfg.optim.eps, weight_decay=cfg.optim.weight_decay)
    frozen_before = stub_hash(model)
    n = len(dataset)
    bs = min(cfg.optim.batch_size, n)
    log: list[dict] = []
    fh = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        fh = open(log_path, "w")
        fh.write(",".join(LOG_HEADER) + "\n")
    t0 = time.perf_counter()
    step = 0
    try:
        for epoch in range(cfg.optim.epochs):
            order = np.random.default_rng(cfg.seed + epoch).permutation(n)
            for start in range(0, n, bs):
                if max_steps is not None and step >= max_steps:
                    break
                idx = order[start:start + bs]
                image, geo, targets = dataset.batch(idx, model.template)
                model.zero_grad()
                pred = model(image, geo)
                loss, report = objective(pred.stages, targets, cfg.loss, cfg.model.deep_supervision)
                bad = [k for k in TERMS if not math.isfinite(report[k])]
                if bad or not math.isfinite(report["total"]):
                    raise NonFiniteLossError(f"non-finite loss at step {step}: term(s) "
                                             f"{', '.join(bad) or 'total'}")
                backward(loss)
                row = {"step": step, **report, "sigma_g": model.sigma_g()}
                log.append(row)
                if fh is not None:
                    fh.write(format_row(row) + "\n")
                if progress is not None:
                    progress(row)
                opt.step()
                step += 1
    finally:
        if fh is not None:
            fh.close()
    if stub_hash(model) != frozen_before:
        raise FrozenPriorModified("geometry stub buffers changed during training")
    ckpt = Checkpoint.from_model(model, cfg, step, opt)
    return TrainResult(model, ckpt, log, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    metrics: dict[str, float]             # final stage
    coarse: dict[str, float]              # coarse decoder output
    per_sample: list[dict[str, float]]

    def csv(self) -> str:
        lines = ["metric,value"]
        lines += [f"{k},{self.metrics[k]:.6f}" for k in METRIC_NAMES]
        lines += [f"coarse_{k},{self.coarse[k]:.6f}" for k in METRIC_NAMES]
        return "\n".join(lines) + "\n"


def _rows(j_pred, v_pred, j_gt, v_gt) -> list[dict[str, float]]:
    return [sample_metrics(j_pred[i], j_gt[i], v_pred[i], v_gt[i]) for i in range(len(j_pred))]


def evaluate(model: GeoHand, dataset: Dataset, batch_size: int = 16, kqir_steps: int | None = None,
             out_path: str | Path | None = None) -> EvalResult:
    """All six metrics for the final and the coarse stage over the whole dataset."""
    if dataset.v_count != model.template.v_count:
        raise DatasetFormatError(f"dataset built for {dataset.v_count} vertices, model has "
                                 f"{model.template.v_count}")
    cfg = model.cfg
    if dataset.image_hw != (cfg.image_h, cfg.image_w):
        raise DatasetFormatError(f"dataset images are {dataset.image_hw}, model expects "
                                 f"{(cfg.image_h, cfg.image_w)}")
    final_rows, coarse_rows = [], []
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            idx = np.arange(start, min(start + batch_size, len(dataset)))
            image, geo, targets = dataset.batch(idx, model.template)
            pred = model(image, geo, kqir_steps=kqir_steps)
            for rows, st in ((final_rows, pred.final), (coarse_rows, pred.coarse)):
                rows += _rows(st.output.joints.data, st.output.vertices.data,
                              targets.joints3d, targets.vertices)
    res = EvalResult(aggregate(final_rows), aggregate(coarse_rows), final_rows)
    if out_path is not None:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_text(res.csv())
    return res


def evaluate_params(template: HandTemplate, params: HandParams, dataset: Dataset) -> dict[str, float]:
    """Metrics for externally supplied parameters (e.g. the ground truth itself)."""
    _, _, targets = dataset.batch(np.arange(len(dataset)), template)
    with no_grad():
        out = decode(template, params)
    return aggregate(_rows(out.joints.data, out.vertices.data, targets.joints3d, targets.vertices))


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------

ABLATIONS = ("gate_off", "no_adapter", "kqir_steps=K", "drop_loss=<term>")


def apply_ablation(cfg: Config, spec: str) -> Config:
    """Return a copy of ``cfg`` with one ablation switch applied."""
    out = cfg.copy()
    key, _, value = spec.partition("=")
    if key == "gate_off" and not value:
        out.model.gate_bypass = True
    elif key == "no_adapter" and not value:
        out.model.use_adapter = False
    elif key == "kqir_steps" and value:
        try:
            k = int(value)
        except ValueError:
            raise ConfigError(f"kqir_steps needs an integer, got {value!r}") from None
        out.model.kqir_steps = k
    elif key == "drop_loss" and value:
        if value not in TERMS:
            raise ConfigError(f"unknown loss term {value!r}; choose from {', '.join(TERMS)}")
        setattr(out.loss, _WEIGHT_KEYS[value], 0.0)
    else:
        raise ConfigError(f"unknown ablation {spec!r}; choose from {', '.join(ABLATIONS)}")
    out.validate()
    return out

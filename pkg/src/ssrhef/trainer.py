"""Patch-based training: cropping, augmentation, Adam and the main loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import groundtruth as gtm
from .groundtruth import AnnotationSet, ClassLabelSpec, GroundTruthBundle, SegPyramid, DensityMap
from .losses import HefConfig, LossBreakdown, LossWeights, cls_loss, dice_loss, hef_loss, overall_loss
from .model import ModelConfig, backward, build_model, forward, predict_count
from .numerics import NumericalError, ShapeError, sigmoid

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 3e-5
    batch_size: int = 1
    gamma: float = 2.0
    lambda_seg: float = 1e-2
    lambda_cla: float = 1e-3
    flip_prob: float = 0.5
    noise_prob: float = 0.5
    noise_std: float = 0.01
    patch_fracs: tuple = (1 / 16, 1 / 4, 1.0)
    patch_counts: tuple = (9, 4, 1)
    iterations: int = 2000
    seed: int = 0
    sigma: float = gtm.DEFAULT_SIGMA
    num_classes: int = gtm.NUM_CLASSES
    eval_every: int = 100
    clip_norm: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        for name in ("flip_prob", "noise_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.batch_size != 1:
            raise ValueError("only batch_size 1 is supported")
        if len(self.patch_fracs) != len(self.patch_counts) or min(self.patch_counts) < 1:
            raise ValueError("patch_counts must be positive and pair with patch_fracs")


@dataclass
class TrainSample:
    image: np.ndarray  # (1, 1, h, w)
    bundle: GroundTruthBundle
    origin: tuple = (0, 0)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------

def patch_ann(ann: AnnotationSet, top: int, left: int, ph: int, pw: int) -> AnnotationSet:
    pts = ann.points
    inside = (pts[:, 0] >= left) & (pts[:, 0] < left + pw) & (pts[:, 1] >= top) & (pts[:, 1] < top + ph)
    tags = None if ann.tags is None else [t for t, k in zip(ann.tags, inside) if k]
    return AnnotationSet(pts[inside] - [left, top], ph, pw, tags)


def crop_patches(image, ann: AnnotationSet, cfg: TrainConfig, rng, spec: ClassLabelSpec) -> list[TrainSample]:
    """Random crops at each area fraction; ground truth is re-encoded per patch."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[-2:]
    samples = []
    for frac, n in zip(cfg.patch_fracs, cfg.patch_counts):
        side = float(np.sqrt(frac))
        ph, pw = int(h * side) // 8 * 8, int(w * side) // 8 * 8
        if ph < 8 or pw < 8:
            raise ShapeError(f"image {h}x{w} too small for patch fraction {frac}")
        for _ in range(n):
            top = int(rng.integers(0, h - ph + 1))
            left = int(rng.integers(0, w - pw + 1))
            sub = patch_ann(ann, top, left, ph, pw)
            samples.append(TrainSample(
                image[..., top:top + ph, left:left + pw].reshape(1, 1, ph, pw).copy(),
                gtm.make_bundle(sub, cfg.sigma, spec),
                (top, left),
            ))
    return samples


def _flip(sample: TrainSample) -> TrainSample:
    b = sample.bundle
    bundle = replace(
        b,
        density=DensityMap(b.density.values[:, ::-1].copy(), b.density.stride),
        density_s8=DensityMap(b.density_s8.values[:, ::-1].copy(), b.density_s8.stride),
        pyramid=SegPyramid([lv[:, ::-1].copy() for lv in b.pyramid.levels]),
    )
    return TrainSample(sample.image[..., ::-1].copy(), bundle, sample.origin)


def augment(sample: TrainSample, cfg: TrainConfig, rng, force_flip: bool | None = None) -> TrainSample:
    """Horizontal flip (image and all targets) and additive pixel noise (image only).

    Both coins are always drawn so the RNG stream does not depend on outcomes.
    """
    flip_coin = rng.random() < cfg.flip_prob
    noise_coin = rng.random() < cfg.noise_prob
    noise = rng.standard_normal(sample.image.shape) * cfg.noise_std
    if force_flip is not None:
        flip_coin = force_flip
    out = _flip(sample) if flip_coin else sample
    if noise_coin:
        out = TrainSample(np.clip(out.image + noise, 0.0, 1.0), out.bundle, out.origin)
    return out


# --------------------------------------------------------------------------
# optimisation
# --------------------------------------------------------------------------

def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig) -> tuple[dict, AdamState]:
    """In-place Adam update with bias correction."""
    for name, g in grads.items():
        if name not in params or params[name].shape != g.shape:
            raise ShapeError(f"adam_step: gradient {name} {np.shape(g)} does not match parameters")
        if not np.isfinite(g).all():
            raise NumericalError(f"adam_step: non-finite gradient in parameter {name}")
    if cfg.clip_norm is not None:
        norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if norm > cfg.clip_norm:
            grads = {k: g * (cfg.clip_norm / norm) for k, g in grads.items()}
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
    return params, state


def sample_losses(outputs, bundle: GroundTruthBundle, cfg: TrainConfig):
    """Loss breakdown for one sample plus gradients wrt the network outputs."""
    l_hef, g_den = hef_loss(outputs.density, bundle.density_s8.values[None, None], HefConfig(cfg.gamma))
    probs = [sigmoid(s) for s in outputs.seg_logits]
    l_seg, g_probs = dice_loss(probs, [lv[None, None] for lv in bundle.pyramid.levels])
    g_seg = [g * p * (1.0 - p) for g, p in zip(g_probs, probs)]
    l_cla, g_log = cls_loss(outputs.class_logits[0], bundle.label)
    parts, (s_hef, s_seg, s_cla) = overall_loss(l_hef, l_seg, l_cla, LossWeights(cfg.lambda_seg, cfg.lambda_cla))
    return parts, (s_hef * g_den, [s_seg * g for g in g_seg], s_cla * g_log[None])


# --------------------------------------------------------------------------
# loop
# --------------------------------------------------------------------------

@dataclass
class TrainLog:
    losses: list = field(default_factory=list)  # (iter, LossBreakdown)
    evals: list = field(default_factory=list)  # (iter, train_mae)

    def lines(self) -> list[str]:
        return [format_loss_line(it, b) for it, b in self.losses]

    def overall(self) -> np.ndarray:
        return np.array([b.overall for _, b in self.losses])


def format_loss_line(it: int, b: LossBreakdown) -> str:
    return f"{it}, {b.hef:.12f}, {b.segs:.12f}, {b.cla:.12f}, {b.overall:.12f}"


def format_eval_line(it: int, mae: float) -> str:
    return f"eval, {it}, {mae:.6f}"


def dataset_mae(params: dict, dataset, cfg: ModelConfig | None = None) -> float:
    errs = [
        abs(predict_count(forward(params, img[None, None], cfg).density) - len(ann))
        for img, ann in dataset
    ]
    return float(np.mean(errs))


def train(dataset, cfg: TrainConfig = TrainConfig(), model_cfg: ModelConfig = ModelConfig(),
          log_file=None, params: dict | None = None):
    """Train on ``[(image HxW, AnnotationSet), ...]``; returns ``(params, TrainLog)``.

    ``log_file``, when given, is an open text stream that receives one line per
    iteration and periodic ``eval`` lines.
    """
    if not dataset:
        raise ValueError("train: empty dataset")
    spec = gtm.compute_thr([len(a) for _, a in dataset], cfg.num_classes)
    crop_rng = np.random.default_rng([cfg.seed, 1])
    aug_rng = np.random.default_rng([cfg.seed, 2])
    order_rng = np.random.default_rng([cfg.seed, 3])
    if params is None:
        params = build_model(model_cfg, cfg.seed)
    state = AdamState()
    tlog = TrainLog()

    def emit(line):
        if log_file is not None:
            log_file.write(line + "\n")

    pool: list[TrainSample] = []
    order: list[int] = []
    for it in range(1, cfg.iterations + 1):
        if not order:
            pool = [s for img, ann in dataset for s in crop_patches(img, ann, cfg, crop_rng, spec)]
            order = list(order_rng.permutation(len(pool)))[::-1]
        sample = augment(pool[order.pop()], cfg, aug_rng)
        out = forward(params, sample.image, model_cfg)
        parts, (g_den, g_seg, g_log) = sample_losses(out, sample.bundle, cfg)
        if not np.isfinite(parts.overall):
            raise NumericalError(f"training diverged at iteration {it}: overall loss {parts.overall}")
        grads = backward(params, out, g_den, g_seg, g_log)
        adam_step(params, grads, state, cfg)
        tlog.losses.append((it, parts))
        emit(format_loss_line(it, parts))
        if cfg.eval_every and (it % cfg.eval_every == 0 or it == cfg.iterations):
            mae = dataset_mae(params, dataset, model_cfg)
            tlog.evals.append((it, mae))
            emit(format_eval_line(it, mae))
            log.info("iter %d overall %.6f train MAE %.4f", it, parts.overall, mae)
    return params, tlog

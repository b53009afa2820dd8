"""Count metrics, localised easy/hard scoring and the focusing-vs-L2 ablation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import groundtruth as gtm
from .groundtruth import AnnotationSet
from .model import ModelConfig, forward, predict_count
from .trainer import TrainConfig, TrainLog, train

LOCAL_WINDOW = 11


@dataclass
class ImageScore:
    name: str
    gt_count: float
    est_count: float
    easy_gt: float = 0.0
    easy_est: float = 0.0
    hard_gt: float = 0.0
    hard_est: float = 0.0
    hard_under: list = field(default_factory=list)


@dataclass
class EvalReport:
    images: list
    mae: float
    mse: float
    hard_underestimation: float | None = None
    easy_underestimation: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def count_errors(gt_counts, est_counts) -> tuple[float, float]:
    """Mean absolute error and root mean squared error over images."""
    gt = np.asarray(gt_counts, dtype=np.float64)
    est = np.asarray(est_counts, dtype=np.float64)
    if gt.size == 0 or gt.shape != est.shape:
        raise ValueError(f"need matching non-empty count lists, got {gt.shape} and {est.shape}")
    r = gt - est
    return float(np.abs(r).mean()), float(np.sqrt((r * r).mean()))


def pad_to_multiple(image, k: int = 8) -> np.ndarray:
    h, w = image.shape
    return np.pad(image, ((0, (-h) % k), (0, (-w) % k)))


def _window_cells(x: float, y: float, stride: int, shape) -> tuple[slice, slice]:
    half = LOCAL_WINDOW // 2
    r0, r1 = int((y - half) // stride), int((y + half) // stride)
    c0, c1 = int((x - half) // stride), int((x + half) // stride)
    return slice(max(r0, 0), min(r1, shape[0] - 1) + 1), slice(max(c0, 0), min(c1, shape[1] - 1) + 1)


def score_image(name: str, pred, gt_dens, ann: AnnotationSet, stride: int = 8) -> ImageScore:
    """Whole-image counts plus per-head local masses for tagged annotations.

    For every head, predicted and ground-truth mass are summed over the
    stride-``stride`` cells touched by an 11x11 pixel window around it.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt_dens = np.asarray(gt_dens, dtype=np.float64)
    score = ImageScore(name, float(gt_dens.sum()), predict_count(pred))
    if ann.tags is None:
        return score
    for (x, y), tag in zip(ann.points, ann.tags):
        rs, cs = _window_cells(x, y, stride, pred.shape)
        g, e = float(gt_dens[rs, cs].sum()), float(pred[rs, cs].sum())
        if tag == "hard":
            score.hard_gt += g
            score.hard_est += e
            score.hard_under.append(max(0.0, g - e))
        else:
            score.easy_gt += g
            score.easy_est += e
    return score


def report_from_densities(pred_maps, gt_maps, anns, names=None, stride: int = 8) -> EvalReport:
    """Build a report from already-computed stride-``stride`` density maps."""
    if not pred_maps:
        raise ValueError("evaluation needs at least one image")
    names = names or [f"img_{i:04d}" for i in range(len(pred_maps))]
    scores, hard, easy = [], [], []
    for name, pred, gt, ann in zip(names, pred_maps, gt_maps, anns):
        s = score_image(name, pred, gt, ann, stride)
        scores.append(s)
        hard.extend(s.hard_under)
        if ann.tags is not None:
            for (x, y), tag in zip(ann.points, ann.tags):
                if tag == "easy":
                    rs, cs = _window_cells(x, y, stride, np.shape(pred))
                    easy.append(max(0.0, float(np.sum(gt[rs, cs]) - np.sum(pred[rs, cs]))))
    mae, mse = count_errors([s.gt_count for s in scores], [s.est_count for s in scores])
    return EvalReport(
        scores, mae, mse,
        float(np.mean(hard)) if hard else None,
        float(np.mean(easy)) if easy else None,
    )


def ground_truth_s8(ann: AnnotationSet, sigma: float = gtm.DEFAULT_SIGMA) -> np.ndarray:
    h8, w8 = -(-ann.height // 8) * 8, -(-ann.width // 8) * 8
    dens = gtm.encode_density(ann, sigma).values
    dens = np.pad(dens, ((0, h8 - ann.height), (0, w8 - ann.width)))
    return gtm.downsample_density(gtm.DensityMap(dens), 8).values


def predict_density(params: dict, image, model_cfg: ModelConfig | None = None) -> np.ndarray:
    """Stride-8 density for an arbitrary-size image (zero-padded to a multiple of 8)."""
    return forward(params, pad_to_multiple(np.asarray(image, dtype=np.float64))[None, None], model_cfg).density[0, 0]


def evaluate(params: dict, dataset, sigma: float = gtm.DEFAULT_SIGMA,
             model_cfg: ModelConfig | None = None, names=None) -> EvalReport:
    """Score ``params`` on ``[(image, AnnotationSet), ...]``."""
    if not dataset:
        raise ValueError("evaluate: empty dataset")
    expected = {k for k in params}
    missing = [k for k in ("stem.d1.w", "dens3.w", "cls2.w") if k not in expected]
    if missing:
        raise KeyError(f"checkpoint does not match the model: missing {missing}")
    preds = [predict_density(params, img, model_cfg) for img, _ in dataset]
    gts = [ground_truth_s8(ann, sigma) for _, ann in dataset]
    return report_from_densities(preds, gts, [a for _, a in dataset], names)


@dataclass
class AblationResult:
    hef: EvalReport
    l2: EvalReport
    hef_log: TrainLog
    l2_log: TrainLog
    gamma: float
    hef_params: dict = field(default_factory=dict, repr=False)
    l2_params: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        def summary(r: EvalReport, lg: TrainLog):
            return {**r.to_dict(), "final_overall": lg.losses[-1][1].overall if lg.losses else None}

        hu, lu = self.hef.hard_underestimation, self.l2.hard_underestimation
        return {
            "gamma": self.gamma,
            "hef": summary(self.hef, self.hef_log),
            "l2": summary(self.l2, self.l2_log),
            "hard_underestimation_delta": None if hu is None or lu is None else lu - hu,
        }


def ablate(dataset, cfg: TrainConfig = TrainConfig(), model_cfg: ModelConfig = ModelConfig(),
           names=None) -> AblationResult:
    """Two seed-matched runs that differ only in the focusing exponent (cfg.gamma vs 0)."""
    gamma = cfg.gamma if cfg.gamma > 0 else 2.0
    runs = {}
    for key, g in (("hef", gamma), ("l2", 0.0)):
        params, tlog = train(dataset, replace(cfg, gamma=g), model_cfg)
        runs[key] = (evaluate(params, dataset, cfg.sigma, model_cfg, names), tlog, params)
    (hr, hl, hp), (lr, ll, lp) = runs["hef"], runs["l2"]
    return AblationResult(hr, lr, hl, ll, gamma, hp, lp)

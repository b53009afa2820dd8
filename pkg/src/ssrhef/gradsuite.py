"""Finite-difference checks for every differentiable op, loss and the full model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses as L
from . import model as M
from . import numerics as nx
from .numerics import finite_diff_check

TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    checked: int

    @property
    def ok(self) -> bool:
        return self.max_rel_err < TOL


def _projected(forward_fn, backward_fn, args, which, rng):
    """Scalar ``sum(R * f(args))`` with its gradient wrt ``args[which]``."""
    out = forward_fn(*args)[0]
    proj = rng.standard_normal(np.shape(out))

    def fn(v):
        a = list(args)
        a[which] = v
        y, cache = forward_fn(*a)
        g = backward_fn(cache, proj)
        g = g[which] if isinstance(g, tuple) else g
        return float((y * proj).sum()), g

    return fn


def _op_cases(rng):
    """(name, forward, backward, args, index of args to check) for one seed."""
    x = rng.standard_normal((1, 2, 5, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    d = int(rng.integers(1, 4))
    conv = lambda x, w, b: nx.conv2d(x, w, b, d)  # noqa: E731
    cases = [(f"conv2d[x,d={d}]", conv, nx.conv2d_backward, (x, w, b), 0),
             (f"conv2d[w,d={d}]", conv, nx.conv2d_backward, (x, w, b), 1),
             (f"conv2d[b,d={d}]", conv, nx.conv2d_backward, (x, w, b), 2)]
    cases.append(("maxpool2d", nx.maxpool2d, nx.maxpool2d_backward, (rng.standard_normal((1, 2, 6, 7)),), 0))
    cases.append(("channel_pool", nx.channel_pool, nx.channel_pool_backward, (rng.standard_normal((1, 4, 3, 3)),), 0))
    rs = lambda x: nx.resize_bilinear(x, 7, 3)  # noqa: E731
    cases.append(("resize_bilinear", rs, nx.resize_bilinear_backward, (rng.standard_normal((1, 2, 4, 6)),), 0))
    for kind in ("relu", "sigmoid"):
        act = lambda x, k=kind: nx.activation(x, k)  # noqa: E731
        cases.append((f"activation[{kind}]", act, nx.activation_backward, (rng.standard_normal((1, 2, 4, 4)),), 0))
    spp = lambda x: nx.spp_pool(x, 4)  # noqa: E731
    cases.append(("spp_pool", spp, nx.spp_pool_backward, (rng.standard_normal((1, 2, 5, 7)),), 0))
    cases.append(("spp_pool[16]", nx.spp_pool, nx.spp_pool_backward, (rng.standard_normal((1, 1, 9, 20)),), 0))
    dx, dw, db = rng.standard_normal(6), rng.standard_normal((4, 6)), rng.standard_normal(4)
    for i, part in enumerate("xwb"):
        cases.append((f"dense[{part}]", nx.dense, nx.dense_backward, (dx, dw, db), i))
    f, s = rng.standard_normal((1, 3, 4, 4)), rng.standard_normal((1, 1, 4, 4))
    cases.append(("semantic_refine[f]", M.semantic_refine, M.semantic_refine_backward, (f, s), 0))
    cases.append(("semantic_refine[s]", M.semantic_refine, M.semantic_refine_backward, (f, s), 1))
    return cases


def _fel_cases(rng):
    f = rng.standard_normal((1, 3, 5, 5))
    params = {
        "fel.w": rng.standard_normal((3, 3, 3, 3)) * 0.5,
        "fel.b": rng.standard_normal(3) * 0.1,
        "fel_att.w": rng.standard_normal((1, 2, 7, 7)) * 0.3,
        "fel_att.b": rng.standard_normal(1) * 0.1,
    }
    proj = rng.standard_normal(f.shape)
    out = []

    def wrt_input(v):
        y, c = M.feature_enhance(v, params)
        return float((y * proj).sum()), M.feature_enhance_backward(c, proj)[0]

    out.append(("feature_enhance[f]", wrt_input, f))
    for name in params:
        def wrt_param(v, name=name):
            p = dict(params)
            p[name] = v
            y, c = M.feature_enhance(f, p)
            return float((y * proj).sum()), M.feature_enhance_backward(c, proj)[1][name]

        out.append((f"feature_enhance[{name}]", wrt_param, params[name]))
    return out


def _loss_cases(rng):
    pred = rng.standard_normal((1, 1, 4, 5))
    gt = rng.random((1, 1, 4, 5))
    cfg = L.HefConfig(2.0)
    probs = [rng.uniform(0.05, 0.95, (1, 1, n, n)) for n in (8, 4, 2)]
    segs = [(rng.random(p.shape) > 0.5).astype(float) for p in probs]
    label = int(rng.integers(0, 15))
    out = [
        ("hef_loss", lambda v: L.hef_loss(v, gt, cfg), pred),
        ("cls_loss", lambda v: L.cls_loss(v, label), rng.standard_normal(15)),
    ]
    for m in range(3):
        def dice_level(v, m=m):
            p = list(probs)
            p[m] = v
            val, grads = L.dice_loss(p, segs)
            return val, grads[m]

        out.append((f"dice_loss[level {m + 1}]", dice_level, probs[m]))
    return out


def op_suite(seeds=range(10)) -> list[CheckResult]:
    """Every op, composite block and loss, checked over each seed; worst error kept."""
    worst: dict[str, CheckResult] = {}

    def keep(name, rep):
        base = name.split(",d=")[0] + ("]" if ",d=" in name else "")
        prev = worst.get(base)
        if prev is None or rep.max_rel_err > prev.max_rel_err:
            worst[base] = CheckResult(base, rep.max_rel_err, rep.checked + (prev.checked if prev else 0))
        else:
            prev.checked += rep.checked

    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, fwd, bwd, args, which in _op_cases(rng):
            keep(name, finite_diff_check(_projected(fwd, bwd, args, which, rng), args[which]))
        for name, fn, point in _fel_cases(rng) + _loss_cases(rng):
            keep(name, finite_diff_check(fn, point))
    return list(worst.values())


def model_losses(outputs, gt_density, seg_levels, label, cfg_gamma=2.0, weights=L.LossWeights()):
    """Overall loss and its gradients wrt every model output."""
    l_hef, g_den = L.hef_loss(outputs.density, gt_density, L.HefConfig(cfg_gamma))
    probs = [nx.sigmoid(s) for s in outputs.seg_logits]
    l_seg, g_probs = L.dice_loss(probs, seg_levels)
    l_cla, g_log = L.cls_loss(outputs.class_logits[0], label)
    parts, (a, b, c) = L.overall_loss(l_hef, l_seg, l_cla, weights)
    g_seg = [b * g * p * (1 - p) for g, p in zip(g_probs, probs)]
    return parts.overall, (a * g_den, g_seg, c * g_log[None])


def model_suite(seed: int = 0, base_channels: int = 2, size: int = 16, max_coords: int = 24) -> list[CheckResult]:
    """Per-parameter check of the full reduced network under the overall loss.

    Large tensors are checked on a seeded random subset of ``max_coords`` entries.
    """
    cfg = M.ModelConfig(base_channels=base_channels)
    params = M.build_model(cfg, seed)
    rng = np.random.default_rng(seed + 100)
    image = rng.random((1, 1, size, size))
    gt = rng.random((1, 1, size // 8, size // 8)) * 0.5
    segs = [(rng.random((1, 1, size >> m, size >> m)) > 0.5).astype(float) for m in (1, 2, 3)]
    label = int(rng.integers(0, cfg.num_classes))
    results = []
    for name in params:
        def fn(v, name=name):
            p = dict(params)
            p[name] = v
            out = M.forward(p, image, cfg)
            val, (gd, gs, gl) = model_losses(out, gt, segs, label)
            return val, M.backward(p, out, gd, gs, gl)[name]

        n = params[name].size
        coords = None if n <= max_coords else np.sort(rng.choice(n, max_coords, replace=False))
        rep = finite_diff_check(fn, params[name], coords=coords)
        results.append(CheckResult(f"model[{name}]", rep.max_rel_err, rep.checked))
    return results

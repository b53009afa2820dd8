"""The counting network: dilated multi-scale stem, three gated stages with
segmentation heads, fused refined features, count-class head, spatial
attention enhancement and the density regressor."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import CacheMismatchError, OpCache, ShapeError

PARAM_BUDGET = 2_500_000


@dataclass
class ModelConfig:
    base_channels: int = 16
    dilation_set: tuple = (1, 2, 3, 4)
    num_classes: int = 15
    cls_hidden: int = 64
    output_stride: int = 8
    att_kernel: int = 7

    def __post_init__(self):
        self.dilation_set = tuple(int(d) for d in self.dilation_set)
        if len(self.dilation_set) != 4:
            raise ValueError(f"dilation_set needs 4 rates, got {self.dilation_set}")
        if self.output_stride != 8:
            raise ValueError("only output_stride 8 is supported")
        if self.base_channels < 1 or self.num_classes < 2:
            raise ValueError("base_channels must be >= 1 and num_classes >= 2")

    @property
    def widths(self) -> dict:
        b = self.base_channels
        return {"stem": 4 * b, "f1": 4 * b, "f2": 6 * b, "f3": 8 * b, "msrf": 6 * b, "head": 4 * b}


def param_shapes(cfg: ModelConfig) -> dict:
    """Ordered name -> shape map; this order is the checkpoint order."""
    w = cfg.widths
    b = cfg.base_channels
    shapes = {}

    def conv(name, out_c, in_c, k):
        shapes[f"{name}.w"] = (out_c, in_c, k, k)
        shapes[f"{name}.b"] = (out_c,)

    for d in cfg.dilation_set:
        conv(f"stem.d{d}", b, 1, 3)
    conv("stage1", w["f1"], w["stem"], 3)
    conv("seg1", 1, w["f1"], 1)
    conv("stage2", w["f2"], w["f1"], 3)
    conv("seg2", 1, w["f2"], 1)
    conv("stage3", w["f3"], w["f2"], 3)
    conv("seg3", 1, w["f3"], 1)
    conv("fuse", w["msrf"], w["f1"] + w["f2"] + w["f3"], 1)
    shapes["cls1.w"] = (cfg.cls_hidden, w["msrf"] * nx.SPP_GRID ** 2)
    shapes["cls1.b"] = (cfg.cls_hidden,)
    shapes["cls2.w"] = (cfg.num_classes, cfg.cls_hidden)
    shapes["cls2.b"] = (cfg.num_classes,)
    conv("fel", w["msrf"], w["msrf"], 3)
    conv("fel_att", 1, 2, cfg.att_kernel)
    conv("dens1", w["head"], w["msrf"], 3)
    conv("dens2", w["head"], w["head"], 3)
    conv("dens3", 1, w["head"], 1)
    return shapes


def count_params(params_or_cfg, conv_only: bool = False) -> int:
    shapes = param_shapes(params_or_cfg) if isinstance(params_or_cfg, ModelConfig) else {
        k: v.shape for k, v in params_or_cfg.items()
    }
    return sum(int(np.prod(s)) for k, s in shapes.items() if not (conv_only and k.startswith("cls")))


def build_model(cfg: ModelConfig = ModelConfig(), seed: int = 0) -> dict:
    """He-normal weights (fan-in), zero biases, drawn in checkpoint order."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            params[name] = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    return params


# --------------------------------------------------------------------------
# composite blocks
# --------------------------------------------------------------------------

def semantic_refine(f, seg_logit):
    """Gate every channel of ``f`` by the sigmoid of a one-channel logit map."""
    f = np.asarray(f, dtype=np.float64)
    seg_logit = np.asarray(seg_logit, dtype=np.float64)
    if seg_logit.shape[1] != 1 or f.shape[0] != seg_logit.shape[0] or f.shape[2:] != seg_logit.shape[2:]:
        raise ShapeError(f"semantic_refine: features {f.shape} vs segmentation logits {seg_logit.shape}")
    gate = nx.sigmoid(seg_logit)
    out = f * gate
    return out, OpCache("semantic_refine", out.shape, {"f": f, "gate": gate})


def semantic_refine_backward(cache: OpCache, grad_out):
    grad_out = np.asarray(grad_out, dtype=np.float64)
    cache.expect("semantic_refine", grad_out)
    f, gate = cache.data["f"], cache.data["gate"]
    grad_f = grad_out * gate
    grad_s = (grad_out * f).sum(axis=1, keepdims=True) * gate * (1.0 - gate)
    return grad_f, grad_s


def feature_enhance(f, params: dict, prefix: str = "fel"):
    """a = relu(conv3x3(f)); s = sigmoid(conv(channel_pool(a))); out = a * s."""
    z, c_conv = nx.conv2d(f, params[f"{prefix}.w"], params[f"{prefix}.b"])
    a, c_relu = nx.activation(z, "relu")
    m, c_pool = nx.channel_pool(a)
    t, c_att = nx.conv2d(m, params[f"{prefix}_att.w"], params[f"{prefix}_att.b"])
    s, c_sig = nx.activation(t, "sigmoid")
    out = a * s
    cache = OpCache("feature_enhance", out.shape, {
        "a": a, "s": s, "prefix": prefix,
        "ops": (c_conv, c_relu, c_pool, c_att, c_sig),
    })
    return out, cache


def feature_enhance_backward(cache: OpCache, grad_out):
    """Returns (grad wrt input features, {param name: grad})."""
    grad_out = np.asarray(grad_out, dtype=np.float64)
    cache.expect("feature_enhance", grad_out)
    a, s, p = cache.data["a"], cache.data["s"], cache.data["prefix"]
    c_conv, c_relu, c_pool, c_att, c_sig = cache.data["ops"]
    ga = grad_out * s
    gs = (grad_out * a).sum(axis=1, keepdims=True)
    gt = nx.activation_backward(c_sig, gs)
    gm, gw_att, gb_att = nx.conv2d_backward(c_att, gt)
    ga = ga + nx.channel_pool_backward(c_pool, gm)
    gz = nx.activation_backward(c_relu, ga)
    gf, gw, gb = nx.conv2d_backward(c_conv, gz)
    return gf, {f"{p}.w": gw, f"{p}.b": gb, f"{p}_att.w": gw_att, f"{p}_att.b": gb_att}


# --------------------------------------------------------------------------
# full network
# --------------------------------------------------------------------------

@dataclass
class ModelOutputs:
    density: np.ndarray
    seg_logits: list
    class_logits: np.ndarray
    caches: dict = field(repr=False, default_factory=dict)
    param_layout: tuple = field(repr=False, default=())


def _layout(params: dict) -> tuple:
    return tuple((k, v.shape) for k, v in params.items())


def _conv_relu(x, params, name, caches, dilation=1):
    z, caches[f"{name}.conv"] = nx.conv2d(x, params[f"{name}.w"], params[f"{name}.b"], dilation)
    y, caches[f"{name}.relu"] = nx.activation(z, "relu")
    return y


def forward(params: dict, image, cfg: ModelConfig | None = None, seg_override: dict | None = None) -> ModelOutputs:
    """Run the network on a (N, 1, H, W) image with H, W multiples of 8.

    ``seg_override`` maps a stage index (1..3) to logits used for gating in
    place of the predicted ones; it exists for ablation probes.
    """
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 2:
        x = x[None, None]
    if x.ndim != 4 or x.shape[1] != 1:
        raise ShapeError(f"forward: expected a (N, 1, H, W) image, got shape {x.shape}")
    h, w = x.shape[2:]
    if h % 8 or w % 8 or h == 0 or w == 0:
        raise ShapeError(f"forward: image dims {h}x{w} must be positive multiples of 8")
    dilations = sorted(int(k.split(".d")[1].split(".")[0]) for k in params if k.startswith("stem.d") and k.endswith(".w"))
    caches: dict = {}

    branches = [_conv_relu(x, params, f"stem.d{d}", caches, d) for d in dilations]
    feat = np.concatenate(branches, axis=1)

    seg_logits, gated = [], []
    for m in (1, 2, 3):
        y = _conv_relu(feat, params, f"stage{m}", caches)
        fm, caches[f"pool{m}"] = nx.maxpool2d(y)
        sl, caches[f"seg{m}.conv"] = nx.conv2d(fm, params[f"seg{m}.w"], params[f"seg{m}.b"])
        seg_logits.append(sl)
        overridden = seg_override is not None and m in seg_override
        feat, caches[f"refine{m}"] = semantic_refine(fm, seg_override[m] if overridden else sl)
        caches[f"refine{m}"].data["overridden"] = overridden
        gated.append(feat)

    th, tw = gated[2].shape[2:]
    up1, caches["resize1"] = nx.resize_bilinear(gated[0], th, tw)
    up2, caches["resize2"] = nx.resize_bilinear(gated[1], th, tw)
    # linear fuse: the FEL and the density head supply the nonlinearity
    msrf, caches["fuse.conv"] = nx.conv2d(np.concatenate([up1, up2, gated[2]], axis=1),
                                          params["fuse.w"], params["fuse.b"])

    pooled, caches["spp"] = nx.spp_pool(msrf)
    hid, caches["cls1.dense"] = nx.dense(pooled, params["cls1.w"], params["cls1.b"])
    hid, caches["cls1.relu"] = nx.activation(hid, "relu")
    logits, caches["cls2.dense"] = nx.dense(hid, params["cls2.w"], params["cls2.b"])

    enh, caches["fel"] = feature_enhance(msrf, params)
    d = _conv_relu(enh, params, "dens1", caches)
    d = _conv_relu(d, params, "dens2", caches)
    density = _conv_relu(d, params, "dens3", caches)

    caches["_meta"] = {
        "dilations": dilations,
        "split": (gated[0].shape[1], gated[1].shape[1]),
        "branch_c": branches[0].shape[1],
    }
    return ModelOutputs(density, seg_logits, logits, caches, _layout(params))


def _conv_relu_back(g, caches, name, grads):
    g = nx.activation_backward(caches[f"{name}.relu"], g)
    gx, grads[f"{name}.w"], grads[f"{name}.b"] = nx.conv2d_backward(caches[f"{name}.conv"], g)
    return gx


def backward(params: dict, outputs: ModelOutputs, d_density, d_seg, d_logits) -> dict:
    """Parameter gradients, keyed and ordered exactly like ``params``."""
    if outputs.param_layout != _layout(params):
        raise CacheMismatchError("backward: outputs were produced with a different parameter layout")
    c = outputs.caches
    if not c or "_meta" not in c:
        raise CacheMismatchError("backward: outputs carry no forward caches")
    meta = c["_meta"]
    grads: dict = {}

    g = _conv_relu_back(np.asarray(d_density, dtype=np.float64), c, "dens3", grads)
    g = _conv_relu_back(g, c, "dens2", grads)
    g = _conv_relu_back(g, c, "dens1", grads)
    g_msrf, fel_grads = feature_enhance_backward(c["fel"], g)
    grads.update(fel_grads)

    g = nx.dense_backward(c["cls2.dense"], np.asarray(d_logits, dtype=np.float64))
    g, grads["cls2.w"], grads["cls2.b"] = g
    g = nx.activation_backward(c["cls1.relu"], g)
    g, grads["cls1.w"], grads["cls1.b"] = nx.dense_backward(c["cls1.dense"], g)
    g_msrf = g_msrf + nx.spp_pool_backward(c["spp"], g)

    g_cat, grads["fuse.w"], grads["fuse.b"] = nx.conv2d_backward(c["fuse.conv"], g_msrf)
    c1, c2 = meta["split"]
    g_gated = [
        nx.resize_bilinear_backward(c["resize1"], g_cat[:, :c1]),
        nx.resize_bilinear_backward(c["resize2"], g_cat[:, c1:c1 + c2]),
        g_cat[:, c1 + c2:],
    ]

    g_next = None  # gradient flowing into the gated output of stage m from stage m+1
    for m in (3, 2, 1):
        g_hat = g_gated[m - 1] if g_next is None else g_gated[m - 1] + g_next
        g_fm, g_gate = semantic_refine_backward(c[f"refine{m}"], g_hat)
        g_sl = np.asarray(d_seg[m - 1], dtype=np.float64)
        if c[f"refine{m}"].data.get("overridden"):
            g_gate = np.zeros_like(g_gate)
        g_sl = g_sl + g_gate
        g_f, grads[f"seg{m}.w"], grads[f"seg{m}.b"] = nx.conv2d_backward(c[f"seg{m}.conv"], g_sl)
        g_fm = g_fm + g_f
        g = nx.maxpool2d_backward(c[f"pool{m}"], g_fm)
        g_next = _conv_relu_back(g, c, f"stage{m}", grads)

    bc = meta["branch_c"]
    for i, d in enumerate(meta["dilations"]):
        _conv_relu_back(g_next[:, i * bc:(i + 1) * bc], c, f"stem.d{d}", grads)

    return {k: grads[k] for k in params}


def predict_count(density) -> float:
    return float(np.sum(density))

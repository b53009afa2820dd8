"""Command-line entry point: ``ssrhef <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import groundtruth as gtm
from . import io as fio
from .model import ModelConfig, count_params
from .numerics import NumericalError
from .trainer import TrainConfig

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("ssrhef")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _train_args(p):
    d = TrainConfig()
    p.add_argument("--data", required=True, help="directory of NAME.pgm + NAME.json pairs")
    p.add_argument("--iters", type=int, default=d.iterations)
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--lambda-seg", type=float, default=d.lambda_seg)
    p.add_argument("--lambda-cla", type=float, default=d.lambda_cla)
    p.add_argument("--sigma", type=float, default=d.sigma)
    p.add_argument("--base-channels", type=int, default=ModelConfig().base_channels)
    p.add_argument("--eval-every", type=int, default=d.eval_every)
    p.add_argument("--clip-norm", type=float, default=None, help="global gradient-norm clip (off by default)")


def _train_config(a, gamma):
    return TrainConfig(
        lr=a.lr, gamma=gamma, lambda_seg=a.lambda_seg, lambda_cla=a.lambda_cla,
        iterations=a.iters, seed=a.seed, sigma=a.sigma, eval_every=a.eval_every, clip_norm=a.clip_norm,
    )


def _dataset(directory):
    items = fio.load_dataset(directory)
    return [n for n, _, _ in items], [(img, ann) for _, img, ann in items]


def _model_config(params):
    b = params["stem.d1.w"].shape[0]
    dil = tuple(sorted(int(k[6:].split(".")[0]) for k in params if k.startswith("stem.d") and k.endswith(".w")))
    return ModelConfig(base_channels=b, dilation_set=dil, num_classes=params["cls2.w"].shape[0],
                       cls_hidden=params["cls1.w"].shape[0], att_kernel=params["fel_att.w"].shape[-1])


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_synth(a):
    from .synth import SynthConfig, synth_dataset

    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    base = SynthConfig(image_size=a.size, n_easy=a.easy, n_hard=a.hard, seed=a.seed)
    for i, (img, ann) in enumerate(synth_dataset(a.images, base)):
        fio.write_pgm(out / f"img_{i:04d}.pgm", img)
        fio.write_annotations(out / f"img_{i:04d}.json", ann)
    print(f"wrote {a.images} scenes to {out}")


def cmd_gen_gt(a):
    ann = fio.read_annotations(a.ann)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    max_count = a.max_count if a.max_count is not None else len(ann)
    spec = gtm.compute_thr([max_count], a.classes)
    b = gtm.make_bundle(ann, a.sigma, spec)
    fio.write_dmap(out / "density_s1.dmap", b.density.values, 1)
    fio.write_dmap(out / "density_s8.dmap", b.density_s8.values, 8)
    for stride, level in zip((2, 4, 8), b.pyramid.levels):
        fio.write_dmap(out / f"seg_s{stride}.dmap", level.astype(np.float64), stride)
    label = {"count": b.count, "class": b.label, "thr": spec.thr, "K": spec.K, "max_count": spec.C}
    (out / "label.json").write_text(json.dumps(label, indent=2))
    print(json.dumps(label))


def cmd_train(a):
    from . import plotting
    from .trainer import train

    _, data = _dataset(a.data)
    cfg = _train_config(a, a.gamma)
    mcfg = ModelConfig(base_channels=a.base_channels)
    ckpt = Path(a.out)
    log_path = Path(a.log) if a.log else ckpt.with_suffix(".log")
    with open(log_path, "w") as fh:
        params, tlog = train(data, cfg, mcfg, log_file=fh)
    fio.save_checkpoint(ckpt, params)
    plotting.loss_curve(tlog, log_path.with_suffix(".png"))
    last = tlog.evals[-1][1] if tlog.evals else float("nan")
    print(f"checkpoint {ckpt} ({count_params(params)} parameters), log {log_path}, final train MAE {last:.4f}")


def cmd_eval(a):
    from . import plotting
    from .evaluation import evaluate

    params = fio.load_checkpoint(a.ckpt)
    names, data = _dataset(a.data)
    try:
        mcfg = _model_config(params)
    except KeyError as e:
        raise fio.FormatError(f"checkpoint does not describe this model: missing {e}") from e
    rep = evaluate(params, data, a.sigma, mcfg, names)
    report = Path(a.report)
    report.write_text(json.dumps(rep.to_dict(), indent=2))
    plotting.count_scatter(rep, report.with_suffix(".png"))
    print(f"MAE {rep.mae:.4f}  MSE {rep.mse:.4f}  -> {report}")


def cmd_predict(a):
    from . import plotting
    from .evaluation import predict_density

    params = fio.load_checkpoint(a.ckpt)
    img = fio.read_pgm(a.image)
    dens = predict_density(params, img, _model_config(params))
    fio.write_dmap(a.out_dmap, dens, 8)
    if a.out_pgm:
        fio.export_density_image(dens, a.out_pgm)
        plotting.density_panel(img, dens, Path(a.out_pgm).with_suffix(".png"))
    print(f"count {float(dens.sum()):.4f}")


def cmd_gradcheck(a):
    from .gradsuite import model_suite, op_suite

    results = op_suite(range(a.seeds))
    if a.full_model:
        results += model_suite()
    bad = 0
    for r in results:
        bad += not r.ok
        print(f"{'PASS' if r.ok else 'FAIL'}  {r.name:32s} max_rel_err {r.max_rel_err:.3e}  ({r.checked} coords)")
    if bad:
        raise NumericalError(f"{bad} gradient check(s) failed")


def cmd_ablate(a):
    from . import plotting
    from .evaluation import ablate

    names, data = _dataset(a.data)
    res = ablate(data, _train_config(a, 2.0), ModelConfig(base_channels=a.base_channels), names)
    report = Path(a.report)
    report.write_text(json.dumps(res.to_dict(), indent=2))
    plotting.ablation_summary(res, report.with_suffix(".png"))
    for key, r in (("focusing (gamma=2)", res.hef), ("plain L2 (gamma=0)", res.l2)):
        print(f"{key:20s} MAE {r.mae:.4f}  MSE {r.mse:.4f}  hard under-est {r.hard_underestimation}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ssrhef", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate synthetic scenes")
    s.add_argument("--out", required=True)
    s.add_argument("--images", type=int, default=8)
    s.add_argument("--easy", type=int, default=8)
    s.add_argument("--hard", type=int, default=7)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("gen-gt", help="encode ground truth for one annotation file")
    s.add_argument("--ann", required=True)
    s.add_argument("--sigma", type=float, default=gtm.DEFAULT_SIGMA)
    s.add_argument("--out", required=True)
    s.add_argument("--max-count", type=float, default=None, help="dataset maximum count C (default: this image)")
    s.add_argument("--classes", type=int, default=gtm.NUM_CLASSES)
    s.set_defaults(fn=cmd_gen_gt)

    s = sub.add_parser("train", help="train a model")
    _train_args(s)
    s.add_argument("--gamma", type=float, default=TrainConfig().gamma)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--log", default=None, help="log path (default: checkpoint path with .log)")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--sigma", type=float, default=gtm.DEFAULT_SIGMA)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("predict", help="density map for one image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out-dmap", required=True)
    s.add_argument("--out-pgm", default=None)
    s.set_defaults(fn=cmd_predict)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    s.add_argument("--full-model", action="store_true")
    s.add_argument("--seeds", type=int, default=10)
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("ablate", help="focusing vs plain L2, seed-matched")
    _train_args(s)
    s.add_argument("--report", required=True)
    s.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(message)s")
    try:
        a.fn(a)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (fio.FormatError, ValueError, KeyError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

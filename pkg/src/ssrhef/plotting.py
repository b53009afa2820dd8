"""Figures written next to the CLI's text and JSON outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def _moving_average(x, k=100):
    x = np.asarray(x, dtype=float)
    if x.size < k:
        return np.arange(1, x.size + 1), np.cumsum(x) / np.arange(1, x.size + 1)
    c = np.cumsum(np.insert(x, 0, 0.0))
    return np.arange(k, x.size + 1), (c[k:] - c[:-k]) / k


def loss_curve(tlog, path, title="training loss"):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 3))
        its = [it for it, _ in tlog.losses]
        ax.semilogy(its, tlog.overall(), color="0.75", lw=0.6, label="overall")
        xs, ma = _moving_average(tlog.overall())
        ax.semilogy(xs, ma, color="k", lw=1.2, label="100-iter mean")
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.set_title(title)
        if tlog.evals:
            ax2 = ax.twinx()
            ax2.plot(*zip(*tlog.evals), "o-", color="tab:red", ms=3, lw=1, label="train MAE")
            ax2.set_ylabel("train MAE", color="tab:red")
        ax.legend(loc="upper right")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def count_scatter(report, path, title="estimated vs ground-truth count"):
    gt = [s.gt_count for s in report.images]
    est = [s.est_count for s in report.images]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(3.5, 3.5))
        ax.scatter(gt, est, s=14, color="k")
        lo, hi = min(gt + est + [0.0]), max(gt + est + [1.0])
        ax.plot([lo, hi], [lo, hi], "--", color="0.6", lw=0.8)
        ax.set_xlabel("ground truth")
        ax.set_ylabel("estimate")
        ax.set_title(f"{title}\nMAE {report.mae:.2f}  MSE {report.mse:.2f}")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def density_panel(image, density, path, title=None):
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, 2, figsize=(6, 3))
        axes[0].imshow(image, cmap="gray", vmin=0, vmax=1)
        axes[0].set_title("input")
        im = axes[1].imshow(density, cmap="jet")
        axes[1].set_title(title or f"density (sum {float(np.sum(density)):.2f})")
        fig.colorbar(im, ax=axes[1], fraction=0.046)
        for a in axes:
            a.set_axis_off()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def ablation_summary(result, path):
    arms = (("focusing", result.hef, result.hef_log), ("plain L2", result.l2, result.l2_log))
    with plt.rc_context(RC):
        fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(8, 3))
        metrics = ["mae", "mse", "hard_underestimation"]
        x = np.arange(len(metrics))
        for i, (label, rep, _) in enumerate(arms):
            vals = [getattr(rep, m) or 0.0 for m in metrics]
            ax0.bar(x + (i - 0.5) * 0.38, vals, 0.38, label=label, color=("k", "0.6")[i])
        ax0.set_xticks(x, ["MAE", "MSE", "hard under-est."])
        ax0.legend()
        for i, (label, _, lg) in enumerate(arms):
            xs, ma = _moving_average(lg.overall())
            ax1.semilogy(xs, ma, color=("k", "0.6")[i], label=label)
        ax1.set_xlabel("iteration")
        ax1.set_ylabel("overall loss (100-iter mean)")
        ax1.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)

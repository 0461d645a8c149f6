"""Report figures written to files: cost breakdown, kernel scaling, loss curve."""

from __future__ import annotations

from collections import OrderedDict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.ticker import MaxNLocator  # noqa: E402

from .analyzer import CostReport, ScalingReport  # noqa: E402

__all__ = ["RC_PARAMS", "plot_layer_costs", "plot_scaling", "plot_loss_curve", "stage_of"]

RC_PARAMS = {
    "figure.figsize": (6.4, 4.0),
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.4,
    "svg.hashsalt": "stripdet",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps repeated renders byte-identical
    meta = {"Software": None} if path.suffix.lower() == ".png" else {"Date": None}
    fig.savefig(path, metadata=meta)
    plt.close(fig)
    return path


def stage_of(layer_name: str) -> str:
    """Group key for a layer path: ``pfn``, ``stage0``..``stage2`` or ``head.*``."""
    parts = layer_name.split(".")
    if parts[0] == "backbone" and len(parts) > 1:
        return parts[1]
    if parts[0] == "head" and len(parts) > 1:
        return f"head.{parts[1]}"
    return parts[0]


def plot_layer_costs(report: CostReport, path) -> Path:
    groups: OrderedDict[str, list[int]] = OrderedDict()
    for s in report.layers:
        acc = groups.setdefault(stage_of(s.name), [0, 0])
        acc[0] += s.params
        acc[1] += s.macs
    names = list(groups)
    params = np.array([v[0] for v in groups.values()]) / 1e3
    macs = np.array([v[1] for v in groups.values()]) / 1e9
    h, w = report.bev_hw
    with plt.rc_context(RC_PARAMS):
        fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(8.0, 3.6))
        pos = np.arange(len(names))
        ax0.barh(pos, params, color="0.35")
        ax0.set_yticks(pos, names)
        ax0.invert_yaxis()
        ax0.set_xlabel("parameters (thousands)")
        ax1.barh(pos, macs, color="tab:blue")
        ax1.set_yticks(pos, [])
        ax1.invert_yaxis()
        ax1.set_xlabel(f"MACs (G) at {h}x{w}")
        fig.suptitle(f"{report.params / 1e6:.3f}M params, {report.macs / 1e9:.2f} GMACs")
        fig.tight_layout()
        return _save(fig, path)


def plot_scaling(rep: ScalingReport, path) -> Path:
    ks = np.asarray(rep.ks, dtype=float)
    with plt.rc_context(RC_PARAMS):
        fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(8.0, 3.4))
        for ax, strip, full, label, key in (
            (ax0, rep.strip_params, rep.full_params, "parameters", "params"),
            (ax1, rep.strip_macs, rep.full_macs, "MACs", "macs"),
        ):
            ax.loglog(ks, strip, "o-", label=f"1xK + Kx1 (slope {rep.exponents[f'strip_{key}']:.2f})")
            ax.loglog(ks, full, "s--", label=f"KxK (slope {rep.exponents[f'full_{key}']:.2f})")
            ax.set_xticks(ks, [str(int(k)) for k in ks])
            ax.minorticks_off()
            ax.set_xlabel("kernel size K")
            ax.set_ylabel(label)
            ax.legend(loc="upper left")
        fig.tight_layout()
        return _save(fig, path)


def plot_loss_curve(losses, path, components=None) -> Path:
    steps = np.arange(1, len(losses) + 1)
    with plt.rc_context(RC_PARAMS):
        fig, ax = plt.subplots()
        ax.semilogy(steps, losses, color="k", label="total")
        if components is not None and len(components):
            comp = np.asarray(components, dtype=float)
            for i, name in enumerate(("cls", "bbox", "dir")):
                ax.semilogy(steps, np.maximum(comp[:, i], 1e-12), lw=0.9, alpha=0.8, label=name)
        ax.xaxis.set_major_locator(MaxNLocator(integer=True))
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend()
        fig.tight_layout()
        return _save(fig, path)

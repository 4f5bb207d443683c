"""Report figures written next to the CSV/JSON outputs."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # no version stamp: identical runs give identical files
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def energy_curves(log: list[dict], path) -> Path:
    """Energy per group against the global epoch index, stages shaded."""
    series = defaultdict(list)
    for rec in log:
        series[rec["group"]].append((rec["stage"], rec["epoch"], rec["E"]))
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(6, 3.2))
        stage_starts = {}
        for gid, recs in sorted(series.items()):
            recs.sort()
            x = np.arange(len(recs))
            for i, (s, _, _) in enumerate(recs):
                stage_starts.setdefault(s, i)
            ax.plot(x, [r[2] for r in recs], lw=1, label=f"group {gid}")
        for s, i in sorted(stage_starts.items()):
            if s > 0:
                ax.axvline(i - 0.5, color="0.8", lw=0.8, zorder=0)
        ax.set_xlabel("epoch (all stages)")
        ax.set_ylabel("energy")
        if len(series) <= 8:
            ax.legend(frameon=False, fontsize=7)
        fig.tight_layout()
        return _save(fig, path)


def depth_error_maps(estimate, reference, path, cameras=None, vmax=None) -> Path:
    """Signed depth error (estimate - reference) for a few cameras."""
    idx = list(range(len(estimate))) if cameras is None else list(cameras)
    idx = idx[:6]
    diffs = [np.where(reference.cameras[j].mask, estimate.cameras[j].depth - reference.cameras[j].depth, np.nan) for j in idx]
    if vmax is None:
        finite = np.concatenate([np.abs(d[np.isfinite(d)]) for d in diffs])
        vmax = float(np.percentile(finite, 95)) if finite.size else 1.0
        vmax = vmax or 1.0
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(1, len(idx), figsize=(2.2 * len(idx), 2.4), squeeze=False)
        for ax, j, d in zip(axes[0], idx, diffs):
            im = ax.imshow(d, cmap="RdBu_r", vmin=-vmax, vmax=vmax)
            ax.set_title(f"camera {j}")
            ax.set_xticks([])
            ax.set_yticks([])
        fig.colorbar(im, ax=axes[0].tolist(), shrink=0.8, label="depth error")
        return _save(fig, path)


def distance_histogram(acc: np.ndarray, comp: np.ndarray, path, bins: int = 60) -> Path:
    """Histograms of recon->GT and GT->recon nearest distances."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        hi = float(max(np.percentile(acc, 99), np.percentile(comp, 99), 1e-12))
        edges = np.linspace(0, hi, bins + 1)
        ax.hist(acc, bins=edges, histtype="step", label="accuracy (recon to GT)")
        ax.hist(comp, bins=edges, histtype="step", label="completeness (GT to recon)")
        ax.set_xlabel("nearest distance")
        ax.set_ylabel("points")
        ax.legend(frameon=False, fontsize=7)
        fig.tight_layout()
        return _save(fig, path)

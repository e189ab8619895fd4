"""Figures written next to CLI reports."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}

# fixed metadata keeps repeated runs byte-identical
_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, dpi=150, bbox_inches="tight", metadata=_META)
    plt.close(fig)
    return str(path)


def plot_preservation(records, path):
    """Preserved fraction per resolution, one line per scan."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.0, 2.8))
        scans = sorted({r["scan"] for r in records})
        for scan in scans:
            rows = [r for r in records if r["scan"] == scan]
            ax.plot([r["resolution"] for r in rows], [r["fraction"] for r in rows],
                    marker="s", markersize=4, label=scan)
        ax.set_xlabel("resolution (H x W)")
        ax.set_ylabel("preserved / all points")
        ax.set_ylim(top=1.0)
        if len(scans) <= 8:
            ax.legend(frameon=False)
        return _save(fig, path)


def plot_sampling_times(rows, path):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.0, 2.8))
        n = [r["N"] for r in rows]
        ax.plot(n, [r["f2ps_ms"] for r in rows], marker="o", markersize=4, label="F2PS")
        timed = [r for r in rows if r.get("fps_ms") is not None]
        if timed:
            ax.plot([r["N"] for r in timed], [r["fps_ms"] for r in timed],
                    marker="^", markersize=4, label="FPS")
        ax.set_xlabel("points")
        ax.set_ylabel("time (ms)")
        ax.set_yscale("log")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_frustum_sizes(grid, path):
    """Points per cell as an image; empty cells are white."""
    img = np.zeros((grid.H, grid.W))
    img.reshape(-1)[grid.cell_keys] = grid.cell_counts
    with plt.rc_context(RC):
        aspect = max(grid.W / grid.H / 4.0, 1.0)
        fig, ax = plt.subplots(figsize=(8.0, 8.0 / aspect / 4.0 + 0.8))
        shown = np.ma.masked_equal(img, 0)
        im = ax.imshow(shown, aspect="auto", interpolation="nearest", cmap="viridis")
        ax.set_xlabel("u (column)")
        ax.set_ylabel("v (row)")
        fig.colorbar(im, ax=ax, label="points in frustum")
        return _save(fig, path)

"""Matplotlib figures written next to the CLI's tables."""
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "legend.fontsize": 8,
    "figure.dpi": 120,
    "savefig.bbox": "tight",
}


def _save(fig, path):
    fig.savefig(path)
    plt.close(fig)
    return path


def rank_histogram(counts, path, title="Rank histogram"):
    """Relative frequencies of ranks 0..k with the uniform level marked."""
    counts = np.asarray(counts, float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 2.8))
        freq = counts / counts.sum() if counts.sum() else counts
        ax.bar(np.arange(counts.size), freq, width=0.9, color="0.45")
        ax.axhline(1 / counts.size, color="firebrick", lw=1, ls="--")
        ax.set_xlabel("rank of truth")
        ax.set_ylabel("relative frequency")
        ax.set_title(title)
        return _save(fig, path)


def pit_histogram(counts, path, title="PIT histogram"):
    counts = np.asarray(counts, float)
    edges = np.linspace(0, 1, counts.size + 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 2.8))
        ax.bar(edges[:-1], counts / counts.sum() * counts.size, width=np.diff(edges),
               align="edge", color="0.45", edgecolor="white")
        ax.axhline(1, color="firebrick", lw=1, ls="--")
        ax.set_xlabel("PIT")
        ax.set_ylabel("density")
        ax.set_title(title)
        return _save(fig, path)


def _field(ax, grid, values, cmap, vmin=None, vmax=None):
    dlat = 180.0 / grid.h
    dlon = 360.0 / grid.w
    extent = (grid.lon[0] - dlon / 2, grid.lon[-1] + dlon / 2,
              grid.lat[0] - dlat / 2, grid.lat[-1] + dlat / 2)
    return ax.imshow(values, origin="lower", extent=extent, cmap=cmap, vmin=vmin, vmax=vmax,
                     aspect="auto", interpolation="nearest")


def correlation_maps(fields, titles, grid, point, path):
    """Side-by-side correlation fields with the reference point marked."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(fields), figsize=(4 * len(fields), 2.6), squeeze=False)
        for ax, values, title in zip(axes[0], fields, titles):
            im = _field(ax, grid, values, "RdBu_r", -1, 1)
            ax.plot(grid.lon[point[1]], grid.lat[point[0]], marker="o", mfc="yellow", mec="k", ms=6)
            ax.set_title(title)
            ax.set_xlabel("longitude")
        axes[0][0].set_ylabel("latitude")
        fig.colorbar(im, ax=axes[0].tolist(), shrink=0.9, label="correlation")
        return _save(fig, path)


def attention_maps(maps, grid, path, layer, max_heads=8):
    """One panel per head of a layer's mean-key x mean-query map."""
    maps = np.asarray(maps)[:max_heads]
    n = len(maps)
    cols = min(n, 4)
    rows = int(np.ceil(n / cols))
    lim = float(np.max(np.abs(maps))) or 1.0
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(rows, cols, figsize=(3 * cols, 2 * rows), squeeze=False)
        for i, ax in enumerate(axes.flat):
            if i >= n:
                ax.axis("off")
                continue
            im = _field(ax, grid, maps[i], "RdBu_r", -lim, lim)
            ax.set_title(f"layer {layer}, head {i}")
        fig.colorbar(im, ax=axes.ravel().tolist(), shrink=0.9)
        return _save(fig, path)


def training_history(history, path):
    epochs = [r["epoch"] for r in history]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 2.8))
        ax.plot(epochs[1:], [r["train_loss"] for r in history[1:]], label="train")
        ax.plot(epochs, [r["val_crps"] for r in history], label="validation")
        ax.set_xlabel("epoch")
        ax.set_ylabel("CRPS")
        ax.legend(frameon=False)
        ax2 = ax.twinx()
        ax2.semilogy(epochs, [r["lr"] for r in history], color="0.6", lw=0.8, ls=":")
        ax2.set_ylabel("learning rate")
        return _save(fig, path)

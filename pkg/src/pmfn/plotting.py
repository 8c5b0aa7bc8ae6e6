"""Report figures. Everything renders off-screen to files."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}

LABELS = {
    "hn": "HN",
    "ln": "LN",
    "sf": "Self-fusion (LN)",
    "pseudo": "Pseudo-modality",
    "out": "PMFN",
    "out_baseline": "MSUN baseline",
    "clean": "Clean",
}


def _label(key):
    return LABELS.get(key, key)


def _save(fig, path, layout=True):
    if layout:
        fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_layer_metrics(report, path):
    """Grouped bars of SNR, PSNR and CNR per layer for each image."""
    images = list(report.layers)
    layers = list(dict.fromkeys(l for d in report.layers.values() for l in d))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(10, 3.3))
        width = 0.8 / max(len(images), 1)
        x = np.arange(len(layers))
        for ax, metric, unit in zip(axes, ("snr", "psnr", "cnr"), ("dB", "dB", "")):
            for k, img in enumerate(images):
                vals = [report.layers[img].get(l, {}).get(metric, np.nan) for l in layers]
                ax.bar(x + (k - (len(images) - 1) / 2) * width, vals, width, label=_label(img))
            ax.set_xticks(x)
            ax.set_xticklabels(layers)
            ax.set_title(metric.upper())
            if unit:
                ax.set_ylabel(unit)
        handles, names = axes[0].get_legend_handles_labels()
        fig.legend(handles, names, loc="upper center", ncol=len(images), frameon=False)
        fig.tight_layout(rect=(0, 0, 1, 0.9))
        return _save(fig, path, layout=False)


def plot_ssim(report, path):
    images = list(report.ssim)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.bar(range(len(images)), [report.ssim[k] for k in images], color="0.4")
        ax.set_xticks(range(len(images)))
        ax.set_xticklabels([_label(k) for k in images], rotation=30, ha="right")
        ax.set_ylabel("SSIM")
        ax.set_ylim(0, 1)
        return _save(fig, path)


def plot_column_profiles(profiles, path, boundaries=()):
    """Row profiles (mean over columns minus ROI mean), one line per image.

    ``boundaries`` are row positions drawn as dashed vertical lines.
    """
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        for key, v in profiles.items():
            ax.plot(np.arange(len(v)), v, label=_label(key))
        for b in boundaries:
            ax.axvline(b, color="0.6", ls="--", lw=0.8)
        ax.axhline(0.0, color="0.8", lw=0.6)
        ax.set_xlabel("row in ROI")
        ax.set_ylabel("mean intensity - ROI mean")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_layer_means(layer_means, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        for key, d in layer_means.items():
            ax.plot(list(d), list(d.values()), marker="o", label=_label(key))
        ax.set_ylabel("mean intensity")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_loss_history(history, path, steps_per_epoch=None):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot(history, lw=0.8)
        if steps_per_epoch:
            for e in range(steps_per_epoch, len(history), steps_per_epoch):
                ax.axvline(e, color="0.85", lw=0.5)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        if len(history) and min(history) > 0:
            ax.set_yscale("log")
        return _save(fig, path)


def plot_images(images, path, vmax=None):
    """Side-by-side grayscale panels, e.g. HN / LN / baseline / PMFN."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(images), figsize=(2.2 * len(images), 2.4))
        axes = np.atleast_1d(axes)
        for ax, (key, img) in zip(axes, images.items()):
            ax.imshow(img, cmap="gray", vmin=0, vmax=vmax)
            ax.set_title(_label(key))
            ax.axis("off")
        return _save(fig, path)

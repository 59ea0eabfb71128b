# file: plot_manager.py

from matplotlib.figure import Figure
import numpy as np
import os

# --- Constants for Chart Styling ---
BG_COLOR = '#2B2B2B'
FACE_COLOR = '#333333'
TEXT_COLOR = 'white'
SKY_BLUE = 'skyblue'
SEA_GREEN = 'mediumseagreen'
GOLD = '#FFD700'
TOMATO = 'tomato'


def _setup_base_chart(title, xlabel=None, ylabel=None, ax=None, fig=None):
    """Creates and styles a base Matplotlib figure and axis to avoid repeating code."""
    if ax is None:
        fig = Figure(figsize=(6, 4), facecolor=BG_COLOR, constrained_layout=True)
        ax = fig.add_subplot(111)

    ax.set_title(title, color=TEXT_COLOR)
    if xlabel: ax.set_xlabel(xlabel, color=TEXT_COLOR)
    if ylabel: ax.set_ylabel(ylabel, color=TEXT_COLOR)
    ax.tick_params(colors=TEXT_COLOR, labelcolor=TEXT_COLOR)
    for spine in ax.spines.values():
        spine.set_color(TEXT_COLOR)
    ax.set_facecolor(FACE_COLOR)
    return fig, ax


def save_figure(fig, path, dpi=100):
    """Write a figure to disk (format from the extension). Works without a display."""
    if fig is None:
        return None
    out_dir = os.path.dirname(os.path.abspath(path))
    os.makedirs(out_dir, exist_ok=True)
    fig.savefig(path, dpi=dpi, facecolor=fig.get_facecolor())
    return path


def create_training_curves(history, title="Training curves"):
    """Accuracy and RMSE per epoch for train and validation (two stacked panels).
    history: list of dicts with epoch, train_accuracy, train_rmse, val_accuracy, val_rmse.
    """
    if not history:
        return None
    epochs = [h['epoch'] for h in history]
    fig = Figure(figsize=(6, 6), facecolor=BG_COLOR, constrained_layout=True)
    ax_acc, ax_rmse = fig.subplots(2, 1, sharex=True)
    for ax, metric, label in ((ax_acc, 'accuracy', 'Accuracy'), (ax_rmse, 'rmse', 'RMSE')):
        _setup_base_chart(f"{title}: {label}" if ax is ax_acc else label, ylabel=label, ax=ax, fig=fig)
        ax.plot(epochs, [h[f'train_{metric}'] for h in history], color=SKY_BLUE, label='train')
        val = [h.get(f'val_{metric}') for h in history]
        if any(v is not None for v in val):
            ax.plot(epochs, [np.nan if v is None else v for v in val], color=GOLD, label='validation')
        ax.legend(loc='best')
    ax_rmse.set_xlabel("Epoch", color=TEXT_COLOR)
    return fig


def create_confusion_heatmap(report, title=None):
    """Confusion matrix of an EvalReport as an annotated heatmap."""
    if report is None:
        return None
    cm = report.confusion
    counts = cm.counts
    k = counts.shape[0]
    fig, ax = _setup_base_chart(title or f"Confusion matrix ({report.granularity})",
                                xlabel="Predicted", ylabel="True")
    im = ax.imshow(counts, aspect='auto', cmap='viridis')
    ax.set_xticks(range(k))
    ax.set_yticks(range(k))
    ax.set_xticklabels(cm.class_names, rotation=45 if k > 4 else 0, color=TEXT_COLOR)
    ax.set_yticklabels(cm.class_names, color=TEXT_COLOR)
    # Annotations get unreadable past a dozen classes
    if k <= 12:
        threshold = counts.max() / 2 if counts.size else 0
        for i in range(k):
            for j in range(k):
                ax.text(j, i, str(counts[i, j]), ha='center', va='center',
                        color='black' if counts[i, j] > threshold else TEXT_COLOR)
    cbar = fig.colorbar(im, ax=ax)
    cbar.ax.yaxis.set_tick_params(color=TEXT_COLOR, labelcolor=TEXT_COLOR)
    return fig


def create_waveform_comparison(original, augmented, technique, title=None):
    """Original segment above its augmented copy, both on a seconds axis."""
    if original is None or augmented is None:
        return None
    fig = Figure(figsize=(6, 5), facecolor=BG_COLOR, constrained_layout=True)
    axes = fig.subplots(2, 1, sharey=True)
    for ax, signal, label, color in ((axes[0], original, "original", SKY_BLUE),
                                     (axes[1], augmented, technique, SEA_GREEN)):
        _setup_base_chart(label if title is None or ax is axes[1] else f"{title}: {label}",
                          ylabel="Amplitude", ax=ax, fig=fig)
        t = np.arange(len(signal)) / signal.sample_rate_hz
        ax.plot(t, signal.samples, color=color, linewidth=0.6)
        ax.set_ylim(-1.05, 1.05)
    axes[1].set_xlabel("Time (s)", color=TEXT_COLOR)
    return fig


def create_class_distribution_chart(summary_df, title="Corpus repartition"):
    """Grouped bars of participants per (gender, label) and split.
    summary_df: DatasetManifest.summary() output (margins are dropped).
    """
    if summary_df is None or summary_df.empty:
        return None
    df = summary_df.drop(index='total', errors='ignore').drop(columns='total', errors='ignore')
    if df.empty:
        return None
    labels = [f"{g}/{v}" if isinstance(idx, tuple) else str(idx)
              for idx in df.index for g, v in [idx if isinstance(idx, tuple) else (idx, '')]]
    fig, ax = _setup_base_chart(title, xlabel="Gender / label", ylabel="Participants")
    width = 0.8 / max(len(df.columns), 1)
    x = np.arange(len(df.index))
    colors = [SKY_BLUE, GOLD, SEA_GREEN, TOMATO]
    for j, split in enumerate(df.columns):
        ax.bar(x + j * width, df[split].values, width, label=str(split), color=colors[j % len(colors)])
    ax.set_xticks(x + width * (len(df.columns) - 1) / 2)
    ax.set_xticklabels(labels, rotation=90 if len(labels) > 8 else 0, color=TEXT_COLOR)
    ax.legend(loc='best')
    return fig

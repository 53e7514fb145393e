"""Matplotlib figure rendering for PR and learning curves. Output is SVG
with a fixed hash salt and no timestamp so identical inputs produce
identical files."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

plt.rcParams["svg.hashsalt"] = "prior3d"
plt.rcParams["figure.figsize"] = (7.0, 3.2)
plt.rcParams["font.size"] = 9

_COLORS = ("tab:blue", "tab:orange", "tab:green", "tab:red", "tab:purple",
           "tab:brown", "tab:pink", "tab:gray")


def _save(fig, out_path):
    fig.savefig(out_path, format="svg", metadata={"Date": None}, bbox_inches="tight")
    plt.close(fig)


def plot_pr_curves(rows, out_path, matcher="iou", classes=("VEHICLE", "HUMAN")):
    """rows: (label, matcher, class, threshold, recall, precision) tuples.
    One subplot per class, one line per label, shared axes."""
    series = {}
    for label, m, cls, _thr, r, p in rows:
        if m != matcher:
            continue
        series.setdefault(cls, {}).setdefault(label, []).append((r, p))
    fig, axes = plt.subplots(1, len(classes), sharex=True, sharey=True)
    if len(classes) == 1:
        axes = [axes]
    for ax, cls in zip(axes, classes):
        n_lines = 0
        for li, (label, pts) in enumerate(sorted(series.get(cls, {}).items())):
            rs = [0.0] + [r for r, _ in pts]
            ps = [pts[0][1]] + [p for _, p in pts]
            ax.plot(rs, ps, color=_COLORS[li % len(_COLORS)], label=label, linewidth=1.2)
            n_lines += 1
        ax.set_title(cls)
        ax.set_xlabel("recall")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.02)
        ax.grid(alpha=0.3)
        if n_lines:
            ax.legend(fontsize=7, loc="best")
    axes[0].set_ylabel("precision")
    _save(fig, out_path)


def plot_learning_curves(curves, out_path, value="loss"):
    """curves: {label: [record dict per epoch]}; plots `value` vs epoch."""
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    for li, (label, records) in enumerate(sorted(curves.items())):
        xs = [r["epoch"] for r in records if value in r]
        ys = [r[value] for r in records if value in r]
        ax.plot(xs, ys, color=_COLORS[li % len(_COLORS)], label=label, linewidth=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel(value)
    ax.grid(alpha=0.3)
    if curves:
        ax.legend(fontsize=7, loc="best")
    _save(fig, out_path)

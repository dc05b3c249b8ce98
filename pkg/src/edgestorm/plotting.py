"""Figures for the CLI reports. Everything renders off-screen to PNG."""

import matplotlib

matplotlib.use("Agg")

import numpy as np  # noqa: E402
from matplotlib import pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 4.0),
    "figure.dpi": 100,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.fontsize": 8,
    "legend.frameon": False,
}
VARIANT_COLORS = {"U": "tab:blue", "S": "tab:orange", "A": "tab:green", "I": "tab:red", "clean": "black"}


def _save(fig, path):
    # strip the version stamp so identical data gives identical bytes
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def _iso_f_lines(ax):
    r = np.linspace(0.01, 1, 200)
    for f in (0.2, 0.4, 0.6, 0.8):
        p = f * r / (2 * r - f)
        ok = (p > 0) & (p <= 1)
        ax.plot(r[ok], p[ok], color="0.85", lw=0.7, zorder=0)


def pr_curves(curves, path, title="Precision / recall"):
    """``curves`` maps a label to a list of PRPoint; the ODS point is marked."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        _iso_f_lines(ax)
        for name, pts in curves.items():
            color = VARIANT_COLORS.get(str(name).split("-")[0])
            r = [p.recall for p in pts]
            pr = [p.precision for p in pts]
            best = max(pts, key=lambda p: p.f)
            (line,) = ax.plot(r, pr, lw=1.4, color=color, label=f"{name} (F={best.f:.3f})")
            ax.plot(best.recall, best.precision, "o", ms=4, color=line.get_color())
        ax.set(xlim=(0, 1), ylim=(0, 1), xlabel="recall", ylabel="precision", title=title)
        ax.legend(loc="lower left")
        return _save(fig, path)


def epsilon_sweep(epsilons, scores, path, ylabel="ODS F"):
    """``scores`` maps an attack name to one value per epsilon."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, values in scores.items():
            color = VARIANT_COLORS.get(str(name).split("-")[0])
            ax.plot(epsilons, values, "o-", ms=3, lw=1.2, color=color, label=name)
        ax.set_xscale("symlog", linthresh=1)
        ax.set_xticks(list(epsilons))
        ax.set_xticklabels([f"{e:g}" for e in epsilons])
        ax.set(xlabel="epsilon", ylabel=ylabel, ylim=(0, 1))
        ax.legend()
        return _save(fig, path)


def loss_trace(values, path, ylabel="loss", xlabel="epoch", second=None, second_label=None):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        x = np.arange(1, len(values) + 1)
        ax.plot(x, values, lw=1.4, color="tab:blue")
        ax.set(xlabel=xlabel, ylabel=ylabel)
        if second is not None:
            ax2 = ax.twinx()
            ax2.plot(x, second, lw=1.2, color="tab:orange")
            ax2.set_ylabel(second_label or "")
            ax2.grid(False)
        return _save(fig, path)


def attack_traces(traces, path):
    """One faint line per image plus the mean, over attack iterations."""
    traces = np.asarray(traces, dtype=np.float64)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        steps = np.arange(traces.shape[1])
        for t in traces:
            ax.plot(steps, t, color="tab:blue", alpha=0.15, lw=0.8)
        ax.plot(steps, traces.mean(axis=0), color="black", lw=1.8, label="mean")
        ax.set(xlabel="iteration", ylabel="attack loss")
        ax.legend()
        return _save(fig, path)


def side_output_bars(scores, clean, path):
    """ODS F after attacking each side output alone."""
    names = list(scores)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.bar(range(len(names)), [scores[n] for n in names], color="tab:red", alpha=0.8)
        ax.axhline(clean, color="black", ls="--", lw=1, label=f"clean {clean:.3f}")
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names)
        ax.set(xlabel="attacked output", ylabel="ODS F", ylim=(0, 1))
        ax.legend()
        return _save(fig, path)


def accuracy_bars(report, path):
    labels = ["clean", "attacked", "permuted"]
    values = [report.clean, report.attacked, report.permuted]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.bar(labels, values, color=["0.3", "tab:red", "tab:gray"])
        for i, v in enumerate(values):
            ax.text(i, v + 0.02, f"{v:.3f}", ha="center", fontsize=8)
        ax.set(ylabel="classifier accuracy", ylim=(0, 1.1), title=f"{report.variant}, eps={report.epsilon:g}")
        return _save(fig, path)


def degradation_bars(rows, path):
    """Mean l2 / ssim / essim for each attack in ``rows`` (name -> dict)."""
    keys = ("l2", "ssim", "essim")
    names = list(rows)
    width = 0.8 / len(keys)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for j, k in enumerate(keys):
            ax.bar(np.arange(len(names)) + j * width, [rows[n][k] for n in names], width, label=k)
        ax.set_xticks(np.arange(len(names)) + width)
        ax.set_xticklabels(names)
        ax.set(ylim=(0, 1.05))
        ax.legend()
        return _save(fig, path)


def example_grid(clean, adversarial, path, edges_clean=None, edges_adv=None, n=4):
    """Rows: clean image, attacked image, amplified perturbation, and optionally edge maps."""
    n = min(n, len(clean))
    rows = [("clean", clean), ("attacked", adversarial)]
    diff = np.asarray(adversarial, dtype=np.float64) - np.asarray(clean, dtype=np.float64)
    span = max(float(np.abs(diff).max()), 1e-12)
    rows.append(("perturbation", 0.5 + 0.5 * diff / span))
    if edges_clean is not None:
        rows.append(("edges clean", edges_clean))
    if edges_adv is not None:
        rows.append(("edges attacked", edges_adv))
    fig, axes = plt.subplots(len(rows), n, figsize=(1.6 * n, 1.6 * len(rows)), squeeze=False)
    for r, (name, stack) in enumerate(rows):
        for c in range(n):
            a = np.asarray(stack[c])
            ax = axes[r, c]
            if a.ndim == 3:
                a = np.clip(a / 255.0 if a.max() > 1 else a, 0, 1)
                ax.imshow(a, interpolation="nearest")
            else:
                ax.imshow(a, cmap="gray", vmin=0, vmax=1, interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if c == 0:
                ax.set_ylabel(name, fontsize=8)
    fig.tight_layout()
    return _save(fig, path)

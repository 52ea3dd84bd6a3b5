"""Report figures for the command line tools (PNG files, no display needed)."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

FIG_SIZE = (6.4, 3.6)
DPI = 120


def _finish(fig, ax, path):
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI, metadata={"Software": None})
    plt.close(fig)


def plot_loss_trace(rows, path, title="registration loss"):
    """Loss per optimizer step, one coloured segment per scale.

    ``rows`` are ``(scale_factor, iteration, loss, valid_fraction)`` tuples in
    optimization order, as produced by ``RegistrationResult.trace_rows``.
    """
    rows = list(rows)
    fig, ax = plt.subplots(figsize=FIG_SIZE)
    step = 0
    factors = []
    for f, _, _, _ in rows:
        if f not in factors:
            factors.append(f)
    for f in factors:
        losses = [r[2] for r in rows if r[0] == f]
        xs = range(step, step + len(losses))
        ax.plot(xs, losses, lw=1.2, label=f"factor {f}")
        step += len(losses)
    ax.set_xlabel("optimizer step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend(frameon=False, fontsize=8)
    _finish(fig, ax, path)


def plot_dice(per_label, mean, path, title="Dice per label"):
    labels = sorted(per_label)
    fig, ax = plt.subplots(figsize=FIG_SIZE)
    ax.bar([str(l) for l in labels], [per_label[l] for l in labels], color="0.55")
    ax.axhline(mean, color="C3", lw=1.0, ls="--", label=f"mean {mean:.3f}")
    ax.set_ylim(0.0, 1.0)
    ax.set_xlabel("label")
    ax.set_ylabel("DSC")
    ax.set_title(title)
    ax.legend(frameon=False, fontsize=8)
    _finish(fig, ax, path)

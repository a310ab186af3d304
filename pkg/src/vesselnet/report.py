"""Training/evaluation report files: loss CSV, loss-curve figure, metrics JSON."""

import json

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def write_loss_csv(path, history):
    """Write the per-step mean loss as `step,loss` rows (header included)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("step,loss\n")
        for step, loss in enumerate(history, start=1):
            fh.write(f"{step},{loss!r}\n")


def save_loss_curve(path, history):
    """Render the training loss curve next to the CSV."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.plot(range(1, len(history) + 1), history, lw=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("mean dice loss")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_metrics_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")

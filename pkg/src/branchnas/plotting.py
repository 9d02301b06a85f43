"""Curve figures for search histories."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

CURVES = {
    "val_ap": "validation AP",
    "reward_mean": "controller mean reward",
    "alpha_entropy_nats": "cell-logit entropy (nats)",
    "policy_entropy_nats": "policy entropy (nats)",
}

STYLE = {
    "figure.figsize": (5.0, 3.2),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
}


def plot_history(history: list[dict], out_dir: str | Path) -> list[Path]:
    """One PNG per curve plus ``curves.csv``; missing values (e.g. no reward during
    warmup) are left out of the line but kept as empty CSV cells."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    epochs = [rec["epoch"] for rec in history]
    written = []
    with plt.rc_context(STYLE):
        for key, label in CURVES.items():
            pts = [(e, rec.get(key)) for e, rec in zip(epochs, history) if rec.get(key) is not None]
            fig, ax = plt.subplots()
            if pts:
                xs, ys = zip(*pts)
                ax.plot(xs, ys, marker="o", markersize=3, linewidth=1.2)
            ax.set_xlabel("epoch")
            ax.set_ylabel(label)
            ax.set_title(label)
            fig.tight_layout()
            path = out / f"{key}.png"
            fig.savefig(path)
            plt.close(fig)
            written.append(path)
    csv_path = out / "curves.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", *CURVES])
        for e, rec in zip(epochs, history):
            writer.writerow([e, *("" if rec.get(k) is None else rec[k] for k in CURVES)])
    written.append(csv_path)
    return written

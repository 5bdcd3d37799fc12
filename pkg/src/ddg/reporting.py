"""Tables (CSV and aligned text), metrics summaries and trajectory plots."""
from __future__ import annotations

import csv
import os

ACC_KEYS = ("clean", "clean_acc", "train_acc", "final_clean", "final_pgd10", "final_cw10",
            "best_pgd10", "accuracy")


def pct(v) -> str:
    """Accuracy in [0, 1] as a percentage with two decimals."""
    return "" if v is None else f"{100 * v:.2f}"


def _cell(key, v):
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, float):
        if key in ACC_KEYS or key.startswith(("pgd", "cw", "fgsm", "bim")):
            return pct(v)
        return f"{v:.6g}"
    return "" if v is None else str(v)


def _columns(rows):
    cols = []
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    return cols


def format_table(rows, columns=None) -> str:
    if not rows:
        return "(no rows)"
    cols = columns or _columns(rows)
    body = [[_cell(c, r.get(c)) for c in cols] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(cols, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(v.rjust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines)


def write_csv(path, rows, columns=None):
    cols = columns or _columns(rows)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({c: _cell(c, r.get(c)) for c in cols})


def metrics_rows(history) -> list:
    rows = []
    for rec in history:
        row = {"epoch": rec.epoch, "lr": rec.lr, "train_loss": rec.train_loss,
               "train_acc": rec.train_acc, "clean": rec.clean_acc}
        row.update(rec.robust)
        row["co"] = rec.co_flag
        rows.append(row)
    return rows


def best_final_rows(history, key: str = "pgd10") -> list:
    """Best (highest ``key`` robust accuracy, earliest on ties) and final epochs."""
    rows = metrics_rows(history)
    best = max(rows, key=lambda r: (r[key], -r["epoch"]))
    return [{"type": "best", **best}, {"type": "final", **rows[-1]}]


def plot_trajectories(traj, path, title=""):
    """Clean / PGD-10 / CW-10 accuracy against epoch."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    epochs = [t["epoch"] for t in traj]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for key, label in (("clean", "Clean"), ("pgd10", "PGD-10"), ("cw10", "C&W-10")):
        vals = [t.get(key) for t in traj]
        if any(v is not None for v in vals):
            ax.plot(epochs, [100 * v if v is not None else float("nan") for v in vals],
                    marker="o", ms=3, label=label)
    for t in traj:
        if t.get("co_flag"):
            ax.axvline(t["epoch"], color="red", alpha=0.3, lw=1)
    ax.set_xlabel("epoch")
    ax.set_ylabel("accuracy (%)")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)

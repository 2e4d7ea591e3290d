"""Tab-separated tables and matplotlib figures for run metrics and benchmarks."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

EPOCH_COLS = ("epoch", "loss", "train_acc", "val_acc", "test_acc", "t_train", "t_defense")
CHECKPOINT_COLS = ("index", "epoch", "rolled_back_to", "abnormal_nodes", "abnormal_edge_fts", "flagged_inserted",
                   "flagged_deleted", "precision_inserted", "recall_inserted", "rho_node", "rho_edge",
                   "n_node_detectors", "n_edge_detectors", "t_checkpoint")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def write_tsv(path, rows, cols) -> None:
    with open(path, "w") as fh:
        fh.write("\t".join(cols) + "\n")
        for r in rows:
            fh.write("\t".join(_fmt(r.get(c)) for c in cols) + "\n")


def write_run_report(records, out_dir, tag: str = "") -> dict:
    """``epochs.tsv``, ``checkpoints.tsv``, ``accuracy.png`` and, with checkpoints, ``defense.png``."""
    epochs = [r for r in records if r.get("type") == "epoch"]
    cps = [r for r in records if r.get("type") == "checkpoint"]
    paths = {"epochs": os.path.join(out_dir, tag + "epochs.tsv"),
             "checkpoints": os.path.join(out_dir, tag + "checkpoints.tsv"),
             "accuracy": os.path.join(out_dir, tag + "accuracy.png")}
    # one row per update; epoch numbers repeat after a rollback
    write_tsv(paths["epochs"], [dict(r, step=k) for k, r in enumerate(epochs)], ("step",) + EPOCH_COLS)
    write_tsv(paths["checkpoints"], cps, CHECKPOINT_COLS)

    fig, ax = plt.subplots(figsize=(7, 3.5))
    steps = range(len(epochs))
    ax.plot(steps, [r["test_acc"] for r in epochs], label="test")
    ax.plot(steps, [r["val_acc"] for r in epochs], label="val", alpha=0.7)
    ax.plot(steps, [r["train_acc"] for r in epochs], label="train", alpha=0.5)
    step_of = {}
    for k, r in enumerate(epochs):
        step_of.setdefault(r["epoch"] + 1, []).append(k)
    for c in cps:
        ks = step_of.get(c["epoch"])
        if ks:
            ax.axvline(ks[0], color="k", lw=0.6, ls="--" if "rolled_back_to" in c else ":")
    ax.set_xlabel("update step (dashed: checkpoint with rollback)")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1.02)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(paths["accuracy"], dpi=110)
    plt.close(fig)

    if cps:
        paths["defense"] = os.path.join(out_dir, tag + "defense.png")
        fig, ax = plt.subplots(figsize=(6, 3.5))
        idx = [c["index"] for c in cps]
        ax.bar(idx, [c.get("abnormal_nodes", 0) for c in cps], color="0.8", label="abnormal nodes")
        ax.plot(idx, [len(c.get("flagged", [])) for c in cps], "o-", label="edges flagged")
        ax.set_xlabel("checkpoint")
        ax.set_ylabel("count")
        if any("precision_inserted" in c for c in cps):
            ax2 = ax.twinx()
            ax2.plot(idx, [c.get("precision_inserted", float("nan")) for c in cps], "s--", color="C3",
                     label="precision (inserted)")
            ax2.plot(idx, [c.get("recall_inserted", float("nan")) for c in cps], "^--", color="C2",
                     label="recall (inserted)")
            ax2.set_ylim(0, 1.02)
            ax2.legend(loc="upper right", fontsize=8)
        ax.legend(loc="upper left", fontsize=8)
        fig.tight_layout()
        fig.savefig(paths["defense"], dpi=110)
        plt.close(fig)
    return paths


def write_bench_figure(rows, out_dir) -> str:
    """Stacked wall-clock breakdown per variant, labelled with the relative overhead."""
    path = os.path.join(out_dir, "bench.png")
    fig, ax = plt.subplots(figsize=(6, 3.5))
    names = [r["variant"] for r in rows]
    bottom = [0.0] * len(rows)
    for part in ("train", "monitor", "checkpoints"):
        vals = [r[part] for r in rows]
        ax.bar(names, vals, bottom=bottom, label=part)
        bottom = [b + v for b, v in zip(bottom, vals)]
    for k, r in enumerate(rows):
        ax.text(k, bottom[k], r["overhead"], ha="center", va="bottom", fontsize=8)
    ax.set_ylabel("seconds")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path

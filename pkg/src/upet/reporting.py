"""Report rendering: portable graymap mid-slices and matplotlib figures.

Every CLI path that writes delimited output also renders a figure next to
it: training curves beside the epoch log, a metrics panel beside the eval
tables, and a slice panel beside the exported attention volumes.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import CLASS_NAMES, EvalReport


def write_pgm(path, slice2d: np.ndarray, lo: float | None = None,
              hi: float | None = None) -> None:
    """Binary (P5) portable graymap of one 2D slice, maxval 255."""
    arr = np.asarray(slice2d, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"write_pgm expects a 2D slice, got shape {arr.shape}")
    lo = float(arr.min()) if lo is None else lo
    hi = float(arr.max()) if hi is None else hi
    span = hi - lo if hi > lo else 1.0
    gray = np.clip((arr - lo) / span * 255.0, 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{gray.shape[1]} {gray.shape[0]}\n255\n".encode())
        fh.write(gray.tobytes())


def mid_slices(volume: np.ndarray) -> dict[str, np.ndarray]:
    """Axial / coronal / sagittal center slices of a D,H,W array."""
    d, h, w = volume.shape
    return {
        "axial": volume[d // 2, :, :],
        "coronal": volume[:, h // 2, :],
        "sagittal": volume[:, :, w // 2],
    }


def export_volume_slices(volume: np.ndarray, out_dir, stem: str,
                         lo: float | None = None, hi: float | None = None) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for plane, sl in mid_slices(volume).items():
        path = out_dir / f"{stem}_{plane}.pgm"
        write_pgm(path, sl, lo=lo, hi=hi)
        written.append(path)
    return written


def save_loss_curves(log, path) -> None:
    """Per-epoch loss components and validation scores, two stacked axes."""
    epochs = [r.epoch for r in log]
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 7), sharex=True)
    ax1.plot(epochs, [r.total for r in log], label="total", lw=2)
    ax1.plot(epochs, [r.ce for r in log], label="cross-entropy")
    ax1.plot(epochs, [r.l1_main for r in log], label="L1 (full res)")
    ax1.plot(epochs, [r.l1_aux_sum for r in log], label="L1 (aux sum)")
    ax1.set_ylabel("training loss")
    ax1.legend(loc="upper right", fontsize=8)
    ax1.grid(alpha=0.3)
    ax2.plot(epochs, [r.val_accuracy for r in log], label="val accuracy")
    ax2.plot(epochs, [r.val_f1_macro for r in log], label="val macro F1")
    maes = [(r.epoch, r.val_mae) for r in log if r.val_mae is not None]
    if maes:
        ax2.plot([e for e, _ in maes], [m for _, m in maes], label="val MAE")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("validation")
    ax2.legend(loc="lower right", fontsize=8)
    ax2.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_eval_figure(report: EvalReport, path) -> None:
    """Metric bars plus the confusion matrix."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
    names = ["accuracy", "F1 macro", "AUC CN", "AUC AD", "AUC MCI"]
    values = [report.accuracy, report.f1_macro, report.auc_cn, report.auc_ad, report.auc_mci]
    xs = np.arange(len(names))
    heights = [0.0 if v is None else v for v in values]
    bars = ax1.bar(xs, heights, color=["#4878d0"] * 2 + ["#ee854a"] * 3)
    for x, v, bar in zip(xs, values, bars):
        ax1.text(x, bar.get_height() + 0.02, "n/a" if v is None else f"{v:.3f}",
                 ha="center", fontsize=8)
    ax1.set_xticks(xs)
    ax1.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax1.set_ylim(0, 1.1)
    ax1.grid(axis="y", alpha=0.3)
    title = "classification metrics"
    if report.mae is not None:
        title += f" (MAE {report.mae:.4f} over {report.n_paired} paired)"
    ax1.set_title(title, fontsize=9)

    cm = np.asarray(report.confusion)
    im = ax2.imshow(cm, cmap="Blues")
    for i in range(3):
        for j in range(3):
            ax2.text(j, i, str(cm[i, j]), ha="center", va="center",
                     color="black" if cm[i, j] < cm.max() * 0.6 else "white")
    ax2.set_xticks(range(3), CLASS_NAMES)
    ax2.set_yticks(range(3), CLASS_NAMES)
    ax2.set_xlabel("predicted")
    ax2.set_ylabel("true")
    ax2.set_title("confusion matrix", fontsize=9)
    fig.colorbar(im, ax=ax2, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_attention_panel(mri: np.ndarray, pet_pred: np.ndarray | None,
                         attention: dict[str, np.ndarray], path) -> None:
    """One row per plane, one column per volume (MRI, PET, each gate)."""
    columns: list[tuple[str, np.ndarray, float | None, float | None]] = [("MRI", mri, None, None)]
    if pet_pred is not None:
        columns.append(("synthetic PET", pet_pred, None, None))
    for name in sorted(attention):
        columns.append((f"attention {name}", attention[name], 0.0, 1.0))

    planes = ("axial", "coronal", "sagittal")
    fig, axes = plt.subplots(len(planes), len(columns),
                             figsize=(2.2 * len(columns), 6.6), squeeze=False)
    for col, (title, vol, lo, hi) in enumerate(columns):
        slices = mid_slices(vol)
        for row, plane in enumerate(planes):
            ax = axes[row][col]
            ax.imshow(slices[plane], cmap="gray", vmin=lo, vmax=hi)
            ax.axis("off")
            if row == 0:
                ax.set_title(title, fontsize=8)
            if col == 0:
                ax.text(-0.15, 0.5, plane, transform=ax.transAxes, rotation=90,
                        va="center", ha="center", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)

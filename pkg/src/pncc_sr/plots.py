"""Report figures. Rendered headless and without timestamps so reruns give identical PNGs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_META = {"Software": None}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def loss_curve(path, losses, title: str = "training loss") -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(range(1, len(losses) + 1), losses, marker="o", ms=3, lw=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("Charbonnier loss")
    ax.set_yscale("log")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    _save(fig, path)


def ablation_bars(path, rows) -> None:
    """RMSE per head/input configuration with the bicubic level as a line."""
    labels = [f"{r.head.upper()} / {r.input.upper()}" for r in rows]
    fig, ax = plt.subplots(figsize=(5.5, 3.2))
    ax.bar(labels, [r.rmse_cm for r in rows], color="#4c72b0")
    if rows:
        ax.axhline(rows[0].bicubic_rmse_cm, color="#c44e52", ls="--", lw=1, label="bicubic")
        ax.legend(frameon=False)
    ax.set_ylabel("RMSE (cm)")
    ax.set_title("head / input ablation")
    _save(fig, path)


def eval_frames(path, frames, title: str = "per-frame evaluation") -> None:
    """Per-frame RMSE and Chamfer side by side."""
    idx = range(len(frames))
    fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3))
    a.bar(idx, [f.rmse for f in frames], color="#4c72b0")
    a.set_xlabel("frame")
    a.set_ylabel("RMSE (cm)")
    b.bar(idx, [f.chamfer for f in frames], color="#55a868")
    b.set_xlabel("frame")
    b.set_ylabel("Chamfer (m)")
    fig.suptitle(title)
    _save(fig, path)

"""PNG figures for training curves and TIM reports (matplotlib, Agg backend)."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _smooth(y: np.ndarray, window: int) -> np.ndarray:
    if len(y) < window or window < 2:
        return y
    kernel = np.ones(window) / window
    return np.convolve(y, kernel, mode="valid")


def render_training(metrics: list[dict], out_dir, window: int = 20, title: str = "") -> list[Path]:
    """reward.png (raw and running mean) and loss.png (total/match/reg, log scale)."""
    plt = _pyplot()
    out_dir = Path(out_dir)
    steps = np.array([m["step"] for m in metrics])
    reward = np.array([m["mean_reward"] for m in metrics])
    paths = []

    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, reward, lw=0.6, alpha=0.4, label="per step")
    sm = _smooth(reward, window)
    ax.plot(steps[len(steps) - len(sm):], sm, lw=1.6, label=f"mean of {window}")
    ax.set_xlabel("step")
    ax.set_ylabel("mean group reward")
    ax.set_title(title or "reward")
    ax.legend(loc="lower right")
    fig.tight_layout()
    paths.append(out_dir / "reward.png")
    fig.savefig(paths[-1], dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 3.5))
    for key in ("loss_total", "loss_match", "loss_reg"):
        y = np.abs(np.array([m[key] for m in metrics], dtype=float))
        if np.any(y > 0):
            ax.plot(steps, np.maximum(y, 1e-12), lw=0.8, label=key.replace("loss_", ""))
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("|loss|")
    ax.set_title(title or "loss")
    ax.legend(loc="upper right")
    fig.tight_layout()
    paths.append(out_dir / "loss.png")
    fig.savefig(paths[-1], dpi=120)
    plt.close(fig)
    return paths


def render_tim(rows: list[dict], out_dir) -> list[Path]:
    """Scatter of ELBO surrogates against exact log pi^rm, plus per-completion ratio bias."""
    plt = _pyplot()
    out_dir = Path(out_dir)
    rm = np.array([r["log_pi_rm"] for r in rows])
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    ax = axes[0]
    ax.errorbar(rm, [r["elbo_mean"] for r in rows], yerr=[r["elbo_std"] for r in rows],
                fmt="o", ms=4, capsize=2, label="ELBO estimate")
    ax.plot(rm, [r["elbo_exact"] for r in rows], "x", label="ELBO (exact)")
    lo, hi = rm.min(), rm.max()
    ax.plot([lo, hi], [lo, hi], "k--", lw=0.8)
    ax.set_xlabel("log pi_rm (old)")
    ax.set_ylabel("surrogate")
    ax.legend(loc="upper left")
    ax = axes[1]
    labels = ["".join(map(str, r["completion"])) for r in rows]
    ax.bar(range(len(rows)), [r["ratio_bias"] for r in rows])
    ax.set_xticks(range(len(rows)), labels, rotation=90 if len(rows) > 16 else 0)
    ax.axhline(0.0, color="k", lw=0.6)
    ax.set_xlabel("completion")
    ax.set_ylabel("log-ratio bias")
    fig.tight_layout()
    path = out_dir / "tim.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return [path]

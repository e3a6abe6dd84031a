"""Static charts: BC weight with rolling success rate, and eval SR/CT bars."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def read_metrics(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise ValueError(f"{path} has no metric rows")
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]}


def read_episodes(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def rolling_mean(x, window: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if len(x) == 0:
        return x
    window = max(1, min(window, len(x)))
    c = np.cumsum(np.insert(x, 0, 0.0))
    out = np.empty(len(x))
    out[window - 1:] = (c[window:] - c[:-window]) / window
    out[:window - 1] = c[1:window] / np.arange(1, window)
    return out


def plot_lambda_curve(metrics_path, episodes_path, out_path, window: int = 20) -> Path:
    m = read_metrics(metrics_path)
    fig, ax = plt.subplots(figsize=(7, 4))
    updates = m["update_count"]
    ax.plot(updates, m["lambda"], color="tab:blue", alpha=0.25, lw=0.8)
    ax.plot(updates, rolling_mean(m["lambda"], max(1, len(updates) // 50)), color="tab:blue", label="BC weight")
    ax.set_xlabel("learner updates")
    ax.set_ylabel("BC weight")
    ax.set_ylim(-0.02, 1.02)
    if episodes_path is not None:
        eps = read_episodes(episodes_path)
        if eps:
            key = "true_success" if eps[0].get("true_success") not in (None, "") else "detected_success"
            wins = np.array([e[key] in ("True", "true", "1") for e in eps], dtype=float)
            steps = np.array([float(e["env_steps"]) for e in eps])
            # map each episode end to the learner update count at that env step
            idx = np.searchsorted(m["env_steps"], steps, side="right") - 1
            at = np.where(idx >= 0, updates[np.clip(idx, 0, None)], 0.0)
            ax2 = ax.twinx()
            ax2.plot(at, rolling_mean(wins, window), color="tab:orange", label="success rate")
            ax2.set_ylabel("rolling success rate")
            ax2.set_ylim(-0.02, 1.02)
            ax2.legend(loc="upper right")
    ax.legend(loc="upper left")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)


def plot_eval_bars(eval_paths, out_path) -> Path:
    reports = [json.loads(Path(p).read_text()) for p in eval_paths]
    labels = [r.get("label", Path(p).parent.name) for r, p in zip(reports, eval_paths)]
    sr = [r["success_rate"] for r in reports]
    ct = [r["mean_ct"] if r["mean_ct"] != "NA" else 0.0 for r in reports]
    fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3.5))
    a.bar(labels, sr, color="tab:green")
    a.set_ylabel("success rate (%)")
    a.set_ylim(0, 100)
    b.bar(labels, ct, color="tab:purple")
    b.set_ylabel("mean cycle time (steps)")
    for ax in (a, b):
        ax.tick_params(axis="x", rotation=20)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)

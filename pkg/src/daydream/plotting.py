"""Figures from metrics logs: one image per environment, one curve per run mode,
confidence band across seeds, vertical line at the day/night boundary."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .orchestrator import MetricsLog

MODE_COLORS = {
    "dream_rnd": "tab:red",
    "dream_deep": "tab:purple",
    "dream_val": "tab:orange",
    "dream_mixture": "tab:brown",
    "dream_none": "tab:green",
    "offline": "tab:cyan",
}


def _curve(log: MetricsLog):
    """Test reward against a global epoch axis (night epochs follow day epochs)."""
    header = log.header()
    day_epochs = header["day_epochs"]
    xs, ys = [], []
    for record in log.epoch_records():
        epoch = record["epoch"] if record["phase"] == "day" else day_epochs + record["epoch"]
        xs.append(epoch)
        ys.append(record["test_reward"])
    return np.asarray(xs), np.asarray(ys, dtype=float), day_epochs


def plot_metrics(log_paths, out_dir) -> list[Path]:
    """Render one figure per environment; returns the written file paths."""
    if not log_paths:
        raise ValueError("plot_metrics needs at least one metrics log")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    by_env = defaultdict(lambda: defaultdict(list))
    boundaries = {}
    for path in log_paths:
        log = MetricsLog.load(path)
        header = log.header()
        xs, ys, day_epochs = _curve(log)
        by_env[header["env"]][header["run_mode"]].append((xs, ys))
        boundaries[header["env"]] = day_epochs

    written = []
    for env, modes in by_env.items():
        fig, ax = plt.subplots(figsize=(7, 4))
        for mode, runs in sorted(modes.items()):
            length = min(len(xs) for xs, _ in runs)
            xs = runs[0][0][:length]
            stacked = np.stack([ys[:length] for _, ys in runs])
            mean = stacked.mean(axis=0)
            color = MODE_COLORS.get(mode)
            ax.plot(xs, mean, label=mode, color=color)
            if len(runs) > 1:
                sem = stacked.std(axis=0, ddof=1) / np.sqrt(len(runs))
                ax.fill_between(xs, mean - 1.96 * sem, mean + 1.96 * sem,
                                alpha=0.2, color=color)
        ax.axvline(boundaries[env] + 0.5, color="black", linestyle="--", linewidth=1)
        ax.set_xlabel("epoch")
        ax.set_ylabel("test reward")
        ax.set_title(env)
        ax.legend()
        fig.tight_layout()
        path = out_dir / f"{env.replace(':', '_')}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written

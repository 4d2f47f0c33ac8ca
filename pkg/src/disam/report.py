"""Figure rendering from the delimited run outputs.

Figures are produced from the CSV files a run or sweep already wrote, not
from in-memory state, so anything plotted here can be reproduced by any
external tool from the same files. All rendering uses the Agg backend and
writes PNGs next to the CSVs.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .diagnostics import normalize_convergence
from .harness import load_csv_columns, trace_csv_path


def _present_domain_columns(cols: dict) -> list[str]:
    out = []
    for name in cols:
        if name.startswith("loss_d") and any(v is not None for v in cols[name]):
            out.append(name)
    return sorted(out, key=lambda s: int(s.removeprefix("loss_d")))


def _rolling_median(values: np.ndarray, window: int) -> np.ndarray:
    if values.size == 0:
        return values
    half = window // 2
    out = np.empty_like(values)
    for i in range(values.size):
        lo = max(0, i - half)
        out[i] = np.median(values[lo : i + window - half])
    return out


def render_run_figure(out_dir: str, mode: str, seed: int) -> str:
    """Four-panel summary of one run, read back from its two CSVs."""
    trace = load_csv_columns(trace_csv_path(out_dir, mode, seed))
    epochs = load_csv_columns(os.path.join(out_dir, f"epochs_{mode}_seed{seed}.csv"))

    fig, axes = plt.subplots(2, 2, figsize=(11, 8))
    fig.suptitle(f"{mode} seed {seed}")

    ax = axes[0, 0]
    ax.plot(trace["t"], trace["loss_total"], lw=0.5, alpha=0.5, label="batch total")
    for name in _present_domain_columns(epochs):
        ax.plot(epochs["t_end"], epochs[name], marker=".", ms=3, label=name)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title("training loss")
    ax.legend(fontsize=7)

    ax = axes[0, 1]
    for name in _present_domain_columns(epochs):
        series = np.array([v for v in epochs[name]], dtype=np.float64)
        norm, flat = normalize_convergence(series)
        label = name + (" (flat)" if flat else "")
        ax.plot(epochs["t_end"], norm, marker=".", ms=3, label=label)
    ax.set_xlabel("step")
    ax.set_ylabel("normalized loss")
    ax.set_ylim(-0.05, 1.05)
    ax.set_title("per-domain convergence, min-max normalized")
    ax.legend(fontsize=7)

    ax = axes[1, 0]
    phi_t = [t for t, p in zip(trace["t"], trace["phi_t"]) if p is not None]
    phi_v = np.array([p for p in trace["phi_t"] if p is not None])
    if phi_v.size:
        ax.plot(phi_t, phi_v, ".", ms=2, alpha=0.25, color="tab:gray")
        ax.plot(phi_t, _rolling_median(phi_v, 51), color="tab:red", label="rolling median")
        ax.legend(fontsize=7)
    else:
        ax.text(0.5, 0.5, "no perturbation step in this mode", ha="center", va="center")
    ax.set_xlabel("step")
    ax.set_ylabel("phi_t (rad)")
    ax.set_title("angle between successive perturbations")

    ax = axes[1, 1]
    ax.plot(epochs["t_end"], epochs["sharp_ascent"], marker=".", ms=3, label="ascent estimate")
    ax.plot(epochs["t_end"], epochs["sharp_gradvar"], marker=".", ms=3, label="gradient variance")
    ax.set_xlabel("step")
    ax.set_ylabel("sharpness")
    ax.set_yscale("log")
    ax.set_title("sharpness at epoch ends")
    ax.legend(fontsize=7)

    fig.tight_layout()
    path = os.path.join(out_dir, f"figures_{mode}_seed{seed}.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_sweep_figure(out_dir: str, axis: str) -> str:
    """Loss and stability panels against the swept value."""
    cols = load_csv_columns(os.path.join(out_dir, f"sweep_{axis}.csv"))
    values = cols["value"]

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    fig.suptitle(f"sweep over {axis}")

    ax1.plot(values, cols["final_train_loss"], marker="o", label="final train loss")
    if any(v is not None for v in cols["heldout_loss"]):
        ax1.plot(values, cols["heldout_loss"], marker="s", label="held-out loss")
    ax1.set_xlabel(axis)
    ax1.set_ylabel("loss")
    ax1.legend(fontsize=8)

    if any(v is not None for v in cols["sharp_gradvar"]):
        ax2.plot(values, cols["sharp_gradvar"], marker="o", label="gradient variance")
    if any(v is not None for v in cols["median_phi_last_half"]):
        ax2.plot(values, cols["median_phi_last_half"], marker="s", label="median phi")
    ax2.set_xlabel(axis)
    ax2.set_ylabel("sharpness / angle")
    ax2.legend(fontsize=8)

    fig.tight_layout()
    path = os.path.join(out_dir, f"sweep_{axis}.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_dataset_figure(dataset, path: str) -> str:
    """Scatter of each domain's first two feature dimensions, by class."""
    M = dataset.num_domains
    fig, axes = plt.subplots(1, M, figsize=(3.2 * M, 3.4), sharex=True, sharey=True)
    if M == 1:
        axes = [axes]
    for d in range(M):
        X, y = dataset.features[d], dataset.labels[d]
        axes[d].scatter(X[:, 0], X[:, 1], c=y, s=6, cmap="viridis", alpha=0.7)
        axes[d].set_title(f"domain {d} (n={X.shape[0]})", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_all(out_dir: str) -> list[str]:
    """Render figures for every trace and sweep CSV found in a directory."""
    written = []
    for name in sorted(os.listdir(out_dir)):
        if name.startswith("trace_") and name.endswith(".csv"):
            stem = name[len("trace_") : -len(".csv")]
            mode, _, seed = stem.rpartition("_seed")
            written.append(render_run_figure(out_dir, mode, int(seed)))
        elif name.startswith("sweep_") and name.endswith(".csv"):
            axis = name[len("sweep_") : -len(".csv")]
            written.append(render_sweep_figure(out_dir, axis))
    return written

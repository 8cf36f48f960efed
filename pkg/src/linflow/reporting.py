"""Tab-delimited report files and the figure renderers that sit next to them.

Reports are written with repr-exact floats so identical runs produce
byte-identical files; figures render through the Agg backend so no display
is needed.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_FIG_KW = {"figsize": (7.0, 4.2), "dpi": 110}


def format_value(value) -> str:
    """Repr floats (round-trip exact), plain ints, raw strings."""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_records(path, rows: list[dict], columns: list[str] | None = None) -> None:
    """Write rows as a TSV with a header line. Column order follows
    `columns` or the first row's insertion order; missing cells are empty."""
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    lines = ["\t".join(columns)]
    for row in rows:
        lines.append("\t".join(format_value(row[c]) if c in row else ""
                               for c in columns))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_records(path) -> list[dict]:
    """Read a TSV written by write_records; values stay strings."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        return []
    columns = lines[0].split("\t")
    return [dict(zip(columns, line.split("\t"))) for line in lines[1:]]


def write_metrics(path, metrics: dict) -> None:
    """Two-column metric/value TSV, rows in insertion order."""
    write_records(path, [{"metric": k, "value": v} for k, v in metrics.items()],
                  columns=["metric", "value"])


# ---------------------------------------------------------------------------
# figures
# ---------------------------------------------------------------------------


def plot_loss_curves(rows: list[dict], y_keys: list[str], path,
                     title: str, logy: bool = True) -> None:
    """Per-step curves from report rows (expects a `step` column)."""
    steps = [row["step"] for row in rows]
    fig, ax = plt.subplots(**_FIG_KW)
    for key in y_keys:
        ax.plot(steps, [row[key] for row in rows], label=key, linewidth=1.0)
    if logy and any(row[key] > 0 for key in y_keys for row in rows):
        ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_title(title)
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_r_history(r_history: np.ndarray, path) -> None:
    """Heatmap of per-layer mixing coefficients over training
    (steps, n_layers), plus the per-layer traces."""
    r_history = np.asarray(r_history)
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(10.0, 4.2), dpi=110)
    im = ax0.imshow(r_history.T, aspect="auto", origin="lower",
                    interpolation="nearest", vmin=0.0, vmax=1.0, cmap="viridis")
    ax0.set_xlabel("step")
    ax0.set_ylabel("layer")
    ax0.set_title("mixing coefficients")
    fig.colorbar(im, ax=ax0)
    for layer in range(r_history.shape[1]):
        ax1.plot(r_history[:, layer], linewidth=1.0, label=f"layer {layer}")
    ax1.set_xlabel("step")
    ax1.set_ylabel("r")
    ax1.set_ylim(-0.05, 1.05)
    ax1.grid(True, alpha=0.3)
    ax1.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_scaling(bench_rows: list[dict], slopes: dict, path) -> None:
    """Log-log runtime-vs-length plot with fitted slopes in the legend."""
    fig, ax = plt.subplots(**_FIG_KW)
    kernels = sorted({row["kernel"] for row in bench_rows})
    for kernel in kernels:
        pts = [(row["n"], row["median_s"]) for row in bench_rows
               if row["kernel"] == kernel]
        ns, ts = zip(*sorted(pts))
        ax.loglog(ns, ts, marker="o",
                  label=f"{kernel} (slope {slopes[kernel]:.2f})")
    ax.set_xlabel("sequence length")
    ax.set_ylabel("median seconds")
    ax.set_title("attention runtime scaling")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_samples(samples: np.ndarray, path, n_show: int = 12) -> None:
    """Token-value traces for a handful of generated sequences
    (batch, seq, d); one subplot per state channel."""
    samples = np.asarray(samples)[:n_show]
    d = samples.shape[-1]
    fig, axes = plt.subplots(1, d, figsize=(5.0 * d, 4.0), dpi=110, squeeze=False)
    for ch in range(d):
        ax = axes[0, ch]
        for row in samples:
            ax.plot(row[:, ch], linewidth=0.9, alpha=0.8)
        ax.set_xlabel("token")
        ax.set_title(f"channel {ch}")
        ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_greedy_curve(deviations: list[float], path) -> None:
    """Greedy conversion curve: output deviation vs layers converted."""
    fig, ax = plt.subplots(**_FIG_KW)
    ax.plot(range(1, len(deviations) + 1), deviations, marker="o")
    ax.set_xlabel("layers converted")
    ax.set_ylabel("mean squared output deviation")
    ax.set_title("greedy linear-conversion curve")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)

"""SVG line charts of bench CSVs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .bench import read_bench_csv  # noqa: E402

LABELS = {
    "decode_s_per_token": "decode latency (s / token)",
    "prefill_s": "prefill time (s)",
    "kv_bytes": "KV cache (bytes)",
    "state_bytes": "SSM state (bytes)",
}


def plot_bench(paths: Sequence[str | Path], out: str | Path, metric: str = "decode_s_per_token") -> Path:
    """One line per CSV (named after the file stem), log-log axes; ``oom`` rows are skipped."""
    if metric not in LABELS:
        raise ValueError(f"unknown metric {metric!r}")
    out = Path(out)
    fig, ax = plt.subplots(figsize=(6, 4))
    for p in paths:
        rows = [r for r in read_bench_csv(p) if r["status"] == "ok"]
        xs = [int(r["context_length"]) for r in rows]
        ys = [float(r[metric]) for r in rows]
        ax.plot(xs, ys, marker="o", label=Path(p).stem.removeprefix("bench_"))
    ax.set_xscale("log", base=2)
    if metric != "state_bytes":
        ax.set_yscale("log")
    ax.set_xlabel("context length (tokens)")
    ax.set_ylabel(LABELS[metric])
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out, format="svg")
    plt.close(fig)
    return out

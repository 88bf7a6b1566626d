"""CSV tables and plot images for evaluation results and training logs."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def write_csv(rows: Sequence[Mapping], path: str | Path, columns: Sequence[str] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if columns is None:
        columns = list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)
    return path


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def read_jsonl(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def count_rows(counts: Mapping[str, Mapping[int, float]]) -> list[dict]:
    """Long-form rows ``(proposals, N, mean_count)`` from per-mode averages."""
    return [{"proposals": mode, "N": int(n), "mean_query_specific": v}
            for mode, per_n in counts.items() for n, v in sorted(per_n.items())]


def plot_proposal_counts(counts: Mapping[str, Mapping[int, float]], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for mode, per_n in counts.items():
        ns = sorted(per_n)
        ax.plot(ns, [per_n[n] for n in ns], marker="o", label=mode)
    ax.set_xlabel("top-N proposals")
    ax.set_ylabel("query-specific proposals")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_losses(records: Sequence[Mapping], terms: Sequence[str], path: str | Path,
                smooth: int = 20) -> Path:
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    steps = [r["step"] for r in records]
    for t in terms:
        vals = [r[t] for r in records if t in r]
        if len(vals) != len(steps):
            continue
        k = max(1, min(smooth, len(vals)))
        run = [sum(vals[max(0, i - k + 1):i + 1]) / len(vals[max(0, i - k + 1):i + 1])
               for i in range(len(vals))]
        ax.plot(steps, run, label=t)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_accuracy(rows: Sequence[Mapping], path: str | Path) -> Path:
    """Bar chart of few-shot accuracy (with 95% half-width) per configuration and shot."""
    labels = [f"{r['config']}\n{r['k']}-shot" for r in rows]
    fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(rows)), 3.2))
    ax.bar(range(len(rows)), [float(r["mean_accuracy"]) for r in rows],
           yerr=[float(r["ci95"]) for r in rows], capsize=3)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, fontsize=7)
    ax.set_ylim(0, 1)
    ax.set_ylabel("accuracy")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)

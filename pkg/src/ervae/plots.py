"""Plot series as CSV files and, for reports, PNG figures drawn with matplotlib."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from ervae.embedding import load_embedding, projection_embedding
from ervae.experiment import EMBEDDING_FILE, load_records


def _write_series(path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def export_plot_data(out, n_grid=512):
    """Write x/y series for training curves, the table, and the embedding images."""
    out = Path(out)
    dest = out / "plot_data"
    written = []
    records = load_records(out)
    for r in records:
        rows = [(h["epoch"], h["elbo"], h["recon"], h["kl"]) for h in r.history]
        written.append(_write_series(dest / f"curve__{r.row}__seed{r.seed}.csv",
                                     ["epoch", "elbo", "recon", "kl"], rows))
    report_path = out / "report.json"
    if report_path.exists():
        report = json.loads(report_path.read_text())
        rows = [(r["key"], r["elbo_mean"], r["elbo_std"], r["reference_mean"], r["reference_std"])
                for r in report["rows"]]
        written.append(_write_series(dest / "table.csv",
                                     ["row", "elbo_mean", "elbo_std", "reference_mean", "reference_std"], rows))
    grid = (np.arange(n_grid) + 0.5) / n_grid
    embeddings = {"projection": projection_embedding()}
    if (out / EMBEDDING_FILE).exists():
        embeddings["learned"] = load_embedding(out / EMBEDDING_FILE)
    for name, emb in embeddings.items():
        pts = emb.numpy(grid[:, None])
        written.append(_write_series(dest / f"embedding__{name}.csv", ["z_hid", "x", "y"],
                                     [(z, p[0], p[1]) for z, p in zip(grid, pts)]))
    return written


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams.update({"figure.dpi": 120, "font.size": 9, "axes.spines.top": False,
                         "axes.spines.right": False, "legend.frameon": False})
    return plt


def render_figures(out):
    """Training curves, a table bar chart and embedding images, saved under ``out/figures``."""
    plt = _pyplot()
    out = Path(out)
    fig_dir = out / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)
    written = []

    records = load_records(out)
    if records:
        fig, ax = plt.subplots(figsize=(6.0, 3.6))
        colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
        seen = {}
        for r in records:
            if not r.history:
                continue
            c = seen.setdefault(r.row, colors[len(seen) % len(colors)])
            ep = [h["epoch"] for h in r.history]
            ax.plot(ep, [h["elbo"] for h in r.history], color=c, lw=0.8, alpha=0.7,
                    label=r.label if r.seed == min(x.seed for x in records if x.row == r.row) else None)
        ax.set_xlabel("epoch")
        ax.set_ylabel("training ELBO (nats)")
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = fig_dir / "training_curves.png"
        fig.savefig(path)
        plt.close(fig)
        written.append(path)

    report_path = out / "report.json"
    if report_path.exists():
        rows = json.loads(report_path.read_text())["rows"]
        fig, ax = plt.subplots(figsize=(6.0, 3.4))
        pos = np.arange(len(rows))
        ax.bar(pos - 0.2, [r["elbo_mean"] for r in rows], 0.4, yerr=[r["elbo_std"] for r in rows],
               label="this run", capsize=3)
        ax.bar(pos + 0.2, [r["reference_mean"] for r in rows], 0.4, yerr=[r["reference_std"] for r in rows],
               label="reference", capsize=3, alpha=0.6)
        ax.set_xticks(pos)
        ax.set_xticklabels([r["key"] for r in rows], rotation=20, ha="right", fontsize=7)
        ax.set_ylabel("eval ELBO (nats)")
        ax.legend()
        fig.tight_layout()
        path = fig_dir / "table.png"
        fig.savefig(path)
        plt.close(fig)
        written.append(path)

    grid = np.linspace(0.0, 1.0, 512)
    embeddings = {"projection": projection_embedding()}
    if (out / EMBEDDING_FILE).exists():
        embeddings["learned"] = load_embedding(out / EMBEDDING_FILE)
    fig, ax = plt.subplots(figsize=(3.6, 3.6))
    for name, emb in embeddings.items():
        pts = emb.numpy(grid[:, None])
        ax.plot(pts[:, 0], pts[:, 1], lw=1.2, label=name)
    ax.set_aspect("equal")
    ax.legend(fontsize=7)
    fig.tight_layout()
    path = fig_dir / "embeddings.png"
    fig.savefig(path)
    plt.close(fig)
    written.append(path)
    return written

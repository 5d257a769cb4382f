"""Matplotlib rendering of report figures (PNG files next to the CSV tables)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _column(rows, key):
    xs = []
    for r in rows:
        v = r.get(key)
        xs.append(float("nan") if v is None else float(v))
    return xs


def render_figures(out_dir, figures, tables) -> list[Path]:
    out = Path(out_dir)
    written = []
    for fig in figures:
        rows = tables.get(fig.table) or []
        if not rows:
            continue
        x = _column(rows, fig.x)
        f, ax = plt.subplots(figsize=(6.4, 4.4))
        for y in fig.ys:
            if y not in rows[0]:
                continue
            ys = _column(rows, y)
            if fig.logy:
                ys = [v if v > 0 else float("nan") for v in ys]
            ax.plot(x, ys, marker="o", label=y)
        if fig.logx:
            ax.set_xscale("log", base=2)
        if fig.logy:
            ax.set_yscale("log")
        ax.set_xlabel(fig.xlabel or fig.x)
        ax.set_ylabel(fig.ylabel)
        ax.set_title(fig.title or fig.name)
        ax.grid(True, which="both", alpha=0.3)
        ax.legend()
        f.tight_layout()
        path = out / f"{fig.name}.png"
        f.savefig(path, dpi=110)
        plt.close(f)
        written.append(path)
    return written

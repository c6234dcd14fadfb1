"""Static SVG line plots with the plotted data embedded as an XML comment."""

from __future__ import annotations

import io
import os
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def line_plot_svg(path: str | os.PathLike, x: Sequence[float], series: dict[str, Sequence[float]],
                  xlabel: str, ylabel: str, title: str = "", errors: dict[str, Sequence[float]] | None = None,
                  data_header: Sequence[str] | None = None, data_rows: Sequence[Sequence] | None = None) -> None:
    """Write a deterministic SVG (fixed hash salt, no timestamp)."""
    with matplotlib.rc_context({"svg.hashsalt": "wdsgnn", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        for name, ys in series.items():
            err = (errors or {}).get(name)
            if err is not None:
                ax.errorbar(x, ys, yerr=err, marker="o", capsize=3, label=name)
            else:
                ax.plot(x, ys, marker="o", label=name)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        ax.grid(True, alpha=0.3)
        if len(series) > 1:
            ax.legend()
        fig.tight_layout()
        buf = io.StringIO()
        fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
        plt.close(fig)
    svg = buf.getvalue()
    if data_rows is not None:
        lines = [",".join(map(str, data_header or []))] + [",".join(map(str, r)) for r in data_rows]
        # "--" may not appear inside an XML comment
        body = "\n".join(lines).replace("--", "- -")
        comment = f"<!-- data\n{body}\n-->\n"
        head, sep, rest = svg.partition("?>\n")
        svg = head + sep + comment + rest if sep else comment + svg
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(svg)

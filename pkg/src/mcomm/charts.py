"""Static SVG line charts of trace metrics, one series per run."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .persist import TRACE_FIELDS  # noqa: E402

PLOTTABLE = tuple(f for f in TRACE_FIELDS if f != "epoch")
_LABELS = {
    "success": "success rate",
    "H": "message entropy (bits)",
    "xi": "message similarity",
    "C": "communication acts",
    "IEI": "IEI",
    "SEI": "SEI",
    "TEI": "TEI",
    "la": "actor loss",
    "lQ": "critic loss",
    "Lt": "base loss",
    "wIEI": "IEI weight",
    "wSEI": "SEI weight",
}
_RC = {
    "svg.hashsalt": "mcomm",
    "svg.fonttype": "none",
    "path.simplify": False,
    "font.family": "DejaVu Sans",
}


def render_chart(runs: list[tuple[str, list[dict]]], metric: str, out_path) -> Path:
    """Writes an SVG; identical inputs give identical bytes."""
    if metric not in PLOTTABLE:
        raise ValueError(f"unknown metric {metric!r}; choose one of {', '.join(PLOTTABLE)}")
    if not runs:
        raise ValueError("at least one trace is required")
    out_path = Path(out_path)
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6.4, 4.0))
        any_data = False
        for label, records in runs:
            pts = [(r["epoch"], r[metric]) for r in records if r.get(metric) is not None]
            if pts:
                any_data = True
                xs, ys = zip(*pts)
                ax.plot(xs, ys, label=label, linewidth=1.2)
            else:
                ax.plot([], [], label=label)
        if not any_data:
            ax.text(0.5, 0.5, "no data", transform=ax.transAxes, ha="center", va="center", fontsize=14)
        ax.set_xlabel("epoch")
        ax.set_ylabel(_LABELS[metric])
        ax.legend(loc="best")
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        fig.savefig(out_path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return out_path

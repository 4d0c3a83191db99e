"""Performance-collapse detection: skip-connection census and dominance traces.

Collapsed searches end with skip_connect on most normal-cell slots; healthy
runs keep 1-2.  The default flag threshold of 4 (of 8 slots in a 4-node
cell) sits midway between the two regimes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .search_space import ArchParams, CellSpec, Genotype, GenotypeError, softmax_row

DEFAULT_SKIP_THRESHOLD = 4


@dataclass
class CollapseReport:
    skip_count_normal: int
    skip_count_reduction: int
    collapsed: bool
    threshold: int = DEFAULT_SKIP_THRESHOLD
    dominance: dict[str, list[list[float]]] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "skip_count_normal": self.skip_count_normal,
            "skip_count_reduction": self.skip_count_reduction,
            "collapsed": self.collapsed,
            "threshold": self.threshold,
            "dominance": self.dominance,
        }


def count_skip_connections(genotype: Genotype) -> dict[str, int]:
    """Exact skip_connect count per cell kind."""
    counts = {}
    for kind, nodes in genotype.cells.items():
        total = 0
        for node in nodes:
            for pair in node:
                if len(pair) != 2 or not isinstance(pair[0], str):
                    raise GenotypeError(f"malformed genotype entry {pair!r} in {kind}")
                op, pred = pair
                if op == "none":
                    raise GenotypeError(f"genotype contains forbidden op 'none' in {kind}")
                if op == "skip_connect":
                    total += 1
        counts[kind] = total
    return counts


def collapse_flag(report: CollapseReport) -> bool:
    """True iff the normal-cell skip count reaches the threshold (inclusive)."""
    return report.skip_count_normal >= report.threshold


def make_report(genotype: Genotype, threshold: int = DEFAULT_SKIP_THRESHOLD,
                dominance: dict[str, list[list[float]]] | None = None) -> CollapseReport:
    counts = count_skip_connections(genotype)
    report = CollapseReport(
        skip_count_normal=counts.get("normal", 0),
        skip_count_reduction=counts.get("reduction", 0),
        collapsed=False,
        threshold=threshold,
        dominance=dominance or {})
    report.collapsed = collapse_flag(report)
    return report


def dominance_trace(history: Sequence[ArchParams],
                    specs: Mapping[str, CellSpec] | CellSpec) -> dict[str, np.ndarray]:
    """Per-edge skip_connect softmax weight over time.

    Returns, per cell kind, a (T, num_edges) array: row t holds the skip
    weight of every edge at snapshot t.
    """
    if isinstance(specs, CellSpec):
        specs = {specs.cell_kind: specs}
    if not history:
        raise ValueError("need at least one architecture snapshot")
    out = {}
    for kind, spec in specs.items():
        if "skip_connect" not in spec.op_set:
            continue
        k = spec.op_set.index("skip_connect")
        rows = []
        for snap in history:
            mat = snap.values[kind]
            rows.append([softmax_row(mat[e])[k] for e in range(spec.num_edges)])
        out[kind] = np.asarray(rows)
    return out


def save_report(report: CollapseReport, out_dir: str | Path,
                plot: bool = False) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "collapse_report.json"
    path.write_text(json.dumps(report.to_json_dict(), sort_keys=True, indent=2) + "\n")
    if plot and report.dominance:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(7, 4))
        for kind, series in report.dominance.items():
            arr = np.asarray(series)
            for e in range(arr.shape[1]):
                ax.plot(arr[:, e], alpha=0.6,
                        label=f"{kind} e{e}" if e < 2 else None)
        ax.set_xlabel("snapshot")
        ax.set_ylabel("skip softmax weight")
        ax.legend(loc="upper left", fontsize=7)
        fig.tight_layout()
        fig.savefig(out / "dominance.png", dpi=120)
        plt.close(fig)
    return path

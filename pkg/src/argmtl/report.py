"""Result tables, curve CSVs and figures written from run records."""

from __future__ import annotations

import csv
import os
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .evaluate import SIZE_ORDER, CurvePoint, build_curves, mann_whitney_u, \
    select_top_k, significance_marker

RESULT_FIELDS = [
    "run_id", "dataset", "k", "mode", "status", "dev_score", "test_score",
    "layers", "input_dropout", "recurrent_dropout", "embedding_id", "seed",
    "search_seed", "epochs_trained", "best_epoch", "invalid_o_to_i", "wall_clock",
    "checkpoint",
]
CURVE_FIELDS = ["dataset", "k", "stl_norm", "mtl_norm", "delta"]
MODE_LABELS = {"stl": "STL", "mtl": "MTL", "union": "BL"}


@dataclass
class ResultRow:
    """The subset of a run record that reporting needs."""

    run_id: int
    dataset: str
    k: str
    mode: str
    status: str
    dev_score: float | None
    test_score: float | None

    @property
    def completed(self) -> bool:
        return self.status == "ok" and self.dev_score is not None and self.test_score is not None


def record_row(record) -> dict:
    cfg = record.config
    search_seed = record.search_seed
    return {
        "run_id": record.run_id,
        "dataset": record.dataset,
        "k": record.k,
        "mode": record.plan.mode,
        "status": record.status,
        "dev_score": "" if record.dev_score is None else f"{record.dev_score:.6f}",
        "test_score": "" if record.test_score is None else f"{record.test_score:.6f}",
        "layers": "-".join(str(h) for h in cfg.layer_sizes),
        "input_dropout": f"{cfg.input_dropout:.4f}",
        "recurrent_dropout": f"{cfg.recurrent_dropout:.4f}",
        "embedding_id": cfg.embedding_id,
        "seed": cfg.seed,
        "search_seed": "" if search_seed is None else search_seed,
        "epochs_trained": record.epochs_trained,
        "best_epoch": record.best_epoch,
        "invalid_o_to_i": record.invalid_bio.get("o_to_i", ""),
        "wall_clock": f"{record.wall_clock:.2f}",
        "checkpoint": record.checkpoint or "",
    }


def append_results(path: str | os.PathLike, rows: Iterable[dict]) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_FIELDS, extrasaction="ignore")
        if new:
            writer.writeheader()
        for row in rows:
            writer.writerow(row)


def read_results(path: str | os.PathLike) -> list[ResultRow]:
    def num(x):
        return float(x) if x not in ("", None) else None

    with open(path, newline="", encoding="utf-8") as fh:
        return [
            ResultRow(int(r["run_id"]), r["dataset"], r["k"], r["mode"].lower(),
                      r.get("status") or "ok", num(r.get("dev_score")), num(r.get("test_score")))
            for r in csv.DictReader(fh)
        ]


@dataclass
class Cell:
    mean: float
    scores: list[float]


def summarize(rows: Sequence[ResultRow], top_k: int = 10) -> dict[tuple[str, str, str], Cell]:
    """Top-k-by-dev mean test score per (dataset, k, mode)."""
    groups = defaultdict(list)
    for r in rows:
        if r.completed:
            groups[(r.dataset, r.k, r.mode)].append(r)
    out = {}
    for key, recs in groups.items():
        mean, chosen = select_top_k(recs, min(top_k, len(recs)))
        out[key] = Cell(mean, [r.test_score for r in chosen])
    return out


def curves_from_cells(cells: dict, sizes: Sequence[str] = SIZE_ORDER) -> list[CurvePoint]:
    points = []
    for ds in sorted({key[0] for key in cells}):
        stl = {k: cells[(ds, k, "stl")].mean for k in sizes if (ds, k, "stl") in cells}
        mtl = {k: cells[(ds, k, "mtl")].mean for k in sizes if (ds, k, "mtl") in cells}
        present = [k for k in sizes if k in stl and k in mtl]
        if "1K" not in stl or not present or stl["1K"] <= 0:
            continue
        points += build_curves(stl, mtl, ds, sizes=present)
    return points


def write_curves(points: Iterable[CurvePoint], path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CURVE_FIELDS)
        for p in points:
            writer.writerow([p.dataset, p.k, f"{p.stl_norm:.6f}", f"{p.mtl_norm:.6f}",
                             f"{p.delta:.6f}"])


def format_report(cells: dict, sizes: Sequence[str] = tuple(reversed(SIZE_ORDER)),
                  top_k: int = 10) -> str:
    datasets = sorted({key[0] for key in cells})
    lines = [
        f"Macro-F1 x 100: mean test score of the {top_k} best runs by dev score",
        "MTL cells: ** p < 0.01, * p < 0.05 vs STL (Mann-Whitney U); '-' = no runs",
        "",
        f"{'dataset':<12}{'':<5}" + "".join(f"{k:>10}" for k in sizes),
    ]
    for ds in datasets:
        for mode in ("stl", "mtl", "union"):
            row = f"{ds:<12}{MODE_LABELS[mode]:<5}"
            for k in sizes:
                cell = cells.get((ds, k, mode))
                if cell is None:
                    row += f"{'-':>10}"
                    continue
                mark = ""
                if mode == "mtl" and (ds, k, "stl") in cells:
                    _, p = mann_whitney_u(cell.scores, cells[(ds, k, "stl")].scores)
                    mark = significance_marker(p)
                row += f"{100 * cell.mean:>8.2f}{mark:<2}"
            lines.append(row.rstrip())
        lines.append("")
    return "\n".join(lines)


def plot_curves(points: Sequence[CurvePoint], path: str | os.PathLike) -> None:
    """Delta-vs-size line plot, one line per dataset; x axis in thousands of tokens."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    by_ds = defaultdict(list)
    for p in points:
        by_ds[p.dataset].append(p)
    for ds, pts in sorted(by_ds.items()):
        xs = [int(p.k.rstrip("K")) for p in pts]
        ax.plot(xs, [p.delta for p in pts], marker="o", label=ds)
    ax.axhline(0.0, color="grey", linewidth=0.8)
    ax.set_xticks([int(k.rstrip("K")) for k in SIZE_ORDER])
    ax.set_xticklabels(SIZE_ORDER)
    ax.set_xlabel("main-task training tokens")
    ax.set_ylabel(r"$\Delta(k)$ = MTL$_{norm}$ $-$ STL$_{norm}$")
    if by_ds:
        ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def write_report(rows: Sequence[ResultRow], out_dir: str | os.PathLike, top_k: int = 10,
                 figure: bool = True) -> dict[str, Path]:
    """Write report.txt, curves.csv and (optionally) curves.png into ``out_dir``."""
    if not rows:
        raise ValueError("no results to report")
    cells = summarize(rows, top_k)
    if not cells:
        raise ValueError("no completed runs to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"report": out_dir / "report.txt", "curves": out_dir / "curves.csv"}
    paths["report"].write_text(format_report(cells, top_k=top_k) + "\n", encoding="utf-8")
    points = curves_from_cells(cells)
    write_curves(points, paths["curves"])
    if figure:
        paths["figure"] = out_dir / "curves.png"
        plot_curves(points, paths["figure"])
    return paths

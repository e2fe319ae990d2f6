"""Post-processing of history CSVs into markdown tables and line plots.

Pure presentation: nothing here recomputes a metric, it only reshapes what
the runs wrote."""

from __future__ import annotations

from pathlib import Path

from fedskip.errors import DataError, InputError
from fedskip.orchestrator import RoundMetrics, read_history_csv

_COLUMNS = ("micro_f1", "macro_f1", "auc", "loss", "comm_fraction")


def _fmt_cell(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def comparison_table(runs: dict[str, list[RoundMetrics]]) -> str:
    lines = ["| method | rounds | " + " | ".join(_COLUMNS) + " | uplink_bytes |",
             "|" + "---|" * (len(_COLUMNS) + 3)]
    for name, rows in runs.items():
        if not rows:
            raise InputError(f"history {name} has no rows")
        last = rows[-1]
        cells = [name, str(last.round_idx)]
        cells += [_fmt_cell(getattr(last, c)) for c in _COLUMNS]
        cells.append(str(sum(r.uplink_bytes for r in rows)))
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def write_report(csv_paths: list[Path], out_dir: Path, plots: bool = False) -> Path:
    runs = {p.stem: read_history_csv(p) for p in csv_paths}
    doc = ["# Run comparison", "", comparison_table(runs)]
    if plots:
        png = _write_plots(runs, out_dir)
        doc += ["", f"![metric vs round]({png.name})"]
    path = out_dir / "report.md"
    path.write_text("\n".join(doc) + "\n")
    return path


def _write_plots(runs: dict[str, list[RoundMetrics]], out_dir: Path) -> Path:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        raise DataError("plotting requires matplotlib (pip install fedskip[plots])") from None
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    for name, rows in runs.items():
        xs = [r.round_idx for r in rows]
        defined = [(x, r.micro_f1) for x, r in zip(xs, rows) if r.micro_f1 is not None]
        if defined:
            ax1.plot(*zip(*defined), label=name)
        ax2.plot(xs, [r.loss for r in rows], label=name)
    ax1.set_xlabel("round"), ax1.set_ylabel("micro F1"), ax1.legend()
    ax2.set_xlabel("round"), ax2.set_ylabel("loss"), ax2.legend()
    fig.tight_layout()
    path = out_dir / "metrics_vs_round.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path

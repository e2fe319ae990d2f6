"""Command-line front end: gen, run, ablate, report.

A thin shell over the library; every number printed or written is produced
by the modules. Exit codes: 0 success, 2 config error, 3 data error,
4 protocol error."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from fedskip.errors import ConfigError, DataError, DecodeError, InputError, ProtocolError
from fedskip.expconfig import ExperimentConfig, load_config
from fedskip.experiment import (MODES, generate_datasets, load_datasets,
                                prepare_backbone, run_mode, save_datasets)
from fedskip.orchestrator import (History, mean_final_metric, rounds_to_fraction,
                                  write_history_csv)
from fedskip.wire import comm_fraction


def _load(args) -> ExperimentConfig:
    xc = load_config(args.config)
    if args.seed is not None:
        xc.set("seed", args.seed)
    if args.out is not None:
        xc.set("out.dir", args.out)
    if getattr(args, "mode", None) is not None:
        xc.set("fed.mode", args.mode)
    return xc


def _out_dir(xc: ExperimentConfig) -> Path:
    out = Path(xc["out.dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(xc: ExperimentConfig, out: Path) -> None:
    (out / "config_echo.cfg").write_text(xc.echo())


def cmd_gen(args) -> int:
    xc = _load(args)
    out = _out_dir(xc)
    ds = generate_datasets(xc)
    manifest = save_datasets(xc, ds, out / "data")
    _echo_config(xc, out)
    print(f"wrote datasets for task={xc['task.kind']} "
          f"(train={len(ds.train)}, test={len(ds.test)}, "
          f"clients={len(ds.clients)}) -> {manifest.parent}")
    return 0


def _summary_line(xc: ExperimentConfig, mode: str, hist: History) -> str:
    last = hist.rows[-1]
    r90 = rounds_to_fraction(hist, 0.9)
    parts = [f"mode={mode}", f"rounds={last.round_idx}"]
    for name in ("micro_f1", "macro_f1", "auc"):
        v = getattr(last, name)
        if v is not None:
            parts.append(f"{name}={v:.4f}")
    parts += [f"loss={last.loss:.4f}", f"comm_fraction={last.comm_fraction:.4f}",
              f"rounds_to_90pct={r90}"]
    return " ".join(parts)


def cmd_run(args) -> int:
    xc = _load(args)
    out = _out_dir(xc)
    mode = xc["fed.mode"]
    if mode not in MODES:
        raise ConfigError(f"fed.mode must be one of {MODES}, got {mode!r}")
    ds = load_datasets(xc, out / "data")
    backbone = prepare_backbone(xc, ds.corpus, cache_path=out / "backbone.bin")
    result = run_mode(xc, ds, backbone, mode)
    _echo_config(xc, out)
    if mode == "local_only":
        for i, hist in enumerate(result):
            write_history_csv(hist, out / f"history_client{i:03d}.csv")
        mean = mean_final_metric(result)
        summary = f"mode=local_only clients={len(result)} mean_final_micro_f1={mean:.4f}"
    else:
        write_history_csv(result, out / "history.csv")
        summary = _summary_line(xc, mode, result)
    (out / "summary.txt").write_text(summary + "\n")
    print(summary)
    return 0


def cmd_ablate(args) -> int:
    xc = _load(args)
    out = _out_dir(xc)
    ds = load_datasets(xc, out / "data")
    backbone = prepare_backbone(xc, ds.corpus, cache_path=out / "backbone.bin")
    cfg = xc.model_config()
    k_list = xc.ablate_k_list()
    if args.k_list:
        k_list = [int(x) for x in args.k_list.split(",")]
    for k in k_list:
        if k > cfg.n_blocks:
            raise ConfigError(f"ablation k={k} exceeds n_blocks={cfg.n_blocks}")
    rows = ["k,final_micro_f1,comm_fraction,rounds_to_90"]
    for k in k_list:
        xc.set("fed.top_k", k)
        hist = run_mode(xc, ds, backbone, "layer_skip")
        rows.append(f"{k},{hist.final()!r},{hist.rows[-1].comm_fraction!r},"
                    f"{rounds_to_fraction(hist, 0.9)}")
        print(f"ablate k={k}: {rows[-1]}")
    if xc["ablate.include_all"]:
        hist = run_mode(xc, ds, backbone, "fedavg_full")
        rows.append(f"all,{hist.final()!r},{hist.rows[-1].comm_fraction!r},"
                    f"{rounds_to_fraction(hist, 0.9)}")
        print(f"ablate all: {rows[-1]}")
    _echo_config(xc, out)
    (out / "ablation.csv").write_text("\n".join(rows) + "\n")
    print(f"wrote {out / 'ablation.csv'}")
    return 0


def cmd_report(args) -> int:
    from fedskip.report import write_report

    paths = [Path(p) for p in args.csvs]
    for p in paths:
        if not p.exists():
            raise DataError(f"missing history CSV {p}")
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    report_path = write_report(paths, out, plots=args.plots)
    print(f"wrote {report_path}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="fedskip",
        description="Layer-skipping federated fine-tuning simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="key=value config file")
    common.add_argument("--out", default=None, help="override out.dir")
    common.add_argument("--seed", type=int, default=None, help="override master seed")

    p_gen = sub.add_parser("gen", parents=[common], help="generate datasets + manifest")
    p_gen.set_defaults(fn=cmd_gen)

    p_run = sub.add_parser("run", parents=[common], help="run one experiment mode")
    p_run.add_argument("--mode", choices=MODES, default=None, help="override fed.mode")
    p_run.set_defaults(fn=cmd_run)

    p_ab = sub.add_parser("ablate", parents=[common], help="sweep trainable-layer counts")
    p_ab.add_argument("--k-list", default=None, help="comma-separated k values")
    p_ab.set_defaults(fn=cmd_ablate)

    p_rep = sub.add_parser("report", help="summarize history CSVs")
    p_rep.add_argument("csvs", nargs="+", help="history.csv paths")
    p_rep.add_argument("--out", default=None, help="report output directory")
    p_rep.add_argument("--plots", action="store_true", help="also write PNG plots")
    p_rep.set_defaults(fn=cmd_report)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (DataError, DecodeError, InputError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except ProtocolError as e:
        print(f"protocol error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

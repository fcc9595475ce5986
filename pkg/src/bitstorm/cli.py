"""bitstorm command line: gen-data, train, eval, ensemble-sweep, hw-verify.

Every CSV starts with '#' comment lines carrying the tool version, the
command line, the seed and the resolved configuration; binary outputs carry
the same record in their JSON header.
"""

from __future__ import annotations

import argparse
import csv
import json
import shlex
import sys
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .data import KINDS, generate, load_dataset, save_dataset, split, split_paths
from .ensemble import (
    EnsembleConfig,
    EnsembleRunReport,
    ExactProjection,
    HardwareRounder,
    ensemble_error_curve,
    error_rate,
)
from .hw import (
    Lfsr,
    MuxRounderConfig,
    SelectSource,
    exact_output_probability,
    fermat_product,
    joint_select_distribution,
    lfsr_period,
    make_select_stream,
    modulate,
    select_bit_probabilities,
    select_distribution,
    select_perturbation,
)
from .model import NetworkModel, QFraction, load_model, store_model
from .projection import RandomSource
from .train import TrainConfig, build_model, train_and_select


class CheckFailed(Exception):
    pass


def _header(argv: Sequence[str], seed: int, config: dict) -> list[str]:
    return [f"bitstorm {__version__}",
            "command: " + shlex.join(["bitstorm", *argv]),
            f"seed: {seed}",
            "config: " + json.dumps(config, sort_keys=True)]


def write_csv(path, header: list[str], columns: Sequence[str], rows, notes: Sequence[str] = ()) -> None:
    with open(path, "w", newline="") as f:
        for line in list(header) + list(notes):
            f.write(f"# {line}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _provenance(argv, seed, config) -> dict:
    return {"version": __version__, "command": shlex.join(["bitstorm", *argv]),
            "seed": seed, "config": config}


def _mux_config(args) -> MuxRounderConfig:
    return MuxRounderConfig(n_inputs=args.mux_inputs, select_source=SelectSource(args.select_source),
                            modulator_width=args.modulator_width)


def _add_mux_flags(p, default_source="ideal"):
    p.add_argument("--mux-inputs", type=int, default=8, help="multiplexer width N")
    p.add_argument("--select-source", default=default_source,
                   choices=[s.value for s in SelectSource])
    p.add_argument("--modulator-width", type=int, default=16, help="modulator target width M")


def _sampler(args):
    if args.sampler == "exact":
        return ExactProjection()
    return HardwareRounder(_mux_config(args), lanes=args.lanes)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, argv) -> int:
    ds = generate(args.kind, args.n, args.noise, args.seed)
    parts = split(ds, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = {"kind": args.kind, "n": args.n, "noise": args.noise}
    for name, path in split_paths(out).items():
        save_dataset(parts[name], path, _provenance(argv, args.seed, {**config, "split": name}))
        print(f"{path}: {len(parts[name])} examples, {ds.num_classes} classes")
    return 0


def cmd_train(args, argv) -> int:
    data = Path(args.data)
    paths = split_paths(data)
    train, val = load_dataset(paths["train"]), load_dataset(paths["val"])
    model = build_model(args.topology, train.shape, args.activation, not args.no_batchnorm, args.seed)
    if model.num_classes != train.num_classes:
        raise ValueError(f"topology has {model.num_classes} outputs but data has {train.num_classes} classes")
    cfg = TrainConfig(epochs=args.epochs, learning_rate=args.lr, lr_decay=args.lr_decay,
                      batch_size=args.batch_size,
                      projection=None if args.projection == "none" else args.projection,
                      seed=args.seed, ste_window=args.ste_window)
    result = train_and_select(model, train, val, cfg)
    config = {"topology": args.topology, "activation": args.activation,
              "batchnorm": not args.no_batchnorm, "data": str(data), **cfg.to_dict()}
    store_model(result.model, args.out, provenance=_provenance(argv, args.seed, config))
    log_path = args.log or str(Path(args.out).with_suffix(".epochs.csv"))
    write_csv(log_path, _header(argv, args.seed, config), result.CSV_COLUMNS, result.rows())
    print(f"selected epoch {result.best_epoch} (val error {result.best_val_error:.4f}); "
          f"model -> {args.out}, log -> {log_path}")
    return 0


def _eval_split(args):
    return load_dataset(split_paths(args.data)[args.split]) if Path(args.data).is_dir() \
        else load_dataset(args.data)


def cmd_eval(args, argv) -> int:
    model = load_model(args.model)
    ds = _eval_split(args)
    if args.mode == "float":
        if not isinstance(model, NetworkModel):
            raise ValueError("float evaluation needs a high-precision model")
        err = error_rate(model, ds)
    elif isinstance(model, NetworkModel):
        k = 1 if args.mode == "single-projection" else args.k
        cfg = EnsembleConfig(member_counts=(k,), projection=args.projection,
                             sampler=_sampler(args), trials=1, base_seed=args.seed)
        err = float(ensemble_error_curve(model, ds, cfg).mean[0])
    else:
        err = error_rate(model, ds)
    config = {"model": args.model, "data": args.data, "split": args.split, "mode": args.mode,
              "k": args.k, "projection": args.projection, "sampler": _sampler(args).describe()}
    if args.out:
        write_csv(args.out, _header(argv, args.seed, config), ("mode", "error"), [(args.mode, err)])
    print(repr(err))
    return 0


def cmd_ensemble_sweep(args, argv) -> int:
    model = load_model(args.model)
    if not isinstance(model, NetworkModel):
        raise ValueError("ensemble sweeps need a high-precision model")
    ds = _eval_split(args)
    ks = tuple(int(k) for k in args.ks.split(",")) if args.ks else \
        tuple(k for k in (1, 2, 4, 8, 16, 32, 64, 128) if k <= args.k_max) or (args.k_max,)
    if args.k_max not in ks and not args.ks:
        ks = ks + (args.k_max,)
    cfg = EnsembleConfig(member_counts=ks, projection=args.projection, sampler=_sampler(args),
                         trials=args.trials, base_seed=args.seed, nested=not args.independent,
                         aggregation=args.aggregation)
    report = ensemble_error_curve(model, ds, cfg)
    hp = error_rate(model, ds)
    config = {**cfg.to_dict(), "model": args.model, "data": args.data, "split": args.split}
    notes = [f"high_precision_error: {hp!r}"]
    write_csv(args.out, _header(argv, args.seed, config), EnsembleRunReport.CSV_COLUMNS,
              report.rows(), notes)
    for k, m, s, *_ in report.rows():
        print(f"K={k:4d}  mean={m:.4f}  std={s:.4f}")
    print(f"high-precision error {hp:.4f}; report -> {args.out}")
    return 0


HW_COLUMNS = ("mode", "N", "M", "weight_value", "analytic_p", "empirical_p", "n_cycles", "abs_error")


def hw_verify(config: MuxRounderConfig, cycles: int, seed: int, modulator_max_width: int):
    """Rows plus (name, passed, detail) self-checks for the rounder engine."""
    n, m = config.n_inputs, config.modulator_width
    checks = []

    fp = {k: fermat_product(k) == (1 << k) - 1 for k in (2, 4, 8, 16)}
    checks.append(("fermat_identity", all(fp.values()), f"M in {sorted(fp)}"))
    widths = sorted({2, 4, 8, 16, n})
    fact_ok = all(joint_select_distribution([s.p_one for s in select_bit_probabilities(k)])
                  == select_distribution(k) for k in widths)
    checks.append(("select_bit_factorization", fact_ok, f"N in {widths}"))

    bound = Fraction(1, 1 << n)
    worst = max(abs(exact_output_probability(QFraction(b, n)) - QFraction(b, n).fraction)
                for b in range(1 << n)) if n <= 16 else None
    if worst is not None:
        checks.append(("mux_error_bound", worst <= bound,
                       f"max |P(out=1) - value| = {float(worst):.6g} <= 1/2^{n} = {float(bound):.6g}"))

    mod_ok = True
    for mw in range(1, modulator_max_width + 1):
        patterns = ((np.arange(1 << mw)[:, None] >> np.arange(mw)) & 1).astype(np.uint8)
        targets = np.arange(1 << mw, dtype=np.uint64)
        ones = modulate(targets[:, None], mw, patterns[None, :, :]).sum(axis=1)
        mod_ok &= bool(np.array_equal(ones, np.arange(1 << mw)))
    checks.append(("modulator_exactness", mod_ok, f"all targets, widths 1..{modulator_max_width}"))

    if config.lfsr_width <= 20:
        period, ones = lfsr_period(Lfsr(1, config.lfsr_width, config.lfsr_taps))
        full = (1 << config.lfsr_width) - 1
        checks.append(("lfsr_period", period == full and ones == 1 << (config.lfsr_width - 1),
                       f"period {period} (expect {full}), ones {ones}"))

    checks.append(("select_perturbation", True,
                   f"max |P_mod(sel=i) - P(sel=i)| = {float(select_perturbation(n, m)):.3e} at M={m}"))

    rows = []
    sel = make_select_stream(config, RandomSource(seed).derive("hw-verify")).draw(cycles)
    words = np.arange(1 << n, dtype=np.uint64) if n <= 12 else \
        np.linspace(0, (1 << n) - 1, 257).astype(np.uint64)
    for b in words:
        word = QFraction(int(b), n)
        analytic = exact_output_probability(word) if n <= 16 else \
            word.fraction * (1 << n) / ((1 << n) - 1)
        hits = ((np.uint64(b) >> (sel.astype(np.uint64) - np.uint64(1))) & np.uint64(1)).sum()
        emp = float(hits) / cycles
        rows.append((config.select_source.value, n, m, word.value, float(analytic), emp, cycles,
                     abs(emp - float(analytic))))
    return rows, checks


def cmd_hw_verify(args, argv) -> int:
    config = _mux_config(args)
    rows, checks = hw_verify(config, args.cycles, args.seed, args.modulator_check_width)
    notes = [f"check {name}: {'PASS' if ok else 'FAIL'} ({detail})" for name, ok, detail in checks]
    cfg = {**config.to_dict(), "cycles": args.cycles,
           "modulator_check_width": args.modulator_check_width}
    write_csv(args.out, _header(argv, args.seed, cfg), HW_COLUMNS, rows, notes)
    for line in notes:
        print(line)
    worst = max(r[-1] for r in rows)
    print(f"max |empirical - analytic| over {len(rows)} inputs: {worst:.5f}; report -> {args.out}")
    failed = [name for name, ok, _ in checks if not ok]
    if failed:
        raise CheckFailed("self-check failed: " + ", ".join(failed))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bitstorm", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"bitstorm {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset as train/val/test containers")
    g.add_argument("--kind", choices=KINDS, default="two-moons")
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--noise", type=float, default=0.2)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="projected-gradient training with validation selection")
    t.add_argument("--data", required=True, help="directory written by gen-data")
    t.add_argument("--topology", default="32FC-16FC-2SVM")
    t.add_argument("--activation", choices=("sign", "relu"), default="sign")
    t.add_argument("--no-batchnorm", action="store_true")
    t.add_argument("--epochs", type=int, default=50)
    t.add_argument("--lr", type=float, default=0.3)
    t.add_argument("--lr-decay", type=float, default=0.97)
    t.add_argument("--batch-size", type=int, default=8)
    t.add_argument("--projection", choices=("ternary", "binary", "none"), default="ternary")
    t.add_argument("--ste-window", type=float, default=1.0)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True, help="model file")
    t.add_argument("--log", help="epoch log CSV (default: <out>.epochs.csv)")
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "error rate of one model"),
                                 ("ensemble-sweep", cmd_ensemble_sweep, "error vs. ensemble size")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--model", required=True)
        e.add_argument("--data", required=True, help="gen-data directory or a single container")
        e.add_argument("--split", choices=("train", "val", "test"), default="test")
        e.add_argument("--projection", choices=("ternary", "binary"), default="ternary")
        e.add_argument("--sampler", choices=("exact", "hardware"), default="exact")
        e.add_argument("--lanes", type=int, default=1, help="hardware rounder lanes")
        _add_mux_flags(e)
        e.add_argument("--seed", type=int, default=0)
        e.set_defaults(func=func)
        if name == "eval":
            e.add_argument("--mode", choices=("float", "single-projection", "ensemble"), default="float")
            e.add_argument("--k", type=int, default=1, help="ensemble size for --mode ensemble")
            e.add_argument("--out", help="optional CSV")
        else:
            e.add_argument("--trials", type=int, default=20)
            e.add_argument("--k-max", type=int, default=32)
            e.add_argument("--ks", help="comma-separated ensemble sizes (overrides --k-max)")
            e.add_argument("--independent", action="store_true",
                           help="resample members for every K instead of nesting")
            e.add_argument("--aggregation", choices=("sum", "vote"), default="sum")
            e.add_argument("--out", required=True)

    h = sub.add_parser("hw-verify", help="check the multiplexer rounding engine")
    _add_mux_flags(h, default_source="lfsr-per-bit")
    h.add_argument("--cycles", type=int, default=100_000)
    h.add_argument("--modulator-check-width", type=int, default=10)
    h.add_argument("--seed", type=int, default=0)
    h.add_argument("--out", required=True)
    h.set_defaults(func=cmd_hw_verify)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args, argv)
    except CheckFailed as e:
        print(f"bitstorm: {e}", file=sys.stderr)
        return 1
    except (ValueError, OSError, FloatingPointError) as e:
        print(f"bitstorm {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

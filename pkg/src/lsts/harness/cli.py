"""``lsts gradcheck|train|ablate|export [--config PATH] [--seed U64] [--out DIR]``.

Exit codes: 0 success, 1 a check failed or training diverged, 2 bad config
or unusable input files.
"""

import argparse
import csv
import sys
import time
from pathlib import Path

from .. import synth
from ..pipeline import FRAME_HEADER, Schedule
from ..sampler import read_offsets_csv, write_offsets_csv
from . import experiments
from .config import ConfigError, ExperimentConfig, format_config, load_config
from .gradcheck import run_all

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
MAX_SEED = 2 ** 64 - 1


class InputError(ValueError):
    pass


def _seed(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v <= MAX_SEED:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def build_parser():
    p = argparse.ArgumentParser(prog="lsts", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("gradcheck", "finite-difference check of every op"),
                        ("train", "train sampling offsets on synthetic motion"),
                        ("ablate", "method comparison and component ladder"),
                        ("export", "offset and motion histograms")):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", type=Path, help="key = value config file")
        sp.add_argument("--seed", type=_seed, help="overrides the config seed")
        sp.add_argument("--out", type=Path, default=Path("lsts-out"), help="output directory")
        if name == "export":
            sp.add_argument("--offsets", type=Path, help="learned offsets (default OUT/offsets.csv)")
            sp.add_argument("--initial", type=Path,
                            help="initial offsets (default OUT/initial_offsets.csv)")
            sp.add_argument("--motion", type=Path, help="motion CSV (default OUT/motion.csv)")
    return p


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    return cfg


def _write_lines(path, header, lines):
    path.write_text("\n".join([header, *lines]) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gradcheck(cfg, out: Path) -> int:
    t0 = time.perf_counter()
    lines, ok = [], True
    for _, line, passed, _ in run_all(cfg.instances, cfg.seed, cfg.fd_step, cfg.tol):
        print(line)
        lines.append(line)
        ok &= passed
    summary = f"{'PASS' if ok else 'FAIL'}: {len(lines)} ops at tol {cfg.tol:g}"
    print(f"{summary} ({time.perf_counter() - t0:.1f} s)")
    (out / "gradcheck.txt").write_text("\n".join(lines + [summary]) + "\n")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_train(cfg, out: Path) -> int:
    with open(out / "metrics.csv", "w") as fh:
        fh.write(experiments.MetricsRecord.HEADER + "\n")

        def emit(rec):
            fh.write(rec.format() + "\n")

        try:
            res = experiments.train_offsets(cfg, on_record=emit)
        except experiments.DivergenceError as exc:
            print(f"training diverged: {exc}", file=sys.stderr)
            return EXIT_FAIL
    write_offsets_csv(out / "offsets.csv", res.offsets.values)
    write_offsets_csv(out / "initial_offsets.csv", res.initial)
    synth.write_motion_csv(out / "motion.csv", res.sequence.motion)
    mean = res.offsets.mean()
    last = res.records[-1].loss if res.records else float("nan")
    print(f"mean offset ({mean[0]:.4f}, {mean[1]:.4f}) target ({res.target[0]:.4f}, "
          f"{res.target[1]:.4f}) distance {res.final_distance:.4f} final loss {last:.6g}")
    return EXIT_OK


def cmd_ablate(cfg, out: Path) -> int:
    rows, _ = experiments.compare_methods(cfg)
    ladder, frames = experiments.run_ladder(cfg)
    rows += ladder
    _write_lines(out / "ablation.csv", experiments.AblationRow.HEADER,
                 [r.format(cfg.timing) for r in rows])
    fdir = out / "frames"
    fdir.mkdir(exist_ok=True)
    for label, recs in frames.items():
        _write_lines(fdir / f"{label}.csv", FRAME_HEADER, [r.format(cfg.timing) for r in recs])
    for r in rows:
        print(f"{r.group:7s} {r.name:28s} mse={r.mse:.6f} ops={r.ops}")
    heavy = sum(1 for r in frames[next(iter(frames))] if r.index_type == "key")
    print(f"heavy extractions per sequence: {heavy} "
          f"(expected {Schedule(cfg.interval).heavy_count(cfg.ladder_frames)})")
    return EXIT_OK


def _read_offsets(path):
    try:
        arr = read_offsets_csv(path)
    except (OSError, ValueError) as exc:
        raise InputError(str(exc)) from None
    if arr.size == 0:
        raise InputError(f"{path}: no offsets")
    return arr


def histogram_table(learned, initial, motion):
    centers = synth.bin_centers()
    cols = {}
    for axis, k in (("dx", 0), ("dy", 1)):
        cols[f"learned_{axis}"] = synth.histogram(learned[:, k])
        cols[f"init_{axis}"] = synth.histogram(initial[:, k])
        cols[f"motion_{axis}"] = synth.histogram(motion[:, k])
    return centers, cols


def cmd_export(cfg, out: Path, offsets=None, initial=None, motion=None) -> int:
    offsets = offsets or out / "offsets.csv"
    initial = initial or out / "initial_offsets.csv"
    motion = motion or out / "motion.csv"
    try:
        learned = _read_offsets(offsets) / cfg.gap  # offsets span `gap` frames
        init = _read_offsets(initial) / cfg.gap
        try:
            mot = synth.read_motion_csv(motion)
        except (OSError, ValueError) as exc:
            raise InputError(str(exc)) from None
        if mot.size == 0:
            raise InputError(f"{motion}: no motion rows")
    except InputError as exc:
        print(f"export: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    centers, cols = histogram_table(learned, init, mot)
    names = list(cols)
    with open(out / "histogram.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin"] + names)
        for i, c in enumerate(centers):
            w.writerow([repr(float(c))] + [int(cols[n][i]) for n in names])
    lines = []
    for axis in ("dx", "dy"):
        li = synth.histogram_intersection(cols[f"learned_{axis}"], cols[f"motion_{axis}"])
        ii = synth.histogram_intersection(cols[f"init_{axis}"], cols[f"motion_{axis}"])
        lines.append(f"{axis},{li!r},{ii!r}")
        print(f"{axis}: intersection learned={li:.4f} init={ii:.4f}")
    _write_lines(out / "intersection.csv", "axis,learned,init", lines)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args)
    except (ConfigError, OSError) as exc:
        print(f"bad config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config(cfg))
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, out)
        if args.command == "train":
            return cmd_train(cfg, out)
        if args.command == "ablate":
            return cmd_ablate(cfg, out)
        return cmd_export(cfg, out, args.offsets, args.initial, args.motion)
    except (ValueError, RuntimeError) as exc:
        print(f"{args.command} failed: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end: simulate, fit, eval, bench, plot.

Every run resolves its configuration (flags over config file over preset),
writes all outputs under the required ``--out`` directory, and records a
manifest with the resolved configuration, seed, input hashes and
timestamps.  Exit codes are stable: 0 success, 2 usage or validation
failure, 3 numerical failure.
"""

import argparse
import csv as _csv
import datetime
import hashlib
import json
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import __version__
from .core import Dictionary, SignalSet
from .bench import bench_convergence, bench_scaling_channels, plot_convergence
from .io import read_csct, write_csct
from .learner import (
    FitConfig,
    Regularization,
    SolverDivergence,
    fit,
)
from .simulate import (
    SimConfig,
    make_truth,
    plot_recovery,
    recovery_assignment,
    temporal_patterns,
)
from .zstep import ZSolverConfig, lambda_max

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3

SIM_PRESETS = {
    # two planted shapes at the pattern-recovery experiment scale
    "pattern-recovery": {"signals": 100, "channels": 5, "atoms": 2,
                         "atom_length": 64, "n_valid": 640, "density": 0.05,
                         "sigma": 1e-3},
    # longer signals for the channel-scaling runs
    "channel-scaling": {"signals": 4, "channels": 64, "atoms": 2,
                        "atom_length": 64, "n_valid": 4096, "density": 0.05,
                        "sigma": 0.01},
}

BENCH_SCENARIOS = ("scaling-p", "convergence")


class UsageError(Exception):
    pass


def _utcnow():
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _parse_reg(text):
    """Parse 'frac:0.05' or 'abs:1.2' into a Regularization."""
    try:
        kind, raw = text.split(":", 1)
        value = float(raw)
    except ValueError:
        raise UsageError("bad regularization %r (expected frac:X or abs:X)"
                         % (text,))
    if kind == "frac":
        return Regularization.fraction(value)
    if kind == "abs":
        return Regularization.absolute(value)
    raise UsageError("bad regularization kind %r (expected frac or abs)"
                     % (kind,))


def _resolve(args, preset_table, keys):
    """flags > config file > preset > parser default."""
    resolved = {}
    preset = {}
    if getattr(args, "preset", None):
        if args.preset not in preset_table:
            raise UsageError("unknown preset %r (available: %s)"
                             % (args.preset, ", ".join(sorted(preset_table))))
        preset = preset_table[args.preset]
    from_file = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            from_file = json.load(fh)
    for key, default in keys.items():
        value = getattr(args, key, None)
        if value is None:
            value = from_file.get(key, preset.get(key, default))
        if value is None:
            raise UsageError("missing required setting %r" % (key,))
        resolved[key] = value
    return resolved


class _Manifest:
    def __init__(self, out_dir, command, argv):
        self.data = {
            "command": command,
            "argv": list(argv),
            "tool_version": __version__,
            "started_at": _utcnow(),
            "inputs": {},
            "outputs": [],
        }
        self.out_dir = out_dir

    def add_input(self, path):
        self.data["inputs"][str(path)] = _sha256_file(path)

    def out_path(self, name):
        path = os.path.join(self.out_dir, name)
        self.data["outputs"].append(name)
        return path

    def finish(self, resolved_config, seed=None):
        self.data["resolved_config"] = resolved_config
        if seed is not None:
            self.data["seed"] = seed
        self.data["finished_at"] = _utcnow()
        with open(os.path.join(self.out_dir, "manifest.json"), "w") as fh:
            json.dump(self.data, fh, indent=2, default=str)


def _prepare_out(args):
    os.makedirs(args.out, exist_ok=True)
    return args.out


def cmd_simulate(args, argv):
    keys = {"signals": None, "channels": None, "atoms": 2, "atom_length": None,
            "n_valid": None, "density": 0.05, "sigma": None, "seed": 0}
    cfg = _resolve(args, SIM_PRESETS, keys)
    out_dir = _prepare_out(args)
    manifest = _Manifest(out_dir, "simulate", argv)

    sim = SimConfig(n_signals=int(cfg["signals"]),
                    n_channels=int(cfg["channels"]),
                    n_atoms=int(cfg["atoms"]),
                    atom_length=int(cfg["atom_length"]),
                    n_valid=int(cfg["n_valid"]),
                    density=float(cfg["density"]),
                    noise_sigma=float(cfg["sigma"]),
                    seed=int(cfg["seed"]))
    dictionary, activations, signals = make_truth(sim)

    write_csct(manifest.out_path("X.csct"), signals.data)
    write_csct(manifest.out_path("truth_dict.csct"), dictionary.materialize())
    write_csct(manifest.out_path("truth_u.csct"), dictionary.spatial)
    write_csct(manifest.out_path("truth_v.csct"), dictionary.temporal)
    write_csct(manifest.out_path("truth_z.csct"), activations.data)
    cfg["noise_semantics"] = "sigma is the per-sample standard deviation"
    manifest.finish(cfg, seed=int(cfg["seed"]))
    print("wrote %d signals (%d channels x %d samples) to %s"
          % (signals.n_signals, signals.n_channels, signals.n_times, out_dir))
    return EXIT_OK


def cmd_fit(args, argv):
    out_dir = _prepare_out(args)
    manifest = _Manifest(out_dir, "fit", argv)
    manifest.add_input(args.signals)

    x = read_csct(args.signals)
    if x.ndim != 3:
        raise UsageError("signals file must hold a 3-d tensor "
                         "(signals, channels, times); got %d-d" % x.ndim)
    signals = SignalSet(x)
    if args.model == "univariate" and signals.n_channels != 1:
        raise UsageError("univariate model on %d-channel input"
                         % signals.n_channels)

    reg = _parse_reg(args.reg)
    config = FitConfig(
        model=args.model,
        n_atoms=args.atoms,
        atom_length=args.atom_length,
        reg=reg,
        z_config=ZSolverConfig(reg=0.0, tol=args.z_tol),
        n_iter=args.n_iter,
        seed=args.seed,
        convergence_tol=args.convergence_tol,
    )

    diag_path = os.path.join(out_dir, "diagnostics.jsonl")
    try:
        result = fit(signals, config, n_jobs=args.threads)
    except SolverDivergence as exc:
        with open(diag_path, "w") as fh:
            fh.write(json.dumps({"error": str(exc)}) + "\n")
        print("solver aborted: %s (diagnostics: %s)" % (exc, diag_path),
              file=sys.stderr)
        return EXIT_NUMERICAL

    lam_max = result.lambda_trace[-1]
    reg_used = result.reg_trace[-1]
    if reg.kind == "fraction" and reg.value >= 1.0:
        print("warning: requested weight %.4g >= lambda_max; "
              "activations are all zero" % reg_used, file=sys.stderr)
    elif reg.kind == "absolute" and reg.value >= lam_max:
        print("warning: weight %.4g >= lambda_max %.4g; "
              "activations are all zero" % (reg.value, lam_max),
              file=sys.stderr)

    write_csct(manifest.out_path("dict.csct"),
               result.dictionary.materialize())
    if result.dictionary.is_rank1:
        write_csct(manifest.out_path("u.csct"), result.dictionary.spatial)
        write_csct(manifest.out_path("v.csct"), result.dictionary.temporal)
    write_csct(manifest.out_path("z.csct"), result.activations.data)
    with open(manifest.out_path("trace.json"), "w") as fh:
        json.dump(result.to_json_dict(config), fh, indent=2)
    with open(manifest.out_path("diagnostics.jsonl"), "w") as fh:
        for diag in result.z_diagnostics:
            fh.write(diag.to_json() + "\n")

    manifest.finish({
        "model": config.model, "atoms": config.n_atoms,
        "atom_length": config.atom_length,
        "reg": {"kind": reg.kind, "value": reg.value},
        "n_iter": config.n_iter, "z_tol": args.z_tol,
        "convergence_tol": config.convergence_tol,
        "threads": args.threads,
    }, seed=args.seed)
    print("final objective: %.10g" % result.final_objective())
    print("final lambda: %.10g (lambda_max %.10g)" % (reg_used, lam_max))
    return EXIT_OK


def _load_waveforms(path):
    arr = read_csct(path)
    if arr.ndim == 2:
        return arr
    if arr.ndim == 3:
        kind = "univariate" if arr.shape[1] == 1 else "full"
        return temporal_patterns(Dictionary(kind=kind, atoms=arr))
    raise UsageError("%s: expected a 2-d (atoms, length) or 3-d "
                     "(atoms, channels, length) tensor" % (path,))


def cmd_eval(args, argv):
    out_dir = _prepare_out(args)
    manifest = _Manifest(out_dir, "eval", argv)
    manifest.add_input(args.estimated)
    manifest.add_input(args.truth)
    estimated = _load_waveforms(args.estimated)
    truth = _load_waveforms(args.truth)
    if estimated.shape != truth.shape:
        raise UsageError("shape mismatch: estimated %r vs truth %r"
                         % (estimated.shape, truth.shape))
    loss, perm, signs = recovery_assignment(estimated, truth)
    with open(manifest.out_path("eval.json"), "w") as fh:
        json.dump({"loss": loss,
                   "permutation": perm.tolist(),
                   "signs": signs.tolist()}, fh, indent=2)
    manifest.finish({"estimated": args.estimated, "truth": args.truth})
    print("%.12g" % loss)
    return EXIT_OK


def cmd_bench(args, argv):
    if args.scenario not in BENCH_SCENARIOS:
        raise UsageError("unknown scenario %r (available: %s)"
                         % (args.scenario, ", ".join(BENCH_SCENARIOS)))
    out_dir = _prepare_out(args)
    manifest = _Manifest(out_dir, "bench", argv)
    stamp = datetime.datetime.now().strftime("%Y%m%d-%H%M%S-%f")

    if args.scenario == "scaling-p":
        channels = [int(c) for c in args.channels.split(",")]
        report = bench_scaling_channels(
            channels=channels, repetitions=args.reps,
            n_valid=args.n_valid, atom_length=args.atom_length,
            n_atoms=args.atoms, seed=args.seed)
        resolved = {"scenario": args.scenario, "channels": channels,
                    "reps": args.reps, "n_valid": args.n_valid,
                    "atom_length": args.atom_length, "atoms": args.atoms}
    else:
        fracs = []
        for token in args.lambdas.split(","):
            reg = _parse_reg(token)
            if reg.kind != "fraction":
                raise UsageError("convergence scenario takes frac:X weights")
            fracs.append(reg.value)
        report = bench_convergence(reg_fracs=fracs, n_inits=args.inits,
                                   budget_s=args.budget, seed=args.seed)
        resolved = {"scenario": args.scenario, "lambdas": fracs,
                    "inits": args.inits, "budget_s": args.budget}

    base = "%s-%s" % (args.scenario, stamp)
    report.write_json(manifest.out_path(base + ".json"))
    report.write_csv(manifest.out_path(base + ".csv"))
    if args.scenario == "convergence":
        plot_convergence(report, manifest.out_path(base + ".svg"))
        solvers = sorted({m["solver"] for m in report.measurements})
        print("solver  median_time_to_precision_s")
        for solver in solvers:
            vals = [m["time_to_precision_s"] for m in report.measurements
                    if m["solver"] == solver
                    and np.isfinite(m["time_to_precision_s"])]
            print("%-7s %.4g" % (solver, np.median(vals) if vals else float("nan")))
    else:
        print("step                 P    median_s     normalized")
        for row in report.measurements:
            print("%-20s %-4d %.6g   %.3g"
                  % (row["step"], row["P"], row["median_s"],
                     row["normalized"]))
    manifest.finish(resolved, seed=args.seed)
    return EXIT_OK


def cmd_plot(args, argv):
    out_dir = _prepare_out(args)
    manifest = _Manifest(out_dir, "plot", argv)
    manifest.add_input(args.csv)
    with open(args.csv, newline="") as fh:
        rows = [{"P": int(r["P"]), "sigma": float(r["sigma"]),
                 "loss_mean": float(r["loss_mean"])}
                for r in _csv.DictReader(fh)]
    if not rows:
        raise UsageError("%s: empty table" % (args.csv,))
    plot_recovery(rows, manifest.out_path("recovery.svg"))
    manifest.finish({"csv": args.csv})
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mvcsc",
        description="Convolutional sparse coding of multivariate time series")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic instance")
    p.add_argument("--preset", choices=sorted(SIM_PRESETS))
    p.add_argument("--config", help="JSON file with setting overrides")
    p.add_argument("--signals", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--atoms", type=int)
    p.add_argument("--atom-length", dest="atom_length", type=int)
    p.add_argument("--n-valid", dest="n_valid", type=int)
    p.add_argument("--density", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("fit", help="learn a dictionary from a CSCT file")
    p.add_argument("signals", help="input X.csct (signals, channels, times)")
    p.add_argument("--model", choices=("rank1", "full", "univariate"),
                   default="rank1")
    p.add_argument("-K", "--atoms", dest="atoms", type=int, required=True)
    p.add_argument("-L", "--atom-length", dest="atom_length", type=int,
                   required=True)
    p.add_argument("--reg", default="frac:0.1",
                   help="l1 weight, frac:X of lambda_max or abs:X")
    p.add_argument("--n-iter", dest="n_iter", type=int, default=40)
    p.add_argument("--z-tol", dest="z_tol", type=float, default=1e-6)
    p.add_argument("--convergence-tol", dest="convergence_tol", type=float,
                   default=1e-8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="score recovered waveforms against truth")
    p.add_argument("estimated")
    p.add_argument("truth")
    p.add_argument("--out", required=True)

    p = sub.add_parser("bench", help="run a performance scenario")
    p.add_argument("scenario", help="one of: %s" % ", ".join(BENCH_SCENARIOS))
    p.add_argument("--channels", default="1,4,16,64")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--n-valid", dest="n_valid", type=int, default=4096)
    p.add_argument("--atoms", type=int, default=2)
    p.add_argument("--atom-length", dest="atom_length", type=int, default=64)
    p.add_argument("--lambdas", default="frac:0.1")
    p.add_argument("--inits", type=int, default=3)
    p.add_argument("--budget", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("plot", help="render a recovery table as SVG")
    p.add_argument("csv", help="CSV written by the recovery experiment")
    p.add_argument("--out", required=True)
    return parser


HANDLERS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "plot": cmd_plot,
}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_OK
    try:
        return HANDLERS[args.command](args, argv)
    except UsageError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, FileNotFoundError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_USAGE
    except SolverDivergence as exc:
        print("numerical failure: %s" % exc, file=sys.stderr)
        return EXIT_NUMERICAL


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()

"""Performance harness: channel scaling and solver-convergence protocols.

Two scenarios are provided.  ``scaling-p`` fixes one synthetic instance,
slices it to increasing channel counts, and times each stage of the
alternating solver separately (activation solve, per-coordinate update
cost, the two dictionary-side precomputations, gradient evaluation),
reporting medians normalized to the single-channel timing.  ``convergence``
races coordinate-selection strategies (locally greedy, cyclic, randomized,
fully greedy) and the proximal-gradient solver on one convex coding
problem, recording objective-versus-time curves and the time each solver
needs to reach a fixed relative precision.

Only medians and orderings are meaningful; absolute wall times are machine
dependent.  Benchmarks run solvers serially (no process fan-out) and pin
BLAS pools to one thread when threadpoolctl is available.
"""

import hashlib
import json
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace

import numpy as np

from .core import Dictionary, objective
from .dstep import PhiPsiCache, compute_phi, compute_psi, grad_full_atom, grad_uv
from .learner import init_dictionary
from .simulate import SimConfig, make_truth
from .zstep import (
    ZSolverConfig,
    apply_update,
    auto_segments,
    compute_dtd,
    init_beta,
    lambda_max,
    lgcd_solve,
    segment_bounds,
    _lipschitz_estimate,
    _num_grad,
)

CD_STRATEGIES = ("lgcd", "cyclic", "random", "greedy")
SOLVERS = CD_STRATEGIES + ("fista",)


@contextmanager
def _single_threaded_blas():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        yield
        return
    with threadpool_limits(limits=1):
        yield


def timer_overhead():
    """Median cost of an empty timed section."""
    samples = []
    for _ in range(101):
        t0 = time.perf_counter()
        samples.append(time.perf_counter() - t0)
    return float(np.median(samples))


def _summary(times):
    arr = np.asarray(times)
    q1, med, q3 = np.percentile(arr, [25, 50, 75])
    return float(med), float(q3 - q1)


@dataclass
class BenchReport:
    """Rows of measurements plus enough context to reproduce them."""

    scenario: str
    measurements: list = field(default_factory=list)
    repetitions: int = 5
    timer_overhead_s: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.repetitions < 3:
            raise ValueError("need at least 3 repetitions")

    def rows_for(self, step):
        return [m for m in self.measurements if m["step"] == step]

    def to_json_dict(self):
        return {
            "scenario": self.scenario,
            "repetitions": self.repetitions,
            "timer_overhead_s": self.timer_overhead_s,
            "meta": self.meta,
            "measurements": self.measurements,
        }

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2)

    def write_csv(self, path):
        import csv as _csv
        keys = sorted({key for m in self.measurements for key in m})
        with open(path, "w", newline="") as fh:
            writer = _csv.DictWriter(fh, fieldnames=keys)
            writer.writeheader()
            writer.writerows(self.measurements)


def _timed(fn, repetitions):
    times = []
    out = None
    for _ in range(repetitions):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return times, out


def bench_scaling_channels(channels=(1, 4, 16, 64), n_signals=4, n_atoms=2,
                           atom_length=64, n_valid=4096, density=0.05,
                           reg_frac=0.005, repetitions=5, seed=0,
                           micro_updates=1500):
    """Time every solver stage on the same signals sliced to each P.

    One master instance is generated at the largest channel count; smaller
    counts use its leading channels, so the activation structure is shared.
    Measurements per P: full activation solve over all signals
    (``z_step_total``), the coordinate-update loop alone in seconds per
    update (``coordinate_update``), the two dictionary-side precomputations
    (``phi_precompute``, ``psi_precompute``) and a full gradient evaluation
    from the cached tables (``d_grad``).  Rows carry medians, IQRs and the
    ratio to the P = 1 median (``normalized``).
    """
    if 1 not in channels:
        raise ValueError("channel list must include 1 (normalization base)")
    max_p = max(channels)
    sim = SimConfig(n_signals=n_signals, n_channels=max_p, n_atoms=n_atoms,
                    atom_length=atom_length, n_valid=n_valid, density=density,
                    noise_sigma=0.01, seed=seed)
    _, truth_z, master = make_truth(sim)

    report = BenchReport(scenario="scaling-p", repetitions=repetitions,
                         timer_overhead_s=timer_overhead(),
                         meta={"channels": list(channels), "n_signals": n_signals,
                               "n_atoms": n_atoms, "atom_length": atom_length,
                               "n_valid": n_valid, "density": density,
                               "reg_frac": reg_frac, "seed": seed})
    n_times = master.n_times

    with _single_threaded_blas():
        for n_channels in channels:
            x = np.ascontiguousarray(master.data[:, :n_channels, :])
            dictionary = init_dictionary(x, n_atoms, atom_length, seed=seed)
            reg = reg_frac * lambda_max(x, dictionary)
            base_row = {"P": n_channels, "K": n_atoms, "L": atom_length,
                        "T": n_times, "reps": repetitions}

            def run_zstep():
                dtd = compute_dtd(dictionary)
                config = ZSolverConfig(reg=reg, tol=1e-4)
                diags = []
                for n in range(x.shape[0]):
                    _, diag = lgcd_solve(x[n], dictionary, config, dtd=dtd)
                    diags.append(diag)
                return diags

            times, diags = _timed(run_zstep, repetitions)
            med, iqr = _summary(times)
            report.measurements.append(dict(
                base_row, step="z_step_total", median_s=med, iqr_s=iqr,
                touched=int(sum(d.beta_entries_touched for d in diags)),
                updates=int(sum(d.n_updates for d in diags))))

            micro_cfg = ZSolverConfig(reg=reg, tol=1e-12,
                                      max_updates=micro_updates)
            dtd_cached = compute_dtd(dictionary)
            per_update = []
            last_diag = None
            for _ in range(repetitions):
                _, diag = lgcd_solve(x[0], dictionary, micro_cfg,
                                     dtd=dtd_cached)
                per_update.append(diag.t_loop_s / max(diag.n_updates, 1))
                last_diag = diag
            med, iqr = _summary(per_update)
            report.measurements.append(dict(
                base_row, step="coordinate_update", median_s=med, iqr_s=iqr,
                touched=int(last_diag.beta_entries_touched),
                updates=int(last_diag.n_updates)))

            times, phi = _timed(
                lambda: compute_phi(x, truth_z.data, atom_length), repetitions)
            med, iqr = _summary(times)
            report.measurements.append(dict(
                base_row, step="phi_precompute", median_s=med, iqr_s=iqr))

            times, psi = _timed(
                lambda: compute_psi(truth_z.data, atom_length), repetitions)
            med, iqr = _summary(times)
            report.measurements.append(dict(
                base_row, step="psi_precompute", median_s=med, iqr_s=iqr))

            cache = PhiPsiCache(phi=phi, psi=psi)

            def run_grad():
                out = []
                for k in range(n_atoms):
                    g = grad_full_atom(k, dictionary, cache)
                    out.append(grad_uv(dictionary.spatial[k],
                                       dictionary.temporal[k], g))
                return out

            times, _ = _timed(run_grad, repetitions)
            med, iqr = _summary(times)
            report.measurements.append(dict(
                base_row, step="d_grad", median_s=med, iqr_s=iqr))

    for step in ("z_step_total", "coordinate_update", "phi_precompute",
                 "psi_precompute", "d_grad"):
        rows = report.rows_for(step)
        base = next(r for r in rows if r["P"] == 1)["median_s"]
        for row in rows:
            row["normalized"] = row["median_s"] / base
    return report


# ---------------------------------------------------------------------------
# convergence racing


def _input_digest(x, dictionary, z0):
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(x).tobytes())
    h.update(np.ascontiguousarray(dictionary.materialize()).tobytes())
    h.update(np.ascontiguousarray(z0).tobytes())
    return h.hexdigest()


class _CurveRecorder:
    """Collects (solver seconds, objective) pairs, clock paused while the
    objective itself is evaluated."""

    def __init__(self, x, dictionary, reg):
        self.x = x
        self.dictionary = dictionary
        self.reg = reg
        self.curve = []
        self.solver_time = 0.0
        self._mark = None

    def start(self):
        self._mark = time.perf_counter()

    def pause(self):
        self.solver_time += time.perf_counter() - self._mark

    def record(self, z):
        self.curve.append((self.solver_time,
                           objective(self.x[None], self.dictionary,
                                     z[None], self.reg)))


def _cd_instrumented(x, dictionary, reg, z0, strategy, budget_s,
                     tol=1e-9, seed=0):
    """Generic instrumented coordinate descent with pluggable selection.

    Strategies: ``lgcd`` scans contiguous segments and updates each
    segment's worst coordinate; ``cyclic`` walks coordinates in order;
    ``random`` samples one uniformly per iteration; ``greedy`` keeps a full
    candidate table and always updates the globally worst coordinate.  All
    share the closed-form update and the incremental beta patch.
    """
    rng = np.random.default_rng(seed)
    dtd = compute_dtd(dictionary)
    length = dictionary.atom_length
    n_valid = x.shape[1] - length + 1
    n_atoms = dictionary.n_atoms
    z = np.array(z0, dtype=np.float64)

    recorder = _CurveRecorder(x, dictionary, reg)
    recorder.start()
    beta_table = init_beta(x, dictionary, z, dtd)
    beta = beta_table.beta
    inv_norms = 1.0 / beta_table.norms_sq

    def candidates_block(lo, hi):
        block = (beta[:, lo:hi] - reg) * inv_norms[:, None]
        np.maximum(block, 0.0, out=block)
        return block

    if strategy == "greedy":
        cand = candidates_block(0, n_valid)
    bounds = segment_bounds(n_valid, auto_segments(n_valid, length))
    cursor = 0
    n_updates = 0
    recorder.pause()
    recorder.record(z)
    recorder.start()

    while recorder.solver_time + (time.perf_counter() - recorder._mark) < budget_s:
        moved = 0.0
        if strategy == "lgcd":
            for lo, hi in bounds:
                block = candidates_block(lo, hi)
                gaps = np.abs(block - z[:, lo:hi])
                flat = int(np.argmax(gaps))
                k0, t_rel = divmod(flat, hi - lo)
                gap = gaps[k0, t_rel]
                moved = max(moved, gap)
                if gap > 0.0:
                    apply_update(k0, lo + t_rel, block[k0, t_rel], z,
                                 beta_table, dtd)
                    n_updates += 1
        elif strategy == "cyclic":
            for _ in range(n_atoms * 2 * length):
                k0, t0 = divmod(cursor, n_valid)
                cursor = (cursor + 1) % (n_atoms * n_valid)
                new = max((beta[k0, t0] - reg) * inv_norms[k0], 0.0)
                gap = abs(new - z[k0, t0])
                moved = max(moved, gap)
                if gap > 0.0:
                    apply_update(k0, t0, new, z, beta_table, dtd)
                    n_updates += 1
        elif strategy == "random":
            for _ in range(n_atoms * 2 * length):
                k0 = int(rng.integers(n_atoms))
                t0 = int(rng.integers(n_valid))
                new = max((beta[k0, t0] - reg) * inv_norms[k0], 0.0)
                gap = abs(new - z[k0, t0])
                moved = max(moved, gap)
                if gap > 0.0:
                    apply_update(k0, t0, new, z, beta_table, dtd)
                    n_updates += 1
        elif strategy == "greedy":
            for _ in range(len(bounds)):
                gaps = np.abs(cand - z)
                flat = int(np.argmax(gaps))
                k0, t0 = divmod(flat, n_valid)
                gap = gaps[k0, t0]
                moved = max(moved, gap)
                if gap == 0.0:
                    break
                apply_update(k0, t0, cand[k0, t0], z, beta_table, dtd)
                n_updates += 1
                lo = max(t0 - (length - 1), 0)
                hi = min(t0 + length, n_valid)
                cand[:, lo:hi] = candidates_block(lo, hi)
        else:
            raise ValueError("unknown strategy %r" % (strategy,))

        recorder.pause()
        recorder.record(z)
        recorder.start()
        if moved < tol:
            break
    recorder.pause()
    return z, recorder.curve, n_updates


def _fista_instrumented(x, dictionary, reg, z0, budget_s, record_every=5,
                        tol=1e-12):
    recorder = _CurveRecorder(x, dictionary, reg)
    recorder.start()
    n_valid = x.shape[1] - dictionary.atom_length + 1
    step = 1.0 / (_lipschitz_estimate(dictionary, n_valid) * 1.01)
    z = np.array(z0, dtype=np.float64)
    y = z.copy()
    momentum = 1.0
    recorder.pause()
    recorder.record(z)
    recorder.start()
    it = 0
    while recorder.solver_time + (time.perf_counter() - recorder._mark) < budget_s:
        grad = _num_grad(x, dictionary, y)
        z_next = np.maximum(y - step * grad - step * reg, 0.0)
        momentum_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * momentum ** 2))
        y = z_next + ((momentum - 1.0) / momentum_next) * (z_next - z)
        change = np.max(np.abs(z_next - z))
        z = z_next
        momentum = momentum_next
        it += 1
        if it % record_every == 0:
            recorder.pause()
            recorder.record(z)
            recorder.start()
            if change < tol:
                break
    recorder.pause()
    recorder.record(z)
    return z, recorder.curve, it


def time_to_precision(curve, best, precision=1e-3):
    """Earliest recorded time at which the suboptimality gap, relative to
    the initial gap, falls below ``precision``.  NaN when never reached."""
    start_gap = curve[0][1] - best
    if start_gap <= 0:
        return 0.0
    for t, obj in curve:
        if (obj - best) / start_gap <= precision:
            return t
    return float("nan")


def bench_convergence(reg_fracs=(0.1,), n_inits=3, solvers=SOLVERS,
                      n_channels=3, n_atoms=2, atom_length=16, n_valid=2000,
                      density=0.02, budget_s=3.0, precision=1e-3, seed=0):
    """Race coding solvers on one signal with the dictionary fixed.

    For every l1 fraction and every initialization, all solvers start from
    the same (hash-checked) signal, dictionary and warm start, and run
    until their time budget.  The recorded curves give, per solver, the
    time to shrink the suboptimality gap to ``precision`` of its initial
    value, measured against the best objective any solver found for that
    run.
    """
    sim = SimConfig(n_signals=1, n_channels=n_channels, n_atoms=n_atoms,
                    atom_length=atom_length, n_valid=n_valid, density=density,
                    noise_sigma=0.05, seed=seed)
    truth_dict, _, signals = make_truth(sim)
    x = signals.data[0]
    dictionary = truth_dict
    lam_max = lambda_max(x, dictionary)

    report = BenchReport(scenario="convergence", repetitions=max(3, n_inits),
                         timer_overhead_s=timer_overhead(),
                         meta={"reg_fracs": list(reg_fracs),
                               "n_inits": n_inits, "solvers": list(solvers),
                               "n_channels": n_channels, "n_atoms": n_atoms,
                               "atom_length": atom_length, "n_valid": n_valid,
                               "budget_s": budget_s, "precision": precision,
                               "seed": seed})
    rng = np.random.default_rng(seed + 1)
    n_times = x.shape[1]

    with _single_threaded_blas():
        for frac in reg_fracs:
            reg = frac * lam_max
            for init in range(n_inits):
                if init == 0:
                    z0 = np.zeros((n_atoms, n_valid))
                else:
                    mask = rng.random((n_atoms, n_valid)) < density
                    z0 = np.where(mask, rng.random((n_atoms, n_valid)), 0.0)
                digest = _input_digest(x, dictionary, z0)

                runs = {}
                for solver in solvers:
                    assert _input_digest(x, dictionary, z0) == digest
                    if solver == "fista":
                        _, curve, iters = _fista_instrumented(
                            x, dictionary, reg, z0, budget_s)
                    else:
                        _, curve, iters = _cd_instrumented(
                            x, dictionary, reg, z0, solver, budget_s,
                            seed=seed)
                    runs[solver] = (curve, iters)

                best = min(curve[-1][1] for curve, _ in runs.values())
                for solver, (curve, iters) in runs.items():
                    report.measurements.append({
                        "step": "convergence", "solver": solver,
                        "reg_frac": frac, "init": init,
                        "P": n_channels, "K": n_atoms, "L": atom_length,
                        "T": n_times, "reps": n_inits,
                        "final_objective": curve[-1][1],
                        "best_objective": best,
                        "time_to_precision_s": time_to_precision(
                            curve, best, precision),
                        "updates": iters,
                        "input_digest": digest,
                        "solver_time_s": curve[-1][0],
                    })
    return report


def plot_convergence(report, out_svg):
    """Bar chart of median time-to-precision per solver and l1 fraction."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = [m for m in report.measurements if m["step"] == "convergence"]
    fracs = sorted({r["reg_frac"] for r in rows})
    solvers = sorted({r["solver"] for r in rows})
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.8 / len(solvers)
    for i, solver in enumerate(solvers):
        meds = []
        for frac in fracs:
            vals = [r["time_to_precision_s"] for r in rows
                    if r["solver"] == solver and r["reg_frac"] == frac
                    and np.isfinite(r["time_to_precision_s"])]
            meds.append(np.median(vals) if vals else np.nan)
        ax.bar(np.arange(len(fracs)) + i * width, meds, width, label=solver)
    ax.set_xticks(np.arange(len(fracs)) + 0.4)
    ax.set_xticklabels(["%.3g" % f for f in fracs])
    ax.set_xlabel("l1 weight (fraction of lambda_max)")
    ax.set_ylabel("median time to precision (s)")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_svg, format="svg")
    plt.close(fig)

"""Alternating minimization: initialization, activation/atom loop, traces.

Each outer iteration freezes the l1 weight, codes every signal with the
current dictionary (warm-started from the previous codes), then updates the
atoms on the precomputed correlation tables.  Both half-steps weakly
decrease the penalized objective at fixed weight, so the recorded trace is
non-increasing under an absolute regularization policy.
"""

import time
from dataclasses import dataclass, field, replace

import numpy as np
from joblib import Parallel, delayed

from .core import ActivationSet, Dictionary, SignalSet, objective
from .dstep import DStepConfig, PhiPsiCache, compute_phi, compute_psi, dstep_solve
from .zstep import ZSolverConfig, compute_dtd, lambda_max, lgcd_solve

RANK1 = "rank1"
FULL = "full"
UNIVARIATE = "univariate"


class SolverDivergence(RuntimeError):
    """Raised when the objective stops being finite."""


@dataclass(frozen=True)
class Regularization:
    """l1 weight policy: a fixed value, or a fraction of the current
    lambda_max (recomputed after every dictionary update)."""

    kind: str   # "absolute" | "fraction"
    value: float

    def __post_init__(self):
        if self.kind not in ("absolute", "fraction"):
            raise ValueError("unknown regularization kind %r" % (self.kind,))
        if self.value < 0:
            raise ValueError("regularization value must be nonnegative")

    @classmethod
    def absolute(cls, value):
        return cls("absolute", value)

    @classmethod
    def fraction(cls, value):
        return cls("fraction", value)

    def resolve(self, lam_max):
        if self.kind == "absolute":
            return self.value
        return self.value * lam_max


@dataclass
class FitConfig:
    """Settings for one dictionary-learning run."""

    model: str = RANK1          # "rank1" | "full" | "univariate"
    n_atoms: int = 2
    atom_length: int = 32
    reg: Regularization = field(default_factory=lambda: Regularization.fraction(0.1))
    z_config: ZSolverConfig = field(default_factory=lambda: ZSolverConfig(reg=0.0))
    d_config: DStepConfig = field(default_factory=DStepConfig)
    n_iter: int = 40
    seed: int = 0
    convergence_tol: float = 1e-8

    def __post_init__(self):
        if self.model not in (RANK1, FULL, UNIVARIATE):
            raise ValueError("unknown model %r" % (self.model,))
        if self.n_atoms < 1 or self.atom_length < 1 or self.n_iter < 1:
            raise ValueError("n_atoms, atom_length and n_iter must be >= 1")


@dataclass
class FitResult:
    """Fitted dictionary and codes, with per-iteration accounting.

    ``objective_trace`` has one row per outer iteration holding the
    penalized objective after the activation step and after the atom step,
    both at that iteration's frozen l1 weight.  ``lambda_trace`` records
    lambda_max at the start of each iteration; ``reg_trace`` the resolved
    weight actually used.
    """

    dictionary: Dictionary
    activations: ActivationSet
    objective_trace: np.ndarray   # (n_iter_done, 2)
    lambda_trace: np.ndarray      # (n_iter_done,)
    reg_trace: np.ndarray         # (n_iter_done,)
    timings: list                 # per-iteration dicts of wall times
    z_diagnostics: list           # last iteration's per-signal diagnostics
    n_iter_done: int = 0

    def final_objective(self):
        return float(self.objective_trace[self.n_iter_done - 1, 1])

    def to_json_dict(self, config=None):
        out = {
            "objective_trace": self.objective_trace.tolist(),
            "lambda_trace": self.lambda_trace.tolist(),
            "reg_trace": self.reg_trace.tolist(),
            "timings": self.timings,
            "n_iter_done": self.n_iter_done,
        }
        if config is not None:
            out.update({
                "model": config.model,
                "n_atoms": config.n_atoms,
                "atom_length": config.atom_length,
                "reg_policy": {"kind": config.reg.kind, "value": config.reg.value},
                "seed": config.seed,
            })
        return out


def _rank1_approx(chunk, rng, n_iter=50, tol=1e-12):
    """Leading singular pair of a small matrix by power iteration.

    Returns unit-norm (u, v) with u @ chunk @ v maximal.  Power iteration
    is plenty for the (channels, atom_length) chunks used at init time and
    avoids any dependence on a dense decomposition.
    """
    v = rng.standard_normal(chunk.shape[1])
    v /= np.linalg.norm(v)
    value = 0.0
    for _ in range(n_iter):
        u = chunk @ v
        norm_u = np.linalg.norm(u)
        if norm_u == 0:
            u = rng.standard_normal(chunk.shape[0])
            norm_u = np.linalg.norm(u)
        u /= norm_u
        v = u @ chunk
        norm_v = np.linalg.norm(v)
        if norm_v == 0:
            break
        v /= norm_v
        if abs(norm_v - value) <= tol * max(norm_v, 1.0):
            break
        value = norm_v
    return u, v


def _draw_chunk(data, atom_length, rng, max_tries=100):
    n_signals, _, n_times = data.shape
    for _ in range(max_tries):
        n = int(rng.integers(n_signals))
        t = int(rng.integers(n_times - atom_length + 1))
        chunk = data[n, :, t:t + atom_length]
        if np.any(chunk):
            return chunk
    raise ValueError("could not draw a nonzero signal chunk")


def init_dictionary(signals, n_atoms, atom_length, seed, kind=RANK1):
    """Seed the dictionary with random chunks of the signals.

    Each atom is a uniformly random (signal, offset) window.  Rank-1 atoms
    keep the chunk's best rank-1 approximation with both factors normalized
    to unit norm; full atoms keep the chunk normalized to unit Frobenius
    norm.  Starting from signal chunks rather than white noise keeps the
    initial lambda_max on the same scale as after the first atom update,
    which matters when the l1 weight is set as a fraction of it.

    ``seed`` may be an integer or a numpy Generator.
    """
    data = signals.data if isinstance(signals, SignalSet) else np.asarray(signals, dtype=np.float64)
    if not np.any(data):
        raise ValueError("signals are identically zero; no chunks to draw")
    if data.shape[2] < atom_length:
        raise ValueError("signals shorter than the requested atom length")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    if kind == RANK1:
        spatial = np.empty((n_atoms, data.shape[1]))
        temporal = np.empty((n_atoms, atom_length))
        for k in range(n_atoms):
            u, v = _rank1_approx(_draw_chunk(data, atom_length, rng), rng)
            spatial[k], temporal[k] = u, v
        return Dictionary.rank1(spatial, temporal)

    atoms = np.empty((n_atoms, data.shape[1], atom_length))
    for k in range(n_atoms):
        chunk = _draw_chunk(data, atom_length, rng)
        atoms[k] = chunk / np.linalg.norm(chunk)
    if kind == UNIVARIATE:
        if data.shape[1] != 1:
            raise ValueError("univariate model requires single-channel signals")
        return Dictionary(kind=UNIVARIATE, atoms=atoms)
    return Dictionary.full(atoms)


def _resample_atom(dictionary, k, data, rng):
    chunk = _draw_chunk(data, dictionary.atom_length, rng)
    if dictionary.is_rank1:
        u, v = _rank1_approx(chunk, rng)
        dictionary.spatial[k] = u
        dictionary.temporal[k] = v
    else:
        dictionary.atoms[k] = chunk / np.linalg.norm(chunk)


def _solve_signal(x, dictionary, z_config, z0, dtd):
    z, diag = lgcd_solve(x, dictionary, z_config, z0=z0, dtd=dtd)
    return z, diag


def fit(signals, config, n_jobs=1):
    """Learn a dictionary and codes by alternating minimization.

    Parameters
    ----------
    signals : SignalSet or ndarray (n_signals, n_channels, n_times)
    config : FitConfig
    n_jobs : int
        Per-signal fan-out for the activation step (joblib).  Results are
        reduced in fixed signal order, so parallel runs reproduce the
        single-threaded objective.

    Returns
    -------
    FitResult

    Raises
    ------
    SolverDivergence
        If the objective becomes non-finite.
    """
    if not isinstance(signals, SignalSet):
        signals = SignalSet(np.asarray(signals, dtype=np.float64))
    if config.model == UNIVARIATE and signals.n_channels != 1:
        raise ValueError("univariate model requires single-channel signals")
    if signals.n_times < config.atom_length:
        raise ValueError("atom length exceeds signal length")

    rng = np.random.default_rng(config.seed)
    dictionary = init_dictionary(signals, config.n_atoms, config.atom_length,
                                 rng, kind=config.model)
    n_valid = signals.n_times - config.atom_length + 1
    z = np.zeros((signals.n_signals, config.n_atoms, n_valid))

    obj_trace = np.full((config.n_iter, 2), np.nan)
    lam_trace = np.full(config.n_iter, np.nan)
    reg_trace = np.full(config.n_iter, np.nan)
    timings = []
    z_diags = []
    dead = []

    pool = Parallel(n_jobs=n_jobs) if n_jobs != 1 else None
    previous = None
    n_done = 0
    for it in range(config.n_iter):
        # resample atoms unused by the previous codes; their activations are
        # zero so the objective is unaffected
        for k in dead:
            _resample_atom(dictionary, k, signals.data, rng)

        t0 = time.perf_counter()
        lam_max = lambda_max(signals, dictionary)
        reg = config.reg.resolve(lam_max)
        lam_trace[it] = lam_max
        reg_trace[it] = reg
        z_config = replace(config.z_config, reg=reg)
        dtd = compute_dtd(dictionary)
        t_lam = time.perf_counter() - t0

        t0 = time.perf_counter()
        tasks = ((signals.data[n], dictionary, z_config, z[n], dtd)
                 for n in range(signals.n_signals))
        if pool is None:
            results = [_solve_signal(*args) for args in tasks]
        else:
            results = pool(delayed(_solve_signal)(*args) for args in tasks)
        z = np.stack([r[0] for r in results])
        z_diags = [r[1] for r in results]
        t_z = time.perf_counter() - t0
        obj_trace[it, 0] = objective(signals, dictionary, z, reg)

        t0 = time.perf_counter()
        cache = PhiPsiCache(
            phi=compute_phi(signals, z, config.atom_length),
            psi=compute_psi(z, config.atom_length),
        )
        dictionary, _ = dstep_solve(dictionary, cache, config.d_config)
        t_d = time.perf_counter() - t0
        obj_trace[it, 1] = objective(signals, dictionary, z, reg)

        timings.append({"lambda_s": t_lam, "z_step_s": t_z, "d_step_s": t_d})
        n_done = it + 1
        if not np.isfinite(obj_trace[it]).all():
            raise SolverDivergence(
                "objective became non-finite at iteration %d" % it)

        dead = [k for k in range(config.n_atoms)
                if not np.any(z[:, k, :])]
        current = obj_trace[it, 1]
        if previous is not None:
            scale = max(abs(previous), 1e-300)
            if abs(previous - current) / scale < config.convergence_tol:
                break
        previous = current

    return FitResult(
        dictionary=dictionary,
        activations=ActivationSet(z),
        objective_trace=obj_trace[:n_done],
        lambda_trace=lam_trace[:n_done],
        reg_trace=reg_trace[:n_done],
        timings=timings,
        z_diagnostics=z_diags,
        n_iter_done=n_done,
    )

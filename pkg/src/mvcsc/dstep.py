"""Atom updates with activations held fixed.

The smooth dictionary objective

    E(D) = sum_n 0.5 * ||X_n - sum_k z_nk * D_k||^2

depends on the data only through two correlation tables: ``phi`` (signal
against activations, one (P, L) block per atom) and ``psi`` (activations
against activations, one lag table per atom pair).  Both are built once per
D-step; every subsequent gradient or function evaluation runs on the tables
alone and never revisits the T-length signals.

Rank-1 dictionaries are updated by projected gradient descent with Armijo
backtracking, first on the stacked spatial maps, then on the stacked
temporal waveforms; full dictionaries run a single projected-gradient loop
on the atom matrices.  Every step projects each factor back onto the unit
ball.
"""

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import ActivationSet, Dictionary, SignalSet, project_unit_ball

# chunk size (in gathered doubles) for the windowed phi accumulation
_GATHER_BUDGET = 2_000_000


@dataclass
class PhiPsiCache:
    """Precomputed correlation tables, fixed for the duration of one D-step.

    phi : ndarray, shape (K, P, L)
        phi[k, p, t] = sum_n sum_tau z[n, k, tau] * X[n, p, t + tau].
    psi : ndarray, shape (K, K, 2L - 1)
        psi[k, l, center + s] = sum_n sum_tau z[n, k, tau] * z[n, l, tau + s],
        symmetric under (k, l, s) -> (l, k, -s) by construction.
    """

    phi: np.ndarray
    psi: np.ndarray

    @property
    def n_atoms(self):
        return self.phi.shape[0]

    @property
    def atom_length(self):
        return self.phi.shape[2]

    @property
    def center(self):
        return (self.psi.shape[2] - 1) // 2


@dataclass
class DStepConfig:
    """Projected-gradient settings.

    ``tol`` stops a block when the summed l1 change of its factors over one
    accepted step falls below it; the same tolerance applies to the spatial
    and temporal blocks.  Armijo backtracking starts from ``armijo_init``,
    shrinks by ``armijo_shrink`` up to ``max_backtracks`` times, accepts on
    sufficient decrease with constant ``armijo_c``, and warm-starts the next
    search from the last accepted step size.
    """

    tol: float = 1e-8
    max_outer: int = 100
    armijo_init: float = 1.0
    armijo_shrink: float = 0.5
    armijo_c: float = 1e-4
    max_backtracks: int = 30

    def __post_init__(self):
        if not 0.0 < self.armijo_shrink < 1.0:
            raise ValueError("armijo_shrink must lie in (0, 1)")
        if not 0.0 < self.armijo_c <= 0.5:
            raise ValueError("armijo_c must lie in (0, 0.5]")


@dataclass
class DStepDiagnostics:
    outer_iterations: int = 0
    backtracks: int = 0
    stalled: bool = False
    objective_trajectory: list = field(default_factory=list)

    def to_json_dict(self):
        return {
            "outer_iterations": self.outer_iterations,
            "backtracks": self.backtracks,
            "stalled": self.stalled,
            "objective_trajectory": list(self.objective_trajectory),
        }


def compute_phi(signals, activations, atom_length):
    """Signal/activation correlation blocks, one (P, L) matrix per atom.

    Skips zero activation coefficients, so the cost scales with the number
    of nonzeros times P * L rather than with the dense product.
    """
    x = signals.data if isinstance(signals, SignalSet) else np.asarray(signals, dtype=np.float64)
    z = activations.data if isinstance(activations, ActivationSet) else np.asarray(activations, dtype=np.float64)
    n_signals, n_atoms = z.shape[0], z.shape[1]
    n_channels = x.shape[1]
    phi = np.zeros((n_atoms, n_channels, atom_length))
    chunk = max(_GATHER_BUDGET // (n_channels * atom_length), 1)
    for n in range(n_signals):
        windows = sliding_window_view(x[n], atom_length, axis=1)  # (P, T~, L)
        for k in range(n_atoms):
            idx = np.flatnonzero(z[n, k])
            for start in range(0, idx.size, chunk):
                sel = idx[start:start + chunk]
                phi[k] += np.einsum("i,pil->pl", z[n, k, sel],
                                    windows[:, sel, :])
    return phi


def compute_psi(activations, atom_length):
    """Activation cross-correlations restricted to lags within atom reach.

    Returns the (K, K, 2L - 1) lag table described in :class:`PhiPsiCache`;
    out-of-range time indices contribute nothing.  Only the upper triangle
    is accumulated; the lower triangle is its lag-reversed mirror, making
    the symmetry exact.
    """
    z = activations.data if isinstance(activations, ActivationSet) else np.asarray(activations, dtype=np.float64)
    n_signals, n_atoms, n_valid = z.shape
    width = 2 * atom_length - 1
    pad = atom_length - 1
    psi = np.zeros((n_atoms, n_atoms, width))
    for n in range(n_signals):
        padded = np.zeros((n_atoms, n_valid + 2 * pad))
        padded[:, pad:pad + n_valid] = z[n]
        windows = sliding_window_view(padded, width, axis=1)  # (K, T~, 2L-1)
        for k in range(n_atoms):
            idx = np.flatnonzero(z[n, k])
            if idx.size == 0:
                continue
            vals = z[n, k, idx]
            for l in range(k, n_atoms):
                psi[k, l] += vals @ windows[l, idx, :]
    for k in range(n_atoms):
        for l in range(k + 1, n_atoms):
            psi[l, k] = psi[k, l, ::-1]
    return psi


def _psi_conv_sum(k, dictionary, cache):
    """sum_l over atoms of the lag table applied to atom l, a (P, L) block.

    For rank-1 atoms the channel dimension factors out of the convolution:
    psi[k, l] acts on the temporal waveform alone and the spatial map scales
    the result, so the cost per pair is O(L^2 + PL) instead of O(PL^2).
    """
    length = cache.atom_length
    lo, hi = length - 1, 2 * length - 1
    if dictionary.is_rank1:
        out = np.zeros((dictionary.n_channels, length))
        for l in range(dictionary.n_atoms):
            tempo = np.convolve(cache.psi[k, l], dictionary.temporal[l])[lo:hi]
            out += np.outer(dictionary.spatial[l], tempo)
        return out
    out = np.zeros((dictionary.n_channels, length))
    for l in range(dictionary.n_atoms):
        atom = dictionary.atoms[l]
        for p in range(atom.shape[0]):
            out[p] += np.convolve(cache.psi[k, l], atom[p])[lo:hi]
    return out


def grad_full_atom(k, dictionary, cache):
    """Gradient of the dictionary objective with respect to full atom k.

    Equal to sum_l psi[k, l] applied to D_l, minus phi[k]; verified against
    central finite differences of the full objective.  Vanishes when the
    residual is zero and when atom k is never activated.
    """
    return _psi_conv_sum(k, dictionary, cache) - cache.phi[k]


def grad_uv(u_k, v_k, grad_atom):
    """Chain-rule factor gradients from a full-atom gradient.

    Returns (grad_atom @ v_k, u_k @ grad_atom): the spatial gradient is the
    atom gradient applied to the temporal waveform and vice versa.
    """
    return grad_atom @ v_k, u_k @ grad_atom


def objective_upto_constant(dictionary, cache):
    """Dictionary objective minus its activation-dependent constant.

    0.5 * sum_{k,l} <D_k, psi[k,l] applied to D_l> - sum_k <D_k, phi[k]>,
    the expansion of the squared residual with the signal-energy term
    dropped.  Differences between two dictionaries equal differences of the
    true objective, which is all the line search needs.
    """
    atoms = dictionary.materialize()
    total = 0.0
    for k in range(dictionary.n_atoms):
        quad = _psi_conv_sum(k, dictionary, cache)
        total += 0.5 * float((atoms[k] * quad).sum())
        total -= float((atoms[k] * cache.phi[k]).sum())
    return total


def _armijo(x0, grad, f0, evaluate, step, config, diag):
    """One projected-gradient step with backtracking line search.

    ``x0`` and ``grad`` are (K, dim) stacks; each row is projected onto the
    unit ball after the step.  Returns (x_new, f_new, accepted_step, ok);
    ok is False when no sufficient decrease was found within the backtrack
    budget, in which case x0 is returned unchanged.
    """
    for _ in range(config.max_backtracks):
        candidate = x0 - step * grad
        for k in range(candidate.shape[0]):
            candidate[k] = project_unit_ball(candidate[k])
        decrease = float((grad * (candidate - x0)).sum())
        f_new = evaluate(candidate)
        if f_new <= f0 + config.armijo_c * decrease:
            return candidate, f_new, step, True
        step *= config.armijo_shrink
        diag.backtracks += 1
    return x0, f0, step, False


def _block_descent(x0, f_grad, evaluate, config, diag):
    """Projected gradient descent on one stacked block of factors."""
    x = x0
    f_cur = evaluate(x)
    step = config.armijo_init
    for _ in range(config.max_outer):
        diag.outer_iterations += 1
        grad = f_grad(x)
        x_new, f_new, accepted, ok = _armijo(x, grad, f_cur, evaluate,
                                             step, config, diag)
        if not ok:
            diag.stalled = True
            break
        diag.objective_trajectory.append(f_new)
        change = float(np.abs(x_new - x).sum())
        x, f_cur = x_new, f_new
        # warm step: resume from the accepted size, probing one notch up
        step = min(config.armijo_init, accepted / config.armijo_shrink)
        if change < config.tol:
            break
    return x


def dstep_solve(dictionary, cache, config=None):
    """Update all atoms by projected gradient descent on the cached tables.

    Rank-1 dictionaries optimize the spatial maps first (temporal waveforms
    fixed), then the temporal waveforms; full dictionaries run one loop over
    the atom matrices.  Each block stops when the summed l1 change of its
    factors falls below ``config.tol`` or after ``config.max_outer`` steps;
    if backtracking cannot find a decrease the block keeps its current
    point and the diagnostics carry a stalled flag.

    Returns
    -------
    (Dictionary, DStepDiagnostics)
        A new dictionary; the input is not modified.
    """
    if config is None:
        config = DStepConfig()
    diag = DStepDiagnostics()

    if dictionary.is_rank1:
        u = dictionary.spatial.copy()
        v = dictionary.temporal.copy()

        def grad_u(u_cur):
            trial = Dictionary.rank1(u_cur, v)
            return np.stack([grad_full_atom(k, trial, cache) @ v[k]
                             for k in range(trial.n_atoms)])

        def eval_u(u_cur):
            return objective_upto_constant(Dictionary.rank1(u_cur, v), cache)

        u = _block_descent(u, grad_u, eval_u, config, diag)

        def grad_v(v_cur):
            trial = Dictionary.rank1(u, v_cur)
            return np.stack([u[k] @ grad_full_atom(k, trial, cache)
                             for k in range(trial.n_atoms)])

        def eval_v(v_cur):
            return objective_upto_constant(Dictionary.rank1(u, v_cur), cache)

        v = _block_descent(v, grad_v, eval_v, config, diag)
        return Dictionary.rank1(u, v), diag

    shape = dictionary.atoms.shape
    flat = dictionary.atoms.reshape(shape[0], -1).copy()

    def grad_d(flat_cur):
        trial = Dictionary(kind=dictionary.kind,
                           atoms=flat_cur.reshape(shape))
        return np.stack([grad_full_atom(k, trial, cache).ravel()
                         for k in range(shape[0])])

    def eval_d(flat_cur):
        trial = Dictionary(kind=dictionary.kind,
                           atoms=flat_cur.reshape(shape))
        return objective_upto_constant(trial, cache)

    flat = _block_descent(flat, grad_d, eval_d, config, diag)
    return Dictionary(kind=dictionary.kind, atoms=flat.reshape(shape)), diag

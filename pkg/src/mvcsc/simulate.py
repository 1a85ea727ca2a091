"""Synthetic data with planted atoms, and pattern-recovery scoring.

The generator plants two unit-norm temporal shapes (a boxcar and a
symmetric ramp) behind random unit spatial maps, activates them at
uniformly random positions with uniform amplitudes, and adds white Gaussian
noise.  Recovered temporal waveforms are scored against the planted ones up
to sign flips and atom permutation.
"""

import csv
import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import ActivationSet, Dictionary, SignalSet, reconstruct
from .learner import FitConfig, Regularization, fit

DEFAULT_REG_GRID = tuple(np.logspace(math.log10(0.003), math.log10(0.3), 5))


@dataclass
class SimConfig:
    """Synthetic instance description.

    ``noise_sigma`` is the standard deviation of the i.i.d. Gaussian noise
    added per sample and channel.  ``temporal_atoms`` may override the
    default boxcar/ramp pair with explicit unit waveforms; ``spatial_maps``
    may likewise replace the random unit-sphere draws.
    """

    n_signals: int = 100
    n_channels: int = 5
    n_atoms: int = 2
    atom_length: int = 64
    n_valid: int = 640
    density: float = 0.05
    noise_sigma: float = 0.0
    temporal_atoms: np.ndarray = None   # (K, L), optional override
    spatial_maps: np.ndarray = None     # (K, P), optional override
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.density <= 1.0:
            raise ValueError("density must lie in (0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")


def square_triangle_atoms(atom_length):
    """The two planted temporal shapes, each normalized to unit norm.

    The square is a boxcar supported on the middle half of the window; the
    triangle is a symmetric ramp over the full window.
    """
    square = np.zeros(atom_length)
    lo = atom_length // 4
    square[lo:lo + atom_length // 2] = 1.0
    square /= np.linalg.norm(square)
    half = (atom_length - 1) / 2.0
    triangle = half - np.abs(np.arange(atom_length) - half)
    triangle /= np.linalg.norm(triangle)
    return np.stack([square, triangle])


def make_truth(config):
    """Generate (dictionary, activations, signals) for one instance.

    Activation entries are nonzero independently with probability
    ``config.density`` and carry uniform [0, 1] amplitudes.  Reproducible
    bitwise for a fixed seed.
    """
    rng = np.random.default_rng(config.seed)
    if config.temporal_atoms is not None:
        temporal = np.asarray(config.temporal_atoms, dtype=np.float64)
    else:
        if config.n_atoms != 2:
            raise ValueError("the built-in shape pair requires n_atoms == 2; "
                             "pass temporal_atoms explicitly otherwise")
        temporal = square_triangle_atoms(config.atom_length)
    if config.spatial_maps is not None:
        spatial = np.asarray(config.spatial_maps, dtype=np.float64)
    else:
        spatial = rng.standard_normal((config.n_atoms, config.n_channels))
        spatial /= np.linalg.norm(spatial, axis=1, keepdims=True)
    dictionary = Dictionary.rank1(spatial, temporal)

    shape = (config.n_signals, config.n_atoms, config.n_valid)
    mask = rng.random(shape) < config.density
    z = np.where(mask, rng.random(shape), 0.0)
    activations = ActivationSet(z)

    x = reconstruct(dictionary, activations)
    if config.noise_sigma > 0:
        x = x + config.noise_sigma * rng.standard_normal(x.shape)
    return dictionary, activations, SignalSet(x)


def _pairwise_cost(estimated, truth):
    """cost[j, k] = min over sign of ||est_j -+ true_k||^2."""
    diff = ((estimated[:, None, :] - truth[None, :, :]) ** 2).sum(axis=2)
    summ = ((estimated[:, None, :] + truth[None, :, :]) ** 2).sum(axis=2)
    return np.minimum(diff, summ), summ < diff


def _loss_bruteforce(cost):
    best = np.inf
    n = cost.shape[0]
    for perm in itertools.permutations(range(n)):
        total = sum(cost[perm[k], k] for k in range(n))
        if total < best:
            best = total
    return float(best)


def _loss_assignment(cost):
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum())


def recovery_assignment(estimated, truth):
    """Best atom matching between two waveform sets.

    Returns (loss, permutation, signs): ``permutation[k]`` is the estimated
    atom matched to true atom k and ``signs[k]`` is -1 when the match is to
    the flipped waveform.
    """
    estimated = np.atleast_2d(np.asarray(estimated, dtype=np.float64))
    truth = np.atleast_2d(np.asarray(truth, dtype=np.float64))
    if estimated.shape != truth.shape:
        raise ValueError("waveform sets differ in shape: %r vs %r"
                         % (estimated.shape, truth.shape))
    cost, flipped = _pairwise_cost(estimated, truth)
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(cost.shape[0], dtype=int)
    perm[cols] = rows
    signs = np.where(flipped[perm, np.arange(cost.shape[0])], -1, 1)
    return float(cost[rows, cols].sum()), perm, signs


def recovery_loss(estimated, truth):
    """Sign- and permutation-invariant squared distance between atom sets.

    The minimum over all matchings of estimated to true waveforms of the
    summed squared distance, each pair taken at its better sign.  Exhaustive
    enumeration up to 8 atoms, exact linear-sum assignment beyond (the two
    agree; the objective is an assignment problem).
    """
    estimated = np.atleast_2d(np.asarray(estimated, dtype=np.float64))
    truth = np.atleast_2d(np.asarray(truth, dtype=np.float64))
    if estimated.shape != truth.shape:
        raise ValueError("waveform sets differ in shape: %r vs %r"
                         % (estimated.shape, truth.shape))
    cost, _ = _pairwise_cost(estimated, truth)
    if cost.shape[0] <= 8:
        return _loss_bruteforce(cost)
    return _loss_assignment(cost)


def temporal_patterns(dictionary):
    """Temporal waveforms of a dictionary, (K, L).

    Rank-1 dictionaries report their temporal factors scaled by the spatial
    norm (so the waveform carries the full atom amplitude); full atoms are
    reduced to their leading temporal component.
    """
    if dictionary.is_rank1:
        scale = np.linalg.norm(dictionary.spatial, axis=1, keepdims=True)
        return dictionary.temporal * scale
    atoms = dictionary.atoms
    out = np.empty((atoms.shape[0], atoms.shape[2]))
    for k in range(atoms.shape[0]):
        u, s, vt = np.linalg.svd(atoms[k], full_matrices=False)
        out[k] = s[0] * vt[0]
    return out


def _one_recovery_fit(sim, fit_config, reg_frac):
    truth_dict, _, signals = make_truth(sim)
    config = replace(fit_config, reg=Regularization.fraction(reg_frac))
    result = fit(signals, config)
    est = temporal_patterns(result.dictionary)
    return recovery_loss(est, temporal_patterns(truth_dict))


def run_recovery_experiment(channels, sigmas, base, fit_config,
                            reg_fracs=DEFAULT_REG_GRID, n_seeds=5,
                            out_csv=None, n_jobs=1, verbose=False):
    """Score pattern recovery over a (channels, noise) grid.

    For every (P, sigma) cell, fits are run for each l1 fraction in
    ``reg_fracs`` and each of ``n_seeds`` seeds; the fraction minimizing the
    mean loss is reported along with that mean, its standard deviation and
    the median over seeds.

    Returns a list of row dicts with keys P, sigma, lambda_best, loss_mean,
    loss_std, loss_median; optionally writes them as CSV.
    """
    from joblib import Parallel, delayed

    cells = [(p, sigma) for p in channels for sigma in sigmas]
    tasks = []
    for p, sigma in cells:
        for frac in reg_fracs:
            for s in range(n_seeds):
                sim = replace(base, n_channels=p, noise_sigma=sigma,
                              seed=base.seed + s)
                cfg = replace(fit_config, seed=fit_config.seed + s)
                tasks.append(((p, sigma, frac, s), sim, cfg))

    if n_jobs == 1:
        losses = [_one_recovery_fit(sim, cfg, key[2]) for key, sim, cfg in tasks]
    else:
        losses = Parallel(n_jobs=n_jobs)(
            delayed(_one_recovery_fit)(sim, cfg, key[2])
            for key, sim, cfg in tasks)

    table = {}
    for (key, _, _), loss in zip(tasks, losses):
        table.setdefault(key[:3], []).append(loss)
        if verbose:
            print("P=%d sigma=%g frac=%.4g seed=%d: loss=%.4f"
                  % (*key, loss))

    rows = []
    for p, sigma in cells:
        by_frac = {frac: np.array(table[(p, sigma, frac)]) for frac in reg_fracs}
        best = min(by_frac, key=lambda f: by_frac[f].mean())
        vals = by_frac[best]
        rows.append({
            "P": p,
            "sigma": sigma,
            "lambda_best": best,
            "loss_mean": float(vals.mean()),
            "loss_std": float(vals.std()),
            "loss_median": float(np.median(vals)),
        })

    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
    return rows


def plot_recovery(rows, out_svg):
    """Line chart of recovery loss versus noise level, one line per P."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    channels = sorted({row["P"] for row in rows})
    for p in channels:
        pts = sorted((row["sigma"], row["loss_mean"])
                     for row in rows if row["P"] == p)
        ax.plot([s for s, _ in pts], [v for _, v in pts],
                marker="o", label="P = %d" % p)
    ax.set_xscale("log")
    ax.set_xlabel("noise level (std)")
    ax.set_ylabel("recovery loss (best over l1 grid)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_svg, format="svg")
    plt.close(fig)

"""Containers and low-level numerical kernels shared by all solvers.

Signals are dense float64 arrays shaped (n_signals, n_channels, n_times).
Atoms are short waveforms, either full (n_channels, atom_length) matrices or
rank-1 pairs of a spatial vector (per-channel weights) and a temporal
waveform.  Activations are nonnegative arrays shaped
(n_signals, n_atoms, n_valid) with n_valid = n_times - atom_length + 1.

All convolutions are direct (time domain): atoms are short relative to the
signals, so direct evaluation beats transform-based approaches and keeps the
kernels simple.
"""

from dataclasses import dataclass, field

import numpy as np

RANK1 = "rank1"
FULL = "full"
UNIVARIATE = "univariate"


def _as_float_array(x, name, ndim):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != ndim:
        raise ValueError("%s must be %d-dimensional, got shape %r"
                         % (name, ndim, arr.shape))
    return arr


@dataclass
class SignalSet:
    """A batch of multivariate signals with identical channel count and length.

    Parameters
    ----------
    data : ndarray, shape (n_signals, n_channels, n_times)
        The raw signals.
    """

    data: np.ndarray

    def __post_init__(self):
        self.data = _as_float_array(self.data, "signals", 3)

    @property
    def n_signals(self):
        return self.data.shape[0]

    @property
    def n_channels(self):
        return self.data.shape[1]

    @property
    def n_times(self):
        return self.data.shape[2]

    def signal(self, n):
        """Return signal ``n`` as an (n_channels, n_times) array."""
        return self.data[n]


@dataclass
class ActivationSet:
    """Nonnegative sparse activation signals, stored dense.

    Dense storage keeps coordinate reads/writes O(1) for the coordinate
    descent hot loop; sparsity is exploited through :meth:`support`.

    Parameters
    ----------
    data : ndarray, shape (n_signals, n_atoms, n_valid)
        Activation values, all entries >= 0.
    """

    data: np.ndarray

    def __post_init__(self):
        self.data = _as_float_array(self.data, "activations", 3)

    @property
    def n_signals(self):
        return self.data.shape[0]

    @property
    def n_atoms(self):
        return self.data.shape[1]

    @property
    def n_valid(self):
        return self.data.shape[2]

    def support(self, n, k):
        """Indices and values of the nonzeros of activation (n, k)."""
        row = self.data[n, k]
        idx = np.flatnonzero(row)
        return idx, row[idx]

    def density(self):
        """Fraction of nonzero entries."""
        return np.count_nonzero(self.data) / self.data.size

    def l1_per_atom(self):
        """Sum of |z| over signals and time, one value per atom."""
        return np.abs(self.data).sum(axis=(0, 2))


@dataclass
class Dictionary:
    """A set of K atoms, either rank-1 factored or full matrices.

    Rank-1 atoms store a spatial vector u_k (length n_channels) and a
    temporal waveform v_k (length atom_length); the implied full atom is the
    outer product u_k v_k^T.  Full atoms store the (n_channels, atom_length)
    matrix directly; the univariate variant is the single-channel special
    case of full.

    The model constrains every atom to the unit ball (||u_k|| <= 1 and
    ||v_k|| <= 1 for rank-1, Frobenius norm <= 1 for full).  The constraint
    is maintained by the solvers, not enforced at construction, so that
    intermediate and test dictionaries may be unnormalized.
    """

    kind: str
    spatial: np.ndarray = None    # (K, P), rank1 only
    temporal: np.ndarray = None   # (K, L), rank1 only
    atoms: np.ndarray = None      # (K, P, L), full/univariate only

    def __post_init__(self):
        if self.kind == RANK1:
            self.spatial = _as_float_array(self.spatial, "spatial maps", 2)
            self.temporal = _as_float_array(self.temporal, "temporal atoms", 2)
            if self.spatial.shape[0] != self.temporal.shape[0]:
                raise ValueError("spatial and temporal atom counts differ")
        elif self.kind in (FULL, UNIVARIATE):
            self.atoms = _as_float_array(self.atoms, "atoms", 3)
            if self.kind == UNIVARIATE and self.atoms.shape[1] != 1:
                raise ValueError("univariate dictionary requires one channel")
        else:
            raise ValueError("unknown dictionary kind %r" % (self.kind,))

    @classmethod
    def rank1(cls, spatial, temporal):
        return cls(kind=RANK1, spatial=spatial, temporal=temporal)

    @classmethod
    def full(cls, atoms):
        return cls(kind=FULL, atoms=atoms)

    @classmethod
    def univariate(cls, atoms):
        atoms = _as_float_array(atoms, "atoms", 2)
        return cls(kind=UNIVARIATE, atoms=atoms[:, None, :])

    @property
    def is_rank1(self):
        return self.kind == RANK1

    @property
    def n_atoms(self):
        if self.is_rank1:
            return self.spatial.shape[0]
        return self.atoms.shape[0]

    @property
    def n_channels(self):
        if self.is_rank1:
            return self.spatial.shape[1]
        return self.atoms.shape[1]

    @property
    def atom_length(self):
        if self.is_rank1:
            return self.temporal.shape[1]
        return self.atoms.shape[2]

    def materialize(self):
        """Full (K, P, L) atom array; outer products for rank-1."""
        if self.is_rank1:
            return self.spatial[:, :, None] * self.temporal[:, None, :]
        return self.atoms.copy()

    def atom(self, k):
        """Atom ``k`` as an (n_channels, atom_length) matrix."""
        if self.is_rank1:
            return np.outer(self.spatial[k], self.temporal[k])
        return self.atoms[k]

    def norms_sq(self):
        """Squared entrywise l2 norm of each atom."""
        if self.is_rank1:
            return ((self.spatial ** 2).sum(axis=1)
                    * (self.temporal ** 2).sum(axis=1))
        return (self.atoms ** 2).sum(axis=(1, 2))

    def copy(self):
        if self.is_rank1:
            return Dictionary.rank1(self.spatial.copy(), self.temporal.copy())
        return Dictionary(kind=self.kind, atoms=self.atoms.copy())


def project_unit_ball(x):
    """Project a vector or matrix onto the unit l2 (Frobenius) ball.

    Returns ``x`` unchanged when ||x|| <= 1, else x / ||x||.
    """
    x = np.asarray(x, dtype=np.float64)
    norm = np.sqrt((x ** 2).sum())
    if norm <= 1.0:
        return x
    return x / norm


def convolve_atom(z, atom):
    """Convolve an activation signal with every channel of an atom.

    Parameters
    ----------
    z : ndarray, shape (n_valid,)
        Activation signal.
    atom : ndarray, shape (n_channels, atom_length)
        Full atom matrix.

    Returns
    -------
    ndarray, shape (n_channels, n_valid + atom_length - 1)
        Full linear convolution of each atom row with ``z``.
    """
    z = np.asarray(z, dtype=np.float64)
    atom = np.asarray(atom, dtype=np.float64)
    if z.ndim != 1 or atom.ndim != 2:
        raise ValueError("expected a 1-d activation and a 2-d atom")
    n_channels, atom_length = atom.shape
    out = np.empty((n_channels, z.shape[0] + atom_length - 1))
    for p in range(n_channels):
        out[p] = np.convolve(z, atom[p])
    return out


def cross_correlate(a, b):
    """Summed per-channel correlation of two multichannel waveforms.

    Computes, for every lag, the inner product between ``a`` and ``b``
    shifted by that lag, summed over channels:

        out[La - 1 + s] = sum_p sum_j a[p, j] * b[p, j + s]

    for s in [-(La - 1), Lb - 1].  Equivalently, the time-reversed ``a``
    convolved with ``b``, rows summed.  With a = b unit-norm the center
    entry is 1.

    Parameters
    ----------
    a : ndarray, shape (n_channels, La)
    b : ndarray, shape (n_channels, Lb)

    Returns
    -------
    ndarray, shape (La + Lb - 1,)
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("expected 2-d (channels, time) inputs")
    if a.shape[0] != b.shape[0]:
        raise ValueError("channel counts differ: %d vs %d"
                         % (a.shape[0], b.shape[0]))
    out = np.zeros(a.shape[1] + b.shape[1] - 1)
    for p in range(a.shape[0]):
        out += np.convolve(a[p, ::-1], b[p])
    return out


def correlate_signal_atom(x, dictionary, k):
    """Valid-lag correlation of one signal with atom ``k``.

    Returns the length-n_valid vector whose entry t is the inner product of
    the atom with the signal window starting at t.  Rank-1 atoms use the
    factored route (project channels through the spatial map, then correlate
    with the temporal waveform), costing O(T(L + P)) instead of O(TLP).
    """
    if dictionary.is_rank1:
        projected = dictionary.spatial[k] @ x
        return np.correlate(projected, dictionary.temporal[k], mode="valid")
    atom = dictionary.atoms[k]
    out = np.correlate(x[0], atom[0], mode="valid")
    for p in range(1, atom.shape[0]):
        out = out + np.correlate(x[p], atom[p], mode="valid")
    return out


def reconstruct(dictionary, activations):
    """Sum of atom convolutions for every signal.

    Parameters
    ----------
    dictionary : Dictionary
    activations : ActivationSet or ndarray, shape (n_signals, n_atoms, n_valid)

    Returns
    -------
    ndarray, shape (n_signals, n_channels, n_times)
    """
    z = activations.data if isinstance(activations, ActivationSet) else activations
    z = np.asarray(z, dtype=np.float64)
    atoms = dictionary.materialize()
    n_signals, n_atoms, n_valid = z.shape
    if n_atoms != dictionary.n_atoms:
        raise ValueError("activation atom count %d does not match dictionary %d"
                         % (n_atoms, dictionary.n_atoms))
    n_times = n_valid + dictionary.atom_length - 1
    out = np.zeros((n_signals, dictionary.n_channels, n_times))
    for n in range(n_signals):
        for k in range(n_atoms):
            if np.any(z[n, k]):
                out[n] += convolve_atom(z[n, k], atoms[k])
    return out


def objective(signals, dictionary, activations, reg):
    """Penalized reconstruction objective.

    Sum over signals of half the squared residual norm plus ``reg`` times
    the l1 norm of the activations:

        sum_n [ 0.5 * ||X_n - sum_k z_nk * D_k||^2 + reg * sum_k ||z_nk||_1 ]

    Rank-1 dictionaries are evaluated on their materialized atoms.

    Parameters
    ----------
    signals : SignalSet or ndarray (n_signals, n_channels, n_times)
    dictionary : Dictionary
    activations : ActivationSet or ndarray (n_signals, n_atoms, n_valid)
    reg : float
        Nonnegative l1 weight.

    Returns
    -------
    float
    """
    if reg < 0:
        raise ValueError("regularization must be nonnegative, got %g" % reg)
    x = signals.data if isinstance(signals, SignalSet) else np.asarray(signals, dtype=np.float64)
    z = activations.data if isinstance(activations, ActivationSet) else np.asarray(activations, dtype=np.float64)
    if x.shape[2] != z.shape[2] + dictionary.atom_length - 1:
        raise ValueError("signal length %d inconsistent with %d activations of "
                         "atom length %d"
                         % (x.shape[2], z.shape[2], dictionary.atom_length))
    residual = x - reconstruct(dictionary, z)
    return 0.5 * float((residual ** 2).sum()) + reg * float(np.abs(z).sum())

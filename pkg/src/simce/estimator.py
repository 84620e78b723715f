"""Hybrid digital/wave-domain channel estimator: closed forms and gradients.

Conventions used throughout:

* ``theta`` has shape ``(S, L, N)``: sub-phase, layer, meta-atom.
* ``G[s]`` is the wave-domain response of sub-phase ``s``,
  ``Theta_L W_L ... Theta_2 W_2 Theta_1``.
* ``A`` is the ``(M S, N)`` observation map whose ``s``-th block of M rows is
  ``W1^H G[s]^H``; the stacked pilot observation of a user is
  ``r = A h + noise`` with noise covariance ``I / rho_tau``.
* Covariances passed here are already scaled by the user's path loss.  A
  covariance may also be given through any factor ``F`` with ``F F^H = C``
  (the Hermitian square root, or a truncated eigen-factor).
"""

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import DegenerateUserError, NumericalError, StructuralError
from .model import clipped_eigh

TWO_PI = 2 * np.pi


def wrap_phase(theta):
    """Wrap angles into ``[0, 2 pi)``."""
    out = np.mod(theta, TWO_PI)
    # mod can round a tiny negative angle up to exactly 2 pi
    out[out >= TWO_PI] = 0.0
    return out


@dataclass(frozen=True)
class PhaseBook:
    """Meta-atom phase shifts for every sub-phase and layer."""

    theta: np.ndarray

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float)
        if theta.ndim != 3:
            raise StructuralError(f"theta must have shape (S, L, N), got {theta.shape}")
        if not np.all(np.isfinite(theta)):
            raise NumericalError("theta contains non-finite values")
        theta = wrap_phase(theta)
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @classmethod
    def random(cls, num_subphases, num_layers, num_atoms, rng):
        return cls(rng.uniform(0.0, TWO_PI, size=(num_subphases, num_layers, num_atoms)))

    @property
    def num_subphases(self):
        return self.theta.shape[0]

    @property
    def num_layers(self):
        return self.theta.shape[1]

    @property
    def num_atoms(self):
        return self.theta.shape[2]

    @property
    def phasors(self):
        return np.exp(1j * self.theta)


def _check_layers(model, phases):
    if phases.num_layers != model.num_layers or phases.num_atoms != model.num_atoms:
        raise StructuralError(
            f"phases are (S, L, N) = {phases.theta.shape} but the model has "
            f"L = {model.num_layers}, N = {model.num_atoms}")


def _responses(inter_layer, phasors):
    """Stacked ``G[s]`` for phasors of shape ``(S, L, N)``."""
    num_sub, num_layers, n = phasors.shape
    g = phasors[:, 0, :, None] * np.eye(n)
    for l in range(1, num_layers):
        g = phasors[:, l, :, None] * (inter_layer[l - 1] @ g)
    return g


def wave_responses(model, phases):
    """All sub-phase responses, shape ``(S, N, N)``."""
    _check_layers(model, phases)
    return _responses(model.inter_layer, phases.phasors)


def wave_response(model, phases, s):
    """Response ``G_s`` of sub-phase ``s`` (0-based)."""
    _check_layers(model, phases)
    return _responses(model.inter_layer, phases.phasors[s:s + 1])[0]


def observation_map_from(w1, g):
    """``(M S, N)`` stack of ``W1^H G[s]^H``."""
    blocks = w1.conj().T[None] @ g.conj().transpose(0, 2, 1)
    return blocks.reshape(-1, g.shape[-1])


@dataclass(frozen=True)
class StackedWaveEstimator:
    """Wave-domain part of the estimator for one phase book."""

    per_subphase_G: np.ndarray
    w1: np.ndarray

    @property
    def num_subphases(self):
        return self.per_subphase_G.shape[0]

    @property
    def stacked_sense(self):
        """``[G_1 ... G_S]^H``, shape ``(N S, N)``."""
        g = self.per_subphase_G
        return g.conj().transpose(0, 2, 1).reshape(-1, g.shape[-1])

    @property
    def observation_map(self):
        return observation_map_from(self.w1, self.per_subphase_G)


def stack_estimator(model, phases):
    return StackedWaveEstimator(wave_responses(model, phases), model.w1)


def _power(cov):
    tr = float(np.real(np.trace(cov)))
    if not tr > 0:
        raise DegenerateUserError("channel covariance has zero trace")
    return tr


def nmse_closed_form(A, D, cov, rho_tau):
    """Normalized MSE of ``h_hat = D^H r`` from the second-order statistics.

    Uses the expanded trace form
    ``tr(X C X^H - X C - C X^H + C) + tr(D^H D) / rho_tau`` with ``X = D^H A``,
    divided by ``tr C``.
    """
    tr = _power(cov)
    x = D.conj().T @ A
    xc = x @ cov
    err = np.real(np.vdot(x, xc))  # tr(X C X^H)
    err += tr - 2.0 * np.real(np.trace(xc))
    err += np.real(np.vdot(D, D)) / rho_tau
    return float(err / tr)


def nmse_from_factor(A, D, factor, rho_tau):
    """Same quantity as :func:`nmse_closed_form`, via ``||(D^H A - I) F||_F^2``."""
    tr = float(np.real(np.vdot(factor, factor)))
    if not tr > 0:
        raise DegenerateUserError("channel covariance has zero trace")
    e = D.conj().T @ (A @ factor) - factor
    return float((np.real(np.vdot(e, e)) + np.real(np.vdot(D, D)) / rho_tau) / tr)


def average_nmse(A, digital, covs, rho_tau):
    """Mean over users of :func:`nmse_closed_form`."""
    return float(np.mean([nmse_closed_form(A, d, c, rho_tau) for d, c in zip(digital, covs)]))


def optimal_digital_estimator(A, cov, rho_tau):
    """MMSE digital stage ``(A C A^H + I / rho_tau)^{-1} A C`` for a fixed ``A``."""
    ac = A @ cov
    lhs = ac @ A.conj().T
    lhs[np.diag_indices_from(lhs)] += 1.0 / rho_tau
    if not (np.all(np.isfinite(lhs)) and np.all(np.isfinite(ac))):
        raise NumericalError("non-finite input to the digital estimator solve")
    try:
        factor = sla.cho_factor(lhs, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        loaded = lhs + (1e-12 * np.real(np.trace(lhs)) / lhs.shape[0]) * np.eye(lhs.shape[0])
        try:
            factor = sla.cho_factor(loaded, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            raise NumericalError("Cholesky factorization failed even with diagonal loading",
                                 condition=float(np.linalg.cond(lhs))) from None
    return sla.cho_solve(factor, ac, check_finite=False)


def digital_first_order_residual(A, D, cov, rho_tau):
    """Relative Frobenius residual of the stationarity condition for ``D``."""
    ac = A @ cov
    lhs = ac @ A.conj().T + np.eye(A.shape[0]) / rho_tau
    return float(np.linalg.norm(lhs @ D - ac) / np.linalg.norm(ac))


def _prefix_suffix(inter_layer, phasors):
    """Partial chains of ``G^H = Th1^H W2^H Th2^H ... W_L^H Th_L^H``.

    ``prefix[l]`` is everything left of ``Th_{l+1}^H`` and ``suffix[l]``
    everything right of it (0-based ``l``), each of shape ``(S, N, N)``.
    """
    num_sub, num_layers, n = phasors.shape
    conj = phasors.conj()
    eye = np.broadcast_to(np.eye(n, dtype=complex), (num_sub, n, n))
    wh = [w.conj().T for w in inter_layer]
    prefix = [eye]
    for l in range(1, num_layers):
        prefix.append((prefix[-1] * conj[:, l - 1, None, :]) @ wh[l - 1])
    suffix = [eye]
    for l in range(num_layers - 2, -1, -1):
        suffix.append(wh[l] @ (conj[:, l + 1, :, None] * suffix[-1]))
    return prefix, suffix[::-1]


def _gradient(w1, inter_layer, phasors, A, digital, factors):
    num_sub, num_layers, n = phasors.shape
    m = w1.shape[1]
    w1h = w1.conj().T
    # Sum over users of B_s^H E_k F_k^H / tr C_k with B_s = D_{k,s}^H W1^H
    # folds every user into one N x N matrix per sub-phase.
    acc = np.zeros((num_sub, n, n), dtype=complex)
    for d, f in zip(digital, factors):
        tr = float(np.real(np.vdot(f, f)))
        e = d.conj().T @ (A @ f) - f
        ef = (e @ f.conj().T) / tr
        b = d.reshape(num_sub, m, n).conj().transpose(0, 2, 1) @ w1h[None]
        acc += b.conj().transpose(0, 2, 1) @ ef[None]
    prefix, suffix = _prefix_suffix(inter_layer, phasors)
    grad = np.empty((num_sub, num_layers, n))
    for l in range(num_layers):
        left = prefix[l].conj().transpose(0, 2, 1) @ acc
        diag = np.einsum("sij,sij->si", left, suffix[l].conj())
        grad[:, l, :] = np.imag(phasors[:, l, :] * diag)
    grad *= -2.0 / len(digital)
    return grad


def nmse_gradient(model, phases, digital, factors):
    """Gradient of the user-averaged NMSE with respect to every phase.

    ``digital`` holds the ``(M S, N)`` matrices ``D_k`` (held fixed) and
    ``factors`` the covariance factors ``F_k`` with ``F_k F_k^H = C_k``.
    Returns an array shaped like ``phases.theta``.

    Each derivative is a diagonal entry of ``P^H (sum_k B^H E_k F_k^H) Q^H``,
    where ``P`` and ``Q`` are the partial chains to the left and right of the
    layer's phase matrix.  Both chains are built in one sweep per layer, so
    the whole gradient costs ``O(S L N^3)``.
    """
    _check_layers(model, phases)
    if len(digital) != len(factors):
        raise StructuralError("one digital matrix and one covariance factor per user")
    phasors = phases.phasors
    g = _responses(model.inter_layer, phasors)
    A = observation_map_from(model.w1, g)
    for d in digital:
        if d.shape != A.shape:
            raise StructuralError(f"digital estimator shape {d.shape} != {A.shape}")
    return _gradient(model.w1, model.inter_layer, phasors, A, digital, factors)


def normalize_gradient(grad):
    """Scale each ``(s, l)`` slice so its largest magnitude is ``pi``.

    All-zero slices are returned unchanged.
    """
    grad = np.asarray(grad, dtype=float)
    peak = np.max(np.abs(grad), axis=-1, keepdims=True)
    # divide first: pi / peak overflows for subnormal peaks
    unit = np.divide(grad, peak, out=np.zeros_like(grad), where=peak > 0)
    return unit * np.pi


@dataclass(frozen=True)
class ConventionalResult:
    """Fully digital MMSE estimation with one RF chain per element."""

    per_user_nmse: np.ndarray
    estimators: list

    @property
    def average_nmse(self):
        return float(np.mean(self.per_user_nmse))


def conventional_mmse(stats):
    """MMSE estimate from ``y = h + n`` with noise covariance ``I / rho_tau``."""
    nmse, mats = [], []
    for cov in stats.scaled_covariances():
        tr = _power(cov)
        lhs = cov + np.eye(cov.shape[0]) / stats.rho_tau
        # C (C + I/rho_tau)^{-1} = ((C + I/rho_tau)^{-1} C)^H since both are Hermitian
        gain = sla.solve(lhs, cov, assume_a="her").conj().T
        nmse.append(float(np.real(np.trace(cov - gain @ cov)) / tr))
        mats.append(gain)
    return ConventionalResult(np.array(nmse), mats)


@dataclass(frozen=True)
class LowRankFactor:
    """Dominant eigenspace of a covariance: ``C ~= Q diag(w) Q^H``."""

    basis: np.ndarray
    eigenvalues: np.ndarray

    @property
    def rank(self):
        return self.eigenvalues.size

    @property
    def factor(self):
        return self.basis * np.sqrt(self.eigenvalues)

    @property
    def covariance(self):
        return (self.basis * self.eigenvalues) @ self.basis.conj().T


def low_rank_reduce(cov, energy_threshold):
    """Keep the fewest eigenvectors holding ``energy_threshold`` of ``tr C``."""
    if not 0 < energy_threshold <= 1:
        raise ValueError(f"energy_threshold must lie in (0, 1], got {energy_threshold}")
    w, q = clipped_eigh(cov)
    order = np.argsort(w)[::-1]
    w, q = w[order], q[:, order]
    total = w.sum()
    if not total > 0:
        raise DegenerateUserError("channel covariance has zero trace")
    mass = np.cumsum(w) / total
    # guard against the cumulative sum ending a rounding step short of 1
    rank = min(int(np.searchsorted(mass, energy_threshold * (1 - 1e-12))) + 1, w.size)
    return LowRankFactor(q[:, :rank], w[:rank])


def min_subphases(num_unknowns, num_rf_chains):
    """Fewest sub-phases that make the noiseless observation system square."""
    if num_unknowns < 1 or num_rf_chains < 1:
        raise ValueError("dimensions must be positive")
    return math.ceil(num_unknowns / num_rf_chains)

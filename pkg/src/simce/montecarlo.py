"""Monte-Carlo simulation of the pilot protocol and empirical NMSE.

Random numbers come from fixed-size blocks of trials; block ``b`` of stream
``stream`` draws from ``SeedSequence(seed, spawn_key=(stream, b))``.  A batch
is therefore the same whatever the block evaluation order or worker count.
"""

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

BLOCK_SIZE = 500

STREAM_CHANNEL = 0
STREAM_NOISE = 1


def block_rng(seed, stream, block):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream, block)))


def complex_normal(rng, shape):
    """i.i.d. CN(0, 1): real and imaginary parts each of variance 1/2."""
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * np.sqrt(0.5)


def sample_channel(factor, rng, size=None):
    """Draw ``h = F z`` with ``z ~ CN(0, I)``, so ``h ~ CN(0, F F^H)``.

    Returns shape ``(N,)`` or ``(size, N)``.
    """
    shape = (factor.shape[1],) if size is None else (size, factor.shape[1])
    return complex_normal(rng, shape) @ factor.T


def pilot_matrix(num_users, length, training_snr):
    """Orthogonal pilots as columns: DFT columns scaled to ``||x_k||^2 = rho tau``."""
    if length < num_users:
        raise ConfigurationError("pilot.pilot_length", f"{length} < number of users {num_users}")
    t = np.arange(length)[:, None]
    k = np.arange(num_users)[None, :]
    return np.sqrt(training_snr) * np.exp(-2j * np.pi * t * k / length)


def check_pilots(pilots, rho_tau, tol=1e-9):
    gram = pilots.conj().T @ pilots
    target = rho_tau * np.eye(pilots.shape[1])
    if np.max(np.abs(gram - target)) > tol * rho_tau:
        raise ConfigurationError("pilot", "pilot sequences are not orthogonal with energy rho_p tau_p")


def simulate_training(A, channels, stats, rng, *, path="reduced", noiseless=False, pilots=None):
    """Stacked observations ``r_k`` for channels of shape ``(..., K, N)``.

    ``path="full"`` forms the received pilot blocks ``Y_s`` with unit-variance
    noise columns and correlates them with each user's pilot;
    ``path="reduced"`` draws ``r_k = A h_k + n_k / (rho tau)`` directly.
    Returns shape ``(..., K, M S)``.
    """
    channels = np.asarray(channels)
    clean = channels @ A.T
    if path == "reduced":
        if noiseless:
            return clean
        rho_tau = stats.rho_tau
        noise = np.sqrt(rho_tau) * complex_normal(rng, clean.shape)
        return clean + noise / rho_tau
    if path != "full":
        raise ValueError(f"unknown path {path!r}")

    k = stats.num_users
    if pilots is None:
        pilots = pilot_matrix(k, stats.pilot.length, stats.pilot.training_snr)
    rho_tau = stats.pilot.training_snr * pilots.shape[0]
    check_pilots(pilots, rho_tau)
    lead = clean.shape[:-2]
    ms = A.shape[0]
    # received pilot block for every sub-phase: sum_k (A_s h_k) x_k^H + N_s
    received = np.einsum("...km,tk->...mt", clean, pilots.conj())
    if not noiseless:
        received = received + complex_normal(rng, lead + (ms, pilots.shape[0]))
    obs = np.einsum("...mt,tk->...km", received, pilots) / rho_tau
    return obs


def _block_errors(A, digital, factors, traces, stats, seed, block, size, path, noiseless):
    rng_h = block_rng(seed, STREAM_CHANNEL, block)
    rng_n = block_rng(seed, STREAM_NOISE, block)
    h = np.stack([sample_channel(f, rng_h, size) for f in factors], axis=1)
    r = simulate_training(A, h, stats, rng_n, path=path, noiseless=noiseless)
    errs = np.empty((size, len(digital)))
    for k, d in enumerate(digital):
        est = r[:, k, :] @ d.conj()
        diff = est - h[:, k, :]
        errs[:, k] = np.sum(np.abs(diff) ** 2, axis=1) / traces[k]
    return errs


@dataclass(frozen=True)
class TrialBatch:
    """Per-trial records of one batch (kept for small batches only)."""

    num_trials: int
    seed: int
    channels: np.ndarray
    observations: np.ndarray
    estimates: np.ndarray
    squared_errors: np.ndarray


def run_trials(A, digital, stats, num_trials, seed, *, path="reduced", noiseless=False):
    """Simulate ``num_trials`` trials in one block and keep every record."""
    factors = stats.scaled_sqrts()
    rng_h = block_rng(seed, STREAM_CHANNEL, 0)
    rng_n = block_rng(seed, STREAM_NOISE, 0)
    h = np.stack([sample_channel(f, rng_h, num_trials) for f in factors], axis=1)
    r = simulate_training(A, h, stats, rng_n, path=path, noiseless=noiseless)
    est = np.stack([r[:, k, :] @ d.conj() for k, d in enumerate(digital)], axis=1)
    sq = np.sum(np.abs(est - h) ** 2, axis=2)
    return TrialBatch(num_trials, seed, h, r, est, sq)


@dataclass(frozen=True)
class MonteCarloResult:
    per_user_mean: np.ndarray
    per_user_se: np.ndarray
    average_mean: float
    average_se: float
    num_trials: int
    seed: int


def empirical_nmse(A, digital, stats, num_trials=1000, seed=0, *, path="reduced",
                   noiseless=False, workers=1, factors=None):
    """Average ``||D_k^H r_k - h_k||^2 / tr C_k`` over simulated trials.

    Standard errors are sample standard deviations over ``sqrt(num_trials)``.
    ``factors`` overrides the channel covariance factors (defaults to the
    users' scaled square roots).
    """
    if num_trials < 1:
        raise ValueError("num_trials must be positive")
    factors = stats.scaled_sqrts() if factors is None else factors
    traces = [float(np.real(np.vdot(f, f))) for f in factors]
    sizes = [min(BLOCK_SIZE, num_trials - start) for start in range(0, num_trials, BLOCK_SIZE)]
    args = [(A, digital, factors, traces, stats, seed, b, n, path, noiseless)
            for b, n in enumerate(sizes)]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            blocks = list(pool.map(lambda a: _block_errors(*a), args))
    else:
        blocks = [_block_errors(*a) for a in args]
    errs = np.concatenate(blocks, axis=0)
    avg = errs.mean(axis=1)
    ddof = 1 if num_trials > 1 else 0
    return MonteCarloResult(
        per_user_mean=errs.mean(axis=0),
        per_user_se=errs.std(axis=0, ddof=ddof) / np.sqrt(num_trials),
        average_mean=float(avg.mean()),
        average_se=float(avg.std(ddof=ddof) / np.sqrt(num_trials)),
        num_trials=num_trials,
        seed=seed,
    )


BATCH_COLUMNS = ("config", "scheme", "user", "mean_nmse", "std_error", "trials", "seed")


def write_batch_rows(rows, path):
    """One CSV row per (config, scheme, user); floats at 17 significant digits."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(BATCH_COLUMNS)
        for row in rows:
            writer.writerow([format(v, ".17g") if isinstance(v, float) else v
                             for v in (row[c] for c in BATCH_COLUMNS)])


def batch_rows(config_id, scheme, result):
    """Rows for :func:`write_batch_rows` from a :class:`MonteCarloResult`."""
    return [
        {"config": config_id, "scheme": scheme, "user": k + 1,
         "mean_nmse": float(m), "std_error": float(s),
         "trials": result.num_trials, "seed": result.seed}
        for k, (m, s) in enumerate(zip(result.per_user_mean, result.per_user_se))
    ]

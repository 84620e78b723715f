"""Physical model of the SIM-equipped base station.

Coordinates: the antenna array lies on the z-axis through ``(0, 0, h)`` and
the metasurface layers are planes ``y = const`` stacked along +y, all centered
on ``x = 0, z = h`` where ``h`` is the configured center height.
"""

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import config as cfg
from .errors import ConfigurationError, GeometryError, NumericalError

log = logging.getLogger(__name__)

PSD_TOLERANCE = 1e-10


def _frozen(a):
    a = np.array(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SimGeometry:
    wavelength: float
    antenna_positions: np.ndarray
    num_layers: int
    nx: int
    nz: int
    atom_spacing: float
    atom_width: float
    atom_height: float
    sim_thickness: float
    tx_gap: float
    center_height: float

    @property
    def num_antennas(self):
        return self.antenna_positions.shape[0]

    @property
    def num_atoms(self):
        return self.nx * self.nz

    @property
    def layer_gap(self):
        return self.sim_thickness / self.num_layers

    def layer_y(self, layer):
        """y-coordinate of metasurface ``layer`` (1-based)."""
        if not 1 <= layer <= self.num_layers:
            raise IndexError(f"layer {layer} outside 1..{self.num_layers}")
        return self.tx_gap + (layer - 1) * self.layer_gap

    def atom_positions(self, layer):
        """``(N, 3)`` meta-atom centers of ``layer``; index ``n = ix * nz + iz``."""
        xs = (np.arange(self.nx) - (self.nx - 1) / 2) * self.atom_spacing
        zs = (np.arange(self.nz) - (self.nz - 1) / 2) * self.atom_spacing
        gx, gz = np.meshgrid(xs, zs, indexing="ij")
        pos = np.empty((self.num_atoms, 3))
        pos[:, 0] = gx.ravel()
        pos[:, 1] = self.layer_y(layer)
        pos[:, 2] = self.center_height + gz.ravel()
        return pos


def _positive(section, values, key, *, integer=False):
    if key not in values:
        raise ConfigurationError(f"{section}.{key}", "required")
    value = values[key]
    if integer:
        if isinstance(value, bool) or int(value) != value:
            raise ConfigurationError(f"{section}.{key}", f"expected an integer, got {value!r}")
        value = int(value)
    else:
        value = float(value)
    if not value > 0:
        raise ConfigurationError(f"{section}.{key}", f"must be positive, got {value!r}")
    return value


def _length(geo, key, wavelength):
    """Read a length given either in meters (``key``) or wavelengths (``key_wl``)."""
    if key in geo:
        return _positive("geometry", geo, key)
    return _positive("geometry", geo, key + "_wl") * wavelength


def build_geometry(config=None):
    """Build a positioned :class:`SimGeometry` from a (partial) configuration."""
    geo = cfg.resolve(config or {}, extra_sections=("grid",))["geometry"]
    try:
        wavelength = cfg.wavelength_of(geo)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError("geometry.frequency_hz", str(exc)) from None
    if not wavelength > 0:
        raise ConfigurationError("geometry.wavelength", "must be positive")

    if "nx" in geo or "nz" in geo:
        nx = _positive("geometry", geo, "nx", integer=True)
        nz = _positive("geometry", geo, "nz", integer=True)
        if "num_atoms" in geo and geo["num_atoms"] != nx * nz:
            raise ConfigurationError("geometry.num_atoms", f"{geo['num_atoms']} != nx * nz = {nx * nz}")
    else:
        nx, nz = cfg.split_atoms(geo.get("num_atoms", cfg.DEFAULT_NUM_ATOMS))
    if nx * nz > cfg.MAX_ATOMS:
        raise ConfigurationError("geometry.nx", f"nx * nz = {nx * nz} exceeds {cfg.MAX_ATOMS}")
    num_layers = _positive("geometry", geo, "num_layers", integer=True)
    num_antennas = _positive("geometry", geo, "num_antennas", integer=True)
    thickness = _positive("geometry", geo, "sim_thickness")
    spacing = _length(geo, "atom_spacing", wavelength)
    width = _length(geo, "atom_width", wavelength)
    height = _length(geo, "atom_height", wavelength)
    ant_spacing = _length(geo, "antenna_spacing", wavelength)
    tx_gap = _positive("geometry", geo, "tx_gap") if "tx_gap" in geo else thickness / num_layers
    center = float(geo["center_height"])

    ant = np.zeros((num_antennas, 3))
    ant[:, 2] = center + (np.arange(num_antennas) - (num_antennas - 1) / 2) * ant_spacing
    return SimGeometry(
        wavelength=wavelength,
        antenna_positions=_frozen(ant),
        num_layers=num_layers,
        nx=nx,
        nz=nz,
        atom_spacing=spacing,
        atom_width=width,
        atom_height=height,
        sim_thickness=thickness,
        tx_gap=tx_gap,
        center_height=center,
    )


@dataclass(frozen=True)
class WaveModel:
    """Fixed transmission matrices of the SIM.

    ``w1`` maps the M antennas to layer 1 (N x M); ``inter_layer[i]`` maps
    layer ``i + 1`` to layer ``i + 2`` (N x N).
    """

    w1: np.ndarray
    inter_layer: tuple

    @property
    def num_layers(self):
        return len(self.inter_layer) + 1

    @property
    def num_atoms(self):
        return self.w1.shape[0]

    @property
    def num_antennas(self):
        return self.w1.shape[1]


def rayleigh_sommerfeld(sources, targets, wavelength, atom_width, atom_height):
    """Transmission coefficients from ``sources`` (P, 3) to ``targets`` (Q, 3).

    Returns the (Q, P) matrix of
    ``d1 d2 cos(chi) / d * (1 / (2 pi d) - j / lambda) * exp(j 2 pi d / lambda)``
    where ``d`` is the source-target distance and ``chi`` is measured from the
    source plane normal (+y).
    """
    diff = targets[:, None, :] - sources[None, :, :]
    dist = np.linalg.norm(diff, axis=-1)
    if np.any(dist == 0):
        raise GeometryError("a source and a target element coincide")
    cos_chi = diff[..., 1] / dist
    amp = atom_width * atom_height * cos_chi / dist
    return amp * (1.0 / (2 * np.pi * dist) - 1j / wavelength) * np.exp(2j * np.pi * dist / wavelength)


def build_wave_model(geom):
    args = (geom.wavelength, geom.atom_width, geom.atom_height)
    w1 = rayleigh_sommerfeld(geom.antenna_positions, geom.atom_positions(1), *args)
    inter = tuple(
        _frozen(rayleigh_sommerfeld(geom.atom_positions(l - 1), geom.atom_positions(l), *args))
        for l in range(2, geom.num_layers + 1)
    )
    return WaveModel(w1=_frozen(w1), inter_layer=inter)


def build_correlation(geom):
    """Spatial correlation ``sinc(2 d / lambda)`` of the last layer's atoms.

    Distances come from grid offsets rather than absolute coordinates, which
    would lose digits to the center height.
    """
    ix, iz = np.divmod(np.arange(geom.num_atoms), geom.nz)
    steps = np.hypot(ix[:, None] - ix[None, :], iz[:, None] - iz[None, :])
    return np.sinc(2 * geom.atom_spacing * steps / geom.wavelength).astype(complex)


def clipped_eigh(matrix, tol=PSD_TOLERANCE):
    """Eigendecomposition of a Hermitian PSD matrix with rounding repair.

    Eigenvalues in ``[-tol * n * scale, 0)`` are set to zero, where ``scale``
    is the largest eigenvalue magnitude; anything more negative raises.
    Returns ascending eigenvalues and eigenvectors like ``numpy.linalg.eigh``.
    """
    w, q = np.linalg.eigh(matrix)
    n = matrix.shape[0]
    scale = max(np.max(np.abs(w)), np.finfo(float).tiny)
    floor = -tol * n * scale
    if np.any(w < floor):
        raise NumericalError(f"matrix is not PSD: min eigenvalue {w.min():.3e} below {floor:.3e}")
    neg = w < 0
    if np.any(neg):
        worst = -w.min() / scale
        # eigh leaves ~n*eps noise on zero eigenvalues; only report beyond that
        level = logging.WARNING if worst > 100 * n * np.finfo(float).eps else logging.DEBUG
        log.log(level, "clipped %d negative eigenvalue(s), worst %.2e relative", neg.sum(), worst)
        w = np.where(neg, 0.0, w)
    return w, q


def hermitian_sqrt(matrix):
    """Hermitian square root ``Q diag(sqrt(w)) Q^H`` of a PSD matrix."""
    w, q = clipped_eigh(matrix)
    return (q * np.sqrt(w)) @ q.conj().T


def path_loss(distance, exponent=3.5, ref_distance=1.0, ref_gain=None, wavelength=None):
    """Log-distance path loss ``ref_gain * (distance / ref_distance) ** -exponent``.

    ``ref_gain`` defaults to the free-space gain ``(wavelength / (4 pi d0))^2``
    at the reference distance.
    """
    d = np.asarray(distance, dtype=float)
    if not ref_distance > 0 or not exponent > 0:
        raise ValueError("ref_distance and exponent must be positive")
    if np.any(d < ref_distance):
        raise ValueError(f"distance below the reference distance {ref_distance} m")
    if ref_gain is None:
        if wavelength is None:
            raise ValueError("either ref_gain or wavelength is required")
        ref_gain = (wavelength / (4 * np.pi * ref_distance)) ** 2
    out = ref_gain * (d / ref_distance) ** (-exponent)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class PilotConfig:
    power: float
    length: int
    noise_variance: float

    @property
    def training_snr(self):
        return self.power / self.noise_variance

    @property
    def rho_tau(self):
        """Pilot energy over noise, ``rho_p * tau_p``."""
        return self.training_snr * self.length


@dataclass(frozen=True)
class UserChannel:
    """One user's channel statistics.

    ``covariance`` is the unit-diagonal spatial correlation; the channel is
    ``CN(0, path_loss * covariance)``.  Estimator code works with the scaled
    quantities.
    """

    distance: float
    path_loss: float
    covariance: np.ndarray
    sqrt_covariance: np.ndarray

    @property
    def scaled_covariance(self):
        return self.path_loss * self.covariance

    @property
    def scaled_sqrt(self):
        return np.sqrt(self.path_loss) * self.sqrt_covariance


@dataclass(frozen=True)
class ChannelStats:
    users: tuple
    pilot: PilotConfig

    @property
    def num_users(self):
        return len(self.users)

    @property
    def path_losses(self):
        return np.array([u.path_loss for u in self.users])

    @property
    def rho_tau(self):
        return self.pilot.rho_tau

    def scaled_covariances(self):
        return [u.scaled_covariance for u in self.users]

    def scaled_sqrts(self):
        return [u.scaled_sqrt for u in self.users]

    def with_noise_variance(self, noise_variance):
        if not noise_variance > 0:
            raise ConfigurationError("pilot.noise_variance", "must be positive")
        return replace(self, pilot=replace(self.pilot, noise_variance=float(noise_variance)))

    def with_effective_snr(self, snr):
        """Copy with the noise power solved from a linear effective SNR."""
        return self.with_noise_variance(
            noise_variance_for_snr(snr, self.pilot.power, self.path_losses))


def effective_training_snr(stats):
    """Pilot power times mean path loss over noise power (linear)."""
    return stats.pilot.power * float(np.mean(stats.path_losses)) / stats.pilot.noise_variance


def noise_variance_for_snr(snr, power, path_losses):
    """Noise power that gives the linear effective training SNR ``snr``."""
    if not snr > 0:
        raise ValueError("target SNR must be positive")
    return power * float(np.mean(path_losses)) / snr


def build_channel_stats(geom, config=None):
    """Per-user path loss and covariance plus pilot settings."""
    conf = cfg.resolve(config or {}, extra_sections=("grid",))
    users = conf["users"]
    pilot = conf["pilot"]

    distances = [float(d) for d in users["distances"]]
    if not distances:
        raise ConfigurationError("users.distances", "at least one user is required")
    exponent = _positive("users", users, "path_loss_exponent")
    d0 = _positive("users", users, "ref_distance")
    ref_gain = _positive("users", users, "ref_gain") if "ref_gain" in users else None
    try:
        betas = path_loss(distances, exponent, d0, ref_gain, geom.wavelength)
    except ValueError as exc:
        raise ConfigurationError("users.distances", str(exc)) from None

    k = len(distances)
    length = _positive("pilot", pilot, "pilot_length", integer=True) if "pilot_length" in pilot else k
    if length < k:
        raise ConfigurationError("pilot.pilot_length", f"{length} < number of users {k}")
    power = _positive("pilot", pilot, "power_w")
    if "effective_snr_db" in pilot:
        noise = noise_variance_for_snr(cfg.db_to_linear(float(pilot["effective_snr_db"])), power, betas)
    else:
        noise = cfg.dbm_to_watts(float(pilot["noise_dbm"]))

    corr = _frozen(build_correlation(geom))
    root = _frozen(hermitian_sqrt(corr))
    recon = np.linalg.norm(root @ root.conj().T - corr) / np.linalg.norm(corr)
    if recon > 1e-10:
        raise NumericalError(f"square root reconstruction error {recon:.2e}")
    per_user = tuple(UserChannel(d, float(b), corr, root) for d, b in zip(distances, betas))
    return ChannelStats(users=per_user, pilot=PilotConfig(power, length, noise))

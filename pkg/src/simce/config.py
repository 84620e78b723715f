"""Configuration schema, defaults and loading.

A configuration is a nested mapping with the sections below.  Files are TOML;
any key left out takes the default shown here.  Lengths ending in ``_wl`` are
in wavelengths, everything else is SI (meters, watts, hertz).

.. code-block:: toml

    seed = 0

    [geometry]
    frequency_hz = 28e9          # or: wavelength = 0.0107 (meters)
    num_antennas = 4
    num_atoms = 64               # split as nx <= nz (8 x 8); or give nx and nz
    num_layers = 6
    sim_thickness = 0.05
    atom_spacing_wl = 0.5        # or: atom_spacing (meters)
    atom_width_wl = 0.5          # d1; or atom_width (meters)
    atom_height_wl = 0.5         # d2; or atom_height (meters)
    antenna_spacing_wl = 0.5     # or: antenna_spacing (meters)
    # tx_gap = ...               # antennas -> first layer; default D_SIM / L
    center_height = 15.0

    [users]
    distances = [50.0, 60.0, 70.0, 80.0]
    path_loss_exponent = 3.5
    ref_distance = 1.0
    # ref_gain = ...             # default (wavelength / (4 pi ref_distance))^2

    [pilot]
    power_w = 1.0
    # pilot_length = 4           # default: number of users
    noise_dbm = -110.0
    # effective_snr_db = 10.0    # if set, the noise power is solved from it

    [estimator]
    # subphases = 16             # default ceil(N / M)
    eta = 0.1
    decay = 0.5
    epsilon = 1e-3
    max_iters = 200
    num_restarts = 10
    decay_policy = "every"       # or "on_no_improvement"
    stopping = "absolute"        # or "relative"
    patience = 1
    # codebook_size = 3840       # default 10 L N
    # low_rank_threshold = 0.9999

    [monte_carlo]
    trials = 1000
"""

import copy
import math
import sys

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigurationError

SPEED_OF_LIGHT = 299_792_458.0

DEFAULTS = {
    "seed": 0,
    "geometry": {
        "frequency_hz": 28e9,
        "num_antennas": 4,
        "num_layers": 6,
        "sim_thickness": 0.05,
        "atom_spacing_wl": 0.5,
        "atom_width_wl": 0.5,
        "atom_height_wl": 0.5,
        "antenna_spacing_wl": 0.5,
        "center_height": 15.0,
    },
    "users": {
        "distances": [50.0, 60.0, 70.0, 80.0],
        "path_loss_exponent": 3.5,
        "ref_distance": 1.0,
    },
    "pilot": {
        "power_w": 1.0,
        "noise_dbm": -110.0,
    },
    "estimator": {
        "eta": 0.1,
        "decay": 0.5,
        "epsilon": 1e-3,
        "max_iters": 200,
        "num_restarts": 10,
        "decay_policy": "every",
        "stopping": "absolute",
        "patience": 1,
    },
    "monte_carlo": {
        "trials": 1000,
    },
}

# Keys accepted on top of DEFAULTS (they have no default value).
OPTIONAL_KEYS = {
    "geometry": {"wavelength", "num_atoms", "nx", "nz", "atom_spacing", "atom_width",
                 "atom_height", "antenna_spacing", "tx_gap"},
    "users": {"ref_gain"},
    "pilot": {"pilot_length", "effective_snr_db"},
    "estimator": {"subphases", "codebook_size", "low_rank_threshold"},
    "monte_carlo": set(),
}

MAX_ATOMS = 1 << 16
DEFAULT_NUM_ATOMS = 64


def deep_merge(base, override):
    """Return a copy of ``base`` with ``override`` merged in recursively."""
    out = copy.deepcopy(dict(base))
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def check_keys(config, extra_sections=()):
    """Reject unknown sections and keys so typos fail loudly."""
    for section, values in config.items():
        if section == "seed" or section in extra_sections:
            continue
        if section not in DEFAULTS or not isinstance(DEFAULTS[section], dict):
            raise ConfigurationError(section, "unknown configuration section")
        if not isinstance(values, dict):
            raise ConfigurationError(section, "expected a table of keys")
        allowed = set(DEFAULTS[section]) | OPTIONAL_KEYS[section]
        for key in values:
            if key not in allowed:
                raise ConfigurationError(f"{section}.{key}", "unknown key")


def resolve(config=None, extra_sections=()):
    """Merge a partial configuration over the defaults and check its keys."""
    config = {} if config is None else config
    check_keys(config, extra_sections)
    return deep_merge(DEFAULTS, config)


def load_config(path, extra_sections=()):
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    return resolve(raw, extra_sections)


def split_atoms(num_atoms):
    """Split ``num_atoms`` into the most square ``(nx, nz)`` with ``nx <= nz``.

    The long side goes along z, parallel to the antenna array.
    """
    if int(num_atoms) != num_atoms or num_atoms < 1:
        raise ConfigurationError("geometry.num_atoms", "must be a positive integer")
    num_atoms = int(num_atoms)
    nx = max(d for d in range(1, math.isqrt(num_atoms) + 1) if num_atoms % d == 0)
    return nx, num_atoms // nx


def wavelength_of(geometry):
    if "wavelength" in geometry:
        return float(geometry["wavelength"])
    freq = float(geometry["frequency_hz"])
    if not freq > 0:
        raise ConfigurationError("geometry.frequency_hz", "must be positive")
    return SPEED_OF_LIGHT / freq


def dbm_to_watts(dbm):
    return 10.0 ** ((dbm - 30.0) / 10.0)


def db_to_linear(db):
    return 10.0 ** (db / 10.0)


def linear_to_db(x):
    return 10.0 * math.log10(x)

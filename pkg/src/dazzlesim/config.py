"""Physical parameters, wavelength grid and seeding policy.

All quantities are SI internally. Config files may use unit-suffixed keys
(``aperture_diameter_mm``, ``pupil_pitch_um``, ``lambda_min_nm`` ...) which are
converted on load; plain keys are taken as SI.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import numpy as np

PLANCK = 6.63e-34  # J s
LIGHT_SPEED = 3e8  # m / s

SEED_ENV_VAR = "DAZZLESIM_SEED"

_MASK64 = (1 << 64) - 1


class ConfigError(ValueError):
    """Raised when a configuration value violates a documented constraint."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class PhysicalConstants:
    planck: float = PLANCK
    light_speed: float = LIGHT_SPEED


CONSTANTS = PhysicalConstants()


@dataclass(frozen=True)
class WavelengthGrid:
    """Uniform band-centre wavelengths in metres."""

    lambdas: tuple[float, ...]

    def __post_init__(self):
        lam = np.asarray(self.lambdas, dtype=float)
        if lam.ndim != 1 or lam.size < 1:
            raise ConfigError("lambdas", "need at least one band")
        if lam.size > 1:
            d = np.diff(lam)
            if np.any(d <= 0):
                raise ConfigError("lambdas", "must be strictly increasing")
            if not np.allclose(d, d[0], rtol=1e-9, atol=0):
                raise ConfigError("lambdas", "must be uniformly spaced")

    @classmethod
    def linspace(cls, lambda_min: float, lambda_max: float, n_bands: int) -> "WavelengthGrid":
        return cls(tuple(float(x) for x in np.linspace(lambda_min, lambda_max, n_bands)))

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.lambdas, dtype=float)

    @property
    def nm(self) -> np.ndarray:
        return self.array * 1e9

    @property
    def delta_lambda(self) -> float:
        """Sampling interval in metres (10 nm for a single band by convention)."""
        if len(self.lambdas) == 1:
            return 10e-9
        return (self.lambdas[-1] - self.lambdas[0]) / (len(self.lambdas) - 1)

    def __len__(self) -> int:
        return len(self.lambdas)

    def index_of(self, lam: float, tol: float = 1e-12) -> int:
        idx = int(np.argmin(np.abs(self.array - lam)))
        if abs(self.lambdas[idx] - lam) > tol:
            raise KeyError(f"wavelength {lam * 1e9:.3f} nm is not a band of the grid")
        return idx


# unit kind of each physical field; used for suffix conversion on load
_LENGTH_FIELDS = {
    "lambda_min", "lambda_max", "focal_length", "aperture_diameter",
    "pupil_pitch", "sensor_pitch", "doe_h_max",
}
_TIME_FIELDS = {"exposure_time"}
_ELECTRON_FIELDS = {"full_well", "read_noise_mean", "read_noise_std", "dark_current"}

_SUFFIXES = {
    "length": {"_m": 1.0, "_mm": 1e-3, "_um": 1e-6, "_nm": 1e-9},
    "time": {"_s": 1.0, "_ms": 1e-3},
    "electrons": {"_e": 1.0},
}


@dataclass(frozen=True)
class SimConfig:
    """Immutable run configuration. Defaults reproduce the published camera."""

    lambda_min: float = 400e-9
    lambda_max: float = 700e-9
    n_bands: int = 31
    focal_length: float = 0.11
    exposure_time: float = 0.1
    aperture_diameter: float = 11e-3
    quantum_efficiency: float = 0.56
    gain: float = 0.37
    full_well: float = 25500.0
    read_noise_mean: float = 390.0
    read_noise_std: float = 10.5
    dark_current: float = 0.002
    bpc: int = 16
    pupil_pitch: float = 3.74e-6
    sensor_pitch: float = 2.9e-6
    pupil_res: tuple[int, int] = (2160, 2160)
    sensor_res: tuple[int, int] = (2048, 2048)
    # Cauchy dispersion of the DOE material: dn(lam) = A + B / lam**2 (lam in m)
    doe_dn_a: float = 0.46
    doe_dn_b: float = 0.0
    doe_h_max: float = 1.6e-6
    # optimisation / numerics
    smoothness_sigma: float = 4.0  # Gaussian reparameterisation, pupil pixels; 0 disables
    peak_beta: float = 50.0  # smooth-max temperature
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "pupil_res", tuple(int(v) for v in self.pupil_res))
        object.__setattr__(self, "sensor_res", tuple(int(v) for v in self.sensor_res))
        self.validate()

    def validate(self) -> None:
        if not self.lambda_min < self.lambda_max:
            raise ConfigError("lambda_min", "lambda_min must be < lambda_max")
        if int(self.n_bands) != self.n_bands or self.n_bands < 2:
            raise ConfigError("n_bands", "need an integer n_bands >= 2")
        for name in ("lambda_min", "lambda_max", "focal_length", "exposure_time",
                     "aperture_diameter", "gain", "full_well", "pupil_pitch",
                     "sensor_pitch", "doe_h_max", "peak_beta"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ConfigError(name, f"must be strictly positive, got {v!r}")
        for name in ("read_noise_mean", "read_noise_std", "dark_current", "smoothness_sigma"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ConfigError(name, f"must be non-negative, got {v!r}")
        if not 0 < self.quantum_efficiency <= 1:
            raise ConfigError("quantum_efficiency", "must lie in (0, 1]")
        if int(self.bpc) != self.bpc or not 8 <= self.bpc <= 16:
            raise ConfigError("bpc", "must be an integer in 8..16")
        for name in ("pupil_res", "sensor_res"):
            v = getattr(self, name)
            if len(v) != 2 or min(v) <= 0:
                raise ConfigError(name, "must be two positive integers")
        if not 0 <= self.rng_seed <= _MASK64:
            raise ConfigError("rng_seed", "must fit in an unsigned 64-bit integer")
        if self.delta_n(self.lambda_max) <= 0 or self.delta_n(self.lambda_min) <= 0:
            raise ConfigError("doe_dn_a", "refractive index difference must stay positive")

    # -- derived quantities -------------------------------------------------
    @property
    def grid(self) -> WavelengthGrid:
        return WavelengthGrid.linspace(self.lambda_min, self.lambda_max, self.n_bands)

    @property
    def s_sat(self) -> int:
        return 2 ** int(self.bpc) - 1

    def delta_n(self, lam):
        return self.doe_dn_a + self.doe_dn_b / np.asarray(lam, dtype=float) ** 2

    def replace(self, **changes) -> "SimConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["pupil_res"] = list(self.pupil_res)
        d["sensor_res"] = list(self.sensor_res)
        return d

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_json() + "\n")

    def hash(self) -> str:
        """Digest of the physical configuration (the seed is excluded)."""
        d = self.to_dict()
        d.pop("rng_seed")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def desk_config(**overrides) -> SimConfig:
    """128x128 pupil and sensor, 5 bands at 450..650 nm.

    The pupil pitch is chosen so the 11 mm aperture fits on the 128-sample
    grid; every other physical constant keeps its default value.
    """
    base = dict(
        lambda_min=450e-9, lambda_max=650e-9, n_bands=5,
        pupil_res=(128, 128), sensor_res=(128, 128), pupil_pitch=96e-6,
    )
    base.update(overrides)
    return SimConfig(**base)


def gradcheck_config(**overrides) -> SimConfig:
    """Tiny 16x16-pupil configuration for finite-difference checks."""
    base = dict(
        lambda_min=450e-9, lambda_max=650e-9, n_bands=3,
        pupil_res=(16, 16), sensor_res=(16, 16), pupil_pitch=760e-6,
        smoothness_sigma=0.0,
    )
    base.update(overrides)
    return SimConfig(**base)


def full_config(**overrides) -> SimConfig:
    """Full-resolution configuration.

    The published 3.74 um pupil pitch on 2160 samples spans only 8.1 mm, less
    than the 11 mm aperture, so the pitch is widened to 5.2 um here.
    """
    base = dict(pupil_pitch=5.2e-6)
    base.update(overrides)
    return SimConfig(**base)


PRESETS = {"default": SimConfig, "desk": desk_config, "gradcheck": gradcheck_config,
           "full": full_config}


def _convert_key(key: str, value: Any) -> tuple[str, Any]:
    names = {f.name for f in dataclasses.fields(SimConfig)}
    if key in names:
        return key, value
    for kind, fields_ in (("length", _LENGTH_FIELDS), ("time", _TIME_FIELDS),
                          ("electrons", _ELECTRON_FIELDS)):
        for suffix, scale in _SUFFIXES[kind].items():
            if key.endswith(suffix) and key[: -len(suffix)] in fields_:
                return key[: -len(suffix)], float(value) * scale
    raise ConfigError(key, "unknown configuration key")


def config_from_dict(data: Mapping[str, Any]) -> SimConfig:
    data = dict(data)
    preset = data.pop("preset", "default")
    if preset not in PRESETS:
        raise ConfigError("preset", f"unknown preset {preset!r}")
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        name, value = _convert_key(key, value)
        if name in kwargs:
            raise ConfigError(name, "given more than once")
        kwargs[name] = value
    if SEED_ENV_VAR in os.environ:
        kwargs["rng_seed"] = int(os.environ[SEED_ENV_VAR])
    try:
        return PRESETS[preset](**kwargs)
    except TypeError as exc:  # wrong value types
        raise ConfigError("config", str(exc)) from exc


def load_config(path: str | os.PathLike) -> SimConfig:
    """Load and validate a JSON config file; missing keys take default values."""
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("file", f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError("file", f"{path}: top level must be a JSON object")
    return config_from_dict(data)


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def derive_seed(base_seed: int, item_index: int) -> int:
    """Mix a base seed and an item index into an independent 64-bit seed.

    For a fixed index the map is a bijection of the base seed, and for a fixed
    base seed it is a bijection of the index, so neither can collide.
    """
    a = _splitmix64(int(base_seed) & _MASK64)
    b = _splitmix64((int(item_index) * 0xD1B54A32D192ED03) & _MASK64)
    return _splitmix64(a ^ b)


def rng_for(base_seed: int, item_index: int = 0) -> np.random.Generator:
    return np.random.default_rng(derive_seed(base_seed, item_index))

"""Config file parsing and validation for the batch front end.

The format is line-based ``key = value`` under ``[section]`` headers.
Unknown sections or keys are hard errors with the offending line number, so
typos never silently fall back to defaults.  Fractions like ``1/70`` are
accepted wherever a real number is; ``eps`` takes a comma-separated list.
"""

from __future__ import annotations

from dataclasses import dataclass, fields as dc_fields, replace

from .errors import ConfigError
from .llg import SCHEMES

_NORM_KEYS = ("err_L2", "err_H1", "eta_L2", "len_dev_L2")


def _parse_real(text: str) -> float:
    text = text.strip()
    if "/" in text:
        num, den = text.split("/", 1)
        return float(num) / float(den)
    return float(text)


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class SimConfig:
    """Validated configuration with every default filled in."""

    coefficient: str = "sinusoidal:0.5"
    m_init: str = "fig1"
    alpha: float = 0.5
    T: float = 0.05
    sigma: float = 0.0
    scheme: str = "rk4_projected"
    dt: float | None = None
    dtau: float | None = None
    J: int = 0
    eps_list: tuple = (0.1,)
    tau_refresh: float = 0.25
    n_fine: int | None = None  # None = auto from points_per_eps
    n_slow: int = 64
    n_fast: int = 64
    points_per_eps: int = 8
    out_dir: str = "llhomog_out"
    seed: int = 1234
    output_stride: int = 50
    workers: int = 1
    slope_min: float = 0.8
    slope_max: float = 1.2
    r2_min: float = 0.98
    unit_tol: float = 1e-9
    cell_tol: float = 1e-8
    corrector_tol: float = 1e-8
    norm_key: str = "err_L2"

    def validate(self) -> None:
        if not (0.0 < self.alpha <= 1.0):
            raise ConfigError(f"alpha must lie in (0,1], got {self.alpha}")
        if self.T <= 0:
            raise ConfigError(f"T must be positive, got {self.T}")
        if not (0.0 <= self.sigma <= 2.0):
            raise ConfigError(f"sigma must lie in [0,2], got {self.sigma}")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"scheme must be one of {SCHEMES}, got '{self.scheme}'")
        if self.J not in (0, 1, 2):
            raise ConfigError(f"J must be 0, 1, or 2, got {self.J}")
        if not self.eps_list:
            raise ConfigError("eps list is empty")
        for e in self.eps_list:
            if not (0.0 < e < 1.0):
                raise ConfigError(f"every eps must lie in (0,1), got {e}")
        for name in ("n_slow", "n_fast"):
            n = getattr(self, name)
            if n < 8 or not _is_power_of_two(n):
                raise ConfigError(f"{name} must be a power of two >= 8, got {n}")
        if self.n_fine is not None:
            if self.n_fine < 8 or not _is_power_of_two(self.n_fine):
                raise ConfigError(f"n_fine must be a power of two >= 8, got {self.n_fine}")
            need = 8.0 / min(self.eps_list)
            if self.n_fine < need:
                raise ConfigError(
                    f"n_fine = {self.n_fine} cannot resolve eps = {min(self.eps_list)}; "
                    f"need at least {int(need)} points"
                )
        if self.points_per_eps < 8:
            raise ConfigError("points_per_eps must be >= 8")
        if self.dt is not None and self.dt <= 0:
            raise ConfigError("dt must be positive or auto")
        if self.dtau is not None and self.dtau <= 0:
            raise ConfigError("dtau must be positive or auto")
        if self.tau_refresh <= 0:
            raise ConfigError("tau_refresh must be positive")
        if self.output_stride < 1:
            raise ConfigError("output_stride must be >= 1")
        if self.workers < 0:
            raise ConfigError("workers must be >= 0 (0 = one per eps)")
        if not (self.slope_min < self.slope_max):
            raise ConfigError("slope_min must be below slope_max")
        if not (0.0 <= self.r2_min <= 1.0):
            raise ConfigError("r2_min must lie in [0,1]")
        if self.norm_key not in _NORM_KEYS:
            raise ConfigError(f"norm_key must be one of {_NORM_KEYS}")
        for name in ("unit_tol", "cell_tol", "corrector_tol"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")


# section -> key -> (attribute, converter)
_SCHEMA = {
    "material": {
        "coefficient": ("coefficient", str.strip),
    },
    "dynamics": {
        "alpha": ("alpha", _parse_real),
        "T": ("T", _parse_real),
        "sigma": ("sigma", _parse_real),
        "scheme": ("scheme", str.strip),
        "m_init": ("m_init", str.strip),
        "dt": ("dt", lambda s: None if s.strip() == "auto" else _parse_real(s)),
        "dtau": ("dtau", lambda s: None if s.strip() == "auto" else _parse_real(s)),
    },
    "expansion": {
        "J": ("J", lambda s: int(s.strip())),
        "eps": ("eps_list", lambda s: tuple(_parse_real(p) for p in s.split(","))),
        "tau_refresh": ("tau_refresh", _parse_real),
    },
    "grids": {
        "n_fine": ("n_fine", lambda s: None if s.strip() == "auto" else int(s.strip())),
        "n_slow": ("n_slow", lambda s: int(s.strip())),
        "n_fast": ("n_fast", lambda s: int(s.strip())),
        "points_per_eps": ("points_per_eps", lambda s: int(s.strip())),
    },
    "output": {
        "out_dir": ("out_dir", str.strip),
        "seed": ("seed", lambda s: int(s.strip())),
        "output_stride": ("output_stride", lambda s: int(s.strip())),
        "workers": ("workers", lambda s: int(s.strip())),
    },
    "tolerances": {
        "slope_min": ("slope_min", _parse_real),
        "slope_max": ("slope_max", _parse_real),
        "r2_min": ("r2_min", _parse_real),
        "unit_tol": ("unit_tol", _parse_real),
        "cell_tol": ("cell_tol", _parse_real),
        "corrector_tol": ("corrector_tol", _parse_real),
        "norm_key": ("norm_key", str.strip),
    },
}


def parse_config(path) -> SimConfig:
    """Parse and validate a config file; unknown keys are errors."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.readlines()
    overrides = {}
    section = None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in _SCHEMA:
                raise ConfigError(
                    f"unknown section '[{section}]'; expected one of "
                    f"{sorted(_SCHEMA)}", line=lineno)
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got '{line}'", line=lineno)
        if section is None:
            raise ConfigError("key outside any [section] header", line=lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _SCHEMA[section]:
            raise ConfigError(
                f"unknown key '{key}' in section '[{section}]'", line=lineno)
        attr, conv = _SCHEMA[section][key]
        try:
            overrides[attr] = conv(value)
        except ConfigError:
            raise
        except Exception as exc:
            raise ConfigError(f"cannot parse '{key} = {value}': {exc}", line=lineno)
    cfg = replace(SimConfig(), **overrides)
    try:
        cfg.validate()
    except ConfigError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def apply_overrides(cfg: SimConfig, *, out_dir=None, eps=None, J=None,
                    sigma=None) -> SimConfig:
    """Apply command-line flag overrides (flags beat file values)."""
    changes = {}
    if out_dir is not None:
        changes["out_dir"] = out_dir
    if eps is not None:
        changes["eps_list"] = tuple(_parse_real(p) for p in str(eps).split(","))
    if J is not None:
        changes["J"] = int(J)
    if sigma is not None:
        changes["sigma"] = _parse_real(str(sigma))
    if not changes:
        return cfg
    out = replace(cfg, **changes)
    out.validate()
    return out


def echo_config(cfg: SimConfig) -> str:
    """Canonical text block of every effective setting (reproducibility)."""
    lines = []
    for section in sorted(_SCHEMA):
        lines.append(f"[{section}]")
        for key in sorted(_SCHEMA[section]):
            attr, _ = _SCHEMA[section][key]
            value = getattr(cfg, attr)
            if attr == "eps_list":
                text = ", ".join(format(e, ".17g") for e in value)
            elif value is None:
                text = "auto"
            elif isinstance(value, float):
                text = format(value, ".17g")
            else:
                text = str(value)
            lines.append(f"{key} = {text}")
        lines.append("")
    return "\n".join(lines)


def config_field_names() -> tuple:
    return tuple(f.name for f in dc_fields(SimConfig))

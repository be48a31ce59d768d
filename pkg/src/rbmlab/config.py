"""INI configuration: parsing, ``section.key=value`` overrides, canonical digest.

Sections: ``[model]``, ``[simulation]``, ``[sweep]``, ``[check]``, ``[reference]``.
Every value error is reported as ``[section] key: reason``.
"""
from __future__ import annotations

import configparser
import hashlib
import math

from .errors import ConfigError
from .integrator import InitialLaw, SimConfig
from .model import builtin_model

_KNOWN = {
    "model": {"name", "a", "kappa", "sigma", "dim", "allow_unconfined"},
    "simulation": {"n", "p", "tau", "t", "integrator", "replicas", "seed", "coupling", "init",
                   "init_mean", "init_var", "init_low", "init_high", "stride", "moments",
                   "trajectory", "trajectory_stride"},
    "sweep": {"vary", "values", "observable", "replicas", "t", "anchor", "anchor_replicas",
              "fp_x_lo", "fp_x_hi", "fp_cells"},
    "check": {"n_samples", "box_radius", "uniformity", "t_long", "orders", "replicas"},
    "reference": {"gaussian", "fp", "t", "x_lo", "x_hi", "n_cells", "dt", "dt_ode", "stride",
                  "boundary_tol"},
}


class Config:
    """Parsed configuration with typed accessors."""

    def __init__(self, parser, source="<config>"):
        self.parser = parser
        self.source = source
        for section in parser.sections():
            if section not in _KNOWN:
                raise ConfigError(f"{source}: unknown section [{section}]; valid: {', '.join(_KNOWN)}")
            for key in parser[section]:
                if key not in _KNOWN[section] and not (section == "model" and key in ("κ", "k")):
                    raise ConfigError(f"{source}: [{section}] unknown key {key!r}")

    # canonical text: sorted sections and keys, stripped values
    def canonical(self):
        lines = []
        for section in sorted(self.parser.sections()):
            lines.append(f"[{section}]")
            for key in sorted(self.parser[section]):
                lines.append(f"{key} = {self.parser[section][key].strip()}")
        return "\n".join(lines) + "\n"

    def digest(self):
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def has(self, section, key=None):
        if not self.parser.has_section(section):
            return False
        return key is None or self.parser.has_option(section, key)

    def _raw(self, section, key, default):
        if self.has(section, key):
            return self.parser[section][key].strip()
        if default is _REQUIRED:
            raise ConfigError(f"{self.source}: [{section}] {key}: required key missing")
        return default

    def get(self, section, key, default=None):
        return self._raw(section, key, default)

    def get_float(self, section, key, default=None):
        v = self._raw(section, key, default)
        if v is None or isinstance(v, float):
            return v
        try:
            out = float(v)
        except (TypeError, ValueError):
            raise ConfigError(f"{self.source}: [{section}] {key}: expected a number, got {v!r}") from None
        if not math.isfinite(out):
            raise ConfigError(f"{self.source}: [{section}] {key}: must be finite, got {v!r}")
        return out

    def get_int(self, section, key, default=None):
        v = self._raw(section, key, default)
        if v is None or isinstance(v, int):
            return v
        try:
            return int(v)
        except ValueError:
            try:
                f = float(v)
            except ValueError:
                f = math.nan
            if math.isfinite(f) and f == int(f):
                return int(f)
            raise ConfigError(f"{self.source}: [{section}] {key}: expected an integer, got {v!r}") from None

    def get_bool(self, section, key, default=False):
        if not self.has(section, key):
            return default
        try:
            return self.parser.getboolean(section, key)
        except ValueError:
            raise ConfigError(f"{self.source}: [{section}] {key}: expected true/false, "
                              f"got {self.parser[section][key]!r}") from None

    def get_list(self, section, key, cast=float, default=None):
        v = self._raw(section, key, default)
        if v is None or isinstance(v, (list, tuple)):
            return v
        items = [s.strip() for s in v.replace(";", ",").split(",") if s.strip()]
        try:
            return [cast(s) if cast is not int else int(float(s)) for s in items]
        except ValueError:
            raise ConfigError(f"{self.source}: [{section}] {key}: cannot parse list {v!r}") from None

    def model(self):
        if not self.has("model"):
            raise ConfigError(f"{self.source}: missing [model] section")
        sec = self.parser["model"]
        name = self._raw("model", "name", _REQUIRED)
        params = {k: v for k, v in sec.items() if k not in ("name", "allow_unconfined")}
        try:
            return builtin_model(name, params, allow_unconfined=self.get_bool("model", "allow_unconfined"))
        except ConfigError as exc:
            raise ConfigError(f"{self.source}: [model] {exc}") from None

    def initial_law(self):
        kind = self.get("simulation", "init", "gaussian")
        mean = self.get_float("simulation", "init_mean", 0.0)
        if kind == "point":
            return InitialLaw("point", mean)
        if kind == "uniform":
            return InitialLaw("uniform", low=self.get_float("simulation", "init_low", -1.0),
                              high=self.get_float("simulation", "init_high", 1.0))
        if kind == "gaussian":
            var = self.get_float("simulation", "init_var", 1.0)
            if var < 0:
                raise ConfigError(f"{self.source}: [simulation] init_var: must be >= 0, got {var}")
            return InitialLaw("gaussian", mean, var)
        raise ConfigError(f"{self.source}: [simulation] init: unknown initial law {kind!r}; "
                          f"choose gaussian, uniform or point")

    def sim_config(self, seed=None):
        s = "simulation"
        if not self.has(s):
            raise ConfigError(f"{self.source}: missing [simulation] section")
        if seed is None:
            seed = self.get_int(s, "seed", 0)
        try:
            return SimConfig(
                N=self.get_int(s, "n", _REQUIRED),
                tau=self.get_float(s, "tau", _REQUIRED),
                T=self.get_float(s, "t", _REQUIRED),
                model=self.model(),
                p=self.get_int(s, "p", 2),
                integrator=self.get(s, "integrator", "rbm"),
                replicas=self.get_int(s, "replicas", 1),
                seed=int(seed),
                init=self.initial_law(),
                coupling=self.get(s, "coupling", "coupled"),
            )
        except ConfigError as exc:
            if str(exc).startswith(self.source):
                raise
            raise ConfigError(f"{self.source}: [simulation] {exc}") from None


_REQUIRED = object()


def load_config(path=None, overrides=(), text=None):
    """Read an INI file (or ``text``) and apply ``section.key=value`` overrides."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    source = str(path) if path is not None else "<config>"
    try:
        if text is not None:
            parser.read_string(text, source=source)
        else:
            with open(path) as fh:
                parser.read_file(fh, source=source)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        lhs, value = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        if not parser.has_section(section):
            parser.add_section(section)
        parser[section][key.strip().lower()] = value.strip()
    return Config(parser, source)

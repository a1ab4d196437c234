"""Experiment configuration: flat ``key = value`` files under ``[section]``
headers, a frozen dataclass with validated defaults, and the builders that
turn a configuration into metric, cutoff, and grid objects.

Serialization is canonical (fixed section and key order, shortest
round-trip float formatting), so equal configurations produce identical
text and the configuration hash is stable across runs.
"""

from __future__ import annotations

import configparser
import hashlib
import math
from dataclasses import dataclass, fields

from . import metrics
from .grids import CutoffSpec, RadialCutoff, ScalarGrid
from .metrics import MetricField

__all__ = [
    "ExperimentConfig",
    "config_parse",
    "config_serialize",
    "config_hash",
    "load_config",
    "build_metric",
    "build_cutoffs",
    "build_layout",
]

_BASE_SIDE = 2.2
_DXI = 2.0 * math.pi / (2.0 * _BASE_SIDE)

_METRIC_FAMILIES = ("euclidean", "gaussian_conformal", "constant_curvature",
                    "ck_conformal")
_FIELD_KINDS = ("gaussian", "zero", "disk")

# section -> key -> (attribute, type); the file keys stay short while the
# attribute names avoid clashing with dataclass machinery
_SCHEMA: dict[str, dict[str, tuple[str, type]]] = {
    "metric": {
        "family": ("family", str),
        "eps": ("eps", float),
        "k": ("k", int),
        "curvature": ("curvature", float),
        "center_x": ("center_x", float),
        "center_y": ("center_y", float),
    },
    "grid": {
        "dims": ("dims", int),
        "padding": ("padding", float),
    },
    "fan": {
        "n_theta": ("n_theta", int),
        "n_alpha": ("n_alpha", int),
    },
    "cutoffs": {
        "psi_inner": ("psi_inner", float),
        "psi_outer": ("psi_outer", float),
        "phi_inner": ("phi_inner", float),
        "phi_outer": ("phi_outer", float),
        "chi_inner": ("chi_inner", float),
        "chi_outer": ("chi_outer", float),
        "zeta_low": ("zeta_low", float),
        "zeta_high": ("zeta_high", float),
        "order": ("order", int),
    },
    "solver": {
        "max_iter": ("max_iter", int),
        "tol": ("tol", float),
    },
    "experiment": {
        "name": ("name", str),
        "outdir": ("outdir", str),
        "field": ("field_kind", str),
        "seed": ("seed", int),
        "workers": ("workers", int),
    },
}


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment, fully specified; every key has a working default."""

    family: str = "euclidean"
    eps: float = 0.2
    k: int = 10
    curvature: float = 1.0
    center_x: float = 0.3
    center_y: float = 0.0

    dims: int = 128
    padding: float = 2.0

    n_theta: int = 180
    n_alpha: int = 90

    psi_inner: float = 0.75
    psi_outer: float = 0.95
    phi_inner: float = 0.75
    phi_outer: float = 0.95
    chi_inner: float = 0.25
    chi_outer: float = 0.5
    zeta_low: float = 2.0 * _DXI
    zeta_high: float = 4.0 * _DXI
    order: int = 7

    max_iter: int = 50
    tol: float = 1e-3

    name: str = "experiment"
    outdir: str = "out"
    field_kind: str = "gaussian"
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.family not in _METRIC_FAMILIES:
            raise ValueError(
                f"unknown metric family '{self.family}'; valid families: "
                + ", ".join(_METRIC_FAMILIES))
        d = self.dims
        if d < 2 or (d & (d - 1)) != 0:
            raise ValueError(
                f"grid.dims must be a power of two for the FFT paths, "
                f"got {d}")
        if self.padding < 1.0:
            raise ValueError("grid.padding must be at least 1")
        if self.n_theta < 4 or self.n_alpha < 2:
            raise ValueError("fan resolution is too coarse to mean anything")
        for tag in ("psi", "phi", "chi"):
            r_in = getattr(self, f"{tag}_inner")
            r_out = getattr(self, f"{tag}_outer")
            if not 0.0 <= r_in < r_out:
                raise ValueError(
                    f"cutoffs.{tag} radii must be ordered r_in < r_out, "
                    f"got ({r_in}, {r_out})")
        for tag in ("psi", "phi"):
            if getattr(self, f"{tag}_outer") > 1.0:
                raise ValueError(
                    f"cutoffs.{tag}_outer must stay inside the unit domain")
        if not 0.0 < self.zeta_low < self.zeta_high:
            raise ValueError(
                "cutoffs.zeta radii must be ordered r_in < r_out and "
                "positive")
        if self.order < 1:
            raise ValueError("cutoffs.order must be a positive integer")
        if self.max_iter < 1:
            raise ValueError("solver.max_iter must be at least 1")
        if not self.tol > 0.0:
            raise ValueError("solver.tol must be positive")
        if self.field_kind not in _FIELD_KINDS:
            raise ValueError(
                f"unknown experiment field '{self.field_kind}'; valid "
                "kinds: " + ", ".join(_FIELD_KINDS))
        if self.seed < 0:
            raise ValueError("experiment.seed must be nonnegative")
        if self.workers < 1:
            raise ValueError("experiment.workers must be at least 1")
        if not self.name or not self.outdir:
            raise ValueError("experiment.name and experiment.outdir must "
                             "be nonempty")


def _format_value(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_serialize(cfg: ExperimentConfig) -> str:
    """Canonical text form; ``config_parse`` inverts it exactly."""
    lines: list[str] = []
    for section, keys in _SCHEMA.items():
        lines.append(f"[{section}]")
        for key, (attr, _) in keys.items():
            lines.append(f"{key} = {_format_value(getattr(cfg, attr))}")
        lines.append("")
    return "\n".join(lines)


def config_parse(text: str) -> ExperimentConfig:
    """Parse ``key = value`` lines under ``[section]`` headers.

    Unknown sections or keys are rejected with the list of valid names;
    missing keys fall back to the defaults of ExperimentConfig.
    """
    cp = configparser.ConfigParser(interpolation=None,
                                   inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.MissingSectionHeaderError as exc:
        raise ValueError(
            "configuration lines must sit under a [section] header "
            f"(line {exc.lineno})") from exc
    except configparser.Error as exc:
        raise ValueError(f"malformed configuration: {exc}") from exc

    kwargs: dict[str, object] = {}
    for section in cp.sections():
        if section not in _SCHEMA:
            raise ValueError(
                f"unknown section [{section}]; valid sections: "
                + ", ".join(_SCHEMA))
        keys = _SCHEMA[section]
        for key, raw in cp.items(section):
            if key not in keys:
                raise ValueError(
                    f"unknown key {section}.{key}; valid keys in "
                    f"[{section}]: " + ", ".join(keys))
            attr, typ = keys[key]
            try:
                kwargs[attr] = typ(raw)
            except ValueError as exc:
                kind = {int: "an integer", float: "a number"}.get(
                    typ, "a string")
                raise ValueError(
                    f"{section}.{key} expects {kind}, got '{raw}'") from exc
    return ExperimentConfig(**kwargs)


def config_hash(cfg: ExperimentConfig) -> str:
    """Short stable digest of the canonical serialization."""
    text = config_serialize(cfg)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return config_parse(fh.read())


def build_metric(cfg: ExperimentConfig) -> MetricField:
    if cfg.family == "euclidean":
        return metrics.euclidean()
    if cfg.family == "gaussian_conformal":
        return metrics.gaussian_conformal(cfg.eps)
    if cfg.family == "constant_curvature":
        return metrics.constant_curvature(cfg.curvature)
    return metrics.ck_conformal(cfg.k, cfg.eps,
                                center=(cfg.center_x, cfg.center_y))


def build_cutoffs(cfg: ExperimentConfig) -> CutoffSpec:
    return CutoffSpec(
        psi=RadialCutoff(cfg.psi_inner, cfg.psi_outer, cfg.order),
        phi=RadialCutoff(cfg.phi_inner, cfg.phi_outer, cfg.order),
        chi=RadialCutoff(cfg.chi_inner, cfg.chi_outer, cfg.order),
        zeta_lo=cfg.zeta_low,
        zeta_hi=cfg.zeta_high,
        order=cfg.order)


def build_layout(cfg: ExperimentConfig) -> ScalarGrid:
    return ScalarGrid.square(cfg.dims, side=_BASE_SIDE * cfg.padding)


def _check_schema() -> None:
    # import-time guard: every schema entry must name a real attribute, so
    # a schema edit cannot silently detach a key
    names = {f.name for f in fields(ExperimentConfig)}
    for keys in _SCHEMA.values():
        for attr, _ in keys.values():
            if attr not in names:
                raise AssertionError(f"schema names unknown attribute {attr}")


_check_schema()

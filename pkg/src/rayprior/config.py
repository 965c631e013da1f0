"""Run configuration files.

Grammar: one ``key = value`` per line; ``#`` starts a comment; blank lines are
ignored. Values are parsed as bool (``true``/``false``), int, float, a
comma-separated list of those, or otherwise a bare string. ``none`` maps to
``None``. Unknown keys are an error.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields

from .field import MODES, FieldConfig
from .scenes import PoseSampler
from .trainer import TrainSchedule


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    output_dir: str = "run"
    dataset: str | None = None  # existing transforms.json; generated when unset
    scene: str = "checker_sphere"  # or specular_sphere
    specular: float = 0.5  # Phong weight of the specular_sphere scene
    # cameras
    image_size: int = 64
    fov_deg: float = 40.0
    camera_radius: float = 4.0
    n_train: int = 60
    train_elev_min: float = 40.0
    train_elev_max: float = 90.0
    n_interp: int = 10
    n_extrap: int = 30
    extrap_elev_min: float = 0.0
    extrap_elev_max: float = 30.0
    # field
    field_mode: str = "atlas-capable"
    pos_freqs: int = 10
    dir_freqs: int = 4
    trunk_depth: int = 4
    trunk_width: int = 64
    feature_width: int = 64
    color_width: int = 32
    specular_depth: int = 2
    specular_width: int = 32
    bound_radius: float = 1.2
    # training
    n_iter_stage1: int = 15000
    n_iter_stage2: int = 15000
    batch_rays: int = 1024
    n_samples: int = 64
    p_rrc: float = 0.7
    p_ra: float = 0.5
    eta_deg: float = 30.0
    lambda_opacity: float = 0.1
    lr_start: float = 5e-4
    lr_end: float = 5e-5
    lr_stage2: float | None = None
    fg_fraction: float = 0.5
    rrc_per_iteration: bool = False
    ra_per_iteration: bool = False
    seed: int = 0
    # mesh / atlas
    mesh_resolution: int = 64
    iso_level: float | None = None
    # experiment
    variants: tuple = ("rrc+ra",)  # any of: rrc, ra, rrc+ra; baseline is always reported
    eta_sweep: tuple = ()  # degrees; adds one rrc+ra row per value

    def __post_init__(self):
        for name in ("variants", "eta_sweep"):
            v = getattr(self, name)
            if isinstance(v, (str, int, float)):
                v = (v,)
            setattr(self, name, tuple(v) if v else ())
        for v in self.variants:
            if v not in ("rrc", "ra", "rrc+ra", "none"):
                raise ConfigError(f"unknown variant {v!r}")
        if self.scene not in ("checker_sphere", "specular_sphere"):
            raise ConfigError(f"unknown scene {self.scene!r}")
        if self.field_mode not in MODES:
            raise ConfigError(f"field_mode must be one of {', '.join(MODES)}")
        try:
            self.schedule()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def pose_sampler(self):
        return PoseSampler(
            image_size=self.image_size, fov_deg=self.fov_deg, radius=self.camera_radius,
            n_train=self.n_train, train_elevation=(self.train_elev_min, self.train_elev_max),
            n_interp=self.n_interp, n_extrap=self.n_extrap,
            extrap_elevation=(self.extrap_elev_min, self.extrap_elev_max), seed=self.seed,
        )

    def field_config(self):
        return FieldConfig(
            mode=self.field_mode, pos_freqs=self.pos_freqs, dir_freqs=self.dir_freqs,
            trunk_depth=self.trunk_depth, trunk_width=self.trunk_width,
            feature_width=self.feature_width, color_width=self.color_width,
            specular_depth=self.specular_depth, specular_width=self.specular_width,
            bound_radius=self.bound_radius,
        )

    def schedule(self, **overrides):
        keys = {f.name for f in fields(TrainSchedule)}
        kw = {k: v for k, v in asdict(self).items() if k in keys}
        kw.update(overrides)
        return TrainSchedule(**kw)

    def digest(self):
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True, default=str).encode()).hexdigest()[:16]


def parse_value(text):
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null", ""):
        return None
    if "," in text:
        return tuple(parse_value(t) for t in text.split(",") if t.strip())
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def parse_assignments(lines, source="<config>"):
    out = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = parse_value(value)
    return out


def _coerce(name, value):
    types = {f.name: f.type for f in fields(RunConfig)}
    t = types[name]
    if value is None:
        return None
    if t.startswith("tuple"):
        return value if isinstance(value, tuple) else (value,)
    if t.startswith("bool"):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected true/false, got {value!r}")
        return value
    if t.startswith("int"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return value
    if t.startswith("float"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    return str(value)


def make_config(values: dict) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    try:
        return RunConfig(**{k: _coerce(k, v) for k, v in values.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path=None, overrides=()):
    """Read a config file (optional) and apply ``key=value`` overrides."""
    values = {}
    if path is not None:
        try:
            with open(path) as fh:
                values = parse_assignments(fh, source=str(path))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    values.update(parse_assignments(overrides, source="--set"))
    return make_config(values)


def dump_config(cfg: RunConfig, path):
    with open(path, "w") as fh:
        for f in fields(RunConfig):
            v = getattr(cfg, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v) + ("," if len(v) == 1 else "")
            elif isinstance(v, bool):
                v = str(v).lower()
            elif v is None:
                v = "none"
            fh.write(f"{f.name} = {v}\n")

"""The radiance field: a density trunk ``x -> (sigma, f)`` and color heads ``(d, f) -> c``."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .nn import (
    encoding_width,
    init_mlp,
    mlp_backward,
    mlp_forward,
    positional_encoding,
)

MODES = ("standard", "no-direction", "atlas-capable", "deferred")


@dataclass
class FieldConfig:
    mode: str = "atlas-capable"
    pos_freqs: int = 10
    dir_freqs: int = 4
    trunk_depth: int = 4
    trunk_width: int = 64
    feature_width: int = 64
    color_width: int = 32
    specular_depth: int = 2
    specular_width: int = 32
    bound_radius: float = 1.2
    dtype: str = "float32"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"field mode must be one of {MODES}, got {self.mode!r}")

    @property
    def uses_direction(self):
        return self.mode != "no-direction"

    def to_dict(self):
        return asdict(self)


def _softplus(z):
    return np.logaddexp(0, z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class RadianceField:
    """Parameters plus evaluation for one radiance field.

    ``params`` maps a head name (``trunk``, ``color`` or ``diffuse``/``specular``)
    to its :class:`MlpParams`. The trunk's last layer emits one raw density
    column followed by the geometry feature.
    """

    def __init__(self, config: FieldConfig | None = None, seed=0, params=None):
        self.config = config or FieldConfig()
        if params is None:
            params = self._init_params(np.random.default_rng(seed))
        self.params = params

    def _init_params(self, rng):
        c = self.config
        dt = np.dtype(c.dtype)
        pos_w = encoding_width(3, c.pos_freqs)
        trunk = init_mlp([pos_w] + [c.trunk_width] * c.trunk_depth + [1 + c.feature_width], rng, dtype=dt)
        # zero density head => sigma = softplus(0) = ln 2 everywhere at init
        trunk.weights[-1][:, 0] = 0
        trunk.biases[-1][0] = 0
        params = {"trunk": trunk}
        dir_w = encoding_width(3, c.dir_freqs)
        if c.mode == "deferred":
            params["diffuse"] = init_mlp([c.feature_width, c.color_width, 3], rng, output="sigmoid", dtype=dt)
            spec = init_mlp(
                [c.feature_width + dir_w] + [c.specular_width] * c.specular_depth + [3], rng, dtype=dt
            )
            # specular starts at zero so the combined color equals the diffuse color
            spec.weights[-1][:] = 0
            params["specular"] = spec
        else:
            in_w = c.feature_width + (dir_w if c.uses_direction else 0)
            params["color"] = init_mlp([in_w, c.color_width, 3], rng, output="sigmoid", dtype=dt)
        return params

    # ------------------------------------------------------------------
    # flat parameter view for the optimizer / checkpoints

    def flat_params(self):
        return {f"{head}.{name}": a for head, p in self.params.items() for name, a in p.arrays()}

    def flat_grads(self, head_grads):
        out = {}
        for head, (dWs, dbs) in head_grads.items():
            for i, (dW, db) in enumerate(zip(dWs, dbs)):
                out[f"{head}.W{i}"] = dW
                out[f"{head}.b{i}"] = db
        return out

    def bump_version(self):
        for p in self.params.values():
            p.version += 1

    def load_flat(self, tensors):
        for head, p in self.params.items():
            for i in range(len(p.weights)):
                p.weights[i][...] = tensors[f"{head}.W{i}"]
                p.biases[i][...] = tensors[f"{head}.b{i}"]
        self.bump_version()

    def copy(self):
        return RadianceField(self.config, params={k: p.copy() for k, p in self.params.items()})

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    # ------------------------------------------------------------------
    # forward / backward with caches (used by the renderer and trainer)

    def _clamp_points(self, x):
        r = self.config.bound_radius
        return np.clip(x, -r, r)

    def sigma_forward(self, x):
        x = self._clamp_points(np.asarray(x, dtype=np.float64)).astype(self.dtype)
        enc = positional_encoding(x, self.config.pos_freqs)
        out, cache = mlp_forward(self.params["trunk"], enc)
        raw = out[:, 0]
        sigma = _softplus(raw)
        feat = out[:, 1:]
        return sigma, feat, (cache, raw)

    def sigma_backward(self, cache, d_sigma, d_feat):
        mlp_cache, raw = cache
        g = np.empty((raw.shape[0], 1 + self.config.feature_width), dtype=self.dtype)
        g[:, 0] = d_sigma * _sigmoid(raw)
        if d_feat is None:
            g[:, 1:] = 0
        else:
            g[:, 1:] = d_feat
        grads, _ = mlp_backward(self.params["trunk"], mlp_cache, g, need_input_grad=False)
        return {"trunk": grads}

    def _dir_encoding(self, d):
        return positional_encoding(np.asarray(d, dtype=self.dtype), self.config.dir_freqs)

    def color_forward(self, d, feat, diffuse_only=None):
        """Colors for features ``feat`` seen along unit directions ``d``.

        In deferred mode ``diffuse_only`` (bool per row) drops the specular term
        for those rows; elsewhere it is ignored.
        """
        c = self.config
        feat = np.asarray(feat, dtype=self.dtype)
        if c.mode == "deferred":
            diffuse, dcache = mlp_forward(self.params["diffuse"], feat)
            spec_in = np.concatenate([feat, self._dir_encoding(d)], axis=1)
            spec, scache = mlp_forward(self.params["specular"], spec_in)
            keep = np.ones(len(feat), dtype=bool) if diffuse_only is None else ~np.asarray(diffuse_only)
            spec = spec * keep[:, None]
            raw = diffuse + spec
            color = np.clip(raw, 0.0, 1.0)
            return color, ("deferred", dcache, scache, keep, raw)
        if c.uses_direction:
            inp = np.concatenate([feat, self._dir_encoding(d)], axis=1)
        else:
            inp = feat
        color, cache = mlp_forward(self.params["color"], inp)
        return color, ("plain", cache)

    def color_backward(self, cache, d_color):
        """Returns ``(head_grads, d_feat)``."""
        fw = self.config.feature_width
        if cache[0] == "deferred":
            _, dcache, scache, keep, raw = cache
            g = d_color * ((raw > 0) & (raw < 1))
            dgrads, d_feat = mlp_backward(self.params["diffuse"], dcache, g)
            gs = g * keep[:, None]
            sgrads, d_in = mlp_backward(self.params["specular"], scache, gs)
            return {"diffuse": dgrads, "specular": sgrads}, d_feat + d_in[:, :fw]
        _, mcache = cache
        grads, d_in = mlp_backward(self.params["color"], mcache, d_color)
        return {"color": grads}, d_in[:, :fw]

    # ------------------------------------------------------------------
    # pure evaluation

    def eval_sigma(self, x):
        """Density and geometry feature at points ``x`` (N, 3). No direction input exists."""
        sigma, feat, _ = self.sigma_forward(np.atleast_2d(x))
        return sigma, feat

    def eval_color(self, d, feat):
        d = np.atleast_2d(np.asarray(d, dtype=np.float64))
        if self.config.uses_direction:
            _check_unit(d)
        color, _ = self.color_forward(d, feat)
        return color

    def eval_deferred(self, d, feat):
        """``(diffuse, specular, combined)`` colors; deferred mode only."""
        if self.config.mode != "deferred":
            raise ValueError("eval_deferred requires a field in deferred mode")
        d = np.atleast_2d(np.asarray(d, dtype=np.float64))
        _check_unit(d)
        feat = np.asarray(feat, dtype=self.dtype)
        diffuse, _ = mlp_forward(self.params["diffuse"], feat)
        spec_in = np.concatenate([feat, self._dir_encoding(d)], axis=1)
        specular, _ = mlp_forward(self.params["specular"], spec_in)
        return diffuse, specular, np.clip(diffuse + specular, 0.0, 1.0)


def _check_unit(d):
    n = np.linalg.norm(d, axis=-1)
    if np.any(np.abs(n - 1.0) > 1e-6):
        raise ValueError("view directions must be unit length")

"""Model configuration (variants, dims, timing) and parameter construction."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import esca as esca_mod
from . import wmca as wmca_mod
from .errors import ConfigError
from .memory import (GN_GROUPS, PATCH, RESIDUAL_LAYERS, MemoryState,
                     init_gdown_params)
from .params import ParameterStore

# dims / heads per published variant; tiny versions are for tests and the
# training demo
VARIANTS = {
    "b1": ((128,), (4,)),
    "l1": ((256,), (8,)),
    "b3": ((128, 256, 256), (4, 8, 8)),
    "l3": ((256, 256, 256), (8, 8, 8)),
    "b1-tiny": ((16,), (2,)),
    "b3-tiny": ((16, 16, 16), (2, 2, 2)),
}

DEFAULT_STRIDES = (4, 8, 16)
DEFAULT_CYCLES = (1, 3, 9)

_DTYPES = {"f64": np.float64, "f32": np.float32}


@dataclass(frozen=True)
class ModelConfig:
    variant: str
    levels: int
    dims: tuple[int, ...]
    heads: tuple[int, ...]
    strides: tuple[int, ...]
    cycles: tuple[int, ...]
    sensor_width: int
    sensor_height: int
    dt_us: int = 5000
    image_cadence_us: int = 45_000
    down_write: bool = True
    event_gate: bool = True
    fusion: bool = False
    seed: int = 0
    precision: str = "f64"

    def __post_init__(self):
        L = self.levels
        if not 1 <= L <= 3:
            raise ConfigError(f"levels must be 1..3, got {L}")
        for name, seq in (("dims", self.dims), ("heads", self.heads),
                          ("strides", self.strides), ("cycles", self.cycles)):
            if len(seq) != L:
                raise ConfigError(f"{name} must have {L} entries, got {seq}")
        if self.cycles[0] != 1:
            raise ConfigError("level-1 cycle must be 1 step")
        for lo, hi in zip(self.cycles, self.cycles[1:]):
            if hi % lo:
                raise ConfigError(f"cycle {hi} is not a multiple of {lo}")
        for lo, hi in zip(self.strides, self.strides[1:]):
            if hi != 2 * lo:
                raise ConfigError(f"strides must double per level, got {self.strides}")
        for d, h in zip(self.dims, self.heads):
            if d % 4 or d % h or d % GN_GROUPS:
                raise ConfigError(f"dim {d} must divide by 4, by {h} heads and by {GN_GROUPS}")
        if self.dt_us <= 0:
            raise ConfigError("dt_us must be positive")
        if self.image_cadence_us % self.dt_us:
            raise ConfigError("image cadence must be a multiple of dt_us")
        if self.fusion and self.levels < 2:
            raise ConfigError("sensor fusion needs a multi-level hierarchy")
        if self.fusion and (self.sensor_width % PATCH or self.sensor_height % PATCH):
            raise ConfigError(f"fusion needs sensor dims divisible by {PATCH}")
        if self.precision not in _DTYPES:
            raise ConfigError(f"precision must be one of {sorted(_DTYPES)}")

    @property
    def dtype(self):
        return _DTYPES[self.precision]

    @property
    def cadence_steps(self) -> int:
        return self.image_cadence_us // self.dt_us

    def grid_dims(self, level: int) -> tuple[int, int]:
        s = self.strides[level - 1]
        return (-(-self.sensor_height // s), -(-self.sensor_width // s))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        if "variant" in data and "dims" not in data:
            base = variant_config(data["variant"], data.get("sensor_width", 64),
                                  data.get("sensor_height", 64))
            known = {k: v for k, v in data.items() if k in asdict(base)}
            merged = {**asdict(base), **known}
        else:
            merged = dict(data)
        for key in ("dims", "heads", "strides", "cycles"):
            if key in merged:
                merged[key] = tuple(merged[key])
        return cls(**merged)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))


def variant_config(variant: str, sensor_width: int, sensor_height: int,
                   **overrides) -> ModelConfig:
    try:
        dims, heads = VARIANTS[variant]
    except KeyError:
        raise ConfigError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}") from None
    levels = len(dims)
    cfg = ModelConfig(variant=variant, levels=levels, dims=dims, heads=heads,
                      strides=DEFAULT_STRIDES[:levels], cycles=DEFAULT_CYCLES[:levels],
                      sensor_width=sensor_width, sensor_height=sensor_height)
    return replace(cfg, **overrides) if overrides else cfg


@dataclass
class Model:
    config: ModelConfig
    store: ParameterStore = field(repr=False)

    def initial_states(self) -> dict[int, MemoryState]:
        states = {}
        for l in range(1, self.config.levels + 1):
            hc, wc = self.config.grid_dims(l)
            v = self.store[f"mem{l}.init.v"]
            grid = np.broadcast_to(v, (hc, wc, v.shape[0])).copy()
            states[l] = MemoryState(l, grid, self.config.strides[l - 1],
                                    self.config.cycles[l - 1])
        return states


def build_model(config: ModelConfig, init_scale: float = 0.02) -> Model:
    """Create every parameter the configuration needs, seeded and in
    canonical order."""
    rng = np.random.default_rng(config.seed)
    store = ParameterStore()
    dt = config.dtype
    dims, heads = config.dims, config.heads

    esca_mod.init_esca_params(store, dims[0], heads[0], rng, init_scale, dtype=dt)
    for l in range(1, config.levels + 1):
        d = dims[l - 1]
        store.add(f"mem{l}.init.v", np.zeros(d, dt))
        if l >= 2:
            init_gdown_params(store, f"mem{l}.gdown", dims[l - 2], d, rng, init_scale, dt)
            wmca_mod.init_wmca_params(store, f"wmca.up{l}", d, d, heads[l - 1], rng,
                                      scale=init_scale, dtype=dt)
        store.add(f"mem{l}.update.ln.g", np.ones(d, dt))
        store.add(f"mem{l}.update.ln.b", np.zeros(d, dt))
        for i in range(1, RESIDUAL_LAYERS[l - 1] + 1):
            pre = f"mem{l}.update.block{i}"
            store.add(f"{pre}.gn1.g", np.ones(d, dt))
            store.add(f"{pre}.gn1.b", np.zeros(d, dt))
            store.add(f"{pre}.conv1.w", (rng.normal(size=(3, 3, d, d)) * init_scale).astype(dt))
            store.add(f"{pre}.conv1.b", np.zeros(d, dt))
            store.add(f"{pre}.gn2.g", np.ones(d, dt))
            store.add(f"{pre}.gn2.b", np.zeros(d, dt))
            store.add(f"{pre}.conv2.w", (rng.normal(size=(3, 3, d, d)) * init_scale).astype(dt))
            store.add(f"{pre}.conv2.b", np.zeros(d, dt))
        store.add(f"mem{l}.readout.ln.g", np.ones(d, dt))
        store.add(f"mem{l}.readout.ln.b", np.zeros(d, dt))
        store.add(f"mem{l}.readout.conv.w", (rng.normal(size=(1, 1, d, d)) * init_scale).astype(dt))
        store.add(f"mem{l}.readout.conv.b", np.zeros(d, dt))
        store.add(f"mem{l}.readout.gn.g", np.ones(d, dt))
        store.add(f"mem{l}.readout.gn.b", np.zeros(d, dt))

    # down-write pairs: into level l from l+1 (created even when the
    # down-write toggle is off, so ablations share one checkpoint layout)
    for lo in range(1, config.levels):
        hi = lo + 1
        init_gdown_params(store, f"mem{lo}.down.gdown", dims[lo - 1], dims[hi - 1],
                          rng, init_scale, dt)
        wmca_mod.init_wmca_params(store, f"wmca.down{lo}", dims[hi - 1], dims[hi - 1],
                                  heads[hi - 1], rng, d_out=dims[lo - 1],
                                  scale=init_scale, dtype=dt)

    if config.fusion:
        top = config.levels
        d = dims[top - 1]
        store.add(f"mem{top}.image.embed.w",
                  (rng.normal(size=(PATCH * PATCH * 3, d)) * init_scale).astype(dt))
        store.add(f"mem{top}.image.embed.b", np.zeros(d, dt))
        wmca_mod.init_wmca_params(store, f"wmca.image{top}", d, d, heads[top - 1], rng,
                                  scale=init_scale, dtype=dt)

    return Model(config, store)

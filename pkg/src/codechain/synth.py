"""Synthetic multivariate corpora with class-specific transition regimes.

Each channel of an instance is a Markov chain over a small bank of
patch primitives; the class determines the chain's transition regime.
Target-domain shift is layered on top: per-channel affine amplitude
scaling, additive noise, and an optional mixing of the transition
regimes toward uniform. Generation is fully deterministic given the
config (a single Generator consumed in a fixed order), and the shift
step draws nothing from the stream, so two configs differing only in
scale/offset emit identical chains and identical pre-shift values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset import DomainDataset, TimeSeriesInstance
from .errors import ConfigError, DataError

PRIMITIVES = ("up_ramp", "down_ramp", "flat", "sine")


def _per_channel(value, n_channels: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = np.full(n_channels, float(arr))
    if arr.shape != (n_channels,):
        raise ConfigError(f"{name} must be a scalar or a length-{n_channels} vector")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{name} must be finite")
    return arr


@dataclass(frozen=True)
class SynthConfig:
    """Generator parameters.

    class_regimes, when given, is a (n_classes, n_channels, P, P)
    row-stochastic array over the first n_primitives primitives of the
    bank; when None, a default separable regime set is built. Shift
    fields apply to the target domain only. base_noise and the jitter
    magnitudes add within-primitive variability in both domains (pure
    primitives would collapse to a handful of latent points under
    per-patch standardization).
    """

    n_classes: int = 4
    n_channels: int = 3
    length: int = 128
    patch_length: int = 8
    n_primitives: int = 4
    sine_freq: float = 1.5
    regime_stickiness: float = 0.8
    class_regimes: np.ndarray | None = None
    n_source: int = 200
    n_target: int = 200
    class_probs_source: tuple | None = None
    class_probs_target: tuple | None = None
    shift_scale: float | tuple = 1.0
    shift_offset: float | tuple = 0.0
    noise: float | tuple = 0.0
    target_regime_mix: float | tuple = 0.0
    base_noise: float = 0.05
    curvature_jitter: float = 0.35
    phase_jitter: float = math.pi
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.n_channels < 1:
            raise ConfigError("n_channels must be >= 1")
        if self.patch_length < 2:
            raise ConfigError("patch_length must be >= 2")
        if self.length < self.patch_length or self.length % self.patch_length != 0:
            raise ConfigError("length must be a positive multiple of patch_length")
        if self.length // self.patch_length < 2:
            raise ConfigError("need at least 2 patches per series")
        if not 2 <= self.n_primitives <= len(PRIMITIVES):
            raise ConfigError(f"n_primitives must lie in [2, {len(PRIMITIVES)}]")
        if not 0.0 < self.regime_stickiness <= 1.0:
            raise ConfigError("regime_stickiness must lie in (0, 1]")
        if self.n_source < 1 or self.n_target < 1:
            raise ConfigError("n_source and n_target must be >= 1")
        if not self.sine_freq > 0.0:
            raise ConfigError("sine_freq must be > 0")
        for name in ("base_noise", "curvature_jitter", "phase_jitter"):
            if getattr(self, name) < 0.0:
                raise ConfigError(f"{name} must be >= 0")
        mix = _per_channel(self.target_regime_mix, self.n_channels, "target_regime_mix")
        if np.any(mix < 0.0) or np.any(mix > 1.0):
            raise ConfigError("target_regime_mix must lie in [0, 1]")
        if np.any(_per_channel(self.shift_scale, self.n_channels, "shift_scale") <= 0.0):
            raise ConfigError("shift_scale must be > 0")
        if np.any(_per_channel(self.noise, self.n_channels, "noise") < 0.0):
            raise ConfigError("noise must be >= 0")
        self.class_probs("source")
        self.class_probs("target")
        self.resolved_regimes()

    def resolved_regimes(self) -> np.ndarray:
        if self.class_regimes is None:
            return make_class_regimes(
                self.n_classes, self.n_channels, self.n_primitives, self.regime_stickiness
            )
        arr = np.asarray(self.class_regimes, dtype=np.float64)
        shape = (self.n_classes, self.n_channels, self.n_primitives, self.n_primitives)
        if arr.shape != shape:
            raise ConfigError(f"class_regimes must have shape {shape}, got {arr.shape}")
        if np.any(arr < 0.0) or np.max(np.abs(arr.sum(axis=-1) - 1.0)) > 1e-9:
            raise ConfigError("class_regimes rows must be non-negative and sum to 1")
        return arr

    def class_probs(self, which: str) -> np.ndarray:
        raw = self.class_probs_source if which == "source" else self.class_probs_target
        if raw is None:
            return np.full(self.n_classes, 1.0 / self.n_classes)
        arr = np.asarray(raw, dtype=np.float64)
        if arr.shape != (self.n_classes,) or np.any(arr < 0.0) or abs(arr.sum() - 1.0) > 1e-9:
            raise ConfigError(f"class_probs_{which} must be a length-{self.n_classes} distribution")
        return arr

    def echo(self) -> dict:
        regimes = self.class_regimes
        return {
            "n_classes": self.n_classes,
            "n_channels": self.n_channels,
            "length": self.length,
            "patch_length": self.patch_length,
            "n_primitives": self.n_primitives,
            "sine_freq": self.sine_freq,
            "regime_stickiness": self.regime_stickiness,
            "class_regimes": None if regimes is None else np.asarray(regimes).tolist(),
            "n_source": self.n_source,
            "n_target": self.n_target,
            "class_probs_source": None
            if self.class_probs_source is None
            else list(np.asarray(self.class_probs_source, dtype=np.float64)),
            "class_probs_target": None
            if self.class_probs_target is None
            else list(np.asarray(self.class_probs_target, dtype=np.float64)),
            "shift_scale": np.asarray(self.shift_scale, dtype=np.float64).tolist(),
            "shift_offset": np.asarray(self.shift_offset, dtype=np.float64).tolist(),
            "noise": np.asarray(self.noise, dtype=np.float64).tolist(),
            "target_regime_mix": np.asarray(self.target_regime_mix, dtype=np.float64).tolist(),
            "base_noise": self.base_noise,
            "curvature_jitter": self.curvature_jitter,
            "phase_jitter": self.phase_jitter,
            "seed": self.seed,
        }


def make_class_regimes(
    n_classes: int, n_channels: int, n_primitives: int, stickiness: float = 0.8
) -> np.ndarray:
    """Separable default regimes: class k on channel d favors the
    transition i -> (i + 1 + k + d) mod P with the given stickiness, the
    rest of each row is uniform."""
    p = n_primitives
    off = (1.0 - stickiness) / (p - 1)
    out = np.full((n_classes, n_channels, p, p), off)
    for k in range(n_classes):
        for d in range(n_channels):
            for i in range(p):
                out[k, d, i, (i + 1 + k + d) % p] = stickiness
    return out


def _class_counts(probs: np.ndarray, n: int) -> np.ndarray:
    """Largest-remainder allocation of n instances to classes."""
    raw = probs * n
    counts = np.floor(raw).astype(np.int64)
    short = n - int(counts.sum())
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def _emit_patch(rng, prim: int, cfg: SynthConfig) -> np.ndarray:
    m = cfg.patch_length
    t = np.linspace(-1.0, 1.0, m)
    if prim == 0:
        x = t + rng.uniform(-cfg.curvature_jitter, cfg.curvature_jitter) * t * t
    elif prim == 1:
        x = -(t + rng.uniform(-cfg.curvature_jitter, cfg.curvature_jitter) * t * t)
    elif prim == 2:
        x = np.zeros(m)
    elif prim == 3:
        phase = rng.uniform(-cfg.phase_jitter, cfg.phase_jitter)
        x = np.sin(2.0 * math.pi * cfg.sine_freq * (t + 1.0) / 2.0 + phase)
    else:
        raise ConfigError(f"unknown primitive index {prim}")
    return x + cfg.base_noise * rng.standard_normal(m)


def _emit_series(rng, regimes_kd: np.ndarray, cfg: SynthConfig) -> np.ndarray:
    """(n_channels, length) raw values for one instance of one class."""
    n_patches = cfg.length // cfg.patch_length
    p = cfg.n_primitives
    out = np.empty((cfg.n_channels, cfg.length))
    for d in range(cfg.n_channels):
        state = int(rng.integers(p))
        row = []
        for _ in range(n_patches):
            row.append(_emit_patch(rng, state, cfg))
            state = int(rng.choice(p, p=regimes_kd[d, state]))
        out[d] = np.concatenate(row)
    return out


def generate(cfg: SynthConfig) -> tuple[DomainDataset, DomainDataset]:
    """Build (source, target) corpora.

    Both datasets carry labels; the target's are meant for sealed
    evaluation only and are stripped before a target corpus is written
    for labeling.
    """
    regimes = cfg.resolved_regimes()
    mix = _per_channel(cfg.target_regime_mix, cfg.n_channels, "target_regime_mix")
    scale = _per_channel(cfg.shift_scale, cfg.n_channels, "shift_scale")
    offset = _per_channel(cfg.shift_offset, cfg.n_channels, "shift_offset")
    noise = _per_channel(cfg.noise, cfg.n_channels, "noise")

    uniform = 1.0 / cfg.n_primitives
    regimes_trg = (1.0 - mix[None, :, None, None]) * regimes + mix[None, :, None, None] * uniform

    rng = np.random.default_rng(cfg.seed)

    def draw_labels(which: str, n: int) -> np.ndarray:
        counts = _class_counts(cfg.class_probs(which), n)
        labels = np.repeat(np.arange(cfg.n_classes), counts)
        return labels[rng.permutation(n)]

    src_labels = draw_labels("source", cfg.n_source)
    src_instances = [
        TimeSeriesInstance(
            id=f"src-{i:04d}",
            values=_emit_series(rng, regimes[int(y)], cfg),
            label=int(y),
        )
        for i, y in enumerate(src_labels)
    ]

    trg_labels = draw_labels("target", cfg.n_target)
    trg_instances = []
    for i, y in enumerate(trg_labels):
        values = _emit_series(rng, regimes_trg[int(y)], cfg)
        values = scale[:, None] * values + offset[:, None]
        values = values + noise[:, None] * rng.standard_normal(values.shape)
        trg_instances.append(
            TimeSeriesInstance(id=f"trg-{i:04d}", values=values, label=int(y))
        )

    source = DomainDataset(
        instances=tuple(src_instances),
        n_channels=cfg.n_channels,
        length=cfg.length,
        n_classes=cfg.n_classes,
        role="source",
    )
    target = DomainDataset(
        instances=tuple(trg_instances),
        n_channels=cfg.n_channels,
        length=cfg.length,
        n_classes=cfg.n_classes,
        role="target",
    )
    return source, target


def inject_channel_noise(
    dataset: DomainDataset, channel: int, magnitude: float, seed: int
) -> DomainDataset:
    """Additive Gaussian noise on one channel, other channels untouched.

    The noise draw depends only on (seed, instance order, length), so
    the same seed at two magnitudes yields exactly scaled noise.
    """
    if not 0 <= channel < dataset.n_channels:
        raise DataError(f"channel {channel} out of range [0, {dataset.n_channels})")
    if magnitude < 0.0:
        raise ConfigError("magnitude must be >= 0")
    rng = np.random.default_rng(seed)
    out = []
    for inst in dataset:
        eta = rng.standard_normal(dataset.length)
        values = inst.values.copy()
        if magnitude > 0.0:
            values[channel] = values[channel] + magnitude * eta
        out.append(TimeSeriesInstance(id=inst.id, values=values, label=inst.label))
    return DomainDataset(
        instances=tuple(out),
        n_channels=dataset.n_channels,
        length=dataset.length,
        n_classes=dataset.n_classes,
        role=dataset.role,
    )

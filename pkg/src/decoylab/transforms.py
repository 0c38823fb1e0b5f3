"""Random image transforms with exact backward passes.

Each transform clamps its output to [0, 1]; the backward pass uses the
zero-outside-range subgradient for that clamp.  All sampling and application
is vectorized over a batch of images; the single-image functions wrap the
batch code with a batch of one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

KINDS = ("flip-lr", "brightness", "crop-resize", "gaussian-noise")


@dataclass(frozen=True)
class TransformSpec:
    kind: str
    max_shift: float = 0.0
    crop: int = 0
    noise_mean: float = 0.0
    noise_std: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}")
        if self.max_shift < 0:
            raise ValueError("brightness max shift must be >= 0")
        if self.noise_std < 0:
            raise ValueError("noise sigma must be >= 0")
        if self.kind == "crop-resize" and self.crop < 1:
            raise ValueError("crop size must be >= 1")


@dataclass(frozen=True, eq=False)
class SampledTransform:
    """Concrete parameters for a batch of images (leading axis = batch)."""

    spec: TransformSpec
    flip: np.ndarray | None = None
    shift: np.ndarray | None = None
    origin: np.ndarray | None = None  # (batch, 2) as (row, col)
    noise: np.ndarray | None = None


def eot_preset(side: int, noise_std: float = 0.5) -> list[TransformSpec]:
    """Default EOT chain; the 150-of-160 crop is kept as a ratio of ``side``."""
    crop = max(1, int(round(side * 150 / 160)))
    return [
        TransformSpec("flip-lr"),
        TransformSpec("brightness", max_shift=0.25),
        TransformSpec("crop-resize", crop=crop),
        TransformSpec("gaussian-noise", noise_mean=0.0, noise_std=noise_std),
    ]


PRESETS = {"eot-appendix-c": eot_preset, "none": lambda side, **_: []}


def resolve_preset(name: str, side: int, noise_std: float = 0.5) -> list[TransformSpec]:
    if name not in PRESETS:
        raise ValueError(f"unknown transform preset {name!r}")
    return PRESETS[name](side, noise_std=noise_std)


def parse_spec(line: str) -> TransformSpec:
    """Parse ``kind=brightness max_shift=0.1`` style key=value text."""
    fields = {}
    for token in line.replace(",", " ").split():
        key, sep, value = token.partition("=")
        if not sep:
            raise ValueError(f"expected key=value, got {token!r}")
        fields[key.strip().replace("-", "_")] = value.strip()
    if "kind" not in fields:
        raise ValueError("transform spec needs kind=")
    kind = fields.pop("kind")
    conv = {"max_shift": float, "crop": int, "noise_mean": float, "noise_std": float}
    kwargs = {}
    for k, v in fields.items():
        if k not in conv:
            raise ValueError(f"unknown transform parameter {k!r}")
        kwargs[k] = conv[k](v)
    return TransformSpec(kind, **kwargs)


def _resize_matrix(out_size: int, in_size: int) -> np.ndarray:
    """Bilinear interpolation weights with aligned corners, shape (out, in)."""
    m = np.zeros((out_size, in_size))
    if in_size == 1 or out_size == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(out_size) * (in_size - 1) / (out_size - 1)
    lo = np.minimum(np.floor(pos).astype(int), in_size - 2)
    frac = pos - lo
    rows = np.arange(out_size)
    m[rows, lo] += 1.0 - frac
    m[rows, lo + 1] += frac
    return m


def sample_batch(spec: TransformSpec, rng: np.random.Generator, n: int, image_shape) -> SampledTransform:
    h, w, c = image_shape
    if spec.kind == "flip-lr":
        return SampledTransform(spec, flip=rng.random(n) < 0.5)
    if spec.kind == "brightness":
        return SampledTransform(spec, shift=rng.uniform(-spec.max_shift, spec.max_shift, n))
    if spec.kind == "crop-resize":
        if spec.crop > min(h, w):
            raise ValueError(f"crop {spec.crop} larger than image {h}x{w}")
        oy = rng.integers(0, h - spec.crop + 1, n)
        ox = rng.integers(0, w - spec.crop + 1, n)
        return SampledTransform(spec, origin=np.stack([oy, ox], axis=1))
    if spec.noise_std == 0:
        noise = np.full((n, h, w, c), spec.noise_mean)
    else:
        noise = rng.normal(spec.noise_mean, spec.noise_std, (n, h, w, c))
    return SampledTransform(spec, noise=noise)


def sample(spec: TransformSpec, rng: np.random.Generator, image_shape) -> SampledTransform:
    return sample_batch(spec, rng, 1, image_shape)


def _crops(t: SampledTransform, xs: np.ndarray) -> np.ndarray:
    c = t.spec.crop
    windows = sliding_window_view(xs, (c, c), axis=(1, 2))  # (n, h-c+1, w-c+1, ch, c, c)
    return windows[np.arange(len(xs)), t.origin[:, 0], t.origin[:, 1]]  # (n, ch, c, c)


def _resize(crops: np.ndarray, rh: np.ndarray, rw: np.ndarray) -> np.ndarray:
    # (n, ch, a, b) -> (n, h, w, ch) as two large matrix products
    tmp = np.tensordot(crops, rw, axes=([3], [1]))  # (n, ch, a, w)
    out = np.tensordot(tmp, rh, axes=([2], [1]))  # (n, ch, w, h)
    return out.transpose(0, 3, 2, 1)


def _raw_apply(t: SampledTransform, xs: np.ndarray) -> np.ndarray:
    kind = t.spec.kind
    if kind == "flip-lr":
        return np.where(t.flip[:, None, None, None], xs[:, :, ::-1, :], xs)
    if kind == "brightness":
        return xs + t.shift[:, None, None, None]
    if kind == "gaussian-noise":
        return xs + t.noise
    n, h, w, _ = xs.shape
    if t.spec.crop > min(h, w):
        raise ValueError(f"crop {t.spec.crop} larger than image {h}x{w}")
    return _resize(_crops(t, xs), _resize_matrix(h, t.spec.crop), _resize_matrix(w, t.spec.crop))


def apply_batch(t: SampledTransform, xs: np.ndarray) -> np.ndarray:
    return np.clip(_raw_apply(t, np.asarray(xs, dtype=np.float64)), 0.0, 1.0)


def backprop_batch(t: SampledTransform, upstream: np.ndarray, xs: np.ndarray, pre=None) -> np.ndarray:
    """Vector-Jacobian product of ``apply_batch(t, .)`` at ``xs``.

    ``pre`` is the unclamped output if the caller already has it.
    """
    if pre is None:
        pre = _raw_apply(t, xs)
    g = np.where((pre >= 0.0) & (pre <= 1.0), upstream, 0.0)
    kind = t.spec.kind
    if kind == "flip-lr":
        return np.where(t.flip[:, None, None, None], g[:, :, ::-1, :], g)
    if kind in ("brightness", "gaussian-noise"):
        return g
    n, h, w, _ = xs.shape
    c = t.spec.crop
    rh = _resize_matrix(h, c)
    rw = _resize_matrix(w, c)
    tmp = np.tensordot(g, rh, axes=([1], [0]))  # (n, w, ch, a)
    g_crop = np.tensordot(tmp, rw, axes=([1], [0]))  # (n, ch, a, b)
    out = np.zeros_like(xs)
    rows = t.origin[:, 0:1] + np.arange(c)
    cols = t.origin[:, 1:2] + np.arange(c)
    out[np.arange(n)[:, None, None], rows[:, :, None], cols[:, None, :]] = g_crop.transpose(0, 2, 3, 1)
    return out


def apply(t: SampledTransform, x: np.ndarray) -> np.ndarray:
    return apply_batch(t, np.asarray(x, dtype=np.float64)[None])[0]


def backprop(t: SampledTransform, upstream: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Single-image VJP; ``x`` is the transform input, needed for the clamp mask."""
    return backprop_batch(t, np.asarray(upstream)[None], np.asarray(x, dtype=np.float64)[None])[0]


class Chain:
    """A sampled sequence of transforms applied left to right."""

    def __init__(self, sampled: list[SampledTransform]):
        self.sampled = sampled
        self._saved: list[tuple[np.ndarray, np.ndarray]] = []

    @classmethod
    def sample(cls, specs, rng, n, image_shape) -> "Chain":
        return cls([sample_batch(s, rng, n, image_shape) for s in specs])

    def forward(self, xs: np.ndarray) -> np.ndarray:
        self._saved = []
        for t in self.sampled:
            pre = _raw_apply(t, xs)
            self._saved.append((xs, pre))
            xs = np.clip(pre, 0.0, 1.0)
        return xs

    def backward(self, g: np.ndarray) -> np.ndarray:
        for t, (xin, pre) in zip(reversed(self.sampled), reversed(self._saved)):
            g = backprop_batch(t, g, xin, pre=pre)
        return g

"""Deterministic synthetic identities.

Each identity is a smooth prototype image (background plus a few 2-D Gaussian
bumps).  Photos and queries re-render the prototype at a small integer
translation, then add a brightness shift, a smooth random texture field and
pixel noise.  The texture gives each identity's cluster many directions of
variation the embedding actually sees; white noise alone is mostly filtered
out by the model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .numerics import make_rng, normalize_rows

_PROTO_STREAM = 1
_PHOTO_STREAM = 2
_QUERY_STREAM = 3


class InsufficientIdentitiesError(ValueError):
    pass


@dataclass(frozen=True)
class SynthDatasetSpec:
    n_identities: int = 19
    photos_per_identity: int = 50
    queries_per_identity: int = 5
    image_shape: tuple[int, int, int] = (32, 32, 1)
    brightness: float = 0.05
    noise_std: float = 0.02
    max_translation: int = 0
    texture_std: float = 0.05
    texture_scale: float = 1.0
    n_bumps: int = 8
    seed: int = 2021

    def __post_init__(self):
        if min(self.n_identities, self.photos_per_identity, self.queries_per_identity) < 1:
            raise ValueError("dataset counts must be >= 1")
        if min(self.brightness, self.noise_std, self.max_translation, self.texture_std, self.texture_scale) < 0:
            raise ValueError("jitter parameters must be non-negative")


@dataclass(frozen=True, eq=False)
class Prototype:
    background: np.ndarray  # (channels,)
    centers: np.ndarray  # (bumps, 2) as (row, col)
    widths: np.ndarray  # (bumps,)
    amplitudes: np.ndarray  # (bumps, channels)

    def render(self, shape, dy: float = 0.0, dx: float = 0.0) -> np.ndarray:
        h, w, _ = shape
        yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
        img = np.broadcast_to(self.background, shape).copy()
        for (cy, cx), s, amp in zip(self.centers, self.widths, self.amplitudes):
            bump = np.exp(-((yy - cy - dy) ** 2 + (xx - cx - dx) ** 2) / (2.0 * s * s))
            img += bump[:, :, None] * amp
        return img


@dataclass(frozen=True, eq=False)
class SynthDataset:
    spec: SynthDatasetSpec
    identities: list[str]
    photos: np.ndarray  # (identities, photos, h, w, c)
    queries: np.ndarray  # (identities, queries, h, w, c)
    prototypes: list[Prototype] = field(repr=False, default_factory=list)

    def photo_id(self, i: int, j: int) -> str:
        return f"{self.identities[i]}-p{j:03d}"

    def query_id(self, i: int, j: int) -> str:
        return f"{self.identities[i]}-q{j:02d}"

    def clean_records(self):
        """(photo_id, identity, image) for every lookup photo, identity-major."""
        for i, ident in enumerate(self.identities):
            for j in range(self.photos.shape[1]):
                yield self.photo_id(i, j), ident, self.photos[i, j]

    def query_records(self):
        for i, ident in enumerate(self.identities):
            for j in range(self.queries.shape[1]):
                yield self.query_id(i, j), ident, self.queries[i, j]


def identity_label(i: int) -> str:
    return f"id-{i:03d}"


def make_prototype(spec: SynthDatasetSpec, i: int) -> Prototype:
    rng = make_rng(spec.seed, stream=(_PROTO_STREAM << 32) | i)
    h, w, c = spec.image_shape
    k = spec.n_bumps
    background = rng.uniform(0.35, 0.65, c)
    centers = np.stack([rng.uniform(-1.0, h, k), rng.uniform(-1.0, w, k)], axis=1)
    widths = rng.uniform(1.5, 3.5, k)
    signs = np.where(rng.random(k) < 0.5, -1.0, 1.0)
    amplitudes = (signs * rng.uniform(0.15, 0.45, k))[:, None] * rng.uniform(0.6, 1.0, (k, c))
    return Prototype(background, centers, widths, amplitudes)


def _texture(spec: SynthDatasetSpec, rng: np.random.Generator):
    if spec.texture_std == 0:
        return 0.0
    h, w, c = spec.image_shape
    f = rng.standard_normal((h, w, c))
    if spec.texture_scale > 0:
        f = gaussian_filter(f, sigma=(spec.texture_scale, spec.texture_scale, 0), mode="wrap")
    sd = f.std()
    return f * (spec.texture_std / sd) if sd > 0 else 0.0


def _jittered(spec: SynthDatasetSpec, proto: Prototype, rng: np.random.Generator, count: int) -> np.ndarray:
    out = np.empty((count,) + tuple(spec.image_shape))
    t = spec.max_translation
    for n in range(count):
        dy, dx = rng.integers(-t, t + 1, 2)
        shift = rng.uniform(-spec.brightness, spec.brightness)
        noise = rng.normal(0.0, spec.noise_std, spec.image_shape) if spec.noise_std > 0 else 0.0
        out[n] = np.clip(proto.render(spec.image_shape, dy, dx) + shift + noise + _texture(spec, rng), 0.0, 1.0)
    return out


def generate(spec: SynthDatasetSpec = SynthDatasetSpec()) -> SynthDataset:
    protos = [make_prototype(spec, i) for i in range(spec.n_identities)]
    photos = np.stack([
        _jittered(spec, p, make_rng(spec.seed, (_PHOTO_STREAM << 32) | i), spec.photos_per_identity)
        for i, p in enumerate(protos)
    ])
    queries = np.stack([
        _jittered(spec, p, make_rng(spec.seed, (_QUERY_STREAM << 32) | i), spec.queries_per_identity)
        for i, p in enumerate(protos)
    ])
    idents = [identity_label(i) for i in range(spec.n_identities)]
    return SynthDataset(spec, idents, photos, queries, protos)


def cluster_quality(dataset: SynthDataset, model) -> tuple[float, float]:
    """Mean same-identity and cross-identity distance over all photo pairs."""
    n_id, n_ph = dataset.photos.shape[:2]
    if n_id < 2:
        raise InsufficientIdentitiesError("inter-identity distance needs at least two identities")
    flat = dataset.photos.reshape((n_id * n_ph,) + dataset.photos.shape[2:])
    u = normalize_rows(model.embed_batch(flat)).reshape(n_id, n_ph, -1)
    intra_sum = inter_sum = 0.0
    intra_n = inter_n = 0
    iu = np.triu_indices(n_ph, k=1)
    for a in range(n_id):
        for b in range(a, n_id):
            diff = u[a][:, None, :] - u[b][None, :, :]
            d = np.einsum("ijk,ijk->ij", diff, diff)
            if a == b:
                intra_sum += d[iu].sum()
                intra_n += len(iu[0])
            else:
                inter_sum += d.sum()
                inter_n += d.size
    intra = intra_sum / intra_n if intra_n else 0.0
    return float(intra), float(inter_sum / inter_n)

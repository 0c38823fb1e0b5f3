"""Two-layer tanh embedding network with hand-written input gradients.

The network maps an image to ``W2 @ tanh(W1 @ x + b1) + b2``.  Everything the
attacks need is the gradient of the normalized distance to a target with
respect to the input pixels, which is derived by hand below.  Batched
variants operate on arrays of shape ``(batch, height, width, channels)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .numerics import (
    NORM_FLOOR,
    DegenerateVectorError,
    FormatError,
    ShapeError,
    make_rng,
    normalize_rows,
)

MODEL_MAGIC = b"FGM1"
DEFAULT_INPUT_SHAPE = (32, 32, 1)
DEFAULT_HIDDEN = 64
DEFAULT_DIM = 128
DEFAULT_SMOOTHING = 0.0


@dataclass(frozen=True, eq=False)
class EmbedNet:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    input_shape: tuple[int, int, int]
    seed: int = 0

    def __post_init__(self):
        n0 = int(np.prod(self.input_shape))
        n1, d = self.w1.shape[0], self.w2.shape[0]
        if self.w1.shape != (n1, n0) or self.b1.shape != (n1,):
            raise ShapeError("layer 1 shapes disagree with the input shape")
        if self.w2.shape != (d, n1) or self.b2.shape != (d,):
            raise ShapeError("layer 2 shapes disagree")
        if d < 2:
            raise ShapeError("embedding dimension must be at least 2")
        for a in (self.w1, self.b1, self.w2, self.b2):
            if not np.all(np.isfinite(a)):
                raise ValueError("model parameters must be finite")

    @classmethod
    def from_seed(cls, seed: int, input_shape=DEFAULT_INPUT_SHAPE, hidden: int = DEFAULT_HIDDEN,
                  dim: int = DEFAULT_DIM, smoothing: float = DEFAULT_SMOOTHING) -> "EmbedNet":
        """Draw weights with scale 1/sqrt(fan_in).

        With ``smoothing > 0`` each first-layer filter is blurred spatially
        (Gaussian, periodic boundary) and rescaled back to its drawn norm.
        Independently seeded models then share a low-frequency input
        subspace, which is what lets perturbations transfer between them.
        Parameters are rounded to float32 so a saved model reloads bit-exactly.
        """
        input_shape = tuple(int(s) for s in input_shape)
        n0 = int(np.prod(input_shape))
        rng = make_rng(seed, stream=0x4D4F44454C)

        def draw(shape, fan_in):
            return (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(np.float32).astype(np.float64)

        w1 = draw((hidden, n0), n0)
        if smoothing > 0:
            raw = w1.reshape((hidden,) + input_shape)
            blurred = gaussian_filter(raw, sigma=(0, smoothing, smoothing, 0), mode="wrap").reshape(hidden, n0)
            scale = np.linalg.norm(w1, axis=1) / np.linalg.norm(blurred, axis=1)
            w1 = (blurred * scale[:, None]).astype(np.float32).astype(np.float64)
        b1 = draw((hidden,), n0)
        w2 = draw((dim, hidden), hidden)
        b2 = draw((dim,), hidden)
        return cls(w1, b1, w2, b2, input_shape, int(seed))

    @property
    def dim(self) -> int:
        return self.w2.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def model_id(self) -> str:
        return f"m{self.seed}-h{self.hidden}-d{self.dim}"

    def _flatten(self, xs: np.ndarray) -> np.ndarray:
        xs = np.asarray(xs, dtype=np.float64)
        if xs.shape[1:] != self.input_shape:
            raise ShapeError(f"expected images of shape {self.input_shape}, got {xs.shape[1:]}")
        return xs.reshape(len(xs), -1)

    def embed_batch(self, xs: np.ndarray) -> np.ndarray:
        h = np.tanh(self._flatten(xs) @ self.w1.T + self.b1)
        return h @ self.w2.T + self.b2

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != self.input_shape:
            raise ShapeError(f"expected image of shape {self.input_shape}, got {x.shape}")
        h = np.tanh(self.w1 @ x.reshape(-1) + self.b1)
        return self.w2 @ h + self.b2

    def losses_batch(self, xs: np.ndarray, targets: np.ndarray) -> np.ndarray:
        u = normalize_rows(self.embed_batch(xs))
        diff = u - normalize_rows(targets)
        return np.einsum("ij,ij->i", diff, diff)

    def loss_and_grad_batch(self, xs: np.ndarray, targets: np.ndarray):
        """Normalized distance to ``targets`` (batch, d) and its input gradient.

        Returns ``(losses (batch,), grads (batch, h, w, c))``.
        """
        flat = self._flatten(xs)
        targets = np.asarray(targets, dtype=np.float64)
        if targets.shape != (len(flat), self.dim):
            raise ShapeError(f"targets must have shape {(len(flat), self.dim)}, got {targets.shape}")
        h = np.tanh(flat @ self.w1.T + self.b1)
        e = h @ self.w2.T + self.b2
        r = np.linalg.norm(e, axis=1)
        if np.any(~np.isfinite(r) | (r < NORM_FLOOR)):
            raise DegenerateVectorError("model produced a zero-norm embedding")
        u = e / r[:, None]
        t = normalize_rows(targets)
        diff = u - t
        losses = np.einsum("ij,ij->i", diff, diff)
        # d/de ||e/|e| - t||^2 = (2/|e|) (u (u.t) - t)
        ut = np.einsum("ij,ij->i", u, t)
        g_e = (2.0 / r)[:, None] * (u * ut[:, None] - t)
        g_a = (g_e @ self.w2) * (1.0 - h * h)
        g_x = g_a @ self.w1
        return losses, g_x.reshape(xs.shape)


def loss_and_input_gradient(model: EmbedNet, x: np.ndarray, target: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    losses, grads = model.loss_and_grad_batch(x[None], np.asarray(target, dtype=np.float64)[None])
    return float(losses[0]), grads[0]


@dataclass(frozen=True, eq=False)
class ModelEnsemble:
    members: tuple[EmbedNet, ...] = field(default_factory=tuple)

    def __post_init__(self):
        members = tuple(self.members)
        object.__setattr__(self, "members", members)
        if not members:
            raise ValueError("an ensemble needs at least one model")
        first = members[0]
        for m in members[1:]:
            if m.input_shape != first.input_shape or m.dim != first.dim:
                raise ShapeError("ensemble members must share input shape and output dimension")

    def __len__(self):
        return len(self.members)

    @property
    def input_shape(self):
        return self.members[0].input_shape

    @property
    def dim(self) -> int:
        return self.members[0].dim

    @property
    def ensemble_id(self) -> str:
        return "+".join(m.model_id for m in self.members)

    def loss_and_grad_batch(self, xs: np.ndarray, targets: np.ndarray):
        """Summed member losses and gradients.

        ``targets`` is (batch, d) for one shared target per image or
        (batch, members, d) for a separate target in each member's space.
        """
        targets = self._per_member(targets)
        loss = None
        grad = None
        for j, m in enumerate(self.members):
            lj, gj = m.loss_and_grad_batch(xs, targets[:, j, :])
            loss = lj if loss is None else loss + lj
            grad = gj if grad is None else grad + gj
        return loss, grad

    def _per_member(self, targets: np.ndarray) -> np.ndarray:
        targets = np.asarray(targets, dtype=np.float64)
        if targets.ndim == 2:
            targets = np.broadcast_to(targets[:, None, :], (len(targets), len(self.members), targets.shape[1]))
        return targets

    def losses_batch(self, xs: np.ndarray, targets: np.ndarray) -> np.ndarray:
        targets = self._per_member(targets)
        return sum(m.losses_batch(xs, targets[:, j, :]) for j, m in enumerate(self.members))


def ensemble_loss_and_gradient(ens: ModelEnsemble, x: np.ndarray, target: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    losses, grads = ens.loss_and_grad_batch(x[None], np.asarray(target, dtype=np.float64)[None])
    return float(losses[0]), grads[0]


def save_model(path, model: EmbedNet) -> None:
    n0 = int(np.prod(model.input_shape))
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<IIIQ", n0, model.hidden, model.dim, model.seed & (2**64 - 1)))
        for a in (model.w1, model.b1, model.w2, model.b2):
            fh.write(a.astype("<f4").tobytes(order="C"))


def load_model(path, input_shape=None) -> EmbedNet:
    """Read an FGM1 file.

    The format records only the flattened input size; without an explicit
    ``input_shape`` a square single-channel image is assumed.
    """
    data = Path(path).read_bytes()
    if data[:4] != MODEL_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    n0, n1, d, seed = struct.unpack_from("<IIIQ", data, 4)
    if input_shape is None:
        side = int(round(np.sqrt(n0)))
        if side * side != n0:
            raise FormatError(f"{path}: cannot infer image shape for n0={n0}; pass input_shape")
        input_shape = (side, side, 1)
    if int(np.prod(input_shape)) != n0:
        raise ShapeError(f"input_shape {input_shape} does not match n0={n0}")
    sizes = [n1 * n0, n1, d * n1, d]
    if len(data) != 24 + 4 * sum(sizes):
        raise FormatError(f"{path}: truncated weights")
    arrays = []
    offset = 24
    for size in sizes:
        arrays.append(np.frombuffer(data, dtype="<f4", offset=offset, count=size).astype(np.float64))
        offset += 4 * size
    w1, b1, w2, b2 = arrays
    return EmbedNet(w1.reshape(n1, n0), b1, w2.reshape(d, n1), b2, tuple(input_shape), int(seed))

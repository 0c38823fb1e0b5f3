"""Projected gradient attacks in embedding space.

All attacks run as a batch: every row is an independent job with its own
source image, target, best-so-far iterate and early-stopping counter.  A job
that stops is frozen while the rest of the batch continues.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import truncnorm

from .embednet import EmbedNet, ModelEnsemble
from .numerics import DegenerateVectorError, make_rng
from .transforms import Chain, TransformSpec, eot_preset

STEP_RULES = ("sign", "raw", "normalized")
DECLINE_TOL = 1e-9


class AttackAbort(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class AttackConfig:
    models: ModelEnsemble
    epsilon: float
    alpha: float = 0.1
    max_iters: int = 400
    patience: int | None = 10  # None disables early stopping
    step_rule: str = "raw"
    transforms: tuple[TransformSpec, ...] = ()
    eot_samples: int = 1
    seed: int = 0
    stream: int = 0

    def __post_init__(self):
        if isinstance(self.models, EmbedNet):
            object.__setattr__(self, "models", ModelEnsemble((self.models,)))
        object.__setattr__(self, "transforms", tuple(self.transforms))
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.step_rule not in STEP_RULES:
            raise ValueError(f"step rule must be one of {STEP_RULES}")
        if self.eot_samples < 1:
            raise ValueError("eot_samples must be >= 1")

    def resolved(self) -> dict:
        """Plain description of every setting, for run metadata."""
        return {
            "epsilon": self.epsilon,
            "alpha": self.alpha,
            "max_iters": self.max_iters,
            "patience": "none" if self.patience is None else self.patience,
            "step_rule": self.step_rule,
            "transforms": ";".join(_spec_text(t) for t in self.transforms) or "none",
            "eot_samples": self.eot_samples,
            "models": self.models.ensemble_id,
            "seed": self.seed,
            "stream": self.stream,
        }


def _spec_text(t: TransformSpec) -> str:
    return f"{t.kind}(shift={t.max_shift},crop={t.crop},mu={t.noise_mean},sigma={t.noise_std})"


def default_config(models, epsilon: float, **kw) -> AttackConfig:
    """Direct-access setting: alpha 0.1, up to 400 iterations, patience 10."""
    return AttackConfig(models, epsilon, **kw)


def transfer_config(models, epsilon: float, noise_std: float = 0.5, **kw) -> AttackConfig:
    """Transfer setting: alpha 0.01 sign steps, 2000 iterations, no early stop, EOT on."""
    ens = models if isinstance(models, ModelEnsemble) else ModelEnsemble((models,))
    side = min(ens.input_shape[:2])
    params = dict(alpha=0.01, max_iters=2000, patience=None, step_rule="sign",
                  transforms=tuple(eot_preset(side, noise_std=noise_std)))
    params.update(kw)
    return AttackConfig(ens, epsilon, **params)


@dataclass(eq=False)
class AttackResult:
    adversarial: np.ndarray
    final_loss: float
    iterations: int
    loss_trace: np.ndarray
    satisfied: bool
    source: np.ndarray = field(repr=False, default=None)

    @property
    def initial_loss(self) -> float:
        return float(self.loss_trace[0])

    @property
    def best_trace(self) -> np.ndarray:
        return np.minimum.accumulate(self.loss_trace)

    def log_lines(self):
        for i, loss in enumerate(self.loss_trace):
            yield json.dumps({"iteration": i, "loss": float(loss)})


@dataclass(eq=False)
class BatchResult:
    adversarial: np.ndarray
    final_loss: np.ndarray
    iterations: np.ndarray
    traces: list[np.ndarray]
    satisfied: np.ndarray

    def __len__(self):
        return len(self.final_loss)

    def __getitem__(self, i) -> AttackResult:
        return AttackResult(self.adversarial[i], float(self.final_loss[i]), int(self.iterations[i]),
                            self.traces[i], bool(self.satisfied[i]))


def _step(g: np.ndarray, rule: str) -> np.ndarray:
    if rule == "sign":
        return np.sign(g)
    if rule == "raw":
        return g
    flat = g.reshape(len(g), -1)
    norms = np.sqrt(np.einsum("ij,ij->i", flat, flat)).reshape((-1,) + (1,) * (g.ndim - 1))
    return g / np.maximum(norms, 1e-30)


def constraint_ok(adv: np.ndarray, src: np.ndarray, epsilon: float) -> np.ndarray:
    """Per-row check of the L-inf ball and the [0, 1] pixel box."""
    adv = np.asarray(adv)
    axes = tuple(range(1, adv.ndim))
    inside_ball = np.abs(adv - src).max(axis=axes) <= epsilon + 1e-6
    in_box = (adv.min(axis=axes) >= 0.0) & (adv.max(axis=axes) <= 1.0)
    return inside_ball & in_box


def _project(x, delta, eps):
    xa = np.clip(x + np.clip(delta, -eps, eps), 0.0, 1.0)
    return xa, xa - x


def _pgd(xs, targets, cfg: AttackConfig, maximize=False, init_delta=None, rng=None) -> BatchResult:
    ens = cfg.models
    xs = np.asarray(xs, dtype=np.float64)
    n = len(xs)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape[-1] != ens.dim or len(targets) != n:
        raise ValueError(f"targets must have {n} rows of dimension {ens.dim}")
    rng = make_rng(cfg.seed, cfg.stream) if rng is None else rng
    eps = float(cfg.epsilon)
    sign = -1.0 if maximize else 1.0

    delta = np.zeros_like(xs) if init_delta is None else np.asarray(init_delta, dtype=np.float64)
    cur, delta = _project(xs, delta, eps)
    best_obj = np.full(n, np.inf)
    best_x = cur.copy()
    stall = np.zeros(n, dtype=int)
    iters = np.zeros(n, dtype=int)
    trace = np.full((cfg.max_iters, n), np.nan)
    active = np.ones(n, dtype=bool)
    patience = cfg.patience if cfg.patience is not None else cfg.max_iters + 1

    for it in range(cfg.max_iters):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        xa = cur[idx]
        tg = targets[idx]
        try:
            if cfg.transforms:
                grad = np.zeros_like(xa)
                for _ in range(cfg.eot_samples):
                    chain = Chain.sample(cfg.transforms, rng, len(idx), xa.shape[1:])
                    _, g = ens.loss_and_grad_batch(chain.forward(xa), tg)
                    grad += chain.backward(g)
                grad /= cfg.eot_samples
                loss = ens.losses_batch(xa, tg)
            else:
                loss, grad = ens.loss_and_grad_batch(xa, tg)
        except DegenerateVectorError as exc:
            raise AttackAbort(f"iteration {it}: {exc}") from exc
        if not np.all(np.isfinite(loss)) or not np.all(np.isfinite(grad)):
            raise AttackAbort(f"iteration {it}: non-finite loss or gradient")

        trace[it, idx] = loss
        iters[idx] = it + 1
        obj = sign * loss
        improved = obj < best_obj[idx] - DECLINE_TOL
        up = idx[improved]
        best_obj[up] = obj[improved]
        best_x[up] = xa[improved]
        stall[up] = 0
        stall[idx[~improved]] += 1

        done = stall[idx] >= patience
        if not maximize:
            # loss >= 0, so nothing below the tolerance can still decline
            done |= best_obj[idx] <= DECLINE_TOL
        active[idx[done]] = False
        go = idx[~done]
        if go.size == 0 or it == cfg.max_iters - 1:
            continue
        stepped = delta[go] - sign * cfg.alpha * _step(grad[~done], cfg.step_rule)
        cur[go], delta[go] = _project(xs[go], stepped, eps)

    traces = [trace[: iters[j], j].copy() for j in range(n)]
    return BatchResult(best_x, sign * best_obj, iters, traces, constraint_ok(best_x, xs, eps))


def generate_decoys(xs, targets, cfg: AttackConfig, rng=None) -> BatchResult:
    """Minimize the (ensemble, optionally EOT) distance of each ``xs[i]`` to ``targets[i]``."""
    return _pgd(xs, targets, cfg, rng=rng)


def generate_decoy(x, v, cfg: AttackConfig) -> AttackResult:
    res = _pgd(np.asarray(x, dtype=np.float64)[None], np.asarray(v, dtype=np.float64)[None], cfg)
    return res[0]


def solo_init(shape, epsilon: float, rng: np.random.Generator) -> np.ndarray:
    """Truncated normal on [-eps, eps] with sigma = eps / 3."""
    if epsilon == 0:
        return np.zeros(shape)
    sigma = epsilon / 3.0
    return truncnorm.rvs(-3.0, 3.0, loc=0.0, scale=sigma, size=shape, random_state=rng)


def solo_attacks(xs, cfg: AttackConfig) -> BatchResult:
    """Push each image's embedding away from its own clean embedding.

    ``final_loss`` and the traces hold the achieved self-distance (maximized).
    """
    xs = np.asarray(xs, dtype=np.float64)
    ens = cfg.models
    targets = np.stack([m.embed_batch(xs) for m in ens.members], axis=1)
    rng = make_rng(cfg.seed, cfg.stream)
    init = solo_init(xs.shape, cfg.epsilon, rng)
    return _pgd(xs, targets, cfg, maximize=True, init_delta=init, rng=rng)


def solo_attack(x, cfg: AttackConfig) -> AttackResult:
    return solo_attacks(np.asarray(x, dtype=np.float64)[None], cfg)[0]


def loss_vs_epsilon_profile(xs, targets, cfg: AttackConfig, eps_grid) -> list[dict]:
    """Distribution of final losses over the jobs ``(xs[i], targets[i])`` for each epsilon."""
    eps_grid = list(eps_grid)
    if not eps_grid:
        raise ValueError("epsilon grid must be non-empty")
    rows = []
    for eps in eps_grid:
        res = generate_decoys(xs, targets, replace(cfg, epsilon=float(eps)))
        fl = res.final_loss
        q25, q50, q75 = np.quantile(fl, [0.25, 0.5, 0.75])
        rows.append({
            "epsilon": float(eps),
            "mean": float(fl.mean()),
            "q25": float(q25),
            "median": float(q50),
            "q75": float(q75),
            "min": float(fl.min()),
            "max": float(fl.max()),
            "initial_mean": float(np.mean([t[0] for t in res.traces])),
            "n_jobs": len(fl),
            "violations": int((~res.satisfied).sum()),
            "final_losses": fl,
        })
    return rows

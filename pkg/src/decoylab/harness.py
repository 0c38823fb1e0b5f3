"""Named experiment scenarios, gates, strategy comparison and report files.

Every scenario follows the same pipeline: generate the synthetic people,
check the baseline gate, produce decoys (or self-modified photos), build the
poisoned store and evaluate the queries.  All randomness is derived from the
master seed through named streams, so a config always yields the same CSV.
"""

from __future__ import annotations

import configparser
import csv
import io
import math
import time
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .decoygen import AttackConfig, constraint_ok, default_config, generate_decoys, solo_attacks, transfer_config
from .decoygen import loss_vs_epsilon_profile
from .embednet import DEFAULT_DIM, DEFAULT_HIDDEN, DEFAULT_SMOOTHING, EmbedNet, ModelEnsemble
from .lookup import Provenance, build, calibrate_threshold, identify_top1_batch, with_entries
from .metrics import MetricReport, evaluate
from .numerics import make_rng
from .synthpeople import SynthDatasetSpec, cluster_quality, generate
from .targeting import TargetStrategy, assign_protectors, choose_targets

SCENARIOS = ("loss-profile", "community-sweep", "ratio-sweep", "solo-subsample", "multi-round",
             "transfer", "top1-oracle")
METRIC_COLUMNS = ("strategy", "epsilon", "k", "decoy_ratio", "round", "model_gen", "model_eval",
                  "recall_mean", "discovery_mean", "idunif_mean", "n_queries")
BASELINE_GATE = 0.9
CHUNK = 2048
# Transfer runs use spatially smoothed first-layer filters, which give
# independently seeded models a shared input subspace.  The EOT noise is the
# reference 0.5 expressed in units of the dataset's pixel std (about 0.14).
TRANSFER_SMOOTHING = 1.5
TRANSFER_NOISE_STD = 0.07


class ConfigError(ValueError):
    pass


class GateFailure(RuntimeError):
    pass


class ComparisonError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str
    dataset: SynthDatasetSpec = field(default_factory=SynthDatasetSpec)
    strategies: tuple[str, ...] = ("random-lookup",)
    eps_grid: tuple[float, ...] = (0.02, 0.04, 0.06, 0.08, 0.1)
    k_grid: tuple[int, ...] = (1, 5, 10, 50, 100)
    ratios: tuple[float, ...] = (0.0, 4.0)
    gen_seeds: tuple[int, ...] = (1,)
    eval_seeds: tuple[int, ...] = ()
    preset: str = "direct"
    alpha: float | None = None
    max_iters: int | None = None
    patience: int | None = -1  # -1 keeps the preset's value; 0 disables early stopping
    step_rule: str | None = None
    eot_noise_std: float = 0.5
    n_protected: int | None = None
    subsample_rates: tuple[float, ...] = (1.0, 0.9, 0.75)
    profile_jobs: int = 40
    tau_percentile: float = 95.0
    hidden: int = DEFAULT_HIDDEN
    dim: int = DEFAULT_DIM
    smoothing: float = DEFAULT_SMOOTHING
    seed: int = 7
    out: str = "runs"

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        for name in ("eps_grid", "k_grid", "gen_seeds"):
            if not getattr(self, name):
                raise ConfigError(f"{name} must be non-empty")
        if self.scenario != "solo-subsample" and not self.ratios:
            raise ConfigError("ratios must be non-empty")
        if self.scenario == "solo-subsample" and not self.subsample_rates:
            raise ConfigError("subsample_rates must be non-empty")
        if self.preset not in ("direct", "transfer"):
            raise ConfigError("preset must be direct or transfer")
        if any(e < 0 for e in self.eps_grid) or any(k < 1 for k in self.k_grid) or any(r < 0 for r in self.ratios):
            raise ConfigError("epsilon and ratios must be >= 0, k >= 1")
        if any(not 0 < r <= 1 for r in self.subsample_rates):
            raise ConfigError("subsample rates must lie in (0, 1]")
        if self.n_protected is not None and not 1 <= self.n_protected <= self.dataset.n_identities:
            raise ConfigError("n_protected must be between 1 and the identity count")


def scenario_defaults(name: str, **overrides) -> ScenarioConfig:
    """The experiment settings each scenario uses unless overridden."""
    base = {
        "loss-profile": dict(eps_grid=(0.0, 0.02, 0.04, 0.06, 0.08, 0.1, 0.2, 0.5, 0.7), ratios=(0.0,)),
        "community-sweep": dict(),
        "ratio-sweep": dict(eps_grid=(0.06,), k_grid=(50,), ratios=(0.0, 0.25, 0.5, 1.0, 2.0, 4.0)),
        "solo-subsample": dict(strategies=("solo",), eps_grid=(0.04,), k_grid=(1, 10, 50, 100), ratios=(0.0,)),
        "multi-round": dict(eps_grid=(0.06,), k_grid=(50,), ratios=(4.0,)),
        "transfer": dict(strategies=("mean",), eps_grid=(0.1, 0.25, 0.5), k_grid=(1,), ratios=(0.0, 8.0, 16.0, 36.0),
                         gen_seeds=(1, 2), eval_seeds=(3,), preset="transfer", smoothing=TRANSFER_SMOOTHING,
                         eot_noise_std=TRANSFER_NOISE_STD),
        "top1-oracle": dict(eps_grid=(0.06,), k_grid=(1,), ratios=(0.0, 4.0)),
    }
    if name not in base:
        raise ConfigError(f"unknown scenario {name!r}")
    params = dict(base[name])
    params.update(overrides)
    return ScenarioConfig(name, **params)


# --- INI config ------------------------------------------------------------

_TUPLES = {"strategies": str, "eps_grid": float, "k_grid": int, "ratios": float, "gen_seeds": int,
           "eval_seeds": int, "subsample_rates": float}
_SCALARS = {"preset": str, "alpha": float, "max_iters": int, "patience": int, "step_rule": str,
            "eot_noise_std": float, "n_protected": int, "profile_jobs": int, "tau_percentile": float,
            "hidden": int, "dim": int, "smoothing": float, "seed": int, "out": str}


def _convert(conv, text, key):
    try:
        return conv(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


def parse_config(text: str, **overrides) -> ScenarioConfig:
    """Read ``[scenario]`` and optional ``[dataset]`` sections of key = value lines."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    if "scenario" not in cp or "name" not in cp["scenario"]:
        raise ConfigError("config needs a [scenario] section with name = ...")
    sec = cp["scenario"]
    params = {}
    for key, value in sec.items():
        key = key.replace("-", "_")
        if key == "name":
            continue
        if key in _TUPLES:
            params[key] = tuple(_convert(_TUPLES[key], v.strip(), key) for v in value.split(",") if v.strip())
        elif key in _SCALARS:
            params[key] = None if value.strip().lower() == "none" else _convert(_SCALARS[key], value.strip(), key)
        else:
            raise ConfigError(f"unknown scenario key {key!r}")
    if "dataset" in cp:
        spec_fields = {f.name: f.type for f in fields(SynthDatasetSpec)}
        dparams = {}
        for key, value in cp["dataset"].items():
            key = key.replace("-", "_")
            if key not in spec_fields:
                raise ConfigError(f"unknown dataset key {key!r}")
            if key == "image_shape":
                dparams[key] = tuple(int(v) for v in value.split(","))
            else:
                conv = int if spec_fields[key] in ("int", int) else float
                dparams[key] = _convert(conv, value.strip(), key)
        try:
            params["dataset"] = SynthDatasetSpec(**dparams)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    params.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return scenario_defaults(sec["name"].strip(), **params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def config_text(cfg: ScenarioConfig) -> str:
    """INI text that :func:`parse_config` maps back to ``cfg``."""
    cp = configparser.ConfigParser(interpolation=None)
    sec = {"name": cfg.scenario}
    for f in fields(cfg):
        if f.name in ("scenario", "dataset"):
            continue
        v = getattr(cfg, f.name)
        sec[f.name] = ", ".join(map(repr, v)) if isinstance(v, tuple) else ("none" if v is None else str(v))
        if f.name == "strategies" or f.name == "out":
            sec[f.name] = ", ".join(v) if isinstance(v, tuple) else str(v)
    cp["scenario"] = sec
    ds = asdict(cfg.dataset)
    ds["image_shape"] = ",".join(map(str, cfg.dataset.image_shape))
    cp["dataset"] = {k: str(v) for k, v in ds.items()}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


# --- run record ------------------------------------------------------------


@dataclass
class RunRecord:
    config: ScenarioConfig
    resolved: dict = field(default_factory=dict)
    reports: list[MetricReport] = field(default_factory=list)
    tables: dict = field(default_factory=dict)  # name -> (header, rows)
    n_decoys: int = 0
    violations: int = 0
    wall_clock: float = 0.0
    version: str = __version__

    def cells(self):
        return [r.row() for r in self.reports]

    def metric(self, name, **key):
        """The single report value matching ``key`` (e.g. strategy=..., k=10)."""
        hits = [r for r in self.reports if all(r.key.get(k) == v for k, v in key.items())]
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} cells match {key}")
        return getattr(hits[0], name)


def _stream(*parts) -> int:
    return zlib.crc32("|".join(map(str, parts)).encode("utf-8"))


@dataclass
class _World:
    dataset: object
    gen: ModelEnsemble
    eval_models: list
    clean: object  # clean LookupStore with caches for every model
    protected: list
    queries: np.ndarray
    query_ids: list
    query_identities: list


def _models(cfg: ScenarioConfig):
    shape = cfg.dataset.image_shape

    def make(s):
        return EmbedNet.from_seed(s, shape, hidden=cfg.hidden, dim=cfg.dim, smoothing=cfg.smoothing)

    gen = [make(s) for s in cfg.gen_seeds]
    extra = [make(s) for s in cfg.eval_seeds if s not in cfg.gen_seeds]
    return ModelEnsemble(tuple(gen)), gen + extra


def _protected(cfg, identities):
    if cfg.n_protected is None or cfg.n_protected >= len(identities):
        return list(identities)
    pick = make_rng(cfg.seed, _stream("protected")).choice(len(identities), cfg.n_protected, replace=False)
    return [identities[i] for i in sorted(pick)]


def baseline_gate(dataset, models, threshold: float = BASELINE_GATE) -> dict:
    """Undefended recall at k=1 over all queries and cluster separation, per model."""
    store = build([(pid, ident, "clean", img) for pid, ident, img in dataset.clean_records()], models)
    q = list(dataset.query_records())
    imgs = np.stack([r[2] for r in q])
    result = {}
    failures = []
    for m in models:
        rep = evaluate(store, m, imgs, [r[0] for r in q], [r[1] for r in q], [1])[0]
        intra, inter = cluster_quality(dataset, m)
        result[m.model_id] = {"recall_at_1": rep.recall_mean, "intra": intra, "inter": inter}
        if rep.recall_mean < threshold:
            failures.append(f"{m.model_id}: baseline recall@1 {rep.recall_mean:.3f} < {threshold}")
        if not intra < inter:
            failures.append(f"{m.model_id}: intra-identity distance {intra:.4g} >= inter {inter:.4g}")
    if failures:
        raise GateFailure("; ".join(failures))
    return result


def _world(cfg: ScenarioConfig, record: RunRecord) -> _World:
    ds = generate(cfg.dataset)
    gen, models = _models(cfg)
    record.resolved["gate"] = baseline_gate(ds, models)
    clean = build([(pid, ident, "clean", img) for pid, ident, img in ds.clean_records()], models)
    protected = _protected(cfg, ds.identities)
    q = [r for r in ds.query_records() if r[1] in set(protected)]
    record.resolved["protected"] = ",".join(protected)
    return _World(ds, gen, models, clean, protected, np.stack([r[2] for r in q]),
                  [r[0] for r in q], [r[1] for r in q])


def attack_config(cfg: ScenarioConfig, models: ModelEnsemble, eps: float) -> AttackConfig:
    kw = {}
    if cfg.alpha is not None:
        kw["alpha"] = cfg.alpha
    if cfg.max_iters is not None:
        kw["max_iters"] = cfg.max_iters
    if cfg.patience != -1:
        kw["patience"] = None if not cfg.patience else cfg.patience
    if cfg.step_rule is not None:
        kw["step_rule"] = cfg.step_rule
    if cfg.preset == "transfer":
        return transfer_config(models, eps, noise_std=cfg.eot_noise_std, **kw)
    return default_config(models, eps, **kw)


def _run_jobs(xs, targets, acfg: AttackConfig, stream_key, record: RunRecord, solo=False):
    out = np.empty_like(xs)
    for c, start in enumerate(range(0, len(xs), CHUNK)):
        sl = slice(start, start + CHUNK)
        cfg = replace(acfg, stream=_stream(*stream_key, c))
        res = solo_attacks(xs[sl], cfg) if solo else generate_decoys(xs[sl], targets[sl], cfg)
        ok = constraint_ok(res.adversarial, xs[sl], acfg.epsilon)
        record.n_decoys += len(ok)
        record.violations += int((~ok).sum())
        out[sl] = res.adversarial
    return out


def _source_photos(world: _World, assignment, seed, tag):
    """Photo index for every decoy slot: a seeded permutation per (protector, protected), cycled."""
    n_photos = world.dataset.photos.shape[1]
    index = {ident: i for i, ident in enumerate(world.dataset.identities)}
    result = {}
    for p, slots in assignment.slots.items():
        used: dict[str, int] = {}
        perms = {}
        picks = []
        for q in slots:
            if q not in perms:
                perms[q] = make_rng(seed, _stream("source", tag, q, p)).permutation(n_photos)
            j = used.get(q, 0)
            used[q] = j + 1
            picks.append((index[q], int(perms[q][j % n_photos])))
        result[p] = picks
    return result


def _decoys(cfg, world, store_for_targets, strategy, eps, n_per, tag, record):
    """Generate ``n_per`` decoys for each protected identity; returns {protected: [(id, protector, image)]}."""
    assignment = assign_protectors(world.protected, world.dataset.identities, n_per,
                                   make_rng(cfg.seed, _stream("assign", tag)))
    sources = _source_photos(world, assignment, cfg.seed, tag)
    ts = TargetStrategy(strategy, cfg.seed, _stream("target", tag, strategy))
    ids = [m.model_id for m in world.gen.members]
    xs, tg, meta = [], [], []
    for p in world.protected:
        tg.append(choose_targets(ts, p, store_for_targets, n_per, ids))
        for j, (qi, pj) in enumerate(sources[p]):
            xs.append(world.dataset.photos[qi, pj])
            meta.append((p, j, world.dataset.identities[qi]))
    if not xs:
        return {p: [] for p in world.protected}
    adv = _run_jobs(np.stack(xs), np.concatenate(tg), attack_config(cfg, world.gen, eps),
                    ("attack", tag, strategy, repr(float(eps))), record)
    out = {p: [] for p in world.protected}
    for (p, j, protector), img in zip(meta, adv):
        out[p].append((f"{p}-d{j:05d}-{protector}", protector, img))
    return out


def _poisoned(world, decoys, n, strategy, eps, tag):
    prov = Provenance(strategy, float(eps), world.gen.ensemble_id, "")
    recs = []
    for p in world.protected:
        for pid, protector, img in decoys[p][:n]:
            recs.append((f"{tag}-{pid}", protector, "decoy", img, replace(prov, target=p)))
    return with_entries(world.clean, recs, world.eval_models)


def _n_decoys(ratio, world):
    return int(round(ratio * world.dataset.photos.shape[1]))


def _evaluate_cell(record, world, store, cfg, strategy, eps, ratio, rnd):
    for m in world.eval_models:
        key = dict(strategy=strategy, epsilon=float(eps), decoy_ratio=float(ratio), round=rnd,
                   model_gen=world.gen.ensemble_id, model_eval=m.model_id)
        record.reports.extend(evaluate(store, m, world.queries, world.query_ids, world.query_identities,
                                       cfg.k_grid, key))


def _sweep(cfg, world, record, rnd=1, tag="r1"):
    """Decoys at the largest ratio once per (strategy, eps); smaller ratios use per-identity prefixes."""
    n_max = max(_n_decoys(r, world) for r in cfg.ratios)
    stores = {}
    for strategy in cfg.strategies:
        for eps in cfg.eps_grid:
            decoys = _decoys(cfg, world, world.clean, strategy, eps, n_max, tag, record) if n_max else {}
            for ratio in cfg.ratios:
                n = _n_decoys(ratio, world)
                store = _poisoned(world, decoys, n, strategy, eps, tag) if n else world.clean
                stores[(strategy, eps, ratio)] = (store, decoys)
                _evaluate_cell(record, world, store, cfg, strategy, eps, ratio, rnd)
    return stores


def _ratio_vs_k_table(record, n_photos):
    rows = []
    for r in record.reports:
        k = r.key["k"]
        rows.append([r.key["strategy"], r.key["epsilon"], k, r.key["decoy_ratio"], r.key["decoy_ratio"] * n_photos / k,
                     r.key["model_eval"], r.recall_mean, r.discovery_mean, r.idunif_mean, r.n_queries])
    header = ["strategy", "epsilon", "k", "decoy_ratio", "decoys_per_k", "model_eval",
              "recall_mean", "discovery_mean", "idunif_mean", "n_queries"]
    return header, rows


# --- scenarios -------------------------------------------------------------


def _loss_profile(cfg, record):
    ds = generate(cfg.dataset)
    gen, models = _models(cfg)
    record.resolved["gate"] = baseline_gate(ds, models)
    rng = make_rng(cfg.seed, _stream("profile-jobs"))
    n_id, n_ph = ds.photos.shape[:2]
    xs, tg = [], []
    for _ in range(cfg.profile_jobs):
        a = int(rng.integers(n_id))
        b = int((a + 1 + rng.integers(n_id - 1)) % n_id) if n_id > 1 else a
        xs.append(ds.photos[a, rng.integers(n_ph)])
        tg.append(ds.photos[b, rng.integers(n_ph)])
    xs = np.stack(xs)
    targets = np.stack([m.embed_batch(np.stack(tg)) for m in gen.members], axis=1)
    acfg = replace(attack_config(cfg, gen, cfg.eps_grid[0]), stream=_stream("profile"))
    record.resolved["attack"] = acfg.resolved()
    rows = loss_vs_epsilon_profile(xs, targets, acfg, cfg.eps_grid)
    header = ["epsilon", "mean", "q25", "median", "q75", "min", "max", "initial_mean", "n_jobs", "violations"]
    record.tables["loss_profile"] = (header, [[r[h] for h in header] for r in rows])
    record.n_decoys += sum(r["n_jobs"] for r in rows)
    record.violations += sum(r["violations"] for r in rows)


def _community(cfg, record):
    world = _world(cfg, record)
    record.resolved["attack"] = attack_config(cfg, world.gen, cfg.eps_grid[0]).resolved()
    _sweep(cfg, world, record)
    record.tables["ratio_vs_k"] = _ratio_vs_k_table(record, world.dataset.photos.shape[1])
    return world


def _multi_round(cfg, record):
    world = _world(cfg, record)
    record.resolved["attack"] = attack_config(cfg, world.gen, cfg.eps_grid[0]).resolved()
    stores = _sweep(cfg, world, record, rnd=1, tag="r1")
    for (strategy, eps, ratio), (store, _) in stores.items():
        n = _n_decoys(ratio, world)
        if n == 0:
            continue
        # round 2: protectors turn protected; every target is a round-1 decoy
        decoys = _decoys(cfg, world, store, "decoy-retarget", eps, n, "r2", record)
        store2 = _poisoned(world, decoys, n, "decoy-retarget", eps, "r2")
        _evaluate_cell(record, world, store2, cfg, strategy, eps, ratio, 2)
    record.tables["ratio_vs_k"] = _ratio_vs_k_table(record, world.dataset.photos.shape[1])


def _solo(cfg, record):
    world = _world(cfg, record)
    ds = world.dataset
    n_ph = ds.photos.shape[1]
    index = {ident: i for i, ident in enumerate(ds.identities)}
    rows = []
    for eps in cfg.eps_grid:
        acfg = attack_config(cfg, world.gen, eps)
        record.resolved["attack"] = acfg.resolved()
        order = {p: make_rng(cfg.seed, _stream("subsample", p)).permutation(n_ph) for p in world.protected}
        xs = np.concatenate([ds.photos[index[p]] for p in world.protected])
        adv = _run_jobs(xs, None, acfg, ("solo", repr(float(eps))), record, solo=True)
        modified = {p: adv[k * n_ph:(k + 1) * n_ph] for k, p in enumerate(world.protected)}
        for rate in cfg.subsample_rates:
            n_mod = int(round(rate * n_ph))
            replaced = {}
            for p in world.protected:
                for j in order[p][:n_mod]:
                    replaced[ds.photo_id(index[p], int(j))] = modified[p][int(j)]
            recs = []
            for pid, ident, img in ds.clean_records():
                if pid in replaced:
                    recs.append((pid, ident, "clean", replaced[pid], Provenance("solo", float(eps), world.gen.ensemble_id, ident)))
                else:
                    recs.append((pid, ident, "clean", img))
            store = build(recs, world.eval_models)
            label = f"solo@{rate:g}"
            before = len(record.reports)
            _evaluate_cell(record, world, store, cfg, label, eps, 0.0, 1)
            for r in record.reports[before:]:
                rows.append([rate, float(eps), r.key["k"], r.key["model_eval"], r.recall_mean, r.discovery_mean,
                             r.idunif_mean, r.discovery_identity_mean, r.n_queries])
    header = ["subsample_rate", "epsilon", "k", "model_eval", "recall_mean", "discovery_mean", "idunif_mean",
              "discovery_identity_mean", "n_queries"]
    record.tables["subsample"] = (header, rows)


def _top1(cfg, record):
    world = _world(cfg, record)
    record.resolved["attack"] = attack_config(cfg, world.gen, cfg.eps_grid[0]).resolved()
    stores = _sweep(cfg, world, record)
    taus = {m.model_id: calibrate_threshold(world.clean, world.queries, world.query_identities, m, cfg.tau_percentile)
            for m in world.eval_models}
    record.resolved["tau"] = {k: repr(v) for k, v in taus.items()}
    rows = []
    for (strategy, eps, ratio), (store, _) in stores.items():
        for m in world.eval_models:
            answers = identify_top1_batch(store, world.queries, m, taus[m.model_id])
            n = len(answers)
            correct = sum(a == t for a, t in zip(answers, world.query_identities))
            empty = sum(a is None for a in answers)
            rows.append([strategy, float(eps), float(ratio), m.model_id, taus[m.model_id], correct / n, empty / n, n])
    header = ["strategy", "epsilon", "decoy_ratio", "model_eval", "tau", "correct_rate", "no_match_rate", "n_queries"]
    record.tables["top1"] = (header, rows)


_RUNNERS = {
    "loss-profile": _loss_profile,
    "community-sweep": _community,
    "ratio-sweep": _community,
    "transfer": _community,
    "multi-round": _multi_round,
    "solo-subsample": _solo,
    "top1-oracle": _top1,
}


def run_scenario(cfg: ScenarioConfig) -> RunRecord:
    record = RunRecord(cfg)
    t0 = time.perf_counter()
    record.resolved["dataset"] = asdict(cfg.dataset)
    record.resolved["pixel_range"] = "[0,1]"
    _RUNNERS[cfg.scenario](cfg, record)
    record.wall_clock = time.perf_counter() - t0
    return record


# --- comparison ------------------------------------------------------------


def compare_strategies(records) -> list[dict]:
    """Per cell, strategies ordered by discovery then recall (most private first), with deltas to the best."""
    reports = [r for rec in records for r in rec.reports]
    cells: dict[tuple, dict[str, MetricReport]] = {}
    for r in reports:
        cell = (r.key["epsilon"], r.key["k"], r.key["decoy_ratio"], r.key["round"], r.key["model_eval"])
        cells.setdefault(cell, {})[r.key["strategy"]] = r
    strategies = {s for c in cells.values() for s in c}
    missing = [c for c, v in cells.items() if set(v) != strategies]
    if missing:
        raise ComparisonError(f"strategies do not share grids; {len(missing)} cells incomplete")
    rows = []
    for cell in sorted(cells):
        ranked = sorted(cells[cell].values(), key=lambda r: (r.discovery_mean, r.recall_mean, r.key["strategy"]))
        best = ranked[0]
        for rank, r in enumerate(ranked, start=1):
            rows.append(dict(epsilon=cell[0], k=cell[1], decoy_ratio=cell[2], round=cell[3], model_eval=cell[4],
                             rank=rank, strategy=r.key["strategy"],
                             discovery_delta=r.discovery_mean - best.discovery_mean,
                             recall_delta=r.recall_mean - best.recall_mean,
                             idunif_delta=r.idunif_mean - best.idunif_mean))
    return rows


# --- report files ----------------------------------------------------------


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def metrics_csv(record: RunRecord) -> str:
    return _csv_text(METRIC_COLUMNS, [[c[h] for h in METRIC_COLUMNS] for c in record.cells()])


_PALETTE = ("#1b6ca8", "#d1495b", "#edae49", "#00798c", "#66a182", "#6d597a", "#2e4057")


def line_chart(series: dict, xlabel: str, ylabel: str, title: str, width=480, height=320) -> str:
    """Minimal SVG line chart; ``series`` maps a label to ``[(x, y), ...]``."""
    pts = [p for s in series.values() for p in s]
    left, right, top, bottom = 56, 110, 28, 44
    xs = [p[0] for p in pts] or [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    if x1 == x0:
        x1 = x0 + 1.0
    y0, y1 = 0.0, max(1.0, max((p[1] for p in pts), default=1.0))
    pw, ph = width - left - right, height - top - bottom

    def sx(x):
        return left + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return top + ph - (y - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
           f'<text x="{width / 2:.1f}" y="16" text-anchor="middle">{title}</text>',
           f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#999"/>']
    for t in np.linspace(y0, y1, 5):
        out.append(f'<text x="{left - 6}" y="{sy(t) + 4:.1f}" text-anchor="end">{t:.2f}</text>')
    for t in sorted(set(xs)):
        out.append(f'<text x="{sx(t):.1f}" y="{top + ph + 14}" text-anchor="middle">{t:g}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">{xlabel}</text>')
    out.append(f'<text x="14" y="{top + ph / 2:.1f}" transform="rotate(-90 14 {top + ph / 2:.1f})" '
               f'text-anchor="middle">{ylabel}</text>')
    for i, (label, s) in enumerate(series.items()):
        color = _PALETTE[i % len(_PALETTE)]
        path = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in sorted(s))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.6" points="{path}"/>')
        ly = top + 12 + 14 * i
        out.append(f'<line x1="{width - right + 8}" y1="{ly}" x2="{width - right + 24}" y2="{ly}" stroke="{color}"/>')
        out.append(f'<text x="{width - right + 28}" y="{ly + 4}">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _charts(record: RunRecord) -> dict[str, str]:
    charts = {}
    reports = record.reports
    metrics = (("recall_mean", "recall"), ("discovery_mean", "discovery"), ("idunif_mean", "IDUnif"))
    groups: dict[tuple, list] = {}
    for r in reports:
        groups.setdefault((r.key["strategy"], r.key["model_eval"], r.key["round"]), []).append(r)
    for (strategy, model, rnd), rs in sorted(groups.items()):
        name = f"{strategy}_{model}_r{rnd}".replace("@", "-")
        eps_vals = sorted({r.key["epsilon"] for r in rs})
        ratios = sorted({r.key["decoy_ratio"] for r in rs})
        for attr, label in metrics:
            if len(eps_vals) > 1:
                top_ratio = ratios[-1]
                series = {}
                for r in rs:
                    if r.key["decoy_ratio"] == top_ratio:
                        series.setdefault(f"k={r.key['k']}", []).append((r.key["epsilon"], getattr(r, attr)))
                charts[f"{label}_vs_eps_{name}.svg"] = line_chart(series, "epsilon", label, f"{label} vs epsilon ({strategy}, ratio {top_ratio:g})")
            if len(ratios) > 1:
                series = {}
                for r in rs:
                    if r.key["epsilon"] == eps_vals[-1]:
                        series.setdefault(f"k={r.key['k']}", []).append((r.key["decoy_ratio"], getattr(r, attr)))
                charts[f"{label}_vs_ratio_{name}.svg"] = line_chart(series, "decoys / clean photos", label, f"{label} vs decoy ratio ({strategy}, eps {eps_vals[-1]:g})")
    if "loss_profile" in record.tables:
        header, rows = record.tables["loss_profile"]
        series = {c: [(row[0], row[header.index(c)]) for row in rows] for c in ("mean", "median", "max")}
        charts["loss_vs_eps.svg"] = line_chart(series, "epsilon", "final loss", "final attack loss vs epsilon")
    return charts


def _flatten(prefix, value, out):
    if isinstance(value, dict):
        for k in sorted(value):
            _flatten(f"{prefix}.{k}" if prefix else str(k), value[k], out)
    elif isinstance(value, (list, tuple)):
        out.append((prefix, ",".join(map(_fmt, value))))
    else:
        out.append((prefix, _fmt(value)))


def record_text(record: RunRecord) -> str:
    pairs = [("version", record.version), ("scenario", record.config.scenario)]
    cfg = asdict(record.config)
    _flatten("config", cfg, pairs)
    _flatten("resolved", record.resolved, pairs)
    pairs += [("decoys", str(record.n_decoys)), ("constraint_violations", str(record.violations)),
              ("cells", str(len(record.reports))), ("wall_clock_s", f"{record.wall_clock:.3f}")]
    return "".join(f"{k}={v}\n" for k, v in pairs)


def emit_report(record: RunRecord, out_dir) -> list[Path]:
    """Write metrics.csv, extra tables, SVG charts and run.txt; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {"metrics.csv": metrics_csv(record), "run.txt": record_text(record),
             "config.ini": config_text(record.config)}
    for name, (header, rows) in record.tables.items():
        files[f"{name}.csv"] = _csv_text(header, rows)
    files.update(_charts(record))
    written = []
    for name, text in sorted(files.items()):
        path = out / name
        path.write_text(text, encoding="utf-8")
        written.append(path)
    return written


def read_metrics_csv(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def pooled(rows, by=("strategy", "epsilon", "k", "decoy_ratio", "round")) -> list[dict]:
    """Mean of recall/discovery/IDUnif over model pairs, weighted by query count."""
    groups: dict[tuple, list] = {}
    for r in rows:
        groups.setdefault(tuple(r[b] for b in by), []).append(r)
    result = []
    for key, rs in sorted(groups.items()):
        n = [int(r["n_queries"]) for r in rs]
        total = sum(n)
        row = dict(zip(by, key))
        for m in ("recall_mean", "discovery_mean", "idunif_mean"):
            row[m] = math.fsum(float(r[m]) * w for r, w in zip(rs, n)) / total
        row["n_queries"] = total
        row["n_models"] = len(rs)
        result.append(row)
    return result

"""Synthetic multi-domain data and the three-stage training curriculum.

Four domains (A-D) emit multi-channel token sequences from per-channel
first-order Markov chains. Their raw pools are deliberately imbalanced
(about 40/30/25/5 %); a balanced subset is sampled from the pools for the MoE
stages.

Stages:

1. ``specialist``: one dense model per domain on that domain's raw pool.
2. ``warmup``: after fusion, only gates and shared experts train, on a slice of
   the balanced subset.
3. ``joint``: everything trains on the balanced subset with the aux-loss
   weight annealed linearly.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import analytics, fusion
from .fusion import Checkpoint
from .model import Batch, ModelConfig, TransformerModel
from .numcore import Rng

log = logging.getLogger(__name__)

DOMAINS = ("A", "B", "C", "D")


class DivergenceError(RuntimeError):
    def __init__(self, message: str, trace: LossTrace):
        super().__init__(message)
        self.trace = trace


# ----------------------------------------------------------------------- data

@dataclass
class DomainSpec:
    """Markov source for one domain: ``transitions[c]`` is channel c's V x V matrix."""

    name: str
    transitions: np.ndarray    # [C, V, V]
    start: np.ndarray          # [C, V]
    min_len: int
    max_len: int

    def __post_init__(self):
        t = np.asarray(self.transitions, dtype=np.float64)
        if t.ndim != 3 or t.shape[1] != t.shape[2]:
            raise ValueError("transitions must have shape [channels, V, V]")
        if np.any(t < 0) or not np.allclose(t.sum(axis=2), 1.0, atol=1e-9):
            raise ValueError(f"domain {self.name}: transition rows must be probability distributions")
        if np.any(self.start < 0) or not np.allclose(np.sum(self.start, axis=1), 1.0, atol=1e-9):
            raise ValueError(f"domain {self.name}: start distribution invalid")
        if not 2 <= self.min_len <= self.max_len:
            raise ValueError("need 2 <= min_len <= max_len")
        self.transitions = t

    @property
    def vocab_size(self) -> int:
        return self.transitions.shape[1]

    @property
    def n_channels(self) -> int:
        return self.transitions.shape[0]


def transition_tv(a: DomainSpec, b: DomainSpec) -> float:
    """Mean (over channels and rows) total-variation distance between transition rows."""
    return float(0.5 * np.abs(a.transitions - b.transitions).sum(axis=2).mean())


def make_domains(vocab_size: int = 64, n_channels: int = 2, min_len: int = 32, max_len: int = 64,
                 seed: int = 0, branching: int = 4, band_bias: float = 0.6,
                 smoothing: float = 0.02, names=DOMAINS) -> list[DomainSpec]:
    """Build distinguishable domains.

    Every state has ``branching`` likely successors; with probability
    ``band_bias`` each successor is drawn from the domain's own vocabulary band,
    so context reveals the domain while the shared states still conflict.
    """
    rng = Rng(seed, ("domains",))
    n = len(names)
    band = max(1, vocab_size // n)
    specs = []
    for s, name in enumerate(names):
        r = rng.split(name)
        lo = (s * band) % vocab_size
        t = np.full((n_channels, vocab_size, vocab_size), smoothing / vocab_size)
        start = np.full((n_channels, vocab_size), 0.2 / vocab_size)
        for c in range(n_channels):
            start[c, lo:lo + band] += 0.8 / band
            for i in range(vocab_size):
                in_band = r.uniform(branching) < band_bias
                succ = np.where(in_band, lo + r.integers(0, band, branching),
                                r.integers(0, vocab_size, branching))
                w = r.dirichlet(np.ones(branching)) * (1.0 - smoothing)
                np.add.at(t[c, i], succ, w)
        t /= t.sum(axis=2, keepdims=True)
        start /= start.sum(axis=1, keepdims=True)
        specs.append(DomainSpec(name, t, start, min_len, max_len))
    for i in range(n):
        for j in range(i + 1, n):
            tv = transition_tv(specs[i], specs[j])
            if tv < 0.2:
                raise ValueError(f"domains {names[i]} and {names[j]} too similar (TV {tv:.3f})")
    return specs


@dataclass
class SequenceSet:
    """Padded sequences: ``ids`` [n, T, C], ``lengths`` [n], ``domains`` [n]."""

    ids: np.ndarray
    lengths: np.ndarray
    domains: np.ndarray

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    def subset(self, idx) -> SequenceSet:
        idx = np.asarray(idx, dtype=np.int64)
        return SequenceSet(self.ids[idx], self.lengths[idx], self.domains[idx])

    def batch(self, idx) -> Batch:
        idx = np.asarray(idx, dtype=np.int64)
        lengths = self.lengths[idx]
        t = int(lengths.max())
        mask = np.arange(t)[None, :] < lengths[:, None]
        return Batch(self.ids[idx, :t], self.domains[idx], mask)

    def batches(self, batch_size: int):
        for start in range(0, len(self), batch_size):
            yield self.batch(np.arange(start, min(start + batch_size, len(self))))

    def token_counts(self, n_domains: int = len(DOMAINS)) -> np.ndarray:
        return np.bincount(self.domains, weights=self.lengths, minlength=n_domains).astype(np.int64)

    @staticmethod
    def concat(parts: list[SequenceSet]) -> SequenceSet:
        t = max(p.ids.shape[1] for p in parts)
        ids = [np.pad(p.ids, ((0, 0), (0, t - p.ids.shape[1]), (0, 0))) for p in parts]
        return SequenceSet(np.concatenate(ids), np.concatenate([p.lengths for p in parts]),
                           np.concatenate([p.domains for p in parts]))

    def save(self, path) -> None:
        np.savez(path, ids=self.ids, lengths=self.lengths, domains=self.domains)

    @classmethod
    def load(cls, path) -> SequenceSet:
        with np.load(path) as z:
            return cls(z["ids"], z["lengths"], z["domains"])


def generate_domain(spec: DomainSpec, n: int, seed: int, domain_index: int = 0) -> SequenceSet:
    """Sample ``n`` sequences from the domain's chains, reproducibly from ``seed``."""
    rng = Rng(seed, ("generate", spec.name))
    c, v = spec.n_channels, spec.vocab_size
    lengths = rng.integers(spec.min_len, spec.max_len + 1, size=n)
    ids = np.zeros((n, spec.max_len, c), dtype=np.int64)
    cdf = np.cumsum(spec.transitions, axis=2)
    cdf[..., -1] = 1.0
    start_cdf = np.cumsum(spec.start, axis=1)
    start_cdf[:, -1] = 1.0
    u = rng.uniform((n, spec.max_len, c))
    for ch in range(c):
        ids[:, 0, ch] = np.searchsorted(start_cdf[ch], u[:, 0, ch], side="right")
        for t in range(1, spec.max_len):
            rows = cdf[ch, ids[:, t - 1, ch]]
            ids[:, t, ch] = (rows <= u[:, t, ch, None]).sum(axis=1)
    ids = np.minimum(ids, v - 1)
    pad = np.arange(spec.max_len)[None, :] >= lengths[:, None]
    ids[pad] = 0
    return SequenceSet(ids, lengths.astype(np.int64), np.full(n, domain_index, dtype=np.int64))


@dataclass
class DatasetManifest:
    raw_counts: dict[str, int] = field(default_factory=lambda: {"A": 8000, "B": 6000, "C": 5000, "D": 1000})
    balanced_per_domain: int = 500
    eval_per_domain: int = 200
    warmup_fraction: float = 0.4
    vocab_size: int = 64
    n_channels: int = 2
    min_len: int = 32
    max_len: int = 64
    seed: int = 0
    # filled in by build_datasets
    raw_tokens: dict[str, int] = field(default_factory=dict)
    balanced_tokens: dict[str, int] = field(default_factory=dict)

    @property
    def domains(self) -> list[str]:
        return list(self.raw_counts)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> DatasetManifest:
        return cls(**d)


@dataclass
class Datasets:
    manifest: DatasetManifest
    specs: list[DomainSpec]
    raw: dict[str, SequenceSet]
    balanced: SequenceSet
    warmup: SequenceSet
    eval: SequenceSet

    def raw_all(self) -> SequenceSet:
        return SequenceSet.concat([self.raw[d] for d in self.manifest.domains])

    def select(self, selector: str) -> SequenceSet:
        """"raw:<domain>", "raw:all", "balanced", "warmup" or "eval"."""
        if selector.startswith("raw:"):
            key = selector[4:]
            return self.raw_all() if key == "all" else self.raw[key]
        if selector in ("balanced", "warmup", "eval"):
            return getattr(self, selector)
        raise ValueError(f"unknown dataset selector {selector!r}")

    def eval_domain(self, domain: str) -> SequenceSet:
        idx = self.manifest.domains.index(domain)
        return self.eval.subset(np.flatnonzero(self.eval.domains == idx))

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for d, s in self.raw.items():
            s.save(directory / f"raw_{d}.npz")
        self.balanced.save(directory / "balanced.npz")
        self.warmup.save(directory / "warmup.npz")
        self.eval.save(directory / "eval.npz")
        analytics.write_json(directory / "manifest.json", self.manifest.to_dict())

    @classmethod
    def load(cls, directory) -> Datasets:
        directory = Path(directory)
        manifest = DatasetManifest.from_dict(analytics.read_json(directory / "manifest.json"))
        raw = {d: SequenceSet.load(directory / f"raw_{d}.npz") for d in manifest.domains}
        specs = _specs_for(manifest)
        return cls(manifest, specs, raw, SequenceSet.load(directory / "balanced.npz"),
                   SequenceSet.load(directory / "warmup.npz"), SequenceSet.load(directory / "eval.npz"))


def _specs_for(m: DatasetManifest) -> list[DomainSpec]:
    return make_domains(m.vocab_size, m.n_channels, m.min_len, m.max_len, seed=m.seed,
                        names=tuple(m.domains))


def build_datasets(manifest: DatasetManifest) -> Datasets:
    """Generate raw pools, the balanced subset (sampled from the pools), the warmup
    slice of it, and held-out eval sequences; records token counts in the manifest."""
    specs = _specs_for(manifest)
    rng = Rng(manifest.seed, ("datasets",))
    raw, balanced, warm, evals = {}, [], [], []
    for i, (name, spec) in enumerate(zip(manifest.domains, specs)):
        pool = generate_domain(spec, manifest.raw_counts[name], manifest.seed * 1000 + i, i)
        raw[name] = pool
        k = min(manifest.balanced_per_domain, len(pool))
        pick = np.sort(rng.split("balanced", name).permutation(len(pool))[:k])
        bal = pool.subset(pick)
        balanced.append(bal)
        n_warm = int(round(manifest.warmup_fraction * k))
        warm.append(bal.subset(rng.split("warmup", name).permutation(k)[:n_warm]))
        evals.append(generate_domain(spec, manifest.eval_per_domain,
                                     manifest.seed * 1000 + 500 + i, i))
    m = replace(manifest,
                raw_tokens={d: int(raw[d].lengths.sum()) for d in manifest.domains},
                balanced_tokens={d: int(b.lengths.sum()) for d, b in zip(manifest.domains, balanced)})
    return Datasets(m, specs, raw, SequenceSet.concat(balanced), SequenceSet.concat(warm),
                    SequenceSet.concat(evals))


# ------------------------------------------------------------------ training

@dataclass
class StageConfig:
    stage: str                       # "specialist" | "warmup" | "joint" | "dense_baseline"
    data: str                        # dataset selector, see Datasets.select
    steps: int = 300
    batch_size: int = 8
    lr: float = 3e-3
    min_lr_ratio: float = 0.1
    warmup_steps: int = 0
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.95)
    aux_start: float = 1e-2
    aux_end: float = 1e-3
    trainable: str = "all"           # "all" | "gate_shared"
    seed: int = 0
    divergence_factor: float = 10.0
    divergence_patience: int = 100

    def aux_weight(self, step: int) -> float:
        """Linear from ``aux_start`` (step 0) to ``aux_end`` (last step), correctly rounded."""
        if self.steps <= 1:
            return self.aux_start
        a, b = Fraction(self.aux_start), Fraction(self.aux_end)
        return float(a + (b - a) * Fraction(step, self.steps - 1))

    def lr_at(self, step: int) -> float:
        """Linear warmup then cosine decay to ``min_lr_ratio * lr``."""
        if step < self.warmup_steps:
            return self.lr * (step + 1) / self.warmup_steps
        span = max(1, self.steps - self.warmup_steps - 1)
        frac = min(1.0, (step - self.warmup_steps) / span)
        lo = self.lr * self.min_lr_ratio
        return lo + 0.5 * (self.lr - lo) * (1.0 + math.cos(math.pi * frac))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> StageConfig:
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


def trainable_names(model: TransformerModel, mode: str) -> list[str]:
    names = list(model.params)
    if mode == "all":
        return names
    if mode == "gate_shared":
        if not model.config.is_moe:
            raise ValueError("gate_shared training needs an MoE model")
        return [n for n in names if n.endswith(".moe.gate") or ".moe.shared." in n]
    raise ValueError(f"unknown trainable mode {mode!r}")


@dataclass
class LossTrace:
    stage: str
    domains: list[str]
    rows: list[dict] = field(default_factory=list)
    domain_tokens: dict[str, int] = field(default_factory=dict)
    final_eval: dict[str, float] = field(default_factory=dict)

    def columns(self) -> list[str]:
        return ["step", "stage", "total", "primary", "aux", "aux_weight", "lr"] + \
               [f"loss_{d}" for d in self.domains]

    def csv_rows(self) -> tuple[list[str], list[list]]:
        cols = self.columns()
        return cols, [[r[c] for c in cols] for r in self.rows]

    def save_csv(self, path) -> Path:
        header, rows = self.csv_rows()
        return analytics.write_csv(path, header, rows)

    @classmethod
    def load_csv(cls, path) -> LossTrace:
        header, rows = analytics.read_csv(path)
        domains = [c[5:] for c in header if c.startswith("loss_")]
        recs = [dict(zip(header, r)) for r in rows]
        for r in recs:
            r["stage"] = str(r["stage"])
        return cls(recs[0]["stage"] if recs else "", domains, recs)


class AdamW:
    """Decoupled weight decay Adam over a fixed set of named parameters."""

    def __init__(self, params: dict, betas=(0.9, 0.95), eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            # decay matrices only; gains, biases and vectors are left alone
            new = p.data * (1.0 - lr * self.wd) if p.data.ndim >= 2 else p.data.copy()
            new -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = new


def checkpoint_from_model(model: TransformerModel, metadata: dict) -> Checkpoint:
    return Checkpoint(model.config, model.state_dict(), dict(metadata))


def model_from_checkpoint(ckpt: Checkpoint) -> TransformerModel:
    return TransformerModel(ckpt.config, ckpt.tensors)


def evaluate(model: TransformerModel, data: SequenceSet, domains: list[str], batch_size: int = 32,
             sink=None) -> dict[str, float]:
    """Token-weighted mean next-token NLL per domain (deterministic order)."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    nll = np.zeros(len(domains))
    cnt = np.zeros(len(domains))
    for batch in data.batches(batch_size):
        res = model.loss(batch, 0.0, sink=sink)
        for d, v in res.per_domain.items():
            nll[d] += v * res.per_domain_tokens[d]
            cnt[d] += res.per_domain_tokens[d]
    return {name: float(nll[i] / cnt[i]) for i, name in enumerate(domains) if cnt[i] > 0}


def train_stage(model: TransformerModel, cfg: StageConfig, data: SequenceSet,
                domains: list[str] = list(DOMAINS), eval_data: SequenceSet | None = None,
                sink=None, metadata: dict | None = None) -> tuple[Checkpoint, LossTrace]:
    """Train ``model`` in place for ``cfg.steps`` steps; parameters outside the
    trainable mask are never touched."""
    if len(data) == 0:
        raise ValueError("stage data is empty")
    names = trainable_names(model, cfg.trainable)
    trainable = {n: model.params[n] for n in names}
    for n, p in model.params.items():
        p.requires_grad = n in trainable
    opt = AdamW(trainable, cfg.betas, weight_decay=cfg.weight_decay)
    rng = Rng(cfg.seed, ("train", cfg.stage))
    trace = LossTrace(cfg.stage, list(domains))
    seen = np.zeros(len(domains), dtype=np.int64)
    order = np.array([], dtype=np.int64)
    initial = None
    bad = 0
    try:
        for step in range(cfg.steps):
            if order.size < cfg.batch_size:
                order = np.concatenate([order, rng.split("epoch", step).permutation(len(data))])
            idx, order = order[:cfg.batch_size], order[cfg.batch_size:]
            batch = data.batch(idx)
            seen += np.bincount(batch.domains, weights=batch.mask.sum(axis=1),
                                minlength=len(domains)).astype(np.int64)
            w = cfg.aux_weight(step)
            lr = cfg.lr_at(step)
            model.zero_grad()
            res = model.loss(batch, w, sink=sink)
            res.total.backward()
            opt.step(lr)
            total = float(res.total.data)
            row = {"step": step, "stage": cfg.stage, "total": total, "primary": res.primary,
                   "aux": res.aux, "aux_weight": w, "lr": lr}
            for i, d in enumerate(domains):
                row[f"loss_{d}"] = res.per_domain.get(i, float("nan"))
            trace.rows.append(row)
            if initial is None:
                initial = total
            bad = bad + 1 if total > cfg.divergence_factor * initial else 0
            if bad >= cfg.divergence_patience:
                raise DivergenceError(
                    f"{cfg.stage}: loss above {cfg.divergence_factor}x initial for {bad} steps", trace)
            if step % 50 == 0:
                log.info("%s step %d total %.4f primary %.4f aux %.4f", cfg.stage, step, total,
                         res.primary, res.aux)
    finally:
        for p in model.params.values():
            p.requires_grad = True
            p.zero_grad()
    trace.domain_tokens = {d: int(seen[i]) for i, d in enumerate(domains)}
    if eval_data is not None and len(eval_data):
        trace.final_eval = evaluate(model, eval_data, list(domains))
    meta = {"stage": cfg.stage, "step": cfg.steps, "seed": cfg.seed, **(metadata or {})}
    if trace.final_eval:
        meta["eval"] = trace.final_eval
    return checkpoint_from_model(model, meta), trace


# ------------------------------------------------------------------- presets

@dataclass
class CurriculumConfig:
    model: ModelConfig
    manifest: DatasetManifest
    specialist: StageConfig
    warmup: StageConfig
    joint: StageConfig
    dense_baseline: StageConfig
    fusion: dict = field(default_factory=lambda: {"parts": 2, "n_null": 1, "n_shared": 2,
                                                  "threshold_p": 0.7})
    seed: int = 0
    # optional shared backbone pre-training; specialists and the dense baseline start from it
    base: StageConfig | None = None

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "manifest": self.manifest.to_dict(),
                "specialist": self.specialist.to_dict(), "warmup": self.warmup.to_dict(),
                "joint": self.joint.to_dict(), "dense_baseline": self.dense_baseline.to_dict(),
                "fusion": dict(self.fusion), "seed": self.seed,
                "base": None if self.base is None else self.base.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> CurriculumConfig:
        return cls(ModelConfig.from_dict(d["model"]), DatasetManifest.from_dict(d["manifest"]),
                   *(StageConfig.from_dict(d[k]) for k in ("specialist", "warmup", "joint",
                                                           "dense_baseline")),
                   dict(d.get("fusion", {})), int(d.get("seed", 0)),
                   None if d.get("base") is None else StageConfig.from_dict(d["base"]))


def preset(name: str = "full", seed: int = 0) -> CurriculumConfig:
    """``smoke``: tiny model, 50 steps per stage. ``full``: desk-scale defaults.

    ``full`` adds a short shared-backbone stage on the raw mixture that the
    specialists and the dense baseline start from. The dense baseline gets the
    same number of optimizer steps as the whole curriculum after the backbone.
    """
    base = None
    if name == "smoke":
        model = ModelConfig(n_layers=2, d_model=16, n_heads=2, vocab_size=16, n_channels=2,
                            max_seq_len=16, ffn_hidden=32)
        manifest = DatasetManifest(raw_counts={"A": 400, "B": 300, "C": 250, "D": 50},
                                   balanced_per_domain=40, eval_per_domain=20, vocab_size=16,
                                   min_len=8, max_len=16, seed=seed)
        steps = dict(specialist=50, warmup=50, joint=50)
        batch = 4
    elif name == "full":
        model = ModelConfig()
        manifest = DatasetManifest(seed=seed)
        steps = dict(specialist=300, warmup=200, joint=400)
        batch = 8
        base = StageConfig("base", "raw:all", 200, batch, lr=3e-3, seed=seed, warmup_steps=10)
    else:
        raise ValueError(f"unknown preset {name!r}")
    n_dom = len(manifest.raw_counts)
    spec = StageConfig("specialist", "raw:A", steps["specialist"], batch, lr=3e-3, seed=seed,
                       warmup_steps=10)
    warm = StageConfig("warmup", "warmup", steps["warmup"], batch, lr=3e-3, seed=seed,
                       trainable="gate_shared", aux_start=1e-2, aux_end=1e-2)
    joint = StageConfig("joint", "balanced", steps["joint"], batch, lr=1e-3, seed=seed,
                        aux_start=1e-2, aux_end=1e-3)
    total = n_dom * steps["specialist"] + steps["warmup"] + steps["joint"]
    dense = StageConfig("dense_baseline", "raw:all", total, batch, lr=3e-3, seed=seed,
                        warmup_steps=10)
    return CurriculumConfig(model, manifest, spec, warm, joint, dense, seed=seed, base=base)


# ------------------------------------------------------------------ pipeline

@dataclass
class CurriculumResult:
    checkpoints: dict[str, Checkpoint]
    traces: dict[str, LossTrace]
    telemetry: dict[str, analytics.RoutingTelemetry]
    datasets: Datasets


def _start_model(cfg: CurriculumConfig, base: Checkpoint | None) -> TransformerModel:
    if base is not None:
        return model_from_checkpoint(base)
    return TransformerModel(cfg.model.dense(), seed=cfg.seed)


def train_base(cfg: CurriculumConfig, data: Datasets) -> tuple[Checkpoint, LossTrace]:
    """Shared backbone pre-training (stand-in for a pretrained foundation model)."""
    if cfg.base is None:
        raise ValueError("configuration has no base stage")
    model = TransformerModel(cfg.model.dense(), seed=cfg.seed)
    return train_stage(model, cfg.base, data.select(cfg.base.data), data.manifest.domains,
                       eval_data=data.eval)


def train_specialist(cfg: CurriculumConfig, data: Datasets, domain: str,
                     base: Checkpoint | None = None) -> tuple[Checkpoint, LossTrace]:
    # every proto-expert starts from the same initialisation (the base, when given)
    model = _start_model(cfg, base)
    stage = replace(cfg.specialist, data=f"raw:{domain}")
    return train_stage(model, stage, data.select(stage.data), data.manifest.domains,
                       eval_data=data.eval, metadata={"domain": domain})


def fuse_specialists(cfg: CurriculumConfig, specialists: dict[str, Checkpoint]) -> Checkpoint:
    plan = fusion.FusionPlan(sources=list(specialists.items()), seed=cfg.seed, **cfg.fusion)
    return fusion.fuse(plan)


def routing_telemetry(model: TransformerModel, data: SequenceSet, domains: list[str],
                      batch_size: int = 32) -> analytics.RoutingTelemetry:
    tel = analytics.RoutingTelemetry.for_model(model, domains)
    evaluate(model, data, domains, batch_size, sink=tel)
    return tel


def train_moe_stage(cfg: StageConfig, ckpt: Checkpoint, data: Datasets) -> tuple[Checkpoint, LossTrace, analytics.RoutingTelemetry]:
    model = model_from_checkpoint(ckpt)
    tel = analytics.RoutingTelemetry.for_model(model, data.manifest.domains)
    meta = {k: v for k, v in ckpt.metadata.items() if k in ("domains", "expert_order")}
    if cfg.stage == "warmup":
        meta["frozen"] = [n for n in model.params if n not in trainable_names(model, cfg.trainable)]
    out, trace = train_stage(model, cfg, data.select(cfg.data), data.manifest.domains,
                             eval_data=data.eval, sink=tel, metadata=meta)
    return out, trace, tel


def train_dense_baseline(cfg: CurriculumConfig, data: Datasets,
                         base: Checkpoint | None = None) -> tuple[Checkpoint, LossTrace]:
    """Naive joint training of one dense model on the concatenated imbalanced pools."""
    model = _start_model(cfg, base)
    return train_stage(model, cfg.dense_baseline, data.select(cfg.dense_baseline.data),
                       data.manifest.domains, eval_data=data.eval)


def run_curriculum(cfg: CurriculumConfig, data: Datasets | None = None, out_dir=None,
                   with_baseline: bool = False) -> CurriculumResult:
    """Specialists x N -> fuse -> warmup -> joint (optionally plus the dense baseline).

    With ``out_dir`` every checkpoint, trace and telemetry file is written as soon
    as it exists, so a failure leaves the completed stages on disk.
    """
    data = data or build_datasets(cfg.manifest)
    out = Path(out_dir) if out_dir is not None else None
    ckpts: dict[str, Checkpoint] = {}
    traces: dict[str, LossTrace] = {}
    tels: dict[str, analytics.RoutingTelemetry] = {}

    def persist(name, ck=None, trace=None, tel=None):
        if ck is not None:
            ckpts[name] = ck
        if trace is not None:
            traces[name] = trace
        if tel is not None:
            tels[name] = tel
        if out is None:
            return
        if ck is not None:
            fusion.save(ck, out / f"{name}.ckpt")
        if trace is not None:
            trace.save_csv(out / f"{name}_trace.csv")
        if tel is not None:
            analytics.export(tel, "json", out / f"{name}_telemetry.json")

    base = None
    if cfg.base is not None:
        base, tr = train_base(cfg, data)
        persist("base", base, tr)
    specialists = {}
    for d in data.manifest.domains:
        ck, tr = train_specialist(cfg, data, d, base)
        specialists[d] = ck
        persist(f"specialist_{d}", ck, tr)
    fused = fuse_specialists(cfg, specialists)
    persist("fused", fused)
    warmed, tr, tel = train_moe_stage(cfg.warmup, fused, data)
    persist("warmup", warmed, tr, tel)
    final, tr, tel = train_moe_stage(cfg.joint, warmed, data)
    persist("joint", final, tr, tel)
    if with_baseline:
        ck, tr = train_dense_baseline(cfg, data, base)
        persist("dense_baseline", ck, tr)
    return CurriculumResult(ckpts, traces, tels, data)

"""Command-line driver for the curriculum pipeline.

All commands share a work directory. ``gen-data`` resolves the configuration
(preset + seed + optional YAML overrides) into ``<workdir>/config.json``; every
later command reads it. Each command writes one stage directory, built in a
temporary directory and renamed into place, so a failing command leaves no
partial output.

Exit codes: 0 success, 1 user or configuration error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np
import yaml

from . import analytics, curriculum, fusion
from .curriculum import CurriculumConfig, Datasets
from .numcore import NumericError

log = logging.getLogger("dcmoe")

EXIT_OK, EXIT_USER, EXIT_NUMERIC = 0, 1, 2


class UserError(Exception):
    pass


RUN_SCHEMA = {
    "type": "object",
    "required": ["command", "config_hash", "seed", "artifacts"],
    "properties": {
        "command": {"type": "string"},
        "config_hash": {"type": "string", "pattern": "^[0-9a-f]{16}$"},
        "seed": {"type": "integer"},
        "artifacts": {"type": "array", "items": {"type": "string"}},
    },
}

ANALYSIS_SCHEMA = {
    "type": "object",
    "required": ["format", "stage", "mean_routed_active", "specialization", "conservation_errors"],
    "properties": {
        "format": {"const": "dcmoe.analysis"},
        "stage": {"type": "string"},
        "mean_routed_active": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0}},
        "specialization": {"type": "object", "additionalProperties": {"type": "number"}},
        "conservation_errors": {"type": "array", "items": {"type": "string"}},
        "losses": {"type": "object"},
    },
}

COMPARE_SCHEMA = {
    "type": "object",
    "required": ["format", "a", "b", "tolerance", "losses", "routing"],
    "properties": {
        "format": {"const": "dcmoe.compare"},
        "a": {"type": "string"},
        "b": {"type": "string"},
        "tolerance": {"type": "number"},
        "losses": {"type": "object", "additionalProperties": {
            "type": "object", "additionalProperties": {"type": "number"}}},
        "routing": {"type": "object"},
    },
}


# ------------------------------------------------------------------ helpers

def _deep_merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _deep_merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def resolve_config(preset: str, seed: int, config_file: str | None) -> CurriculumConfig:
    cfg = curriculum.preset(preset, seed).to_dict()
    if config_file:
        path = Path(config_file)
        if not path.exists():
            raise UserError(f"config file not found: {path}")
        cfg = _deep_merge(cfg, yaml.safe_load(path.read_text()) or {})
    try:
        return CurriculumConfig.from_dict(cfg)
    except (TypeError, ValueError) as exc:
        raise UserError(f"invalid configuration: {exc}") from exc


def config_hash(cfg: CurriculumConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _load_config(workdir: Path) -> CurriculumConfig:
    path = workdir / "config.json"
    if not path.exists():
        raise UserError(f"missing prerequisite: run 'gen-data' first ({path} not found)")
    return CurriculumConfig.from_dict(analytics.read_json(path))


def _require(workdir: Path, stage: str, command: str) -> Path:
    d = workdir / stage
    if not (d / "run.json").exists():
        raise UserError(f"missing prerequisite stage '{stage}': run '{command}' first")
    return d


def _load_data(workdir: Path) -> Datasets:
    _require(workdir, "data", "gen-data")
    return Datasets.load(workdir / "data")


class StageDir:
    """Build a stage directory in a temp location and move it into place on success."""

    def __init__(self, workdir: Path, name: str, command: str, cfg: CurriculumConfig):
        self.final = workdir / name
        self.command = command
        self.cfg = cfg
        self.artifacts: list[str] = []
        workdir.mkdir(parents=True, exist_ok=True)
        self.path = Path(tempfile.mkdtemp(dir=workdir, prefix=f".tmp-{name}-"))

    def file(self, name: str) -> Path:
        self.artifacts.append(name)
        return self.path / name

    def __enter__(self) -> StageDir:
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.path, ignore_errors=True)
            return False
        analytics.write_json(self.path / "run.json", {
            "command": self.command, "config_hash": config_hash(self.cfg), "seed": self.cfg.seed,
            "artifacts": sorted(self.artifacts)})
        if self.final.exists():
            shutil.rmtree(self.final)
        os.replace(self.path, self.final)
        return False


def _resolve_ckpt(workdir: Path, ref: str) -> tuple[str, fusion.Checkpoint]:
    """A stage name (``joint``, ``specialist_D``) or a checkpoint file path."""
    stage = workdir / ref / "checkpoint.ckpt"
    if stage.exists():
        return ref, fusion.load(stage)
    p = Path(ref)
    if p.is_file():
        return p.stem, fusion.load(p)
    raise UserError(f"checkpoint not found: {ref!r} (no stage directory or file)")


def _save_stage(sd: StageDir, ckpt, trace=None, tel=None) -> None:
    fusion.save(ckpt, sd.file("checkpoint.ckpt"))
    if trace is not None:
        trace.save_csv(sd.file("trace.csv"))
        if trace.final_eval:
            analytics.write_json(sd.file("eval.json"), trace.final_eval)
    if tel is not None:
        analytics.export(tel, "json", sd.file("telemetry.json"))


# ----------------------------------------------------------------- commands

def cmd_gen_data(args) -> None:
    workdir = Path(args.workdir)
    cfg = resolve_config(args.preset, args.seed, args.config)
    data = curriculum.build_datasets(cfg.manifest)
    cfg.manifest = data.manifest
    with StageDir(workdir, "data", "gen-data", cfg) as sd:
        data.save(sd.path)
        sd.artifacts += sorted(p.name for p in sd.path.iterdir())
    analytics.write_json(workdir / "config.json", cfg.to_dict())
    counts = ", ".join(f"{d}={n}" for d, n in data.manifest.raw_tokens.items())
    print(f"generated datasets in {workdir / 'data'} (raw tokens: {counts})")


def cmd_train_base(args) -> None:
    workdir = Path(args.workdir)
    cfg = _load_config(workdir)
    if cfg.base is None:
        raise UserError("this configuration has no base stage")
    data = _load_data(workdir)
    ck, tr = curriculum.train_base(cfg, data)
    with StageDir(workdir, "base", "train-base", cfg) as sd:
        _save_stage(sd, ck, tr)
    print(f"base trained: final primary loss {tr.rows[-1]['primary']:.6f}" if tr.rows else "base trained")


def _base_ckpt(workdir: Path, cfg: CurriculumConfig):
    if cfg.base is None:
        return None
    return fusion.load(_require(workdir, "base", "train-base") / "checkpoint.ckpt")


def cmd_train_specialist(args) -> None:
    workdir = Path(args.workdir)
    cfg = _load_config(workdir)
    data = _load_data(workdir)
    domains = data.manifest.domains if args.domain is None else [args.domain]
    for d in domains:
        if d not in data.manifest.domains:
            raise UserError(f"unknown domain {d!r}; expected one of {data.manifest.domains}")
    base = _base_ckpt(workdir, cfg)
    for d in domains:
        ck, tr = curriculum.train_specialist(cfg, data, d, base)
        with StageDir(workdir, f"specialist_{d}", "train-specialist", cfg) as sd:
            _save_stage(sd, ck, tr)
        print(f"specialist {d}: final primary loss {tr.rows[-1]['primary']:.6f}, "
              f"eval on {d} {tr.final_eval.get(d, float('nan')):.6f}")


def cmd_fuse(args) -> None:
    workdir = Path(args.workdir)
    cfg = _load_config(workdir)
    if args.plan:
        try:
            plan = fusion.load_plan(args.plan)
        except FileNotFoundError as exc:
            raise UserError(f"fusion plan source missing: {exc.filename}") from exc
    else:
        domains = cfg.manifest.domains
        sources = []
        for d in domains:
            sdir = workdir / f"specialist_{d}"
            if not (sdir / "run.json").exists():
                raise UserError(f"missing prerequisite stage 'specialist_{d}': "
                                f"run 'train-specialist --domain {d}' first")
            sources.append((d, str(sdir / "checkpoint.ckpt")))
        plan = fusion.FusionPlan(sources=sources, seed=cfg.seed, **cfg.fusion)
    srcs = plan.loaded_sources()
    fused = fusion.fuse(plan)
    report = fusion.verify_fusion(fused, [c for _, c in srcs], seed=cfg.seed)
    with StageDir(workdir, "fused", "fuse", cfg) as sd:
        fusion.save(fused, sd.file("checkpoint.ckpt"))
        analytics.write_json(sd.file("verification.json"), report)
    print(f"fused {len(srcs)} specialists into {fused.config.moe.n_routed} routed experts; "
          f"max split-sum residual {report['max_residual']:.3e}")


def _train_moe(args, stage: str, prereq: tuple[str, str]) -> None:
    workdir = Path(args.workdir)
    cfg = _load_config(workdir)
    src = fusion.load(_require(workdir, *prereq) / "checkpoint.ckpt")
    data = _load_data(workdir)
    ck, tr, tel = curriculum.train_moe_stage(getattr(cfg, stage), src, data)
    with StageDir(workdir, stage, f"train-{stage}", cfg) as sd:
        _save_stage(sd, ck, tr, tel)
    print(f"{stage}: final total loss {tr.rows[-1]['total']:.6f}" if tr.rows else f"{stage}: done")


def cmd_train_warmup(args) -> None:
    _train_moe(args, "warmup", ("fused", "fuse"))


def cmd_train_joint(args) -> None:
    _train_moe(args, "joint", ("warmup", "train-warmup"))


def cmd_train_dense_baseline(args) -> None:
    workdir = Path(args.workdir)
    cfg = _load_config(workdir)
    data = _load_data(workdir)
    ck, tr = curriculum.train_dense_baseline(cfg, data, _base_ckpt(workdir, cfg))
    with StageDir(workdir, "dense_baseline", "train-dense-baseline", cfg) as sd:
        _save_stage(sd, ck, tr)
    print(f"dense baseline: final primary loss {tr.rows[-1]['primary']:.6f}" if tr.rows else "done")


def _format_table(header: list[str], rows: list[list]) -> str:
    cells = [header] + [[f"{v:.6f}" if isinstance(v, float) else str(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells) + "\n"


def cmd_eval(args) -> None:
    workdir = Path(args.workdir)
    cfg = _load_config(workdir)
    data = _load_data(workdir)
    name, ck = _resolve_ckpt(workdir, args.checkpoint)
    if ck.config.vocab_size != data.manifest.vocab_size or ck.config.n_channels != data.manifest.n_channels:
        raise UserError("checkpoint vocabulary/channels do not match the datasets")
    losses = curriculum.evaluate(curriculum.model_from_checkpoint(ck), data.eval, data.manifest.domains)
    tokens = data.eval.token_counts(len(data.manifest.domains))
    rows = [[d, losses[d], int(tokens[i])] for i, d in enumerate(data.manifest.domains)]
    header = ["domain", "loss", "tokens"]
    with StageDir(workdir, f"eval-{name}", "eval", cfg) as sd:
        analytics.write_csv(sd.file("eval.csv"), header, rows)
        table = _format_table(header, rows)
        sd.file("eval.txt").write_text(table)
    print(table, end="")


def cmd_analyze(args) -> None:
    workdir = Path(args.workdir)
    cfg = _load_config(workdir)
    stage_dir = _require(workdir, args.stage, f"train-{args.stage}")
    tel_path = stage_dir / "telemetry.json"
    if not tel_path.exists():
        raise UserError(f"stage '{args.stage}' has no routing telemetry (dense or untrained model)")
    tel = analytics.load_telemetry(tel_path)
    plan = analytics.plan_dispatch_from_telemetry(tel, args.devices)
    summary = {
        "format": "dcmoe.analysis",
        "stage": args.stage,
        "mean_routed_active": {str(layer): float((np.arange(tel.n_routed + 1)
                                                 * analytics.activation_histogram(tel, layer)).sum())
                               for layer in tel.layers},
        "specialization": dict(zip(tel.domains, analytics.specialization(tel).tolist())),
        "conservation_errors": analytics.conservation_errors(tel),
    }
    trace_path = stage_dir / "trace.csv"
    if trace_path.exists():
        summary["losses"] = analytics.summarize_losses(curriculum.LossTrace.load_csv(trace_path).rows)
    with StageDir(workdir, f"analyze-{args.stage}", "analyze", cfg) as sd:
        for kind in ("histogram", "expert_domain", "null_profile"):
            analytics.export(tel, "csv", sd.file(f"{kind}.csv"), kind=kind)
        analytics.export(plan, "json", sd.file("dispatch.json"))
        analytics.write_json(sd.file("summary.json"), summary)
    print(f"analysis of '{args.stage}': {len(tel.layers)} MoE layers, "
          f"dispatch imbalance {plan.imbalance:.3f} over {plan.n_devices} devices "
          f"({plan.experts_per_device} experts each)")


def _routing_stats(ck, data: Datasets) -> dict:
    if not ck.config.is_moe:
        return {}
    model = curriculum.model_from_checkpoint(ck)
    tel = curriculum.routing_telemetry(model, data.eval, data.manifest.domains)
    k = np.arange(tel.n_routed + 1)
    return {"mean_routed_active": float(np.mean([(k * analytics.activation_histogram(tel, l)).sum()
                                                 for l in tel.layers])),
            "null_rate": float(analytics.null_skip_profile(tel).mean())}


def cmd_compare(args) -> None:
    workdir = Path(args.workdir)
    cfg = _load_config(workdir)
    data = _load_data(workdir)
    name_a, ck_a = _resolve_ckpt(workdir, args.a)
    name_b, ck_b = _resolve_ckpt(workdir, args.b)
    for c in (ck_a.config, ck_b.config):
        if (c.vocab_size, c.n_channels) != (ck_a.config.vocab_size, ck_a.config.n_channels) or \
                c.vocab_size != data.manifest.vocab_size:
            raise UserError("checkpoints are not comparable (vocabulary/channel mismatch)")
    doms = data.manifest.domains
    la = curriculum.evaluate(curriculum.model_from_checkpoint(ck_a), data.eval, doms)
    lb = curriculum.evaluate(curriculum.model_from_checkpoint(ck_b), data.eval, doms)
    header = ["domain", f"loss_{name_a}", f"loss_{name_b}", "delta", "regression"]
    rows = []
    for d in doms:
        delta = lb[d] - la[d]
        rows.append([d, la[d], lb[d], delta, int(delta > args.tolerance)])
    report = {"format": "dcmoe.compare", "a": name_a, "b": name_b, "tolerance": args.tolerance,
              "losses": {name_a: la, name_b: lb},
              "routing": {name_a: _routing_stats(ck_a, data), name_b: _routing_stats(ck_b, data)}}
    with StageDir(workdir, f"compare-{name_a}-vs-{name_b}", "compare", cfg) as sd:
        analytics.write_csv(sd.file("compare.csv"), header, rows)
        analytics.write_json(sd.file("compare.json"), report)
        table = _format_table(header, rows)
        sd.file("compare.txt").write_text(table)
    print(table, end="")


# -------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dcmoe", description=__doc__.splitlines()[0])
    p.add_argument("--workdir", default="run", help="shared run directory (default: ./run)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate synthetic domain datasets")
    g.add_argument("--preset", choices=("smoke", "full"), default="smoke")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config", help="YAML file overriding preset values")
    g.set_defaults(func=cmd_gen_data)

    sub.add_parser("train-base", help="pre-train the shared backbone (full preset)") \
        .set_defaults(func=cmd_train_base)
    s = sub.add_parser("train-specialist", help="train dense proto-expert(s)")
    s.add_argument("--domain", help="domain to train (default: all)")
    s.set_defaults(func=cmd_train_specialist)

    f = sub.add_parser("fuse", help="fuse specialist checkpoints into an MoE checkpoint")
    f.add_argument("--plan", help="YAML fusion plan (default: the run's specialists)")
    f.set_defaults(func=cmd_fuse)

    sub.add_parser("train-warmup", help="train gates and shared experts").set_defaults(func=cmd_train_warmup)
    sub.add_parser("train-joint", help="train the whole MoE model").set_defaults(func=cmd_train_joint)
    sub.add_parser("train-dense-baseline", help="naive joint dense training") \
        .set_defaults(func=cmd_train_dense_baseline)

    e = sub.add_parser("eval", help="per-domain held-out losses")
    e.add_argument("--checkpoint", required=True, help="stage name or checkpoint path")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="routing analyses and dispatch plan for a stage")
    a.add_argument("--stage", default="joint")
    a.add_argument("--devices", type=int, default=4)
    a.set_defaults(func=cmd_analyze)

    c = sub.add_parser("compare", help="side-by-side per-domain comparison")
    c.add_argument("--a", required=True)
    c.add_argument("--b", required=True)
    c.add_argument("--tolerance", type=float, default=0.0)
    c.set_defaults(func=cmd_compare)
    return p


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
    level = os.environ.get("DCMOE_LOG_LEVEL", "WARNING").upper()
    try:
        log.setLevel(level)
    except ValueError:
        print(f"error: invalid DCMOE_LOG_LEVEL {level!r}", file=sys.stderr)
        return EXIT_USER
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (NumericError, curriculum.DivergenceError) as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UserError, fusion.CheckpointError, analytics.TelemetryError, ValueError, KeyError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

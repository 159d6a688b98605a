"""Checkpoint file format and dense-to-MoE checkpoint surgery.

File layout (all integers little-endian)::

    magic      8 bytes   b"DCMOECKP"
    version    uint32
    hdr_len    uint64    length of the JSON header in bytes
    header     hdr_len   UTF-8 JSON, keys sorted, no whitespace:
                         {"config": {...}, "metadata": {...},
                          "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    payload    raw little-endian tensor bytes, in header order (sorted by name);
               offsets are relative to the start of the payload

Fusion turns N dense proto-expert checkpoints into one MoE checkpoint: each FFN
is split along its hidden dimension into ``parts`` experts (source ``s`` part
``j`` becomes routed expert ``parts * s + j``), attention/norm/embedding/head
tensors are averaged, and the gate and shared experts are freshly initialised.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .model import MoEConfig, ModelConfig, param_shapes
from .moe_layer import ffn_np
from .numcore import Rng

MAGIC = b"DCMOECKP"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_FFN_KEYS = ("w_in", "b_in", "w_out", "b_out")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        shapes = param_shapes(self.config)
        missing = sorted(set(shapes) - set(self.tensors))
        extra = sorted(set(self.tensors) - set(shapes))
        if missing or extra:
            raise CheckpointError(f"tensor set does not match config: missing={missing} extra={extra}")
        for name, shape in shapes.items():
            if tuple(self.tensors[name].shape) != shape:
                raise CheckpointError(f"{name}: shape {self.tensors[name].shape} != {shape}")

    @property
    def frozen(self) -> list[str]:
        return list(self.metadata.get("frozen", []))

    def n_parameters(self) -> int:
        return sum(int(t.size) for t in self.tensors.values())


def to_bytes(ckpt: Checkpoint) -> bytes:
    entries, chunks, offset = [], [], 0
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name])
        dtype = arr.dtype.newbyteorder("<")
        raw = arr.astype(dtype, copy=False).tobytes()
        entries.append({"name": name, "dtype": dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {"config": ckpt.config.to_dict(), "metadata": ckpt.metadata, "tensors": entries}
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(hdr)) + hdr + b"".join(chunks)


def from_bytes(buf: bytes) -> Checkpoint:
    if len(buf) < _PREFIX.size:
        raise CheckpointError("truncated checkpoint")
    magic, version, hdr_len = _PREFIX.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = _PREFIX.size
    header = json.loads(buf[start:start + hdr_len].decode("utf-8"))
    payload = memoryview(buf)[start + hdr_len:]
    tensors = {}
    for e in header["tensors"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"truncated payload for {e['name']}")
        tensors[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return Checkpoint(ModelConfig.from_dict(header["config"]), tensors, header["metadata"])


def save(ckpt: Checkpoint, path: str | os.PathLike) -> Path:
    """Write atomically (temp file + rename) so a failed write leaves no partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".ckpt")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(to_bytes(ckpt))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load(path: str | os.PathLike) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


# ------------------------------------------------------------------- surgery

def split_ffn(dense: dict[str, np.ndarray], parts: int = 2) -> list[dict[str, np.ndarray]]:
    """Partition an FFN's hidden units into ``parts`` contiguous experts.

    The output bias is divided equally, so the experts' outputs sum exactly to
    the dense FFN output.
    """
    hidden = dense["w_in"].shape[1]
    if parts < 1 or hidden % parts:
        raise ValueError(f"hidden dimension {hidden} is not divisible into {parts} parts")
    width = hidden // parts
    out = []
    for j in range(parts):
        cols = slice(j * width, (j + 1) * width)
        out.append({
            "w_in": dense["w_in"][:, cols].copy(),
            "b_in": dense["b_in"][cols].copy(),
            "w_out": dense["w_out"][cols, :].copy(),
            "b_out": dense["b_out"] / parts,
        })
    return out


def average_shared(sources: list, names: list[str]) -> dict[str, np.ndarray]:
    """Elementwise mean of the named tensors across sources (checkpoints or tensor dicts)."""
    if not sources:
        raise ValueError("no sources to average")
    dicts = [s.tensors if isinstance(s, Checkpoint) else s for s in sources]
    out = {}
    for name in names:
        arrs = [d[name] for d in dicts]
        if any(a.shape != arrs[0].shape for a in arrs):
            raise ValueError(f"shape mismatch across sources for {name}")
        if all(np.array_equal(a, arrs[0]) for a in arrs[1:]):
            # the mean of equal tensors is exact; summing then dividing may round
            out[name] = np.array(arrs[0], dtype=np.float64)
            continue
        acc = np.zeros_like(arrs[0], dtype=np.float64)
        for a in arrs:
            acc = acc + a
        out[name] = acc / len(arrs)
    return out


@dataclass
class FusionPlan:
    """Which dense checkpoints to fuse and how.

    ``sources`` pairs a domain tag with a checkpoint (or a path to one).
    ``expert_order[parts*s + j]`` is the routed slot receiving part ``j`` of
    source ``s``; the default is the identity.
    """

    sources: list[tuple[str, Checkpoint | str]]
    parts: int = 2
    n_null: int = 1
    n_shared: int = 2
    threshold_p: float = 0.7
    shared_hidden: int | None = None
    shared_init: str = "random"     # "random" | "zeros"
    gate_init: str = "normal"       # "normal" | "zeros"
    gate_std: float = 0.02
    expert_order: list[int] | None = None
    null_in_denominator: bool = True
    seed: int = 0

    def loaded_sources(self) -> list[tuple[str, Checkpoint]]:
        return [(tag, src if isinstance(src, Checkpoint) else load(src)) for tag, src in self.sources]


def load_plan(path: str | os.PathLike) -> FusionPlan:
    """Read a YAML fusion plan; relative source paths resolve against the plan's directory."""
    path = Path(path)
    raw = yaml.safe_load(path.read_text()) or {}
    if "sources" not in raw:
        raise ValueError("fusion plan needs a 'sources' list")
    sources = []
    for item in raw.pop("sources"):
        src = Path(item["path"])
        sources.append((str(item["domain"]), str(src if src.is_absolute() else path.parent / src)))
    return FusionPlan(sources=sources, **raw)


def _dense_ffn(ckpt: Checkpoint, layer: int) -> dict[str, np.ndarray]:
    return {k: ckpt.tensors[f"layers.{layer}.ffn.{k}"] for k in _FFN_KEYS}


def fuse(plan: FusionPlan) -> Checkpoint:
    sources = plan.loaded_sources()
    if not sources:
        raise ValueError("fusion plan has no sources")
    base = sources[0][1].config
    for tag, ck in sources:
        if ck.config != base:
            raise CheckpointError(f"source {tag!r} config differs from {sources[0][0]!r}")
        if base.is_moe:
            raise CheckpointError(f"source {tag!r} is not a dense checkpoint")
    n_routed = plan.parts * len(sources)
    order = list(range(n_routed)) if plan.expert_order is None else list(plan.expert_order)
    if sorted(order) != list(range(n_routed)):
        raise ValueError(f"expert_order must be a permutation of 0..{n_routed - 1}")
    if base.ffn_hidden % plan.parts:
        raise ValueError(f"ffn_hidden {base.ffn_hidden} not divisible by {plan.parts}")
    expert_hidden = base.ffn_hidden // plan.parts
    moe = MoEConfig(n_routed=n_routed, n_null=plan.n_null, n_shared=plan.n_shared,
                    threshold_p=plan.threshold_p, expert_hidden=expert_hidden,
                    shared_hidden=plan.shared_hidden or expert_hidden,
                    null_in_denominator=plan.null_in_denominator)
    cfg = ModelConfig(**{**base.to_dict(), "moe": moe, "moe_layers": None})
    shapes = param_shapes(cfg)

    ckpts = [ck for _, ck in sources]
    common = [n for n in param_shapes(base) if ".ffn." not in n]
    tensors = average_shared(ckpts, common)
    rng = Rng(plan.seed, ("fuse",))
    frozen = []
    d = cfg.d_model
    for layer in range(cfg.n_layers):
        pre = f"layers.{layer}.moe"
        for s, ck in enumerate(ckpts):
            for j, half in enumerate(split_ffn(_dense_ffn(ck, layer), plan.parts)):
                slot = order[plan.parts * s + j]
                for k in _FFN_KEYS:
                    name = f"{pre}.routed.{slot}.{k}"
                    tensors[name] = half[k]
                    frozen.append(name)
        gname = f"{pre}.gate"
        if plan.gate_init == "zeros":
            tensors[gname] = np.zeros(shapes[gname])
        else:
            tensors[gname] = rng.split(gname).normal(shapes[gname], plan.gate_std)
        for i in range(moe.n_shared):
            for k in _FFN_KEYS:
                name = f"{pre}.shared.{i}.{k}"
                r = rng.split(name)
                if plan.shared_init == "zeros" or k.startswith("b_"):
                    tensors[name] = np.zeros(shapes[name])
                elif k == "w_in":
                    tensors[name] = r.normal(shapes[name], 1.0 / math.sqrt(d))
                else:
                    tensors[name] = r.normal(shapes[name], 1.0 / math.sqrt(moe.shared_hidden)
                                             / math.sqrt(2 * cfg.n_layers))
    meta = {
        "stage": "fused",
        "domains": [tag for tag, _ in sources],
        "expert_order": order,
        "frozen": sorted(frozen),
        "seed": plan.seed,
        "step": 0,
    }
    return Checkpoint(cfg, tensors, meta)


def verify_fusion(fused: Checkpoint, sources: list[Checkpoint], n_inputs: int = 64,
                  seed: int = 0) -> dict:
    """Max |sum of a source's experts(x) - source FFN(x)| per source and layer, on random x."""
    m = fused.config.moe
    parts = m.n_routed // len(sources)
    order = fused.metadata.get("expert_order", list(range(m.n_routed)))
    rng = Rng(seed, ("verify",))
    residuals = {}
    for s, src in enumerate(sources):
        for layer in range(fused.config.n_layers):
            x = rng.split(s, layer).normal((n_inputs, fused.config.d_model))
            ref = ffn_np(_dense_ffn(src, layer), x)
            acc = np.zeros_like(ref)
            for j in range(parts):
                pre = f"layers.{layer}.moe.routed.{order[parts * s + j]}"
                acc += ffn_np({k: fused.tensors[f"{pre}.{k}"] for k in _FFN_KEYS}, x)
            residuals[f"{s}:{layer}"] = float(np.abs(acc - ref).max())
    return {"max_residual": max(residuals.values()), "residuals": residuals}

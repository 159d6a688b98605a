"""Routing telemetry, routing analyses, expert-parallel dispatch planning, exports.

Telemetry counters are all integers. Mixing weights are accumulated in fixed
point (``WEIGHT_SCALE`` units per 1.0) so merging shards is exact and order
independent.
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

WEIGHT_SCALE = 2 ** 32


class TelemetryError(ValueError):
    pass


class RoutingTelemetry:
    """Per-(layer, expert, domain) routing counters for a set of MoE layers.

    Arrays (``L`` = number of tracked layers, ``E`` = routed + null experts,
    ``R`` = routed experts, ``D`` = domains):

    - ``selections[L, E, D]``: how often each expert was selected
    - ``weight_fx[L, E, D]``: summed mixing weight, fixed point
    - ``hist[L, R + 1, D]``: tokens by number of routed experts selected
    - ``tokens[L, D]``: tokens seen
    - ``null_tokens[L, D]``: tokens that selected at least one null expert
    - ``top_co[L, R, R]``: tokens whose highest-weight routed expert is ``h``
      and which also selected ``j`` (the diagonal counts tokens with top ``h``)
    """

    def __init__(self, layers: list[int], n_routed: int, n_null: int, domains: list[str]):
        self.layers = [int(x) for x in layers]
        self.n_routed = int(n_routed)
        self.n_null = int(n_null)
        self.domains = [str(d) for d in domains]
        L, E, R, D = len(self.layers), self.n_experts, self.n_routed, len(self.domains)
        self.selections = np.zeros((L, E, D), dtype=np.int64)
        self.weight_fx = np.zeros((L, E, D), dtype=np.int64)
        self.hist = np.zeros((L, R + 1, D), dtype=np.int64)
        self.tokens = np.zeros((L, D), dtype=np.int64)
        self.null_tokens = np.zeros((L, D), dtype=np.int64)
        self.top_co = np.zeros((L, R, R), dtype=np.int64)

    @classmethod
    def for_model(cls, model, domains: list[str]) -> RoutingTelemetry:
        m = model.config.moe
        if m is None:
            raise TelemetryError("model has no MoE layers")
        return cls(model.moe_layer_indices(), m.n_routed, m.n_null, domains)

    @property
    def n_experts(self) -> int:
        return self.n_routed + self.n_null

    def _row(self, layer: int) -> int:
        try:
            return self.layers.index(int(layer))
        except ValueError:
            raise TelemetryError(f"layer {layer} is not tracked") from None

    def record(self, layer: int, mask: np.ndarray, weights: np.ndarray, n_routed: int,
               token_domains: np.ndarray | None = None, token_valid: np.ndarray | None = None) -> None:
        """Add one MoE forward's selections (the sink interface used by the layer)."""
        if n_routed != self.n_routed or mask.shape[1] != self.n_experts:
            raise TelemetryError("routing shape does not match telemetry")
        li = self._row(layer)
        n = mask.shape[0]
        dom = np.zeros(n, dtype=np.int64) if token_domains is None else np.asarray(token_domains)
        if token_valid is not None:
            keep = np.asarray(token_valid, dtype=bool)
            mask, weights, dom = mask[keep], weights[keep], dom[keep]
        R, D = self.n_routed, len(self.domains)
        if dom.size and (dom.min() < 0 or dom.max() >= D):
            raise TelemetryError("token domain index out of range")
        onehot = np.zeros((mask.shape[0], D), dtype=np.int64)
        onehot[np.arange(mask.shape[0]), dom] = 1
        m = mask.astype(np.int64)
        self.selections[li] += m.T @ onehot
        wfx = np.rint(np.where(mask, weights, 0.0) * WEIGHT_SCALE).astype(np.int64)
        self.weight_fx[li] += wfx.T @ onehot
        active = m[:, :R].sum(axis=1)
        np.add.at(self.hist[li], (active, dom), 1)
        self.tokens[li] += onehot.sum(axis=0)
        if self.n_null:
            self.null_tokens[li] += (m[:, R:].sum(axis=1) > 0).astype(np.int64) @ onehot
        has = active > 0
        if has.any():
            rw = np.where(mask[:, :R], weights[:, :R], -1.0)
            top = np.argmax(rw, axis=1)[has]
            np.add.at(self.top_co[li], top, m[has, :R])

    def merge(self, other: RoutingTelemetry) -> RoutingTelemetry:
        if (self.layers, self.n_routed, self.n_null, self.domains) != \
                (other.layers, other.n_routed, other.n_null, other.domains):
            raise TelemetryError("cannot merge telemetries with different layouts")
        out = self.copy()
        for k in _ARRAYS:
            setattr(out, k, getattr(out, k) + getattr(other, k))
        return out

    def copy(self) -> RoutingTelemetry:
        out = RoutingTelemetry(self.layers, self.n_routed, self.n_null, self.domains)
        for k in _ARRAYS:
            setattr(out, k, getattr(self, k).copy())
        return out

    def weight_sums(self) -> np.ndarray:
        return self.weight_fx / WEIGHT_SCALE

    def total_tokens(self) -> int:
        return int(self.tokens.sum())

    def to_dict(self) -> dict:
        d = {"format": "dcmoe.telemetry", "version": 1, "layers": self.layers,
             "n_routed": self.n_routed, "n_null": self.n_null, "domains": self.domains,
             "weight_scale": WEIGHT_SCALE}
        for k in _ARRAYS:
            d[k] = getattr(self, k).tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> RoutingTelemetry:
        if d.get("format") != "dcmoe.telemetry":
            raise TelemetryError("not a telemetry document")
        out = cls(d["layers"], d["n_routed"], d["n_null"], d["domains"])
        for k in _ARRAYS:
            arr = np.asarray(d[k], dtype=np.int64).reshape(getattr(out, k).shape)
            setattr(out, k, arr)
        return out


_ARRAYS = ("selections", "weight_fx", "hist", "tokens", "null_tokens", "top_co")


# ------------------------------------------------------------------ analyses

def _require_data(tel: RoutingTelemetry) -> None:
    if tel.total_tokens() == 0:
        raise TelemetryError("telemetry is empty")


def activation_histogram(tel: RoutingTelemetry, layer: int, bins: list[tuple[int, int]] | None = None,
                         domain: int | None = None) -> np.ndarray:
    """Fraction of tokens at ``layer`` selecting k routed experts, k = 0..R.

    ``bins`` groups counts into inclusive ranges, e.g. ``[(0, 1), (2, 3), (4, 8)]``.
    """
    li = tel._row(layer)
    h = tel.hist[li].sum(axis=1) if domain is None else tel.hist[li, :, domain]
    total = h.sum()
    if total == 0:
        raise TelemetryError(f"layer {layer} has no observed tokens")
    dist = h / total
    if bins is None:
        return dist
    return np.array([dist[lo:hi + 1].sum() for lo, hi in bins])


def expert_domain_matrix(tel: RoutingTelemetry) -> np.ndarray:
    """[L, E, D]: for each (layer, expert), the share of its selections coming from each domain.

    Experts never selected get an all-zero row.
    """
    _require_data(tel)
    s = tel.selections.astype(np.float64)
    tot = s.sum(axis=2, keepdims=True)
    return np.divide(s, tot, out=np.zeros_like(s), where=tot > 0)


def domain_expert_share(tel: RoutingTelemetry) -> np.ndarray:
    """[L, D, R]: for each (layer, domain), the share of routed mixing-weight mass per routed expert."""
    _require_data(tel)
    w = tel.weight_sums()[:, : tel.n_routed, :].transpose(0, 2, 1)
    tot = w.sum(axis=2, keepdims=True)
    return np.divide(w, tot, out=np.zeros_like(w), where=tot > 0)


def specialization(tel: RoutingTelemetry, parts: int = 2) -> np.ndarray:
    """Per domain ``s``: mass share of routed experts ``parts*s .. parts*s+parts-1``, averaged over layers."""
    share = domain_expert_share(tel)
    out = np.zeros(len(tel.domains))
    for s in range(len(tel.domains)):
        out[s] = share[:, s, parts * s:parts * (s + 1)].sum(axis=1).mean()
    return out


def null_skip_profile(tel: RoutingTelemetry) -> np.ndarray:
    """[L, D] fraction of tokens that selected a null expert."""
    _require_data(tel)
    t = tel.tokens.astype(np.float64)
    return np.divide(tel.null_tokens, t, out=np.zeros_like(t), where=t > 0)


def routed_selections(tel: RoutingTelemetry) -> np.ndarray:
    """[L] total routed-expert selections per layer."""
    return tel.selections[:, : tel.n_routed, :].sum(axis=(1, 2))


def conservation_errors(tel: RoutingTelemetry) -> list[str]:
    """Empty when histogram mass and selection counts are mutually consistent."""
    errs = []
    k = np.arange(tel.n_routed + 1)
    for li, layer in enumerate(tel.layers):
        if tel.hist[li].sum(axis=0).tolist() != tel.tokens[li].tolist():
            errs.append(f"layer {layer}: histogram mass != token count")
        if int((k[:, None] * tel.hist[li]).sum()) != int(routed_selections(tel)[li]):
            errs.append(f"layer {layer}: sum k*hist != routed selections")
        if int(tel.selections[li].sum()) < int(tel.tokens[li].sum()):
            errs.append(f"layer {layer}: fewer selections than tokens")
    return errs


# ------------------------------------------------------------------- dispatch

@dataclass
class DispatchPlan:
    n_devices: int
    experts_per_device: int
    assignment: list[int]          # routed expert -> device
    device_load: list[float]       # sum of expert load shares per device
    imbalance: float               # max / mean device load
    cross_device_traffic: float    # off-device dispatch units per token (see plan_dispatch)

    @property
    def max_load(self) -> float:
        return max(self.device_load)

    def to_dict(self) -> dict:
        return asdict(self)


def plan_dispatch(loads, n_devices: int = 4, co_selection: np.ndarray | None = None,
                  n_tokens: int | None = None) -> DispatchPlan:
    """Place routed experts on devices, each holding ``len(loads) / n_devices`` experts.

    Greedy longest-processing-time: experts in descending load order go to the
    least-loaded device that still has a free slot (ties -> lowest device id).

    Traffic: a token's home device hosts its highest-weight routed expert; each
    other selected expert hosted elsewhere costs one unit. With ``co_selection``
    (``top_co`` counts) and ``n_tokens`` this is exact units per token; without
    it, selections are assumed independent and the figure is the off-device
    share of ordered expert pairs weighted by load.
    """
    loads = np.asarray(loads, dtype=np.float64)
    r = loads.shape[0]
    if n_devices < 1 or r % n_devices:
        raise ValueError(f"{r} experts cannot be split evenly over {n_devices} devices")
    per = r // n_devices
    total = loads.sum()
    shares = loads / total if total > 0 else np.full(r, 1.0 / r)

    order = np.argsort(-shares, kind="stable")
    dev_load = np.zeros(n_devices)
    slots = np.zeros(n_devices, dtype=np.int64)
    assignment = np.zeros(r, dtype=np.int64)
    for e in order:
        free = np.flatnonzero(slots < per)
        dev = free[np.argmin(dev_load[free])]
        assignment[e] = dev
        dev_load[dev] += shares[e]
        slots[dev] += 1

    off = assignment[:, None] != assignment[None, :]
    if co_selection is not None:
        co = np.asarray(co_selection, dtype=np.float64).copy()
        np.fill_diagonal(co, 0.0)
        traffic = float((co * off).sum() / n_tokens) if n_tokens else 0.0
    else:
        pair = np.outer(shares, shares)
        np.fill_diagonal(pair, 0.0)
        traffic = float((pair * off).sum() / pair.sum()) if pair.sum() > 0 else 0.0
    mean = dev_load.mean()
    return DispatchPlan(n_devices, per, assignment.tolist(), dev_load.tolist(),
                        float(dev_load.max() / mean) if mean > 0 else 1.0, traffic)


def plan_dispatch_from_telemetry(tel: RoutingTelemetry, n_devices: int = 4,
                                 layer: int | None = None) -> DispatchPlan:
    """Plan using observed routed selection counts; ``layer=None`` pools all layers
    (expert ``i`` of every layer shares a device, as in standard expert parallelism)."""
    _require_data(tel)
    rows = slice(None) if layer is None else [tel._row(layer)]
    loads = tel.selections[rows, : tel.n_routed, :].sum(axis=(0, 2))
    co = tel.top_co[rows].sum(axis=0)
    n_tok = int(tel.tokens[rows].sum())
    return plan_dispatch(loads, n_devices, co_selection=co, n_tokens=n_tok)


def uniform_dispatch(n_routed: int = 8, n_devices: int = 4) -> DispatchPlan:
    return plan_dispatch(np.ones(n_routed), n_devices)


# -------------------------------------------------------------------- exports

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _parse(s: str):
    for conv in (int, float):
        try:
            return conv(s)
        except ValueError:
            pass
    return s


def write_csv(path: str | os.PathLike, header: list[str], rows: list[list]) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return _write_text(path, buf.getvalue())


def read_csv(path: str | os.PathLike) -> tuple[list[str], list[list]]:
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r)
        return header, [[_parse(v) for v in row] for row in r]


def write_json(path: str | os.PathLike, obj) -> Path:
    return _write_text(path, json.dumps(obj, sort_keys=True, indent=1) + "\n")


def read_json(path: str | os.PathLike):
    return json.loads(Path(path).read_text())


def _write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
    return path


HISTOGRAM_COLUMNS = ["layer", "n_active", "tokens", "fraction"]
EXPERT_DOMAIN_COLUMNS = ["layer", "expert", "domain", "selections", "share", "weight_share"]
NULL_PROFILE_COLUMNS = ["layer", "domain", "tokens", "null_tokens", "rate"]


def histogram_rows(tel: RoutingTelemetry) -> list[list]:
    rows = []
    for li, layer in enumerate(tel.layers):
        h = tel.hist[li].sum(axis=1)
        tot = h.sum()
        for k in range(tel.n_routed + 1):
            rows.append([layer, k, int(h[k]), float(h[k] / tot) if tot else 0.0])
    return rows


def expert_domain_rows(tel: RoutingTelemetry) -> list[list]:
    share = expert_domain_matrix(tel)
    wshare = domain_expert_share(tel)
    rows = []
    for li, layer in enumerate(tel.layers):
        for e in range(tel.n_experts):
            for d, name in enumerate(tel.domains):
                ws = float(wshare[li, d, e]) if e < tel.n_routed else 0.0
                rows.append([layer, e, name, int(tel.selections[li, e, d]), float(share[li, e, d]), ws])
    return rows


def null_profile_rows(tel: RoutingTelemetry) -> list[list]:
    prof = null_skip_profile(tel)
    return [[layer, name, int(tel.tokens[li, d]), int(tel.null_tokens[li, d]), float(prof[li, d])]
            for li, layer in enumerate(tel.layers) for d, name in enumerate(tel.domains)]


def export(obj, fmt: str, path: str | os.PathLike, kind: str = "histogram") -> Path:
    """Write telemetry, a dispatch plan or a loss trace.

    Telemetry: ``fmt="json"`` dumps every counter; ``fmt="csv"`` writes the table
    named by ``kind`` ("histogram", "expert_domain" or "null_profile").
    """
    if isinstance(obj, RoutingTelemetry):
        if fmt == "json":
            return write_json(path, obj.to_dict())
        if fmt == "csv":
            table = {"histogram": (HISTOGRAM_COLUMNS, histogram_rows),
                     "expert_domain": (EXPERT_DOMAIN_COLUMNS, expert_domain_rows),
                     "null_profile": (NULL_PROFILE_COLUMNS, null_profile_rows)}
            if kind not in table:
                raise ValueError(f"unknown telemetry table {kind!r}")
            cols, fn = table[kind]
            return write_csv(path, cols, fn(obj))
    if isinstance(obj, DispatchPlan) and fmt == "json":
        return write_json(path, {"format": "dcmoe.dispatch", **obj.to_dict()})
    if hasattr(obj, "csv_rows") and fmt == "csv":
        header, rows = obj.csv_rows()
        return write_csv(path, header, rows)
    raise ValueError(f"cannot export {type(obj).__name__} as {fmt}")


def load_telemetry(path: str | os.PathLike) -> RoutingTelemetry:
    return RoutingTelemetry.from_dict(read_json(path))


_INT_ARRAY = {"type": "array"}

TELEMETRY_SCHEMA = {
    "type": "object",
    "required": ["format", "version", "layers", "n_routed", "n_null", "domains", "weight_scale",
                 *_ARRAYS],
    "properties": {
        "format": {"const": "dcmoe.telemetry"},
        "version": {"const": 1},
        "layers": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "n_routed": {"type": "integer", "minimum": 0},
        "n_null": {"type": "integer", "minimum": 0},
        "domains": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "weight_scale": {"type": "integer"},
        **{k: _INT_ARRAY for k in _ARRAYS},
    },
}

DISPATCH_SCHEMA = {
    "type": "object",
    "required": ["format", "n_devices", "experts_per_device", "assignment", "device_load",
                 "imbalance", "cross_device_traffic"],
    "properties": {
        "format": {"const": "dcmoe.dispatch"},
        "n_devices": {"type": "integer", "minimum": 1},
        "experts_per_device": {"type": "integer", "minimum": 1},
        "assignment": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "device_load": {"type": "array", "items": {"type": "number", "minimum": 0}},
        "imbalance": {"type": "number", "minimum": 1.0},
        "cross_device_traffic": {"type": "number", "minimum": 0},
    },
}


def validate(doc: dict, schema: dict) -> None:
    import jsonschema

    jsonschema.validate(doc, schema)


# ------------------------------------------------------------- loss curves

def summarize_losses(steps: list[dict], key: str = "primary") -> dict[str, dict]:
    """Per-stage first/last/min/mean of a loss column and its step-to-step volatility."""
    by_stage: dict[str, list[float]] = {}
    for row in steps:
        by_stage.setdefault(row["stage"], []).append(float(row[key]))
    out = {}
    for stage, vals in by_stage.items():
        v = np.asarray(vals)
        out[stage] = {"first": float(v[0]), "last": float(v[-1]), "min": float(v.min()),
                      "mean": float(v.mean()),
                      "volatility": float(np.diff(v).std()) if v.size > 2 else 0.0,
                      "steps": int(v.size)}
    return out

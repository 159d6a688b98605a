"""Toy decoder-only transformer with dense or dynamic-capacity MoE FFN blocks.

Tokens carry ``n_channels`` parallel codebook ids per position. Channel
embeddings are summed, and one output head per channel predicts the next
token of that channel, so all channels are decoded in parallel.

Blocks are pre-norm (RMS) with causal multi-head attention and either a dense
GELU FFN or an :class:`~dcmoe.moe_layer.ExpertPool`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import moe_layer
from .moe_layer import ExpertPool, FFNParams
from .numcore import (
    NumericError,
    Rng,
    Tensor,
    add,
    cross_entropy,
    embedding,
    matmul,
    mul,
    parameter,
    rms_norm,
    softmax,
    take_rows,
)


@dataclass(frozen=True)
class MoEConfig:
    n_routed: int = 8
    n_null: int = 1
    n_shared: int = 2
    threshold_p: float = 0.7
    expert_hidden: int = 128
    shared_hidden: int = 128
    null_in_denominator: bool = True
    router: str = "top_p"
    top_k: int = 2

    def __post_init__(self):
        if not 0.0 < self.threshold_p <= 1.0:
            raise ValueError(f"threshold_p must lie in (0, 1], got {self.threshold_p}")
        if self.router not in ("top_p", "top_k"):
            raise ValueError(f"unknown router {self.router!r}")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    vocab_size: int = 64
    n_channels: int = 2
    max_seq_len: int = 64
    ffn_hidden: int = 256
    moe: MoEConfig | None = None
    # indices of layers using the MoE block; None means every layer when ``moe`` is set
    moe_layers: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.n_channels < 1:
            raise ValueError("need at least one channel")
        if self.moe_layers is not None:
            object.__setattr__(self, "moe_layers", tuple(int(i) for i in self.moe_layers))

    def is_moe_layer(self, layer: int) -> bool:
        if self.moe is None:
            return False
        return self.moe_layers is None or layer in self.moe_layers

    @property
    def is_moe(self) -> bool:
        return any(self.is_moe_layer(i) for i in range(self.n_layers))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        if d.get("moe") is not None:
            d["moe"] = MoEConfig(**d["moe"])
        if d.get("moe_layers") is not None:
            d["moe_layers"] = tuple(d["moe_layers"])
        return cls(**d)

    def dense(self) -> ModelConfig:
        return replace(self, moe=None, moe_layers=None)


@dataclass
class Batch:
    """``ids`` [B, T, C] ints; ``domains`` [B] domain indices; ``mask`` [B, T] valid tokens."""

    ids: np.ndarray
    domains: np.ndarray
    mask: np.ndarray = None

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.ndim != 3:
            raise ValueError("batch ids must have shape [batch, seq, channels]")
        self.domains = np.asarray(self.domains, dtype=np.int64).reshape(-1)
        if self.domains.shape[0] != self.ids.shape[0]:
            raise ValueError("need exactly one domain label per sequence")
        if self.mask is None:
            self.mask = np.ones(self.ids.shape[:2], dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)

    @property
    def n_tokens(self) -> int:
        return int(self.mask.sum())


@dataclass
class ForwardResult:
    logits: list[Tensor]          # one [B*T, V] tensor per channel
    layer_outputs: dict[int, moe_layer.LayerOutput] = field(default_factory=dict)
    shape: tuple[int, int] = (0, 0)

    @property
    def masks(self) -> dict[int, np.ndarray]:
        return {k: v.mask for k, v in self.layer_outputs.items()}

    def logits_array(self) -> np.ndarray:
        b, t = self.shape
        return np.stack([lg.data.reshape(b, t, -1) for lg in self.logits], axis=2)


@dataclass
class LossResult:
    total: Tensor
    primary: float
    aux: float
    per_channel: np.ndarray
    per_domain: dict[int, float]
    per_domain_tokens: dict[int, int]
    forward: ForwardResult


def _ffn_names(prefix: str) -> list[str]:
    return [f"{prefix}.{n}" for n in ("w_in", "b_in", "w_out", "b_out")]


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical parameter names and shapes for a configuration."""
    d, v = cfg.d_model, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {}
    for c in range(cfg.n_channels):
        shapes[f"embed.{c}"] = (v, d)
    shapes["pos"] = (cfg.max_seq_len, d)
    for layer in range(cfg.n_layers):
        p = f"layers.{layer}"
        shapes[f"{p}.attn_norm"] = (d,)
        for w in ("wq", "wk", "wv", "wo"):
            shapes[f"{p}.attn.{w}"] = (d, d)
        shapes[f"{p}.ffn_norm"] = (d,)
        if cfg.is_moe_layer(layer):
            m = cfg.moe
            shapes[f"{p}.moe.gate"] = (d, m.n_routed + m.n_null)
            for kind, count, hidden in (("routed", m.n_routed, m.expert_hidden),
                                        ("shared", m.n_shared, m.shared_hidden)):
                for i in range(count):
                    q = f"{p}.moe.{kind}.{i}"
                    shapes[f"{q}.w_in"] = (d, hidden)
                    shapes[f"{q}.b_in"] = (hidden,)
                    shapes[f"{q}.w_out"] = (hidden, d)
                    shapes[f"{q}.b_out"] = (d,)
        else:
            q = f"{p}.ffn"
            shapes[f"{q}.w_in"] = (d, cfg.ffn_hidden)
            shapes[f"{q}.b_in"] = (cfg.ffn_hidden,)
            shapes[f"{q}.w_out"] = (cfg.ffn_hidden, d)
            shapes[f"{q}.b_out"] = (d,)
    shapes["final_norm"] = (d,)
    for c in range(cfg.n_channels):
        shapes[f"head.{c}"] = (d, v)
    return shapes


def init_params(cfg: ModelConfig, rng: Rng, gate_std: float = 0.02) -> dict[str, np.ndarray]:
    """Fresh parameters; each tensor draws from its own named sub-stream."""
    out: dict[str, np.ndarray] = {}
    d = cfg.d_model
    for name, shape in param_shapes(cfg).items():
        r = rng.split(name)
        leaf = name.rsplit(".", 1)[-1]
        if name.endswith("norm"):
            out[name] = np.ones(shape)
        elif leaf in ("b_in", "b_out"):
            out[name] = np.zeros(shape)
        elif leaf == "w_in":
            out[name] = r.normal(shape, 1.0 / math.sqrt(d))
        elif leaf == "w_out":
            out[name] = r.normal(shape, 1.0 / math.sqrt(shape[0]) / math.sqrt(2 * cfg.n_layers))
        elif leaf == "gate":
            out[name] = r.normal(shape, gate_std)
        elif leaf == "wo":
            out[name] = r.normal(shape, 1.0 / math.sqrt(d) / math.sqrt(2 * cfg.n_layers))
        elif leaf in ("wq", "wk", "wv"):
            out[name] = r.normal(shape, 1.0 / math.sqrt(d))
        else:  # embeddings, positions, heads
            out[name] = r.normal(shape, 0.02)
    return out


class TransformerModel:
    """Parameters plus forward/loss. Parameter names are stable for checkpointing."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None,
                 seed: int = 0):
        self.config = config
        arrays = params if params is not None else init_params(config, Rng(seed, ("init",)))
        shapes = param_shapes(config)
        missing = set(shapes) - set(arrays)
        extra = set(arrays) - set(shapes)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        self.params: dict[str, Tensor] = {}
        for name, shape in shapes.items():
            arr = np.array(arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
            self.params[name] = parameter(arr, name=name)
        self.gate_offsets: dict[int, np.ndarray] = {}

    # ---------------------------------------------------------------- views
    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def _ffn(self, prefix: str) -> FFNParams:
        p = self.params
        return FFNParams(*(p[n] for n in _ffn_names(prefix)))

    def pool(self, layer: int) -> ExpertPool:
        m = self.config.moe
        pre = f"layers.{layer}.moe"
        return ExpertPool(
            n_routed=m.n_routed,
            n_null=m.n_null,
            gate_weights=self.params[f"{pre}.gate"],
            routed=[self._ffn(f"{pre}.routed.{i}") for i in range(m.n_routed)],
            shared=[self._ffn(f"{pre}.shared.{i}") for i in range(m.n_shared)],
            threshold_p=m.threshold_p,
            null_in_denominator=m.null_in_denominator,
            gate_offset=self.gate_offsets.get(layer),
        )

    def moe_layer_indices(self) -> list[int]:
        return [i for i in range(self.config.n_layers) if self.config.is_moe_layer(i)]

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    # -------------------------------------------------------------- forward
    def forward(self, batch: Batch, masks: dict[int, np.ndarray] | None = None,
                sink=None) -> ForwardResult:
        """Causal forward pass. ``masks`` replays routing selections per MoE layer."""
        cfg = self.config
        ids = batch.ids
        b, t, c = ids.shape
        if t > cfg.max_seq_len:
            raise ValueError(f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}")
        if c != cfg.n_channels:
            raise ValueError(f"batch has {c} channels, model expects {cfg.n_channels}")
        if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
            raise ValueError("token id outside the vocabulary")
        p = self.params
        d, h = cfg.d_model, cfg.n_heads
        dh = d // h
        n = b * t

        x = embedding(p["embed.0"], ids[:, :, 0].reshape(-1))
        for ch in range(1, c):
            x = add(x, embedding(p[f"embed.{ch}"], ids[:, :, ch].reshape(-1)))
        pos = take_rows(p["pos"], np.tile(np.arange(t), b))
        x = add(x, pos)

        causal = np.tril(np.ones((t, t), dtype=bool))[None, None]
        token_domains = np.repeat(batch.domains, t)
        token_valid = batch.mask.reshape(-1)
        layer_outputs: dict[int, moe_layer.LayerOutput] = {}
        for layer in range(cfg.n_layers):
            pre = f"layers.{layer}"
            try:
                hn = rms_norm(x, p[f"{pre}.attn_norm"])
                q = matmul(hn, p[f"{pre}.attn.wq"]).reshape(b, t, h, dh).transpose(0, 2, 1, 3)
                k = matmul(hn, p[f"{pre}.attn.wk"]).reshape(b, t, h, dh).transpose(0, 2, 3, 1)
                v = matmul(hn, p[f"{pre}.attn.wv"]).reshape(b, t, h, dh).transpose(0, 2, 1, 3)
                att = softmax(mul(matmul(q, k), 1.0 / math.sqrt(dh)), axis=-1, where=causal)
                ctx = matmul(att, v).transpose(0, 2, 1, 3).reshape(n, d)
                x = add(x, matmul(ctx, p[f"{pre}.attn.wo"]))
                hn = rms_norm(x, p[f"{pre}.ffn_norm"])
                if cfg.is_moe_layer(layer):
                    lo = moe_layer.forward(
                        self.pool(layer), hn,
                        mask=None if masks is None else masks.get(layer),
                        router=cfg.moe.router, top_k=cfg.moe.top_k, layer=layer, sink=sink,
                        token_domains=token_domains, token_valid=token_valid)
                    layer_outputs[layer] = lo
                    x = add(x, lo.output)
                else:
                    x = add(x, moe_layer.ffn(self._ffn(f"{pre}.ffn"), hn))
            except NumericError as exc:
                raise NumericError(f"layer {layer}: {exc}") from exc
        x = rms_norm(x, p["final_norm"])
        logits = [matmul(x, p[f"head.{ch}"]) for ch in range(c)]
        return ForwardResult(logits, layer_outputs, (b, t))

    def forward_logits(self, batch: Batch, sink=None) -> np.ndarray:
        """Logits as a plain array of shape [B, T, C, V]."""
        return self.forward(batch, sink=sink).logits_array()

    # ------------------------------------------------------------------ loss
    def loss(self, batch: Batch, aux_weight: float = 0.0,
             masks: dict[int, np.ndarray] | None = None, sink=None) -> LossResult:
        """Next-token cross-entropy (mean over channels and valid targets) plus weighted aux loss.

        The logits at position t predict the tokens at t + 1; a target counts when
        both positions are valid.
        """
        if aux_weight < 0:
            raise ValueError("aux_weight must be nonnegative")
        fr = self.forward(batch, masks=masks, sink=sink)
        b, t = fr.shape
        valid = (batch.mask[:, :-1] & batch.mask[:, 1:]).reshape(-1)
        src = (np.arange(b)[:, None] * t + np.arange(t - 1)[None, :]).reshape(-1)[valid]
        if src.size == 0:
            raise ValueError("loss mask selects no targets")
        row_domain = np.repeat(batch.domains, t - 1)[valid]

        ce_terms: list[Tensor] = []
        row_nll = np.zeros(src.size)
        per_channel = np.zeros(len(fr.logits))
        for ch, lg in enumerate(fr.logits):
            targets = batch.ids[:, 1:, ch].reshape(-1)[valid]
            ce, rows = cross_entropy(take_rows(lg, src), targets, return_rows=True)
            ce_terms.append(ce)
            row_nll += rows
            per_channel[ch] = float(ce.data)
        primary = ce_terms[0]
        for ce in ce_terms[1:]:
            primary = add(primary, ce)
        primary = mul(primary, 1.0 / len(ce_terms))

        total = primary
        aux_val = 0.0
        if fr.layer_outputs:
            aux_terms = [moe_layer.layer_aux_loss(lo) for lo in fr.layer_outputs.values()]
            aux = aux_terms[0]
            for a in aux_terms[1:]:
                aux = add(aux, a)
            aux = mul(aux, 1.0 / len(aux_terms))
            aux_val = float(aux.data)
            if aux_weight:
                total = add(primary, mul(aux, float(aux_weight)))

        row_nll /= len(fr.logits)
        per_domain, per_domain_tokens = {}, {}
        for dom in np.unique(row_domain):
            sel = row_domain == dom
            per_domain[int(dom)] = float(row_nll[sel].mean())
            per_domain_tokens[int(dom)] = int(sel.sum())
        return LossResult(total, float(primary.data), aux_val, per_channel,
                          per_domain, per_domain_tokens, fr)

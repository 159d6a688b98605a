"""Dynamic-capacity mixture-of-experts layer.

A token's gate distribution covers ``n_routed`` FFN experts followed by
``n_null`` null experts (always the last columns). Top-P routing keeps the
shortest prefix of the descending-sorted distribution whose cumulative mass
reaches ``p``; the selected probabilities are renormalised into mixing weights.
Null experts output zero, so selecting them attenuates the routed contribution
(or skips it entirely). Shared experts run on every token and are added
unweighted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numcore import (
    NumericError,
    Tensor,
    add,
    gelu,
    matmul,
    mul,
    scatter_rows,
    softmax_rows,
    take_rows,
    tensor_mean,
    tensor_sum,
)


@dataclass
class FFNParams:
    """Two-layer GELU feed-forward block mapping d -> hidden -> d."""

    w_in: Tensor
    b_in: Tensor
    w_out: Tensor
    b_out: Tensor

    @property
    def hidden(self) -> int:
        return self.w_in.shape[1]

    def tensors(self) -> dict[str, Tensor]:
        return {"w_in": self.w_in, "b_in": self.b_in, "w_out": self.w_out, "b_out": self.b_out}


def ffn(params: FFNParams, x: Tensor) -> Tensor:
    h = gelu(add(matmul(x, params.w_in), params.b_in))
    return add(matmul(h, params.w_out), params.b_out)


def ffn_np(params: dict[str, np.ndarray], x: np.ndarray) -> np.ndarray:
    """Plain-array FFN evaluation (no graph), used by fusion checks and oracles."""
    from scipy.special import erf

    h = x @ params["w_in"] + params["b_in"]
    h = 0.5 * h * (1.0 + erf(h / math.sqrt(2.0)))
    return h @ params["w_out"] + params["b_out"]


@dataclass
class ExpertPool:
    """Parameters of one MoE layer.

    ``gate_offset`` is a constant (non-trainable) logit offset, zero in normal
    use; analyses and harnesses set it to force a routing pattern.
    """

    n_routed: int
    n_null: int
    gate_weights: Tensor
    routed: list[FFNParams]
    shared: list[FFNParams] = field(default_factory=list)
    threshold_p: float = 0.7
    null_in_denominator: bool = True
    gate_offset: np.ndarray | None = None

    def __post_init__(self):
        if not 0.0 < self.threshold_p <= 1.0:
            raise ValueError(f"threshold_p must lie in (0, 1], got {self.threshold_p}")
        if self.n_routed < 0 or self.n_null < 0 or self.n_experts < 1:
            raise ValueError("expert pool needs at least one expert")
        if len(self.routed) != self.n_routed:
            raise ValueError(f"expected {self.n_routed} routed experts, got {len(self.routed)}")
        if self.gate_weights.shape[1] != self.n_experts:
            raise ValueError(
                f"gate has {self.gate_weights.shape[1]} columns, pool has {self.n_experts} experts")
        d = self.gate_weights.shape[0]
        for e in self.routed + self.shared:
            if e.w_in.shape[0] != d or e.w_out.shape[1] != d:
                raise ValueError("every expert must map d -> d")

    @property
    def n_experts(self) -> int:
        return self.n_routed + self.n_null

    @property
    def n_shared(self) -> int:
        return len(self.shared)

    @property
    def d_model(self) -> int:
        return self.gate_weights.shape[0]

    @property
    def max_routed_active(self) -> int:
        """Upper bound on routed experts any token can select."""
        return min(self.n_routed, math.ceil(self.threshold_p * self.n_experts - 1e-12))


@dataclass
class RoutingDecision:
    """Selection for a single token."""

    selected: tuple[int, ...]
    mix_weights: np.ndarray
    n_routed_active: int


@dataclass
class LayerOutput:
    output: Tensor
    probs: Tensor
    mask: np.ndarray          # bool [n_tokens, n_experts]
    weights: Tensor           # mixing weights [n_tokens, n_experts], zero off-mask
    assignment_frac: np.ndarray
    mean_probs: Tensor
    n_routed: int

    @property
    def n_routed_active(self) -> np.ndarray:
        return self.mask[:, : self.n_routed].sum(axis=1)

    def decision(self, token: int) -> RoutingDecision:
        w = self.weights.data[token]
        probs = self.probs.data[token]
        sel = np.flatnonzero(self.mask[token])
        order = sel[np.lexsort((sel, -probs[sel]))]
        return RoutingDecision(tuple(int(i) for i in order), w[order].copy(),
                               int(self.n_routed_active[token]))

    def decisions(self) -> list[RoutingDecision]:
        return [self.decision(t) for t in range(self.mask.shape[0])]


# ------------------------------------------------------------------ selection

def _check_row(probs: np.ndarray) -> np.ndarray:
    row = np.asarray(probs, dtype=np.float64)
    if row.ndim != 1 or row.size == 0:
        raise ValueError("expected a non-empty probability row")
    if np.any(row < 0) or abs(row.sum() - 1.0) > 1e-6:
        raise ValueError("probability row must be nonnegative and sum to 1")
    return row


def _descending_order(probs: np.ndarray) -> np.ndarray:
    # stable sort on negated probs: ties keep ascending expert index
    return np.argsort(-probs, axis=-1, kind="stable")


def top_p_mask(probs: np.ndarray, p: float) -> np.ndarray:
    """Top-P selection mask for every row of ``probs`` (shape [n, E])."""
    if not 0.0 < p <= 1.0:
        raise ValueError(f"threshold p must lie in (0, 1], got {p}")
    probs = np.atleast_2d(probs)
    order = _descending_order(probs)
    sorted_p = np.take_along_axis(probs, order, axis=1)
    n, e = probs.shape
    # compensated running sum: ``s + c`` tracks the exact prefix mass, and because
    # ``s - p`` is exact near p the comparison does not depend on rounding
    s = np.zeros(n)
    c = np.zeros(n)
    count = np.full(n, e)  # rows short of p even with every expert keep them all
    for j in range(e):
        x = sorted_p[:, j]
        t = s + x
        c += np.where(np.abs(s) >= np.abs(x), (s - t) + x, (x - t) + s)
        s = t
        count = np.where((count == e) & (s - p >= -c), np.minimum(count, j + 1), count)
    keep_sorted = np.arange(probs.shape[1])[None, :] < count[:, None]
    mask = np.zeros_like(keep_sorted)
    np.put_along_axis(mask, order, keep_sorted, axis=1)
    return mask


def top_k_mask(probs: np.ndarray, k: int) -> np.ndarray:
    probs = np.atleast_2d(probs)
    if not 1 <= k <= probs.shape[1]:
        raise ValueError(f"k must lie in [1, {probs.shape[1]}], got {k}")
    order = _descending_order(probs)[:, :k]
    mask = np.zeros(probs.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=1)
    return mask


def _decision_from_mask(row: np.ndarray, mask: np.ndarray, n_routed: int | None) -> RoutingDecision:
    order = _descending_order(row)
    sel = order[mask[order]]
    w = row[sel] / row[sel].sum()
    n_r = len(sel) if n_routed is None else int((sel < n_routed).sum())
    return RoutingDecision(tuple(int(i) for i in sel), w, n_r)


def select_top_p(probs, p: float, n_routed: int | None = None) -> RoutingDecision:
    """Smallest expert set whose cumulative probability reaches ``p``.

    >>> select_top_p([0.5, 0.3, 0.15, 0.05], 0.7).selected
    (0, 1)
    """
    row = _check_row(probs)
    return _decision_from_mask(row, top_p_mask(row[None, :], p)[0], n_routed)


def select_top_k(probs, k: int, n_routed: int | None = None) -> RoutingDecision:
    row = _check_row(probs)
    return _decision_from_mask(row, top_k_mask(row[None, :], k)[0], n_routed)


# -------------------------------------------------------------------- forward

def gate(pool: ExpertPool, x: Tensor) -> Tensor:
    """Gate distribution over the full pool: softmax(x @ W_g) with null columns included."""
    if x.ndim != 2 or x.shape[1] != pool.d_model:
        raise ValueError(f"gate expects input [n, {pool.d_model}], got {x.shape}")
    logits = matmul(x, pool.gate_weights)
    if pool.gate_offset is not None:
        logits = add(logits, Tensor(np.asarray(pool.gate_offset, dtype=logits.data.dtype)))
    return softmax_rows(logits)


def forward(pool: ExpertPool, x: Tensor, mask: np.ndarray | None = None,
            router: str = "top_p", top_k: int = 2, layer: int | None = None,
            sink=None, token_domains: np.ndarray | None = None,
            token_valid: np.ndarray | None = None) -> LayerOutput:
    """Run the MoE layer on ``x`` ([n_tokens, d]).

    ``mask`` replays a previous selection (routing frozen); otherwise the router
    ("top_p" or "top_k") chooses. Selection is treated as a constant: gradients
    reach the gate only through the renormalised mixing weights.
    """
    try:
        return _forward(pool, x, mask, router, top_k, layer, sink, token_domains, token_valid)
    except NumericError as exc:
        if str(exc).startswith("non-finite MoE output"):
            raise
        token = _first_bad_token(pool, x.data, mask)
        raise NumericError(f"non-finite MoE intermediate at layer {layer}, token {token}: {exc}") from exc


def _first_bad_token(pool: ExpertPool, x: np.ndarray, mask: np.ndarray | None) -> int | None:
    """Diagnostic replay with plain arrays: the first token whose gate or expert outputs overflow."""
    with np.errstate(all="ignore"):
        logits = x @ pool.gate_weights.data
        bad = ~np.isfinite(logits).all(axis=1)
        used = np.ones((x.shape[0], pool.n_routed), dtype=bool) if mask is None \
            else np.asarray(mask, dtype=bool)[:, : pool.n_routed]
        for i, e in enumerate(pool.routed):
            y = ffn_np({k: t.data for k, t in e.tensors().items()}, x)
            bad |= used[:, i] & ~np.isfinite(y).all(axis=1)
        for e in pool.shared:
            bad |= ~np.isfinite(ffn_np({k: t.data for k, t in e.tensors().items()}, x)).all(axis=1)
    rows = np.flatnonzero(bad)
    return int(rows[0]) if rows.size else None


def _forward(pool, x, mask, router, top_k, layer, sink, token_domains, token_valid) -> LayerOutput:
    n = x.shape[0]
    probs = gate(pool, x)
    if mask is None:
        mask = top_p_mask(probs.data, pool.threshold_p) if router == "top_p" \
            else top_k_mask(probs.data, top_k)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != probs.shape:
        raise ValueError(f"routing mask shape {mask.shape} != {probs.shape}")

    selected = mul(probs, Tensor(mask.astype(probs.data.dtype)))
    if pool.null_in_denominator:
        denom = tensor_sum(selected, axis=1, keepdims=True)
    else:
        routed_mass = tensor_sum(selected[:, : pool.n_routed], axis=1, keepdims=True)
        # tokens routed only to null experts: avoid 0/0, their routed weights are all 0
        denom = add(routed_mass, Tensor((routed_mass.data == 0).astype(probs.data.dtype)))
    weights = selected / denom

    parts: list[Tensor] = []
    for i, expert in enumerate(pool.routed):
        rows = np.flatnonzero(mask[:, i])
        if rows.size == 0:
            continue
        h = ffn(expert, take_rows(x, rows))
        w_i = take_rows(weights[:, i:i + 1], rows)
        parts.append(scatter_rows(mul(h, w_i), rows, n))
    for expert in pool.shared:
        parts.append(ffn(expert, x))
    if parts:
        out = parts[0]
        for t in parts[1:]:
            out = add(out, t)
    else:
        out = Tensor(np.zeros_like(x.data))
    _check_rows(out.data, layer)

    counts = mask.sum(axis=0).astype(np.float64)
    total = counts.sum()
    frac = counts / total if total else counts
    result = LayerOutput(out, probs, mask, weights, frac, tensor_mean(probs, axis=0), pool.n_routed)
    if sink is not None:
        sink.record(layer if layer is not None else 0, mask, weights.data, pool.n_routed,
                    token_domains, token_valid)
    return result


def _check_rows(out: np.ndarray, layer: int | None) -> None:
    bad = ~np.isfinite(out).all(axis=1)
    if bad.any():
        raise NumericError(f"non-finite MoE output at layer {layer}, token {int(np.flatnonzero(bad)[0])}")


def aux_load_balance_loss(frac: np.ndarray, mean_probs: Tensor) -> Tensor:
    """Switch-style balance loss ``E * sum_i f_i * mean_prob_i`` over the full pool.

    ``frac`` (f_i) is a constant; gradients flow through ``mean_probs`` only.
    Uniform routing gives 1; collapse onto a single expert gives about E.
    """
    frac = np.asarray(frac, dtype=np.float64)
    if frac.sum() <= 0:
        raise ValueError("aux loss needs at least one routed token")
    e = frac.shape[0]
    return mul(tensor_sum(mul(mean_probs, Tensor(frac))), float(e))


def layer_aux_loss(out: LayerOutput) -> Tensor:
    return aux_load_balance_loss(out.assignment_frac, out.mean_probs)

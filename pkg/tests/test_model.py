import math

import numpy as np
import pytest

from dcmoe.model import Batch, MoEConfig, ModelConfig, TransformerModel, param_shapes
from dcmoe.moe_layer import ffn, ffn_np
from dcmoe.numcore import NumericError, Rng, Tensor, grad_check

TINY = ModelConfig(n_layers=2, d_model=16, n_heads=2, vocab_size=11, n_channels=2, max_seq_len=12,
                   ffn_hidden=24)
TINY_MOE = ModelConfig(**{**TINY.to_dict(), "moe": MoEConfig(n_routed=4, n_null=1, n_shared=1,
                                                             expert_hidden=6, shared_hidden=6)})


def random_batch(cfg, b=3, t=9, seed=0, domains=None):
    ids = Rng(seed).integers(0, cfg.vocab_size, (b, t, cfg.n_channels))
    return Batch(ids, np.arange(b) % 4 if domains is None else domains)


@pytest.mark.parametrize("cfg", [TINY, TINY_MOE], ids=["dense", "moe"])
def test_causality(cfg):
    model = TransformerModel(cfg, seed=1)
    batch = random_batch(cfg)
    base = model.forward_logits(batch)
    assert base.shape == (3, 9, 2, 11)
    masks = model.forward(batch).masks
    for t in range(9):
        ids = batch.ids.copy()
        ids[:, t + 1:] = Rng(t).integers(0, cfg.vocab_size, ids[:, t + 1:].shape)
        # routing replays the original selection so only causality is under test
        changed = model.forward(Batch(ids, batch.domains), masks=masks)
        assert np.array_equal(changed.logits_array()[:, : t + 1], base[:, : t + 1])


def test_causality_with_live_routing():
    # routing is per token, so the routed forward is causal without replay too
    model = TransformerModel(TINY_MOE, seed=2)
    batch = random_batch(TINY_MOE, seed=3)
    base = model.forward_logits(batch)
    ids = batch.ids.copy()
    ids[:, 5:] = (ids[:, 5:] + 1) % TINY_MOE.vocab_size
    assert np.array_equal(model.forward_logits(Batch(ids, batch.domains))[:, :5], base[:, :5])


def test_single_position_depends_only_on_first_tokens():
    model = TransformerModel(TINY, seed=3)
    batch = random_batch(TINY, t=6, seed=4)
    one = model.forward_logits(Batch(batch.ids[:, :1], batch.domains))
    longer = model.forward_logits(batch)
    assert np.max(np.abs(one[:, 0] - longer[:, 0])) <= 1e-12


def test_zero_aux_weight_total_equals_primary():
    model = TransformerModel(TINY_MOE, seed=4)
    res = model.loss(random_batch(TINY_MOE), aux_weight=0.0)
    assert float(res.total.data) == res.primary
    assert res.aux > 0
    res2 = model.loss(random_batch(TINY_MOE), aux_weight=0.5)
    assert abs(float(res2.total.data) - (res2.primary + 0.5 * res2.aux)) < 1e-12


def test_uniform_model_loss_is_log_vocab():
    model = TransformerModel(TINY, seed=5)
    for c in range(TINY.n_channels):
        model.params[f"head.{c}"].data[:] = 0.0
    res = model.loss(random_batch(TINY))
    assert np.allclose(res.per_channel, math.log(TINY.vocab_size), atol=1e-12)


def test_channel_symmetry_with_tied_init():
    model = TransformerModel(TINY_MOE, seed=6)
    model.params["embed.1"].data[:] = model.params["embed.0"].data
    model.params["head.1"].data[:] = model.params["head.0"].data
    ids = Rng(7).integers(0, 11, (2, 8, 1)).repeat(2, axis=2)
    res = model.loss(Batch(ids, [0, 1]))
    assert abs(res.per_channel[0] - res.per_channel[1]) <= 1e-9


def test_single_expert_moe_equals_dense():
    moe_cfg = ModelConfig(**{**TINY.to_dict(), "moe": MoEConfig(
        n_routed=1, n_null=0, n_shared=0, expert_hidden=TINY.ffn_hidden, shared_hidden=1)})
    dense = TransformerModel(TINY, seed=8)
    params = {}
    for name in param_shapes(moe_cfg):
        if ".moe.gate" in name:
            params[name] = Rng(9).normal(param_shapes(moe_cfg)[name])
        elif ".moe.routed.0." in name:
            params[name] = dense.params[name.replace("moe.routed.0", "ffn")].data
        else:
            params[name] = dense.params[name].data
    moe = TransformerModel(moe_cfg, params)
    batch = random_batch(TINY, seed=10)
    assert np.max(np.abs(moe.forward_logits(batch) - dense.forward_logits(batch))) <= 1e-10


def test_model_grad_check():
    model = TransformerModel(TINY_MOE, seed=11)
    for name, p in model.params.items():
        if ".moe.gate" in name:
            p.data[:] = Rng(12).split(name).normal(p.shape, 0.5)
    batch = random_batch(TINY_MOE, b=2, t=6, seed=13)
    masks = model.forward(batch).masks
    params = list(model.params.values())
    err = grad_check(lambda: model.loss(batch, 0.05, masks=masks).total, params, n_samples=2)
    assert err < 1e-4


def test_parameter_names_are_stable():
    names = list(param_shapes(TINY_MOE))
    assert names[:3] == ["embed.0", "embed.1", "pos"]
    assert "layers.1.moe.routed.3.w_out" in names and "layers.0.moe.gate" in names
    assert names[-2:] == ["head.0", "head.1"]
    assert param_shapes(TINY_MOE)["layers.0.moe.gate"] == (16, 5)


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        MoEConfig(threshold_p=0.0)
    assert ModelConfig.from_dict(TINY_MOE.to_dict()) == TINY_MOE


def test_batch_validation():
    with pytest.raises(ValueError):
        Batch(np.zeros((2, 3)), [0, 0])
    with pytest.raises(ValueError):
        Batch(np.zeros((2, 3, 2)), [0])
    model = TransformerModel(TINY, seed=0)
    with pytest.raises(ValueError):
        model.forward(Batch(np.full((1, 3, 2), 11), [0]))
    with pytest.raises(ValueError):
        model.forward(Batch(np.zeros((1, 13, 2)), [0]))


def test_empty_loss_mask_is_an_error():
    model = TransformerModel(TINY, seed=0)
    batch = Batch(np.zeros((2, 4, 2)), [0, 1], mask=np.zeros((2, 4), dtype=bool))
    with pytest.raises(ValueError):
        model.loss(batch)


def test_numeric_error_names_layer():
    model = TransformerModel(TINY, seed=0)
    model.params["layers.1.ffn.w_out"].data[:] = 1e308
    model.params["layers.1.ffn.w_in"].data[:] = 1e3
    with pytest.raises(NumericError, match="layer 1"):
        model.forward(random_batch(TINY))


def test_per_domain_losses_are_token_weighted():
    model = TransformerModel(TINY, seed=14)
    batch = random_batch(TINY, b=4, t=7, domains=[0, 0, 2, 3])
    res = model.loss(batch)
    weighted = sum(res.per_domain[d] * res.per_domain_tokens[d] for d in res.per_domain)
    assert abs(weighted / sum(res.per_domain_tokens.values()) - res.primary) < 1e-12
    assert res.per_domain_tokens == {0: 12, 2: 6, 3: 6}


def test_dense_ffn_block_matches_plain_evaluation():
    model = TransformerModel(TINY, seed=15)
    x = Rng(16).normal((5, 16))
    got = ffn(model._ffn("layers.0.ffn"), Tensor(x)).data
    ref = ffn_np({k: model.params[f"layers.0.ffn.{k}"].data for k in ("w_in", "b_in", "w_out", "b_out")}, x)
    assert np.max(np.abs(got - ref)) < 1e-12

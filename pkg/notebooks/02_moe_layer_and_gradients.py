# %% [markdown]
# # The MoE layer and its gradients
#
# A small two-layer model where every feed-forward block is an expert pool
# (routed, null and shared experts). The autodiff engine is plain numpy.

# %%
import numpy as np

from dcmoe import Batch, MoEConfig, ModelConfig, Rng, TransformerModel, grad_check

cfg = ModelConfig(n_layers=2, d_model=16, n_heads=2, vocab_size=11, n_channels=2, max_seq_len=12,
                  ffn_hidden=24, moe=MoEConfig(n_routed=4, n_null=1, n_shared=1, expert_hidden=6,
                                               shared_hidden=6))
model = TransformerModel(cfg, seed=0)
for name, p in model.params.items():
    if name.endswith(".moe.gate"):
        p.data[:] = Rng(1).split(name).normal(p.shape, 0.5)
batch = Batch(Rng(2).integers(0, 11, (2, 6, 2)), domains=[0, 1])

# %% [markdown]
# ## Routing statistics

# %%
res = model.forward(batch)
for layer, out in res.layer_outputs.items():
    counts = np.bincount(out.n_routed_active, minlength=cfg.moe.n_routed + 1)
    print(f"layer {layer}: tokens by routed-expert count {counts.tolist()}")

# %% [markdown]
# ## Loss with the load-balancing term

# %%
loss = model.loss(batch, aux_weight=0.05)
print(f"primary {loss.primary:.4f}  aux {loss.aux:.4f}  total {float(loss.total.data):.4f}")

# %% [markdown]
# ## Finite-difference check
#
# Selection is a discrete choice, so the check replays the recorded masks and
# differentiates the rest.

# %%
masks = res.masks
err = grad_check(lambda: model.loss(batch, 0.05, masks=masks).total, model.params.values(), n_samples=3)
print(f"max relative gradient error: {err:.2e}")

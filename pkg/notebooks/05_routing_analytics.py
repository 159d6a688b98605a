# %% [markdown]
# # Routing analytics
#
# Telemetry is gathered while the jointly trained model evaluates the held-out set:
# how many experts each token uses, which domains each expert serves, and how
# often tokens pick a null expert.

# %%
import numpy as np

from dcmoe import analytics, curriculum

cfg = curriculum.preset("smoke", seed=0)
result = curriculum.run_curriculum(cfg)
data = result.datasets
model = curriculum.model_from_checkpoint(result.checkpoints["joint"])
tel = curriculum.routing_telemetry(model, data.eval, data.manifest.domains)
print("conservation errors:", analytics.conservation_errors(tel))

# %% [markdown]
# ## Activated-expert histogram

# %%
for layer in tel.layers:
    hist = analytics.activation_histogram(tel, layer)
    print(f"layer {layer}: " + " ".join(f"{k}:{v:.2f}" for k, v in enumerate(hist) if v))

# %% [markdown]
# ## Expert-domain affinity
#
# Experts `2s` and `2s+1` come from domain `s`'s specialist.

# %%
share = analytics.domain_expert_share(tel)
for s, d in enumerate(tel.domains):
    print(f"domain {d}: " + " ".join(f"{v:.2f}" for v in share[:, s].mean(axis=0)))
print("own-expert share:", np.round(analytics.specialization(tel), 3))

# %% [markdown]
# ## Null-expert usage

# %%
print(np.round(analytics.null_skip_profile(tel), 3))

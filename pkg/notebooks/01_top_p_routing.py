# %% [markdown]
# # Top-P routing
#
# The router keeps the smallest set of experts whose gate probabilities reach
# the threshold `p`. Confident tokens use few experts; uncertain tokens use many.

# %%
import numpy as np

from dcmoe import select_top_k, select_top_p

probs = np.array([0.5, 0.3, 0.15, 0.05])
dec = select_top_p(probs, 0.7)
print("selected:", dec.selected, "mixing weights:", dec.mix_weights)

# %% [markdown]
# Equal probabilities are broken in favour of the lower expert index, so the
# choice is reproducible.

# %%
print(select_top_p(np.full(8, 1 / 8), 0.7).selected)
print(select_top_p([0.3, 0.2, 0.2, 0.3], 0.7).selected)

# %% [markdown]
# ## Expert count against router confidence
#
# Sharpening the distribution (lower temperature) shrinks the selected set.
# Top-K always uses the same number of experts.

# %%
rng = np.random.default_rng(0)
logits = rng.normal(size=8)
for temperature in (4.0, 1.0, 0.25):
    z = np.exp(logits / temperature)
    row = z / z.sum()
    print(f"T={temperature:4}: top-p picks {len(select_top_p(row, 0.7).selected)}, "
          f"top-2 picks {len(select_top_k(row, 2).selected)}")

# %% [markdown]
# ## Null experts
#
# Null experts sit in the last columns of the pool. Selecting one costs no
# compute, so `n_routed_active` counts only the real experts.

# %%
row = np.array([0.2, 0.1, 0.1, 0.6])
dec = select_top_p(row, 0.7, n_routed=3)
print("selected:", dec.selected, "routed experts used:", dec.n_routed_active)

# %% [markdown]
# # Placing experts on devices
#
# Eight routed experts go on four devices, two each. The planner assigns
# heavier experts first to the least-loaded device with a free slot.

# %%
import itertools

import numpy as np

from dcmoe import analytics

plan = analytics.plan_dispatch([4, 4, 1, 1, 1, 1, 1, 1], n_devices=4)
print("assignment:", plan.assignment)
print("device load:", np.round(plan.device_load, 3), "imbalance:", round(plan.imbalance, 3))

# %% [markdown]
# ## Against the exhaustive optimum
#
# With two experts per device there are only 105 ways to pair eight experts.


# %%
def best_pairing(loads):
    best = float("inf")
    for perm in itertools.permutations(range(8)):
        if all(perm[i] < perm[i + 1] for i in range(0, 8, 2)) and \
                all(perm[i] < perm[i + 2] for i in range(0, 6, 2)):
            best = min(best, max(loads[perm[i]] + loads[perm[i + 1]] for i in range(0, 8, 2)))
    return best


rng = np.random.default_rng(0)
ratios = []
for _ in range(20):
    loads = rng.integers(1, 6, 8)
    ratios.append(analytics.plan_dispatch(loads).max_load * loads.sum() / best_pairing(loads))
print("worst ratio over 20 random cases:", max(ratios))

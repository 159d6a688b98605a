# %% [markdown]
# # The training curriculum
#
# Four synthetic domains with an imbalanced raw pool (D is about 5% of it).
# One specialist per domain, fusion, a warmup stage that trains only gates and
# shared experts, then joint training of everything. A dense model trained
# naively on the raw pool serves as the baseline.

# %%
from dcmoe import curriculum

cfg = curriculum.preset("smoke", seed=0)
data = curriculum.build_datasets(cfg.manifest)
total = sum(data.manifest.raw_tokens.values())
for d, n in data.manifest.raw_tokens.items():
    print(f"domain {d}: {n} raw tokens ({n / total:.1%})")

# %%
result = curriculum.run_curriculum(cfg, data, with_baseline=True)

# %% [markdown]
# ## Per-domain evaluation losses

# %%
print("stage".ljust(16) + "".join(d.rjust(9) for d in data.manifest.domains))
for name, trace in result.traces.items():
    print(name.ljust(16) + "".join(f"{trace.final_eval[d]:9.4f}" for d in data.manifest.domains))

# %% [markdown]
# ## The annealed balance weight

# %%
rows = result.traces["joint"].rows
print("aux weight at first, middle, last step:",
      rows[0]["aux_weight"], rows[len(rows) // 2]["aux_weight"], rows[-1]["aux_weight"])

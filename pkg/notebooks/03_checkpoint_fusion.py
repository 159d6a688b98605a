# %% [markdown]
# # Fusing dense specialists into an MoE checkpoint
#
# Each specialist's FFN is split along its hidden units into two halves whose
# outputs sum to the original. The halves become routed experts; the other
# weights are averaged.

# %%
import tempfile
from pathlib import Path

import numpy as np

from dcmoe import Rng, fusion
from dcmoe.fusion import Checkpoint, FusionPlan
from dcmoe.model import ModelConfig, TransformerModel
from dcmoe.moe_layer import ffn_np

cfg = ModelConfig(n_layers=2, d_model=16, n_heads=2, vocab_size=13, n_channels=2, max_seq_len=10,
                  ffn_hidden=20)
specialists = [(d, Checkpoint(cfg, TransformerModel(cfg, seed=i).state_dict(), {"domain": d}))
               for i, d in enumerate("ABCD")]

# %% [markdown]
# ## Split exactness

# %%
dense = {k: specialists[0][1].tensors[f"layers.0.ffn.{k}"] for k in ("w_in", "b_in", "w_out", "b_out")}
halves = fusion.split_ffn(dense, 2)
x = Rng(0).normal((100, 16))
print("max residual:", np.max(np.abs(sum(ffn_np(h, x) for h in halves) - ffn_np(dense, x))))

# %% [markdown]
# ## Fuse and inspect

# %%
fused = fusion.fuse(FusionPlan(specialists))
m = fused.config.moe
print(f"{m.n_routed} routed, {m.n_null} null, {m.n_shared} shared experts; p = {m.threshold_p}")
print("frozen during warmup:", len(fused.frozen), "tensors, e.g.", fused.frozen[:2])
print("verification:", fusion.verify_fusion(fused, [c for _, c in specialists])["max_residual"])

# %% [markdown]
# ## Binary checkpoint round-trip

# %%
with tempfile.TemporaryDirectory() as tmp:
    p1 = fusion.save(fused, Path(tmp) / "a.ckpt")
    p2 = fusion.save(fusion.load(p1), Path(tmp) / "b.ckpt")
    print(f"{p1.stat().st_size} bytes, identical after reload: {p1.read_bytes() == p2.read_bytes()}")

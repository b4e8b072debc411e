# %% [markdown]
# # A post-LN encoder, its presets, and the checkpoint container

# %%
import tempfile
from pathlib import Path

import numpy as np

from distilbench.checkpoint import file_digest, load_model, save_model
from distilbench.transformer import PRESETS, forward, get_preset, init_parameters, parameter_count

# %% [markdown]
# Full-size presets (random weights only) and their encoder parameter counts.

# %%
for name in PRESETS:
    cfg = get_preset(name)
    print(f"{name:<14} {cfg.architecture}  {parameter_count(cfg, include_head=False) / 1e6:6.1f}M")

# %% [markdown]
# The desk teacher runs in milliseconds. The trace keeps every hidden state
# and the per-head Q/K/V, which the distillation losses read.

# %%
model = init_parameters(get_preset("desk-teacher"), seed=0)
tokens = np.array([[2, 17, 40, 41, 3, 0], [2, 9, 9, 3, 0, 0]])
mask = tokens != 0
trace = forward(model, tokens, mask)
print("hidden states:", [h.shape for h in trace.hidden_states])
print("layer-2 queries:", trace.qkv("Q", 2).shape)
print("attention on padding:", trace.attention_probs[0].data[1, :, :, 4:].max())

# %% [markdown]
# Checkpoints are a small little-endian container of named float64 arrays.
# Saving what was loaded reproduces the file byte for byte.

# %%
with tempfile.TemporaryDirectory() as tmp:
    a, b = Path(tmp) / "a.kdt", Path(tmp) / "b.kdt"
    save_model(a, model, extra={"note.scale": np.array([0.5])})
    loaded, extra = load_model(a)
    save_model(b, loaded, extra)
    print(extra, file_digest(a) == file_digest(b))

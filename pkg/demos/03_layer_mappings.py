# %% [markdown]
# # Which teacher layers each student layer learns from
#
# Layers are numbered from 1. A mapping sends each student layer to zero or
# more teacher layers; the hidden-state losses sum one term per pair.

# %%
from distilbench.mapping import STRATEGIES, build_mapping

for strategy in sorted(STRATEGIES):
    print(f"{strategy:<13}", build_mapping(strategy, 6, 12).targets)

# %% [markdown]
# Uniform strides past the last teacher layer are clamped, and the
# consecutive variant always partitions the teacher stack.

# %%
print(build_mapping("uniform", 5, 12).targets)
print(build_mapping("uniform-cons", 5, 12).targets)

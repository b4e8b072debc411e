# %% [markdown]
# # Encoder latency and the architecture-search reward

# %%
from distilbench.bench import cmd_bench, nas_reward

report = cmd_bench(["3l", "4l", "6l", "6l-distilbert", "teacher"], seq_len=128, runs=5)
print(report.render())

# %% [markdown]
# The reward trades hidden-state loss against latency relative to 60% of the
# teacher's.

# %%
lat = report.means()
for name in ("3l", "4l", "6l"):
    print(name, round(nas_reward(0.2, lat[name], lat["teacher"]), 4))

# %% [markdown]
# # Pretrain, distill and probe at desk scale
#
# A shortened run of the full pipeline on the synthetic two-language grammar
# (a few minutes on one CPU core). The acceptance suite runs the same steps
# at the full desk budget.

# %%
from distilbench.bench import BASELINE, TEACHER, SuiteCell, SuiteData, cmd_compare
from distilbench.cli import CorpusConfig, build_corpora
from distilbench.training import (ProbeConfig, TrainConfig, evaluate_mlm, pretrain_teacher,
                                  smoothed)
from distilbench.transformer import get_preset

data = build_corpora(CorpusConfig(train=2000), 256)
run = pretrain_teacher(data.train, get_preset("desk-teacher"),
                       TrainConfig.desk("teacher-pretrain", total_steps=600))
print(evaluate_mlm(run.model, data.probe_test))
print("smoothed MLM loss", smoothed(run.manifest.loss_values(), 50)[[0, -1]])

# %% [markdown]
# Each suite cell distills once and then probe-finetunes over the seeds.

# %%
cells = [SuiteCell(BASELINE), SuiteCell(TEACHER), SuiteCell("hs", "uniform+last"),
         SuiteCell("minilmv2", teacher_layer="L-1")]
table = cmd_compare(run.model, ["desk-6l"], cells,
                    SuiteData(data.train, data.probe_train, data.probe_test),
                    TrainConfig.desk("distill", total_steps=200),
                    TrainConfig.desk("od-after-distill", total_steps=200),
                    ProbeConfig(), seeds=(0, 1))
print(table.render())

# %% [markdown]
# # Distillation objectives side by side
#
# All objectives read a student trace and a teacher trace. Attention-relation
# objectives re-split the concatenated heads into `A_r` relation heads first.

# %%
import numpy as np

from distilbench.objectives import (DistillSpec, distillation_loss, gram_mse_loss,
                                    relation_matrix)
from distilbench.tensor import Tensor
from distilbench.transformer import forward, get_preset, init_parameters

teacher = init_parameters(get_preset("desk-teacher"), 0)
student_cfg = get_preset("desk-6l")
student = init_parameters(student_cfg, 1)
tokens = np.random.default_rng(0).integers(5, 150, size=(2, 12))
labels = np.where(np.arange(12) % 4 == 1, tokens, -1)
s, t = forward(student, tokens), forward(teacher, tokens)

for spec in [DistillSpec("od", temperature=2.0), DistillSpec("hs", "uniform+last"),
             DistillSpec("minilmv2", teacher_layer="L-1"),
             DistillSpec("directminilm", teacher_layer="L-1")]:
    spec = spec.resolve(student_cfg, teacher.config)
    proj = spec.make_projections(student_cfg, teacher.config, np.random.default_rng(2))
    print(f"{spec.method:<13}", distillation_loss(spec, s, t, proj, labels).item())

# %% [markdown]
# Relation matrices ignore any orthogonal change of basis, which is why an
# orthogonal projection turns the direct Q/K/V loss into a Gram-matrix loss.

# %%
a = np.random.default_rng(3).normal(size=(6, 8))
q, _ = np.linalg.qr(np.random.default_rng(4).normal(size=(8, 8)))
print(np.abs(relation_matrix(Tensor(a @ q)).data - relation_matrix(Tensor(a)).data).max())
print("gram loss:", gram_mse_loss(s, t, None, 3, 4).item())

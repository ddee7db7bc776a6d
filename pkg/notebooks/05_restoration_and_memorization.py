# %% [markdown]
# # One-step restoration and memorization
#
# A single restorer call solves a noisy inpainting problem. On a tiny
# training set, models trained on more heavily corrupted data copy their
# training points less.

# %%
import numpy as np

from ambient_lab.cli import restoration_benchmark
from ambient_lab.corruption import CorruptionProcess, apply, sample_corruption
from ambient_lab.denoiser import ModelRestorer
from ambient_lab.evaluation import memorization_stat
from ambient_lab.oracle import GMMDistribution, restorer_for
from ambient_lab.sampler import SamplerConfig, fixed_mask_sample
from ambient_lab.schedule import NoiseSchedule
from ambient_lab.training import TrainSettings, train

dist = GMMDistribution.canonical()
scores = restoration_benchmark(dist, {"oracle": restorer_for(dist)}, 1000, 0.5, 0.05, 2.0,
                               np.random.default_rng(0))
print({k: round(v, 2) for k, v in scores.items()})

# %% [markdown]
# Memorization on 100 training points (short budget for illustration).

# %%
rng = np.random.default_rng(0)
x0 = dist.sample(100, rng)
for p in (0.0, 0.8):
    proc = CorruptionProcess(n=2, p=p, delta=0.0 if p == 0 else 0.1)
    A = sample_corruption(proc, rng, size=100)
    settings = TrainSettings(objective="clean" if p == 0 else "ambient", steps=3000)
    model = train(apply(A, x0), A, proc, NoiseSchedule(), settings).model
    x = fixed_mask_sample(SamplerConfig(ModelRestorer(model)), proc, np.random.default_rng(1), 1000)
    print(p, memorization_stat(x, x0).quantiles)

# %% [markdown]
# # Training on corrupted data only
#
# Half the coordinates of every training point are missing. The ambient
# objective still drives the network towards the full posterior mean; the
# naive objective (input mask = loss mask) does not. Set STEPS = 20000 for
# the default budget (about 3-4 minutes on one core per model).

# %%
import numpy as np

from ambient_lab.config import ExperimentConfig
from ambient_lab.dataio import generate_dataset
from ambient_lab.training import OracleProbe, train

STEPS = 4000
cfg = ExperimentConfig().override("optimizer.steps", STEPS)
ds, _ = generate_dataset(cfg)
print("observed fraction:", ds.operators.diag.mean())
probe = OracleProbe.build(cfg.distribution(), cfg.process(), [0.05, 0.2, 1.0], 1000, 1)

models = {}
for objective in ("ambient", "naive"):
    settings = cfg.train_settings()
    settings.objective = objective
    models[objective] = train(ds.y, ds.operators, cfg.process(), cfg.schedule(), settings,
                              probe=probe).model
    print(objective, probe.gap(models[objective].forward, by_sigma=True))

# %% [markdown]
# Error only on coordinates the input mask erased:

# %%
erased = probe.A_tilde.diag == 0
for name, m in models.items():
    d = m.forward(probe.A_tilde, probe.y, probe.sigma) - probe.target
    print(name, "erased-coordinate RMSE", np.sqrt(np.mean(d[erased] ** 2)))

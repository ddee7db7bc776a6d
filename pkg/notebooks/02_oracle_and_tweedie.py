# %% [markdown]
# # Closed-form restorers
#
# For a Gaussian mixture and a mask, E[x0 | A_tilde x_t] is available in
# closed form. It is the target the network should learn, and through
# Tweedie's formula it also gives the score of the noisy marginal.

# %%
import numpy as np

from ambient_lab.corruption import Mask
from ambient_lab.oracle import GMMDistribution, gmm_marginal_score, gmm_posterior_mean
from ambient_lab.schedule import NoiseSchedule, score_from_denoiser

dist = GMMDistribution.canonical()
print("component means:\n", dist.means)

# %% [markdown]
# Observe only the first coordinate. Near x = 0 the second coordinate is
# pinned to the top component; near x = +-0.87 it is pulled to -0.5.

# %%
A = Mask(np.array([1, 0]))
for x in (0.0, 0.87, -0.87, 0.4):
    print(x, gmm_posterior_mean(dist, A, np.array([x, 0.0]), 0.1))

# %% [markdown]
# Tweedie check: score from the analytic density against (D - x) / sigma^2.

# %%
rng = np.random.default_rng(0)
pts = rng.standard_normal((5, 2))
full = Mask(np.ones((5, 2)))
for s in NoiseSchedule().sigma_grid()[::16]:
    a = gmm_marginal_score(dist, pts, s)
    b = score_from_denoiser(gmm_posterior_mean(dist, full, pts, s), pts, s)
    print(f"sigma={s:.3f}  max |diff| = {np.abs(a - b).max():.1e}")

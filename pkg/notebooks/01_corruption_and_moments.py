# %% [markdown]
# # Corruption operators and the further-corruption trick
#
# A training record is a pair (A x0, A). Before each step we erase a bit more
# to get A_tilde. The network cannot tell which missing pixels were erased by
# us and which were never observed, so it has to predict all of them.

# %%
import numpy as np

from ambient_lab.corruption import (
    CorruptionProcess, conditional_second_moment, estimate_second_moment, further_corrupt,
    sample_corruption,
)

rng = np.random.default_rng(0)
proc = CorruptionProcess(n=8, p=0.5, delta=0.1)
A = sample_corruption(proc, rng)
A_tilde = further_corrupt(A, proc, rng)
print("A      ", A.diag)
print("A_tilde", A_tilde.diag)

# %% [markdown]
# Learning works because E[A^T A | A_tilde] has full rank. For random
# inpainting the diagonal is 1 where A_tilde keeps a pixel and
# q = (1-p) delta / ((1-p) delta + p) where it does not.

# %%
exact = conditional_second_moment(proc, A_tilde)
mc, se = estimate_second_moment(proc, A_tilde, 100_000, rng)
print("q =", proc.posterior_observed_prob())
print("closed form:", np.round(np.diag(exact), 4))
print("Monte Carlo:", np.round(np.diag(mc), 4))
print("max |z|    :", np.max(np.abs(mc - exact) / np.maximum(se, 1e-12)))

# %% [markdown]
# Gaussian measurements: dropping one of the m rows gives
# E[A^T A | A_tilde] = A_tilde^T A_tilde + I.

# %%
g = CorruptionProcess(kind="gaussian", n=6, m=4, delta=1)
Gt = further_corrupt(sample_corruption(g, rng), g, rng)
mc, se = estimate_second_moment(g, Gt, 100_000, rng)
print("max |z| gaussian:", np.max(np.abs(mc - conditional_second_moment(g, Gt)) / se))

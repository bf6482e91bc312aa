"""How closely birth/death MCMC recovers enumerated model probabilities.

For a few K=8 instances the L1 distance between visit frequencies and exact
posterior model probabilities is printed for growing chain lengths, next to
the distance an independent sampler of the same size would reach on
average. The distance shrinks roughly as one over the square root of the
number of retained draws.

    python3 demos/bma_chain_length.py
"""

import numpy as np

from deepstress.bma import enumerate_posterior, mcmc_birth_death


def l1(a, b):
    pa = {m.tobytes(): p for m, p in zip(a.masks, a.pmp)}
    pb = {m.tobytes(): p for m, p in zip(b.masks, b.pmp)}
    return sum(abs(pa.get(k, 0.0) - pb.get(k, 0.0)) for k in set(pa) | set(pb))


lengths = (10_000, 40_000, 160_000)
print("seed  top PMP  iid@10k  " + "  ".join(f"{n:>8}" for n in lengths))
for seed in range(5):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((200, 8))
    beta = np.where(rng.random(8) < 0.5, rng.normal(0, 0.3, 8), 0.0)
    y = X @ beta + rng.standard_normal(200)
    exact = enumerate_posterior(X, y, g=200)
    iid = sum(np.sqrt(2 * p * (1 - p) / (np.pi * 10_000)) for p in exact.pmp)
    dist = [l1(exact, mcmc_birth_death(X, y, g=200, draws=10_000 + n, burnin=10_000, seed=seed)) for n in lengths]
    print(f"{seed:>4}  {exact.pmp.max():7.3f}  {iid:7.3f}  " + "  ".join(f"{d:8.3f}" for d in dist))

"""How tight are the bounds?  A linear-Gaussian model where log p(x) is known.

We fit nothing here.  A fixed three-component posterior is placed around the
exact posterior of a small conjugate model, and every bound is averaged over
many independent draws.
"""

import numpy as np

from mixvi.estimators import EstimatorConfig, Kind, estimate
from mixvi.distributions import rng_stream
from mixvi.oracles import conjugate_oracle, default_conjugate, mismatched_posterior

model, x = default_conjugate()
logp, post_mean, post_cov = conjugate_oracle(model, x)
print("exact log p(x):", round(logp, 4))
print("exact posterior mean:", np.round(post_mean, 3))

# three components, offset from the true posterior on purpose
q = mismatched_posterior(model, x, K=3)
xs = np.tile(x, (2000, 1))

# ELBO and IWAE pool K*T ancestral draws; SELBO and SIWAE keep T draws per component
for kind, T in [(Kind.ELBO, 1), (Kind.IWAE, 5), (Kind.SELBO, 5), (Kind.SIWAE, 5)]:
    bound = estimate(EstimatorConfig(kind, T=T), q, xs, xs, rng_stream(0, T))
    vals = bound.objective.value
    print(f"{kind.value:>6} ({3 * T:>2} draws): {vals.mean():8.4f} +- {vals.std() / np.sqrt(len(vals)):.4f}")

# SIWAE closes the gap as T grows
for T in (1, 10, 100):
    vals = estimate(EstimatorConfig(Kind.SIWAE, T=T), q, xs[:500], xs[:500], rng_stream(1, T)).objective.value
    print(f"SIWAE T={T:>3}: gap to log p(x) = {logp - vals.mean():.4f}")

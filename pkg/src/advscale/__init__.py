"""advscale: a lab for the small-perturbation scaling of adversarial error.

Trainable classifiers (NumPy, from scratch), four gradient attacks,
linear-response predictors of the smallest fooling perturbation, logit-gap
tail statistics with power-law fits, and an independent i.i.d.
order-statistics oracle, all wired into seeded, bit-reproducible
experiment pipelines.
"""

__version__ = "0.1.0"

from . import attacks, data, logit_stats, nn, response  # noqa: F401

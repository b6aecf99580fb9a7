import math
import warnings

import numpy as np
from scipy import integrate

from igmseg.synth import GenConfig, generate


def kl_quadrature(mp, vp, mq, vq):
    """KL(p||q) by adaptive quadrature over p's effective support."""
    sp = math.sqrt(vp)

    def integrand(z):
        x = mp + sp * z
        log_p = -0.5 * z * z - 0.5 * math.log(2 * math.pi * vp)
        log_q = -0.5 * (x - mq) ** 2 / vq - 0.5 * math.log(2 * math.pi * vq)
        # density of p in z-coordinates is the standard normal
        return math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi) * (log_p - log_q)

    val, _ = integrate.quad(integrand, -14, 14, epsabs=1e-12, epsrel=1e-12, limit=200)
    return val


def two_instances(seed, size=48, radius=(9, 13)):
    """Synthetic image with exactly two touching instances, or None."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        s = generate(GenConfig(height=size, width=size, instances=(2, 2), radius=radius,
                               touching_probability=1.0, seed=seed))
    return s if s.placed == 2 else None

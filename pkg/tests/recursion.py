"""Closed-form moments of the VE ancestral recursion for Gaussian targets.

When the drift is the exact score of ``N(mu, S + sigma^2 I)`` every step is
affine in the state, so the output of the sampler is Gaussian with moments
that can be propagated exactly. Tests use this to separate implementation
errors from the discretisation bias of the recursion itself.
"""

import numpy as np


def recursion_moments(target_mean, target_cov, sigmas, denoise_cov=None, denoise_mean=None):
    """Mean and covariance of the sampler output.

    ``target_*`` describe the clean distribution whose perturbed score drives
    the chain. The terminal step is the Tweedie map of ``N(denoise_mean,
    denoise_cov)`` at the last sigma (defaults to the target itself).
    """
    mu = np.asarray(target_mean, dtype=float)
    s = np.asarray(target_cov, dtype=float)
    n = mu.size
    eye = np.eye(n)
    m = np.zeros(n)
    p = sigmas[0] ** 2 * eye
    for hi, lo in zip(sigmas[:-1], sigmas[1:]):
        delta = hi * hi - lo * lo
        prec = np.linalg.inv(s + hi * hi * eye)
        a = eye - delta * prec
        m = a @ m + delta * prec @ mu
        p = a @ p @ a.T + (lo * lo * delta / (hi * hi)) * eye
    dc = s if denoise_cov is None else np.asarray(denoise_cov, dtype=float)
    dm = mu if denoise_mean is None else np.asarray(denoise_mean, dtype=float)
    smin2 = sigmas[-1] ** 2
    gain = dc @ np.linalg.inv(dc + smin2 * eye)
    m = gain @ m + (eye - gain) @ dm
    p = gain @ p @ gain.T
    return m, p

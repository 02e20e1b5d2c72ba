import numpy as np


def mean_se(samples, antithetic: bool = False) -> tuple[float, float]:
    """Sample mean and standard error of per-path values.

    Antithetic ensembles are reduced pairwise first, since paths ``2k`` and
    ``2k+1`` are not independent.
    """
    x = np.asarray(samples, dtype=float).ravel()
    mean = float(np.mean(x))
    if antithetic and x.size % 2 == 0 and x.size >= 4:
        pairs = 0.5 * (x[0::2] + x[1::2])
        return mean, float(np.std(pairs, ddof=1) / np.sqrt(pairs.size))
    if x.size < 2:
        return mean, 0.0
    return mean, float(np.std(x, ddof=1) / np.sqrt(x.size))

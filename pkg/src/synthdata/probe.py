"""Linear decodability probe: can (u, v) be read linearly off a latent code?"""

from typing import Optional

import numpy as np
from sklearn.linear_model import LinearRegression
from sklearn.metrics import r2_score


def linear_probe_r2(latents: np.ndarray, targets: np.ndarray,
                    test_latents: Optional[np.ndarray] = None,
                    test_targets: Optional[np.ndarray] = None) -> float:
    """Least-squares fit on (latents, targets); R^2 on the test split if given."""
    latents = np.asarray(latents, dtype=np.float64).reshape(len(latents), -1)
    probe = LinearRegression().fit(latents, targets)
    if test_latents is None:
        return float(r2_score(targets, probe.predict(latents)))
    test_latents = np.asarray(test_latents, dtype=np.float64).reshape(len(test_latents), -1)
    return float(r2_score(test_targets, probe.predict(test_latents)))

"""Pure-Python twin of the compiled Jacobi kernel, used when the extension is unavailable."""
import math

import numpy as np


def jacobi_rotate(work, vt, tol, max_sweeps):
    n = work.shape[0]
    for sweep in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            wp = work[p]
            for q in range(p + 1, n):
                wq = work[q]
                alpha = float(np.dot(wp, wp))
                beta = float(np.dot(wq, wq))
                gamma = float(np.dot(wp, wq))
                if gamma == 0.0 or abs(gamma) <= tol * math.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta >= 0:
                    t = 1.0 / (zeta + math.sqrt(1.0 + zeta * zeta))
                else:
                    t = -1.0 / (-zeta + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                new_p = c * wp - s * wq
                work[q] = s * wp + c * wq
                work[p] = new_p
                vp, vq = vt[p].copy(), vt[q]
                vt[p] = c * vp - s * vq
                vt[q] = s * vp + c * vq
        if not rotated:
            return sweep + 1
    return -1

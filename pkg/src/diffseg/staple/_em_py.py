"""Pure-numpy EM kernel for sensitivity/specificity label fusion."""

import numpy as np

CLAMP = 1e-6


def em_run(decisions, prior, p, q, tol, max_iters):
    """Run the EM loop.

    decisions: (R, N) uint8; prior: scalar in (0,1); p, q: (R,) float64
    initial sensitivities/specificities (modified copies are returned).

    Returns (weights, p, q, iterations, converged, p_hist, q_hist).
    """
    D = decisions.astype(np.float64)
    R, N = D.shape
    p = p.copy()
    q = q.copy()
    log_prior = np.log(prior)
    log_1prior = np.log1p(-prior)
    p_hist, q_hist = [], []
    converged = False
    iterations = 0

    def e_step():
        # log-domain accumulation over raters; linear-space products underflow
        log_a = log_prior + D.T @ np.log(p) + (1.0 - D.T) @ np.log1p(-p)
        log_b = log_1prior + (1.0 - D.T) @ np.log(q) + D.T @ np.log1p(-q)
        w = 1.0 / (1.0 + np.exp(log_b - log_a))
        return np.clip(w, CLAMP, 1.0 - CLAMP)

    for it in range(1, max_iters + 1):
        iterations = it
        w = e_step()
        sw = w.sum()
        s1w = (1.0 - w).sum()
        new_p = (D @ w) / sw
        new_q = ((1.0 - D) @ (1.0 - w)) / s1w
        new_p = np.clip(new_p, CLAMP, 1.0 - CLAMP)
        new_q = np.clip(new_q, CLAMP, 1.0 - CLAMP)
        delta = max(np.abs(new_p - p).max(), np.abs(new_q - q).max())
        p, q = new_p, new_q
        p_hist.append(p.copy())
        q_hist.append(q.copy())
        if delta < tol:
            converged = True
            break

    weights = e_step()
    return weights, p, q, iterations, converged, p_hist, q_hist

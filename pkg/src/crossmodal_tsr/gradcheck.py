"""Central finite-difference gradient oracle.

Uses only forward evaluations, so it stays independent of the engine's
backward rules. Comparison uses a relative error with an absolute floor at
the finite-difference measurement precision of the active dtype.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tape, Tensor, backward


def fd_gradient(fn, param: Tensor, coords, h: float) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. selected coordinates.

    ``fn`` must re-evaluate the forward pass reading ``param.data``;
    ``coords`` is an iterable of flat indices into the parameter.
    Returns the estimated derivative per coordinate.
    """
    param.data = np.ascontiguousarray(param.data)
    flat = param.data.reshape(-1)
    out = np.zeros(len(coords), dtype=np.float64)
    for i, c in enumerate(coords):
        orig = flat[c]
        flat[c] = orig + h
        up = float(fn())
        flat[c] = orig - h
        down = float(fn())
        flat[c] = orig
        out[i] = (up - down) / (2.0 * h)
    return out


def sample_coords(param: Tensor, max_coords: int, rng) -> np.ndarray:
    n = param.size
    if n <= max_coords:
        return np.arange(n)
    return rng.choice(n, size=max_coords, replace=False)


def check_gradients(build_loss, params: dict, h: float | None = None,
                    tol: float | None = None, max_coords: int = 8,
                    rng=None) -> dict:
    """Compare analytic and finite-difference gradients per parameter.

    ``build_loss`` runs a full forward pass and returns the scalar loss
    tensor; it is invoked once under a tape for the analytic gradients and
    repeatedly (untaped) for the finite differences. Returns
    name -> (max relative error, #coords checked, passed). Defaults per
    dtype: (h=1e-3, tol=1e-3) at float32, (h=1e-6, tol=1e-5) at float64.

    The relative error uses an absolute floor of atol/tol in the
    denominator, i.e. the pass condition is the two-term test
    |a - n| <= tol*max(|a|,|n|) + atol with atol at the finite-difference
    noise level of the dtype (1e-3 at f32 with h=1e-3, 1e-8 at f64; central
    differences of a loss of magnitude ~10 carry rounding noise of order
    |f|*eps/h). Gradients smaller than the floor are below what central
    differences can resolve at that precision.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    dtype = next(iter(params.values())).dtype
    if h is None:
        h = 1e-3 if dtype == np.float32 else 1e-6
    if tol is None:
        tol = 1e-3 if dtype == np.float32 else 1e-5
    atol = 1e-3 if dtype == np.float32 else 1e-8
    floor = atol / tol

    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        loss = build_loss()
    backward(loss, tape)

    report = {}
    for name, p in params.items():
        analytic_full = (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)
        coords = sample_coords(p, max_coords, rng)
        numeric = fd_gradient(lambda: build_loss().item(), p, coords, h)
        analytic = analytic_full[coords].astype(np.float64)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        rel = float(np.max(np.abs(analytic - numeric) / denom)) if len(coords) else 0.0
        report[name] = (rel, len(coords), rel <= tol)
    return report

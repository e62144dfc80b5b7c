"""Central-difference gradient verification for parameter stores."""

from __future__ import annotations

import numpy as np

from .tensor import backward

# Relative error uses an absolute floor: gradients smaller than _FLOOR are
# effectively compared with tolerance tol * _FLOOR, which sits well above the
# ~1e-11 central-difference noise floor at step 1e-5.
_FLOOR = 1e-4


def grad_check(f, store, step=1e-5, tol=1e-3, param_names=None,
               max_coords_per_param=None, rng=None):
    """Compare analytic gradients of `f()` against central differences.

    f            callable returning a scalar Tensor; must be deterministic
                 and depend only on the store's parameter values
    param_names  subset of parameters to check (default: all)
    max_coords_per_param  optionally subsample coordinates of large tensors

    Returns a report dict:
        {"pass": bool, "params": {name: {"max_rel_err", "checked", "pass"}}}
    """
    names = sorted(param_names) if param_names is not None else store.names()
    store.zero_grad()
    loss = f()
    backward(loss)
    analytic = {}
    for name in names:
        t = store.params[name]
        analytic[name] = (np.zeros(t.shape) if t.grad is None
                          else np.array(t.grad, copy=True))

    if rng is None:
        rng = np.random.default_rng(0)

    report = {"pass": True, "params": {}}
    for name in names:
        t = store.params[name]
        flat = t.data.reshape(-1)
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
            coords.sort()
        else:
            coords = range(n)
        a_flat = analytic[name].reshape(-1)
        max_err = 0.0
        checked = 0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(f().data)
            flat[i] = orig - step
            f_minus = float(f().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = a_flat[i]
            err = abs(a - numeric) / max(_FLOOR, abs(a), abs(numeric))
            max_err = max(max_err, err)
            checked += 1
        ok = max_err < tol
        report["params"][name] = {
            "max_rel_err": max_err, "checked": checked, "pass": ok}
        report["pass"] = report["pass"] and ok
    return report

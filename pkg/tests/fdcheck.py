"""Central finite-difference gradient checks for float64 torch functions."""

import torch

STEP = 1e-5
STEP4 = 1e-3
FLOOR = 1e-6


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), FLOOR)


def check_params(loss_fn, params, step=None, masks=None, order=2):
    """Compare autograd against central differences for every coordinate of ``params``.

    ``loss_fn()`` must be deterministic. ``masks`` optionally restricts each
    parameter to the coordinates marked True. Returns ``(worst_rel_err,
    n_coords, failures)`` where ``failures`` lists coordinates with relative
    error >= 1e-4.

    ``order=2`` is the two-point stencil; ``order=4`` the four-point central
    stencil, whose larger default step keeps round-off below the truncation
    error when the loss is large and a gradient coordinate is tiny.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    step = step or (STEP if order == 2 else STEP4)
    masks = masks or [None] * len(params)
    for p in params:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    worst, count, failures = 0.0, 0, []
    with torch.no_grad():
        for k, (p, g) in enumerate(zip(params, grads)):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            keep = masks[k].reshape(-1) if masks[k] is not None else None
            for i in range(flat.numel()):
                if keep is not None and not bool(keep[i]):
                    continue
                old = float(flat[i])

                def at(d):
                    flat[i] = old + d
                    return float(loss_fn())

                if order == 2:
                    num = (at(step) - at(-step)) / (2 * step)
                else:
                    num = (-at(2 * step) + 8 * at(step) - 8 * at(-step) + at(-2 * step)) / (12 * step)
                flat[i] = old
                e = rel_err(float(g.view(-1)[i]), num)
                worst = max(worst, e)
                count += 1
                if e >= 1e-4:
                    failures.append((k, i, float(g.view(-1)[i]), num))
    return worst, count, failures

"""Shared test utilities: gradient checking through layer objects."""

import numpy as np

from mlctc.kernels import grad_check


def check_layer_grads(params, compute, eps=1e-5, tol=1e-4, max_coords=None, seed=0,
                      loss_only=None):
    """Finite-difference check for a list of Param against ``compute``.

    ``compute()`` must run forward + backward with the CURRENT param values,
    accumulating into each Param.grad, and return the scalar loss. If
    ``loss_only`` is given it is used for the perturbed evaluations (forward
    pass only), which roughly halves the cost of a full sweep.
    """
    by_name = {p.name: p for p in params}
    state = {"first": True}

    def loss_fn(values):
        for name, p in by_name.items():
            p.value[...] = values[name]
        if state["first"] or loss_only is None:
            for p in by_name.values():
                p.zero_grad()
            loss = compute()
            grads = {name: p.grad.copy() for name, p in by_name.items()}
            state["first"] = False
            return loss, grads
        return loss_only(), None

    return grad_check(
        loss_fn,
        {name: p.value.copy() for name, p in by_name.items()},
        eps=eps,
        tol=tol,
        max_coords_per_param=max_coords,
        seed=seed,
    )

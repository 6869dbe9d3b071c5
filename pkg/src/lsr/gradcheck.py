"""Finite-difference validation of analytic gradients.

Compares every parameter's backward() gradient against central differences
of the loss in float64. The loss callable must be deterministic and smooth
around the current parameters: run the model in eval mode, freeze any
sampling noise, and pin data-dependent discrete choices (e.g. nearest-
neighbour assignments) so a +/-eps nudge cannot flip them.
"""

from __future__ import annotations

from typing import Callable

import torch

from .errors import NonFiniteError


def finite_difference_check(model: torch.nn.Module,
                            loss_fn: Callable[[], torch.Tensor],
                            eps: float = 1e-5,
                            denom_floor: float = 1e-6) -> dict:
    """Check d(loss)/d(param) for every scalar parameter of ``model``.

    Returns a report with the worst relative error::

        {"max_rel_error", "n_checked", "worst_param", "worst_index",
         "worst_analytic", "worst_numeric"}

    Relative error per scalar is |analytic - numeric| divided by
    max(|analytic|, |numeric|, denom_floor).
    """
    model.double()
    params = [(name, p) for name, p in model.named_parameters()
              if p.requires_grad]
    model.zero_grad(set_to_none=True)
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise NonFiniteError("loss is not finite at the evaluation point")
    loss.backward()
    analytic = {name: (torch.zeros_like(p) if p.grad is None else
                       p.grad.detach().clone())
                for name, p in params}
    report = {"max_rel_error": 0.0, "n_checked": 0, "worst_param": None,
              "worst_index": None, "worst_analytic": None,
              "worst_numeric": None}
    with torch.no_grad():
        for name, param in params:
            flat = param.reshape(-1)
            grad_flat = analytic[name].reshape(-1)
            for i in range(flat.numel()):
                keep = flat[i].item()
                flat[i] = keep + eps
                upper = float(loss_fn())
                flat[i] = keep - eps
                lower = float(loss_fn())
                flat[i] = keep
                numeric = (upper - lower) / (2.0 * eps)
                a = float(grad_flat[i])
                rel = abs(a - numeric) / max(abs(a), abs(numeric), denom_floor)
                report["n_checked"] += 1
                if rel > report["max_rel_error"]:
                    report.update(max_rel_error=rel, worst_param=name,
                                  worst_index=i, worst_analytic=a,
                                  worst_numeric=numeric)
    return report

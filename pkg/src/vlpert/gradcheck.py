"""Finite-difference verification of the loss gradients.

For each loss, random toy instances are built, the analytic gradients from
`backward` are compared against central finite differences for every
input tensor, and the worst normalized deviation is reported. The error
metric is max |analytic - numeric| divided by the largest gradient
magnitude (floored at 1), the usual mixed absolute/relative criterion.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .losses import (
    LossWeights,
    global_contrastive_loss,
    local_contrastive_loss,
    perturbation_sensitivity_loss,
    total_loss,
)
from .rng import derive_seed
from .tensor import Tensor, backward, finite_diff_grad, no_grad

DEFAULT_TOLERANCE = 1e-4
DEFAULT_STEP = 1e-5


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1.0)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def compare_gradients(build_loss, inputs: dict[str, Tensor], h: float = DEFAULT_STEP) -> float:
    """Worst error between backward() and finite differences over all inputs.

    `build_loss` maps a {name: Tensor} dict to a scalar loss tensor and is
    re-invoked from scratch for every finite-difference evaluation.
    """
    for t in inputs.values():
        t.requires_grad = True
        t.grad = None
    loss = build_loss(inputs)
    backward(loss)
    analytic = {name: t.grad.copy() for name, t in inputs.items()}

    worst = 0.0
    for name, t in inputs.items():
        def evaluate(candidate: Tensor) -> float:
            trial = {k: (candidate if k == name else Tensor(v.data)) for k, v in inputs.items()}
            with no_grad():
                return build_loss(trial).item()

        numeric = finite_diff_grad(evaluate, Tensor(t.data), h).data
        worst = max(worst, max_relative_error(analytic[name], numeric))
    return worst


@dataclass
class GradcheckReport:
    h: float
    tolerance: float
    instances: int
    worst_errors: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(err < self.tolerance for err in self.worst_errors.values())

    def to_dict(self) -> dict:
        return {
            "h": self.h,
            "tolerance": self.tolerance,
            "instances": self.instances,
            "worst_errors": dict(self.worst_errors),
            "passed": self.passed,
        }


def _random_unit_scale(rng):
    return rng.normal(0.0, 1.0)


def _global_instance(rng):
    b = int(rng.integers(1, 5))
    d = int(rng.integers(2, 9))
    tau = float(rng.uniform(0.07, 1.0))
    inputs = {
        "images": Tensor(rng.normal(size=(b, d))),
        "texts": Tensor(rng.normal(size=(b, d))),
    }
    return inputs, lambda t: global_contrastive_loss(t["images"], t["texts"], tau)


def _local_instance(rng):
    b = int(rng.integers(1, 5))
    d = int(rng.integers(2, 9))
    m = int(rng.integers(1, 5))
    tau = float(rng.uniform(0.07, 1.0))
    tau_local = float(rng.uniform(0.5, 1.5))
    word_counts = [int(rng.integers(1, 5)) for _ in range(b)]
    inputs = {"images": Tensor(rng.normal(size=(b, d, m)))}
    for j, w in enumerate(word_counts):
        inputs[f"text_{j}"] = Tensor(rng.normal(size=(d, w)))

    def build(t):
        texts = [t[f"text_{j}"] for j in range(b)]
        return local_contrastive_loss(t["images"], texts, tau, tau_local)

    return inputs, build


def _pert_instance(rng):
    d = int(rng.integers(2, 9))
    p = int(rng.integers(1, 10))
    tau = float(rng.uniform(0.07, 1.0))
    inputs = {
        "image": Tensor(rng.normal(size=d)),
        "text": Tensor(rng.normal(size=d)),
        "negatives": Tensor(rng.normal(size=(d, p))),
    }
    return inputs, lambda t: perturbation_sensitivity_loss(
        t["image"], t["text"], t["negatives"], tau
    )


def _total_instance(rng):
    b = int(rng.integers(2, 4))
    d = int(rng.integers(3, 7))
    m = int(rng.integers(2, 4))
    p = int(rng.integers(1, 4))
    weights = LossWeights(
        alpha=float(rng.uniform(0.05, 0.5)),
        beta=float(rng.uniform(0.05, 0.5)),
        tau=float(rng.uniform(0.3, 1.0)),
        tau_local=1.0,
    )
    word_counts = [int(rng.integers(1, 4)) for _ in range(b)]
    inputs = {
        "image_globals": Tensor(rng.normal(size=(b, d))),
        "text_globals": Tensor(rng.normal(size=(b, d))),
        "image_locals": Tensor(rng.normal(size=(b, d, m))),
        "negatives": Tensor(rng.normal(size=(d, p))),
    }
    for j, w in enumerate(word_counts):
        inputs[f"text_{j}"] = Tensor(rng.normal(size=(d, w)))

    def build(t):
        from .tensor import take_row

        global_term = global_contrastive_loss(t["image_globals"], t["text_globals"], weights.tau)
        local_term = local_contrastive_loss(
            t["image_locals"], [t[f"text_{j}"] for j in range(b)], weights.tau, weights.tau_local
        )
        pert_term = perturbation_sensitivity_loss(
            take_row(t["image_globals"], 0), take_row(t["text_globals"], 0), t["negatives"], weights.tau
        )
        return total_loss(global_term, local_term, pert_term, weights).total

    return inputs, build


INSTANCE_BUILDERS = {
    "global": _global_instance,
    "local": _local_instance,
    "pert": _pert_instance,
    "total": _total_instance,
}


def run_gradcheck(
    instances: int = 50,
    seed: int = 0,
    h: float = DEFAULT_STEP,
    tolerance: float = DEFAULT_TOLERANCE,
) -> GradcheckReport:
    """Check every loss on `instances` random toy instances."""
    report = GradcheckReport(h=h, tolerance=tolerance, instances=instances)
    for index, (name, builder) in enumerate(INSTANCE_BUILDERS.items()):
        worst = 0.0
        for k in range(instances):
            rng = np.random.default_rng(derive_seed(seed, index, k))
            inputs, build = builder(rng)
            worst = max(worst, compare_gradients(build, inputs, h))
        report.worst_errors[name] = worst
    return report

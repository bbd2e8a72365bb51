"""Central-difference verification of analytic gradients.

``grad_check`` re-evaluates a closure around perturbed parameter elements and
compares (f(x+e) - f(x-e)) / 2e against the tape's gradients.  Elements that
fail at the base step are re-checked at a quarter step: if the numeric
estimate converges to the analytic value the element passes (curvature, not a
bug); if the two numeric estimates disagree badly with each other the element
sits on a nondifferentiable kink (relu within epsilon of zero) and is skipped
and counted; a stable-but-wrong estimate stays a failure.

``check_gradient_reversal`` is separate because the reversal layer breaks
forward/backward consistency on purpose: it asserts the forward is the
identity bit-exactly and that the analytic gradient equals -lambda times the
numeric gradient of that identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, gradient_reversal, zero_grads

REL_FLOOR = 1e-8


@dataclass
class GradCheckResult:
    name: str
    tolerance: float
    max_rel_error: float = 0.0
    checked: int = 0
    skipped_kinks: int = 0
    per_input: dict[str, float] = field(default_factory=dict)
    failures: list[tuple[str, int, float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (
            f"[{status}] {self.name}: max rel err {self.max_rel_error:.3e} "
            f"(tol {self.tolerance:.0e}, {self.checked} elements, {self.skipped_kinks} kink skips)"
        )


def _rel_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), REL_FLOOR)


def grad_check(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    sample_fraction: float = 1.0,
    rng: np.random.Generator | None = None,
    names: Sequence[str] | None = None,
    name: str = "grad_check",
) -> GradCheckResult:
    """Compare analytic gradients of ``fn()`` (a scalar loss) for ``inputs``.

    ``fn`` must rebuild the forward graph from the current ``.data`` of the
    inputs on every call.  ``sample_fraction`` < 1 checks a seeded subset of
    elements per input (at least one each).
    """
    if names is None:
        names = [getattr(t, "name", "") or f"input{i}" for i, t in enumerate(inputs)]
    result = GradCheckResult(name=name, tolerance=tolerance)

    zero_grads(inputs)
    loss = fn()
    loss.backward()
    analytic = []
    for t in inputs:
        if t.grad is None:
            analytic.append(np.zeros_like(t.data))
        else:
            analytic.append(t.grad.copy())
    zero_grads(inputs)

    def eval_loss() -> float:
        return float(fn().data)

    for t, a, pname in zip(inputs, analytic, names):
        flat = t.data.reshape(-1)
        aflat = a.reshape(-1)
        n_elem = flat.size
        if sample_fraction >= 1.0:
            indices = np.arange(n_elem)
        else:
            count = max(1, int(round(sample_fraction * n_elem)))
            if rng is None:
                rng = np.random.default_rng(0)
            indices = rng.choice(n_elem, size=count, replace=False)
        worst = 0.0
        for i in indices:
            numeric = _central_diff(eval_loss, flat, i, epsilon)
            rel = _rel_error(aflat[i], numeric)
            if rel > tolerance:
                fine = _central_diff(eval_loss, flat, i, epsilon / 4.0)
                rel_fine = _rel_error(aflat[i], fine)
                if rel_fine <= tolerance:
                    rel = rel_fine
                elif _rel_error(numeric, fine) > 10.0 * tolerance:
                    result.skipped_kinks += 1
                    continue
                else:
                    rel = min(rel, rel_fine)
                    result.failures.append((pname, int(i), rel))
            worst = max(worst, rel)
            result.checked += 1
        result.per_input[pname] = worst
        result.max_rel_error = max(result.max_rel_error, worst)
    return result


def _central_diff(eval_loss: Callable[[], float], flat: np.ndarray, i: int, eps: float) -> float:
    orig = flat[i]
    flat[i] = orig + eps
    f_plus = eval_loss()
    flat[i] = orig - eps
    f_minus = eval_loss()
    flat[i] = orig
    return (f_plus - f_minus) / (2.0 * eps)


def check_gradient_reversal(
    lam: float = 0.7,
    shape: tuple[int, ...] = (2, 3, 4, 4),
    seed: int = 0,
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
) -> GradCheckResult:
    """Verify the reversal layer's contract: identity forward, -lambda backward."""
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=shape), requires_grad=True)
    w = rng.normal(size=shape)

    def fn() -> Tensor:
        return (gradient_reversal(x, lam) * Tensor(w)).sum()

    result = GradCheckResult(name=f"gradient_reversal(lambda={lam})", tolerance=tolerance)
    out = gradient_reversal(x, lam)
    if out.data.tobytes() != x.data.tobytes():
        result.failures.append(("forward_identity", -1, float("inf")))
        return result

    zero_grads([x])
    fn().backward()
    aflat = x.grad.reshape(-1)
    flat = x.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        numeric = _central_diff(lambda: float(fn().data), flat, i, epsilon)
        rel = _rel_error(aflat[i], -lam * numeric)
        if lam == 0.0 and aflat[i] != 0.0:
            rel = float("inf")
        if rel > tolerance:
            result.failures.append(("x", int(i), rel))
        worst = max(worst, rel)
        result.checked += 1
    zero_grads([x])
    result.max_rel_error = worst
    result.per_input["x"] = worst
    return result


# -- the standard verification suite -----------------------------------------
#
# One check per novel block, the reversal contract, and an end-to-end pass
# through a tiny detector.  Block checks differentiate both parameters and
# the input; the domain head is checked through its own parameters (they see
# ordinary gradients; only the path below the entry reversal is flipped, and
# that flip has its own check).


def _make_scalar_loss(module, x: Tensor, out_shape, rng: np.random.Generator):
    w = Tensor(rng.normal(size=out_shape))

    def fn() -> Tensor:
        return (module(x) * w).sum()

    return fn


def check_channel_attention(seed: int = 0, tolerance: float = 1e-4) -> GradCheckResult:
    from .blocks import ChannelAttentionBlock

    rng = np.random.default_rng([seed, 11])
    block = ChannelAttentionBlock(8, rng, ratio=4)
    x = Tensor(rng.normal(size=(2, 8, 5, 5)), requires_grad=True)
    fn = _make_scalar_loss(block, x, (2, 8, 5, 5), rng)
    params = list(block.parameters())
    names = [n for n, _ in block.named_parameters()] + ["x"]
    return grad_check(
        fn, params + [x], tolerance=tolerance, names=names, name="channel_attention"
    )


def check_residual_block(seed: int = 0, tolerance: float = 1e-4) -> GradCheckResult:
    from .blocks import ResidualBlock

    rng = np.random.default_rng([seed, 12])
    block = ResidualBlock(6, rng)
    x = Tensor(rng.normal(size=(2, 6, 5, 5)), requires_grad=True)
    fn = _make_scalar_loss(block, x, (2, 6, 5, 5), rng)
    params = list(block.parameters())
    names = [n for n, _ in block.named_parameters()] + ["x"]
    return grad_check(
        fn, params + [x], tolerance=tolerance, names=names, name="residual_block"
    )


def check_domain_head(seed: int = 0, tolerance: float = 1e-4) -> GradCheckResult:
    from .blocks import DomainClassifierHead

    rng = np.random.default_rng([seed, 13])
    head = DomainClassifierHead(4, 3, rng, grl_lambda=0.5, reverse=True)
    x = Tensor(rng.normal(size=(3, 4, 6, 6)))
    fn = _make_scalar_loss(head, x, (3, 3), rng)
    params = list(head.parameters())
    names = [n for n, _ in head.named_parameters()]
    return grad_check(fn, params, tolerance=tolerance, names=names, name="domain_head")


def check_end_to_end(
    seed: int = 0,
    tolerance: float = 1e-3,
    sample_fraction: float = 0.1,
) -> GradCheckResult:
    """Differentiate the full detection loss of a tiny detector end to end."""
    from .datasets import GroundTruthBox
    from .network import NetworkSpec, build_network, forward_multiscale
    from .training import TrainConfig, build_targets, yolo_loss

    spec = NetworkSpec(
        input_width=64,
        stage_widths=(4, 8, 16, 32, 64),
        blocks_per_stage=(0, 0, 0, 0, 0),
    )
    net = build_network(spec, seed)
    rng = np.random.default_rng([seed, 14])
    images = Tensor(rng.uniform(0.0, 1.0, size=(1, 3, 64, 64)))
    gts = [[
        GroundTruthBox(0, 0.3, 0.4, 0.25, 0.3),
        GroundTruthBox(2, 0.7, 0.6, 0.1, 0.15),
    ]]
    cfg = TrainConfig(input_width=64, batch_size=1, epochs=1)
    targets = build_targets(gts, spec, cfg.ignore_iou)

    def fn() -> Tensor:
        output = forward_multiscale(net, images, "train")
        total, _ = yolo_loss(output, targets, cfg)
        return total

    params = list(net.parameters())
    names = [n for n, _ in net.named_parameters()]
    return grad_check(
        fn,
        params,
        tolerance=tolerance,
        sample_fraction=sample_fraction,
        rng=np.random.default_rng([seed, 15]),
        names=names,
        name="end_to_end_tiny_detector",
    )


def check_broken_op(seed: int = 0, tolerance: float = 1e-4) -> GradCheckResult:
    """Harness self-test: an op with a deliberately wrong backward must fail."""
    rng = np.random.default_rng([seed, 16])
    x = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 3)))

    def bad_scale(t: Tensor) -> Tensor:
        def backward(g):
            return (1.25 * g,)  # wrong on purpose: forward is the identity

        return Tensor._record(t.data.copy(), (t,), backward)

    def fn() -> Tensor:
        return (bad_scale(x) * w).sum()

    return grad_check(fn, [x], tolerance=tolerance, names=["x"], name="self_test_bad_scale")


def standard_suite(seed: int = 0) -> list[GradCheckResult]:
    return [
        check_channel_attention(seed),
        check_residual_block(seed),
        check_domain_head(seed),
        check_gradient_reversal(seed=seed),
        check_end_to_end(seed),
    ]

# t3d/gradcheck.py
"""
Finite-difference checks for every layer type, in 64-bit.

Each check builds a small module, draws inputs and a fixed random
projection, and compares backward() against central differences of
sum(output * projection) for the inputs and every parameter.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from t3d.autograd import GradCheckResult, Node, NodeGraph, Evaluation, backward, finite_diff_report
from t3d.models.blocks import ClassifierHead, DenseBlock3D, DenseLayer3D, TemporalTransition, Transition3D
from t3d.models.layers import BatchNorm3d, Conv3d, Linear, Module, Parameter
from t3d.models.network import Network3D
from t3d.schemas import ArchSpec, ConvKernelSpec, PoolSpec, StageSpec, StemSpec
from t3d.transfer import TransferHead

logger = logging.getLogger(__name__)

F64 = np.float64
TOLERANCE = 1e-5

Forward = Callable[[NodeGraph, List[Node]], Node]


@dataclass
class CheckRow:
    name: str
    seed: int
    max_error: float
    checked: int
    skipped: int

    @property
    def ok(self) -> bool:
        return bool(self.max_error < TOLERANCE)


def check_module(
    forward: Forward,
    inputs: List[np.ndarray],
    module: Optional[Module],
    rng: np.random.Generator,
    max_elements: Optional[int] = 16,
    step: float = 1e-4,
) -> GradCheckResult:
    """
    Check every input array and every module parameter with extrapolated
    central differences; errors are maxed, counts summed.
    """
    g = NodeGraph()
    proj = rng.standard_normal(forward(g, [g.leaf(x) for x in inputs]).shape)

    def objective(target: Tuple[str, int, Optional[Parameter]]) -> Callable[[np.ndarray], Evaluation]:
        kind, index, param = target

        def f(_: np.ndarray) -> Evaluation:
            g = NodeGraph()
            nodes = [g.leaf(x, requires_grad=True) for x in inputs]
            loss = g.weighted_sum(forward(g, nodes), proj)
            backward(g, loss)
            grad = g.grad(nodes[index]) if kind == "input" else g.grad_of(param)  # type: ignore[arg-type]
            return Evaluation(float(loss.value.reshape(-1)[0]), grad, g.activation_pattern())

        return f

    targets: List[Tuple[str, int, Optional[Parameter], np.ndarray]] = [
        ("input", i, None, x) for i, x in enumerate(inputs)
    ]
    if module is not None:
        targets += [("param", -1, p, p.data) for p in module.parameters()]

    worst, checked, skipped = 0.0, 0, 0
    for kind, index, param, arr in targets:
        res = finite_diff_report(objective((kind, index, param)), arr, step, max_elements, rng, extrapolate=True)
        if np.isnan(res.max_error):
            return GradCheckResult(float("nan"), checked + res.checked, skipped + res.skipped)
        worst = max(worst, res.max_error)
        checked += res.checked
        skipped += res.skipped
    return GradCheckResult(worst, checked, skipped)


# -----------------------------
# per-layer cases
# -----------------------------
def _x(rng: np.random.Generator, *shape: int) -> np.ndarray:
    return rng.standard_normal(shape).astype(F64)


def conv3d_case(seed: int, max_elements: Optional[int]) -> GradCheckResult:
    rng = np.random.default_rng(seed)
    spec = ConvKernelSpec(
        spatial=3, temporal=2, in_channels=2, out_channels=3, stride=(1, 2, 2), padding=((1, 0), 1, 1), bias=True
    )
    conv = Conv3d(spec, rng, F64)
    conv.bias.data[...] = rng.standard_normal(3)  # type: ignore[union-attr]
    return check_module(lambda g, xs: conv(g, xs[0]), [_x(rng, 1, 2, 3, 5, 5)], conv, rng, max_elements)


def pool_case(mode: str) -> Callable[[int, Optional[int]], GradCheckResult]:
    def case(seed: int, max_elements: Optional[int]) -> GradCheckResult:
        rng = np.random.default_rng(seed)

        def fwd(g: NodeGraph, xs: List[Node]) -> Node:
            return g.pool3d(xs[0], mode, (2, 3, 3), (2, 2, 2), ((0, 0), (1, 1), (1, 1)))

        return check_module(fwd, [_x(rng, 2, 2, 4, 6, 6)], None, rng, max_elements)

    return case


def batchnorm_case(seed: int, max_elements: Optional[int]) -> GradCheckResult:
    rng = np.random.default_rng(seed)
    bn = BatchNorm3d(3, F64)
    bn.gamma.data[...] = rng.uniform(0.5, 1.5, 3)
    bn.beta.data[...] = rng.standard_normal(3)
    return check_module(lambda g, xs: bn(g, xs[0]), [_x(rng, 2, 3, 2, 3, 3)], bn, rng, max_elements)


def linear_case(seed: int, max_elements: Optional[int]) -> GradCheckResult:
    rng = np.random.default_rng(seed)
    fc = Linear(6, 4, rng, F64)
    return check_module(lambda g, xs: fc(g, xs[0]), [_x(rng, 3, 6)], fc, rng, max_elements)


def dense_layer_case(seed: int, max_elements: Optional[int]) -> GradCheckResult:
    rng = np.random.default_rng(seed)
    layer = DenseLayer3D(4, 3, rng, bottleneck_factor=2, dtype=F64)
    inputs = [_x(rng, 2, 2, 3, 4, 4), _x(rng, 2, 2, 3, 4, 4)]
    return check_module(lambda g, xs: layer(g, xs), inputs, layer, rng, max_elements)


def dense_block_case(seed: int, max_elements: Optional[int]) -> GradCheckResult:
    rng = np.random.default_rng(seed)
    block = DenseBlock3D(3, 2, 2, rng, bottleneck_factor=2, dtype=F64)
    return check_module(lambda g, xs: block(g, xs[0]), [_x(rng, 2, 3, 2, 4, 4)], block, rng, max_elements)


def ttl_case(seed: int, max_elements: Optional[int]) -> GradCheckResult:
    rng = np.random.default_rng(seed)
    ttl = TemporalTransition(4, (1, 2, 3), (2, 1, 1), rng, F64)
    return check_module(lambda g, xs: ttl(g, xs[0]), [_x(rng, 2, 4, 4, 4, 4)], ttl, rng, max_elements)


def transition_case(seed: int, max_elements: Optional[int]) -> GradCheckResult:
    rng = np.random.default_rng(seed)
    tr = Transition3D(4, 2, rng, dtype=F64)
    return check_module(lambda g, xs: tr(g, xs[0]), [_x(rng, 2, 4, 4, 4, 4)], tr, rng, max_elements)


def classifier_case(seed: int, max_elements: Optional[int]) -> GradCheckResult:
    rng = np.random.default_rng(seed)
    head = ClassifierHead(4, 3, rng, F64)
    return check_module(lambda g, xs: head(g, xs[0]), [_x(rng, 2, 4, 2, 3, 3)], head, rng, max_elements)


def transfer_head_case(seed: int, max_elements: Optional[int]) -> GradCheckResult:
    rng = np.random.default_rng(seed)
    head = TransferHead(5, 4, (6, 3), rng, F64)
    labels = rng.integers(0, 2, size=3)

    def fwd(g: NodeGraph, xs: List[Node]) -> Node:
        return g.softmax_cross_entropy(head(g, xs[0], xs[1]), labels)

    return check_module(fwd, [_x(rng, 3, 4), _x(rng, 3, 5)], head, rng, max_elements)


def small_t3d_spec() -> ArchSpec:
    return ArchSpec(
        name="gradcheck-t3d",
        growth=2,
        bottleneck_factor=2,
        stem=StemSpec(
            channels=4,
            spatial=3,
            temporal=3,
            stride=(1, 2, 2),
            pool=PoolSpec(mode="max", kernel=(1, 2, 2), stride=(1, 2, 2)),
        ),
        stages=[StageSpec(layers=1, transition="ttl", depths=(1, 2)), StageSpec(layers=1)],
        num_classes=3,
        input_shape=(3, 4, 8, 8),
    )


def network_case(seed: int, max_elements: Optional[int]) -> GradCheckResult:
    rng = np.random.default_rng(seed)
    net = Network3D(small_t3d_spec(), rng, F64)
    labels = rng.integers(0, 3, size=2)

    def fwd(g: NodeGraph, xs: List[Node]) -> Node:
        return g.softmax_cross_entropy(net(g, xs[0]), labels)

    return check_module(fwd, [_x(rng, 2, 3, 4, 8, 8)], net, rng, max_elements)


CASES: Dict[str, Callable[[int, Optional[int]], GradCheckResult]] = {
    "conv3d": conv3d_case,
    "pool3d-max": pool_case("max"),
    "pool3d-avg": pool_case("avg"),
    "batchnorm3d": batchnorm_case,
    "linear": linear_case,
    "dense-layer": dense_layer_case,
    "dense-block": dense_block_case,
    "ttl": ttl_case,
    "transition": transition_case,
    "classifier": classifier_case,
    "transfer-head": transfer_head_case,
    "network": network_case,
}


def run_suite(
    names: Sequence[str],
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    max_elements: Optional[int] = 16,
) -> List[CheckRow]:
    rows = []
    for name in names:
        for seed in seeds:
            res = CASES[name](seed, max_elements)
            rows.append(CheckRow(name, seed, res.max_error, res.checked, res.skipped))
            logger.debug("%s seed %d: %.3g (%d checked, %d skipped)", name, seed, res.max_error, res.checked, res.skipped)
    return rows


def format_rows(rows: Sequence[CheckRow]) -> str:
    lines = [f"{'layer':<15}{'seeds':>6}{'max rel err':>14}{'checked':>9}{'skipped':>9}  status"]
    for name in dict.fromkeys(r.name for r in rows):
        mine = [r for r in rows if r.name == name]
        errs = [r.max_error for r in mine]
        worst = float("nan") if any(np.isnan(errs)) else max(errs)
        status = "ok" if all(r.ok for r in mine) else "FAIL"
        lines.append(
            f"{name:<15}{len(mine):>6}{worst:>14.3e}{sum(r.checked for r in mine):>9}"
            f"{sum(r.skipped for r in mine):>9}  {status}"
        )
    return "\n".join(lines)

"""
Gradient check suite

Runs gradient_check on every differentiable operation, the attention fusion
block and a small end-to-end model, all in 64-bit test precision. Used by the
`gradcheck` subcommand and the test-suite.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Tuple

import numpy as np

import autodiff as ad
from autodiff import Tensor
from detect_post import AnchorSet
from mvp_model import AttentionFusion, BackboneConfig, ModelConfig, PositionLabel, create_model

logger = logging.getLogger(__name__)

OP_TOLERANCE = 1e-4
END_TO_END_TOLERANCE = 1e-3


@dataclass
class SuiteEntry:
    name: str
    max_rel_error: float
    tolerance: float
    checked: int
    skipped: int

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_error < self.tolerance


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar sum(out * weights) with fixed random weights"""
    return ad.sum_all(ad.elementwise_mul(out, Tensor(weights)))


def _op_cases(rng: np.random.Generator) -> Dict[str, Tuple[Callable[[], Tensor], List[Tensor]]]:
    def p(*shape, scale=1.0):
        return ad.parameter(rng.normal(0.0, scale, shape))

    cases: Dict[str, Tuple[Callable[[], Tensor], List[Tensor]]] = {}

    def add_case(name, build, params):
        out_shape = build().shape
        weights = rng.normal(0.0, 1.0, out_shape)
        cases[name] = (lambda: _weighted_sum(build(), weights), params)

    a, b = p(3, 4), p(3, 4)
    add_case("add", lambda: ad.add(a, b), [a, b])
    add_case("subtract", lambda: ad.subtract(a, b), [a, b])
    add_case("scale", lambda: ad.scale(a, -1.7), [a])
    m1, m2 = p(2, 3, 4), p(2, 3, 4)
    add_case("elementwise_mul", lambda: ad.elementwise_mul(m1, m2), [m1, m2])
    f4, w2 = p(2, 3, 4, 4), p(2, 3)
    add_case("channel_mul", lambda: ad.elementwise_mul(f4, w2), [f4, w2])
    s = p(2, 5)
    cases["sum"] = (lambda: ad.sum_all(ad.elementwise_mul(s, s)), [s])
    cases["mean"] = (lambda: ad.mean_all(ad.elementwise_mul(s, s)), [s])
    r = p(2, 3, 4)
    add_case("reshape", lambda: ad.reshape(r, (6, 4)), [r])
    add_case("transpose", lambda: ad.transpose(r, (2, 0, 1)), [r])
    add_case("getitem", lambda: ad.getitem(r, (slice(None), 1, slice(1, 3))), [r])
    add_case("getitem_fancy", lambda: ad.getitem(r, (np.array([0, 1, 0]), np.array([2, 2, 2]))), [r])
    c1, c2 = p(2, 3, 4), p(2, 1, 4)
    add_case("concat", lambda: ad.concat([c1, c2], axis=1), [c1, c2])
    x = p(3, 5)
    add_case("relu", lambda: ad.relu(x), [x])
    add_case("sigmoid", lambda: ad.sigmoid(x), [x])
    u = p(1, 2, 3, 3)
    add_case("upsample_nearest", lambda: ad.upsample_nearest(u, 2), [u])
    fx, fw, fb = p(4, 5), p(3, 5), p(3)
    add_case("fully_connected", lambda: ad.fully_connected(fx, fw, fb), [fx, fw, fb])
    cx, cw, cb = p(2, 3, 6, 6), p(4, 3, 3, 3), p(4)
    add_case("conv2d", lambda: ad.conv2d(cx, cw, cb, stride=1, padding=1), [cx, cw, cb])
    add_case("conv2d_strided", lambda: ad.conv2d(cx, cw, cb, stride=2, padding=1), [cx, cw, cb])
    px = p(2, 3, 6, 6)
    add_case("max_pool2d", lambda: ad.max_pool2d(px, 2), [px])
    add_case("global_avg_pool", lambda: ad.global_avg_pool(px), [px])
    add_case("global_max_pool", lambda: ad.global_max_pool(px), [px])

    logits = p(4, 3)
    targets = np.eye(3)[[0, 2, 1, 2]]
    cases["softmax_cross_entropy"] = (lambda: ad.softmax_cross_entropy(logits, targets), [logits])
    pred = p(4, 2)
    target = rng.normal(size=(4, 2))
    cases["mse"] = (lambda: ad.mse(pred, target), [pred])
    z = p(3, 6)
    labels = (rng.random((3, 6)) < 0.3).astype(float)
    mask = (rng.random((3, 6)) < 0.8).astype(float)
    cases["binary_cross_entropy"] = (lambda: ad.binary_cross_entropy_with_logits(z, labels, mask), [z])
    d = p(3, 4, scale=2.0)
    d_target = rng.normal(size=(3, 4))
    d_mask = (rng.random((3, 4)) < 0.7).astype(float)
    cases["smooth_l1"] = (lambda: ad.smooth_l1(d, d_target, d_mask, normalizer=3.0), [d])
    return cases


def _attention_case(rng: np.random.Generator) -> Tuple[Callable[[], Tensor], Dict[str, Tensor]]:
    params: Dict[str, Tensor] = {}
    fusion = AttentionFusion(params, channels=6, reduction=2, mode="cbam", rng=rng)
    views = [ad.parameter(rng.normal(size=(2, 3, 4, 4)), name=f"view{i}") for i in range(2)]
    weights = rng.normal(size=(2, 6, 4, 4))
    for view in views:
        params[view.name] = view
    return (lambda: _weighted_sum(fusion(views), weights)), params


def _end_to_end_case(rng: np.random.Generator) -> Tuple[Callable[[], Tensor], Dict[str, Tensor]]:
    config = ModelConfig(
        num_views=3,
        n_ctx=3,
        backbone=BackboneConfig(stages=(4, 6), stage_stride=2, pyramid_channels=4, pyramid_levels=2),
        attention="cbam",
        reduction=2,
        position=True,
        anchor_set=AnchorSet((6.0, 12.0), (0.5, 1.0, 2.0)),
        head_channels=4,
        position_hidden=4,
    )
    model = create_model(config, seed=int(rng.integers(2 ** 31)))
    # move the objectness prior off its saturated start so every head weight matters
    model.detection_head.out.bias.data[:] = rng.normal(0.0, 0.5, model.detection_head.out.bias.shape)
    views = rng.random((2, 3, 3, 16, 16))
    boxes = [np.array([[3.0, 4.0, 9.0, 11.0]]), np.array([[8.0, 2.0, 14.0, 7.0], [1.0, 9.0, 6.0, 15.0]])]
    labels = [PositionLabel(0, 0.2), PositionLabel(2, 0.9)]
    return (lambda: model.compute_losses(views, boxes, labels).total), dict(model.params)


def run_suite(seed: int = 0, n_coords: int = 100) -> List[SuiteEntry]:
    """
    Check every op, the attention block and the end-to-end model

    Returns:
        One SuiteEntry per check, in a fixed order
    """
    rng = np.random.default_rng(seed)
    entries: List[SuiteEntry] = []
    with ad.precision("test"):
        for name, (fn, params) in _op_cases(rng).items():
            result = ad.gradient_check(fn, params, n_coords=n_coords, seed=seed)
            entries.append(SuiteEntry(name, result.max_rel_error, OP_TOLERANCE, result.checked, result.skipped))

        fn, params = _attention_case(rng)
        result = ad.gradient_check(fn, params, n_coords=n_coords, seed=seed)
        entries.append(SuiteEntry("attention_fusion", result.max_rel_error, OP_TOLERANCE, result.checked, result.skipped))

        fn, params = _end_to_end_case(rng)
        result = ad.gradient_check(fn, params, n_coords=n_coords, seed=seed)
        entries.append(SuiteEntry("end_to_end", result.max_rel_error, END_TO_END_TOLERANCE, result.checked, result.skipped))

    for entry in entries:
        logger.debug("%s: %.3e (%d checked, %d skipped)", entry.name, entry.max_rel_error, entry.checked, entry.skipped)
    return entries


def format_suite(entries: List[SuiteEntry]) -> str:
    """Per-check table: name, max relative error, tolerance, status"""
    width = max([len("check")] + [len(e.name) for e in entries])
    lines = [f"{'check'.ljust(width)}  {'max_rel_error':>13}  {'tolerance':>9}  status"]
    for e in entries:
        status = "ok" if e.passed else "FAIL"
        lines.append(f"{e.name.ljust(width)}  {e.max_rel_error:>13.3e}  {e.tolerance:>9.0e}  {status}")
    return "\n".join(lines) + "\n"

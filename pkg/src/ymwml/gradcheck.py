"""Finite-difference verification of every registered operator and the model.

Each case builds a scalar loss from fresh leaf tensors, takes the analytic
gradient off the tape, then compares it against central differences with
step h.  The relative error uses max(1, |analytic|) in the denominator so
near-zero gradients are judged absolutely.

The loss suite additionally checks the one-dimensional loss curve: its
Richardson-extrapolated second differences must be positive (convexity) and
match the analytic second derivative tightly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .loss import (
    ClassWeights,
    WmeParams,
    cross_entropy_baseline,
    curve_loss_value,
    wme_batch_loss,
    wme_batch_loss_composed,
)
from .model import ModelConfig, build_model
from .tensor import (
    Rng,
    Tape,
    Tensor,
    backward,
    bmm,
    concat,
    ew,
    exp,
    no_grad,
    permute,
    reduce,
    registered_ops,
    reshape,
    slice_tensor,
    softmax,
)

DEFAULT_H = 1e-5
DEFAULT_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    error: float
    passed: bool

    def line(self) -> str:
        return f"{'ok  ' if self.passed else 'FAIL'} {self.name}: max rel err {self.error:.3g}"


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


def check_gradients(name, make_loss, leaves, h=DEFAULT_H, tol=DEFAULT_TOL) -> CheckResult:
    """Compare tape gradients of make_loss() against central differences."""
    for leaf in leaves:
        leaf.zero_grad()
    with Tape() as tape:
        loss = make_loss()
        backward(loss, tape)
        analytic = [leaf.grad.copy() for leaf in leaves]

    def value() -> float:
        with no_grad():
            return make_loss().item()

    worst = 0.0
    for leaf, ga in zip(leaves, analytic):
        flat = leaf.data.ravel()
        gn = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = value()
            flat[i] = orig - h
            fm = value()
            flat[i] = orig
            gn[i] = (fp - fm) / (2.0 * h)
        worst = max(worst, _rel_err(ga.ravel(), gn))
    return CheckResult(name=name, error=worst, passed=worst < tol)


def _leaf(rng: Rng, shape, lo=-1.0, hi=1.0) -> Tensor:
    n = int(np.prod(shape))
    return Tensor((lo + (hi - lo) * rng.uniforms(n)).reshape(shape), requires_grad=True)


def _margin_leaf(rng: Rng, shape, step=0.05) -> Tensor:
    """Distinct values with gaps >> h and none at 0, for max/relu kinks."""
    n = int(np.prod(shape))
    vals = (np.arange(n) - n / 2.0 + 0.25) * step
    order = np.argsort(rng.uniforms(n))
    return Tensor(vals[order].reshape(shape), requires_grad=True)


def _scalarize(out: Tensor, rng: Rng) -> Tensor:
    w = Tensor((rng.uniforms(out.size) + 0.5).reshape(out.shape))
    return reduce(ew("mul", out, w), axes=None, mode="sum")


def _conv_params(rng: Rng, cin, cout, k, stride=1) -> ops.ConvParams:
    bound = math.sqrt(6.0 / (cin * k * k))
    return ops.ConvParams(
        weight=_leaf(rng, (cout, cin, k, k), -bound, bound),
        bias=_leaf(rng, (cout,), -0.1, 0.1),
        stride=stride,
    )


def _gn_params(rng: Rng, channels, groups) -> ops.GroupNormParams:
    return ops.GroupNormParams(
        gamma=_leaf(rng, (channels,), 0.5, 1.5),
        beta=_leaf(rng, (channels,), -0.5, 0.5),
        groups=groups,
    )


def _op_cases() -> dict[str, list]:
    """op name -> list of (case name, builder); builder(rng) -> (leaves, make_loss)."""

    def arith(kind):
        def build(rng):
            a = _leaf(rng, (2, 3))
            b = _leaf(rng, (2, 3), 0.5, 1.5)  # bounded away from 0 for div
            return [a, b], lambda: _scalarize(ew(kind, a, b), Rng(3))

        def build_scalar(rng):
            a = _leaf(rng, (2, 3))
            return [a], lambda: _scalarize(ew(kind, a, 0.7), Rng(3))

        return [(f"{kind}[2,3]", build), (f"{kind}[scalar]", build_scalar)]

    def build_exp(rng):
        a = _leaf(rng, (3, 4))
        return [a], lambda: _scalarize(exp(a), Rng(3))

    def red(mode, axes, keepdims):
        def build(rng):
            a = _margin_leaf(rng, (2, 3, 4)) if mode == "max" else _leaf(rng, (2, 3, 4))
            return [a], lambda: _scalarize(reduce(a, axes=axes, mode=mode, keepdims=keepdims), Rng(3))

        return (f"reduce_{mode}[axes={axes},keep={keepdims}]", build)

    def build_reshape(rng):
        a = _leaf(rng, (2, 6))
        return [a], lambda: _scalarize(reshape(a, (3, 4)), Rng(3))

    def build_concat(rng):
        a, b, c = _leaf(rng, (2, 2, 3)), _leaf(rng, (2, 1, 3)), _leaf(rng, (2, 4, 3))
        return [a, b, c], lambda: _scalarize(concat([a, b, c], axis=1), Rng(3))

    def build_slice(rng):
        a = _leaf(rng, (3, 5, 4))
        return [a], lambda: _scalarize(slice_tensor(a, (1, 0, 2), (3, 4, 4)), Rng(3))

    def build_permute(rng):
        a = _leaf(rng, (2, 3, 4))
        return [a], lambda: _scalarize(permute(a, (2, 0, 1)), Rng(3))

    def build_bmm(rng):
        a, b = _leaf(rng, (2, 3, 4)), _leaf(rng, (2, 4, 2))
        return [a, b], lambda: _scalarize(bmm(a, b), Rng(3))

    def build_softmax(rng):
        a = _leaf(rng, (2, 5), -2.0, 2.0)
        return [a], lambda: _scalarize(softmax(a, axis=1), Rng(3))

    def conv_case(cin, cout, k, stride, size):
        def build(rng):
            x = _leaf(rng, (2, cin, size, size))
            p = _conv_params(rng, cin, cout, k, stride)
            return [x, p.weight, p.bias], lambda: _scalarize(ops.conv2d(x, p), Rng(3))

        return (f"conv2d[{k}x{k},s{stride}]", build)

    def build_group_norm(rng):
        x = _leaf(rng, (2, 6, 3, 3), -2.0, 2.0)
        p = _gn_params(rng, 6, 3)
        return [x, p.gamma, p.beta], lambda: _scalarize(ops.group_norm(x, p), Rng(3))

    def build_relu(rng):
        x = _margin_leaf(rng, (2, 3, 4, 4))
        return [x], lambda: _scalarize(ops.relu(x), Rng(3))

    def build_max_pool(rng):
        x = _margin_leaf(rng, (1, 2, 5, 5))
        return [x], lambda: _scalarize(ops.max_pool2d(x, k=3), Rng(3))

    def up_case(factor):
        def build(rng):
            x = _leaf(rng, (1, 2, 3, 3))
            return [x], lambda: _scalarize(ops.upsample_nearest(x, factor), Rng(3))

        return (f"upsample_nearest[x{factor}]", build)

    def build_sigmoid(rng):
        x = _leaf(rng, (2, 3), -2.0, 2.0)
        return [x], lambda: _scalarize(ops.sigmoid(x), Rng(3))

    def build_channel_scale(rng):
        x = _leaf(rng, (2, 3, 4, 4))
        gate = _leaf(rng, (2, 3, 1, 1), 0.1, 0.9)
        return [x, gate], lambda: _scalarize(ops.channel_scale(x, gate), Rng(3))

    def wme_case(reduction):
        def build(rng):
            z = _leaf(rng, (2, 3, 4, 4), -2.0, 2.0)
            mask = np.floor(rng.uniforms(2 * 4 * 4) * 3).astype(np.int64).reshape(2, 4, 4)
            weights = ClassWeights.from_rates([0.5, 0.3, 0.2])
            return [z], lambda: wme_batch_loss(z, mask, weights, WmeParams(), reduction)

        return (f"wme_loss[{reduction}]", build)

    def build_cross_entropy(rng):
        z = _leaf(rng, (2, 3, 4, 4), -2.0, 2.0)
        mask = np.floor(rng.uniforms(2 * 4 * 4) * 3).astype(np.int64).reshape(2, 4, 4)
        return [z], lambda: cross_entropy_baseline(z, mask, "sum")

    return {
        "add": arith("add"),
        "sub": arith("sub"),
        "mul": arith("mul"),
        "div": arith("div"),
        "exp": [("exp[3,4]", build_exp)],
        "reduce_sum": [red("sum", (1,), False), red("sum", None, False)],
        "reduce_mean": [red("mean", (0, 2), True)],
        "reduce_max": [red("max", (2,), False), red("max", None, False)],
        "reshape": [("reshape[2,6->3,4]", build_reshape)],
        "concat": [("concat[axis=1]", build_concat)],
        "slice": [("slice[3,5,4]", build_slice)],
        "permute": [("permute[2,0,1]", build_permute)],
        "bmm": [("bmm[2,3,4x2,4,2]", build_bmm)],
        "softmax": [("softmax[axis=1]", build_softmax)],
        "conv2d": [conv_case(3, 4, 3, 1, 5), conv_case(3, 4, 3, 2, 6), conv_case(4, 2, 1, 1, 4)],
        "group_norm": [("group_norm[6ch,3g]", build_group_norm)],
        "relu": [("relu[margin]", build_relu)],
        "max_pool2d": [("max_pool2d[k3]", build_max_pool)],
        "upsample_nearest": [up_case(2), up_case(8)],
        "sigmoid": [("sigmoid[2,3]", build_sigmoid)],
        "channel_scale": [("channel_scale[2,3]", build_channel_scale)],
        "wme_loss": [wme_case("sum"), wme_case("mean")],
        "cross_entropy": [("cross_entropy[sum]", build_cross_entropy)],
    }


def run_ops_suite(h=DEFAULT_H, tol=DEFAULT_TOL) -> list[CheckResult]:
    """One finite-difference case per registered operator (several for convs)."""
    cases = _op_cases()
    results = []
    for op_name in registered_ops():
        if op_name not in cases:
            results.append(CheckResult(name=f"coverage/{op_name}", error=float("inf"), passed=False))
            continue
        for case_name, build in cases[op_name]:
            leaves, make_loss = build(Rng(11))
            results.append(check_gradients(case_name, make_loss, leaves, h=h, tol=tol))
    results.extend(_block_cases(h, tol))
    return results


def _block_cases(h, tol) -> list[CheckResult]:
    """Composite blocks exercised end to end (gradients flow through primitives)."""
    rng = Rng(23)
    out = []

    x = _leaf(rng, (1, 8, 4, 4))
    ca = ops.ChannelAttentionParams(
        reduce=_conv_params(rng, 8, 2, 1), expand=_conv_params(rng, 2, 8, 1)
    )
    leaves = [x, ca.reduce.weight, ca.expand.weight]
    out.append(check_gradients("block/channel_attention", lambda: _scalarize(ops.channel_attention(x, ca), Rng(3)), leaves, h, tol))

    x2 = _leaf(rng, (1, 8, 3, 3))
    sa = ops.SelfAttentionParams(
        query=_conv_params(rng, 8, 1, 1),
        key=_conv_params(rng, 8, 1, 1),
        value=_conv_params(rng, 8, 8, 1),
        gain=Tensor(np.array([0.5]), requires_grad=True),
    )
    leaves = [x2, sa.query.weight, sa.value.weight, sa.gain]
    out.append(check_gradients("block/self_attention", lambda: _scalarize(ops.self_attention(x2, sa), Rng(3)), leaves, h, tol))

    x3 = _margin_leaf(rng, (1, 4, 4, 4), step=0.03)
    sp = ops.SppfParams(pre=_conv_params(rng, 4, 2, 1), post=_conv_params(rng, 8, 4, 1))
    leaves = [x3, sp.pre.weight, sp.post.weight]
    out.append(check_gradients("block/sppf", lambda: _scalarize(ops.sppf(x3, sp), Rng(3)), leaves, h, tol))

    x4 = _leaf(rng, (1, 6, 3, 3))
    c3 = ops.C3k2Params(
        pre=_conv_params(rng, 6, 4, 1),
        bottlenecks=[
            ops.BottleneckParams(
                conv1=_conv_params(rng, 2, 2, 3), gn1=_gn_params(rng, 2, 2),
                conv2=_conv_params(rng, 2, 2, 3), gn2=_gn_params(rng, 2, 2),
            )
            for _ in range(2)
        ],
        post=_conv_params(rng, 6, 4, 1),
    )
    leaves = [x4, c3.pre.weight, c3.bottlenecks[0].conv1.weight, c3.bottlenecks[1].gn2.gamma, c3.post.weight]
    out.append(check_gradients("block/c3k2", lambda: _scalarize(ops.c3k2_block(x4, c3), Rng(3)), leaves, h, tol))

    x5 = _leaf(rng, (1, 8, 3, 3))
    c2 = ops.C2psaParams(
        pre=_conv_params(rng, 8, 8, 1),
        attn=ops.SelfAttentionParams(
            query=_conv_params(rng, 4, 1, 1),
            key=_conv_params(rng, 4, 1, 1),
            value=_conv_params(rng, 4, 4, 1),
            gain=Tensor(np.array([0.3]), requires_grad=True),
        ),
        post=_conv_params(rng, 8, 8, 1),
    )
    leaves = [x5, c2.pre.weight, c2.attn.value.weight, c2.post.weight]
    out.append(check_gradients("block/c2psa", lambda: _scalarize(ops.c2psa_block(x5, c2), Rng(3)), leaves, h, tol))
    return out


# --- loss suite -----------------------------------------------------------------


def curvature_results(lam_values=None, grid=None, h=0.01, tol=1e-8) -> list[CheckResult]:
    """Richardson-extrapolated second differences of the 1-d loss curve:
    positive everywhere and within tol of the analytic second derivative."""
    params = WmeParams()
    if lam_values is None:
        lam_values = (math.exp(-1.0), 0.8, 1.0)
    if grid is None:
        grid = [i / 100.0 for i in range(1, 100)]
    out = []
    for lam in lam_values:
        worst = 0.0
        positive = True
        for p in grid:
            f = lambda q: curve_loss_value(lam, params, q)
            d1 = (f(p + h) - 2.0 * f(p) + f(p - h)) / (h * h)
            d2 = (f(p + h / 2) - 2.0 * f(p) + f(p - h / 2)) / (h * h / 4.0)
            rich = (4.0 * d2 - d1) / 3.0
            analytic = lam * params.beta1 * math.exp(-p) + params.beta2 * math.exp(1.0 - p)
            positive = positive and rich > 0.0
            worst = max(worst, abs(rich - analytic))
        out.append(CheckResult(name=f"curvature[lam={lam:.6g}]", error=worst, passed=positive and worst < tol))
    return out


def run_loss_suite(h=DEFAULT_H, tol=DEFAULT_TOL) -> list[CheckResult]:
    results = []
    rng = Rng(31)
    z = _leaf(rng, (2, 4, 5, 5), -2.0, 2.0)
    mask = np.floor(rng.uniforms(2 * 5 * 5) * 4).astype(np.int64).reshape(2, 5, 5)
    weights = ClassWeights.from_rates([0.55, 0.25, 0.15, 0.05])
    params = WmeParams()
    for reduction in ("sum", "mean"):
        results.append(
            check_gradients(
                f"loss/wme[{reduction}]",
                lambda r=reduction: wme_batch_loss(z, mask, weights, params, r),
                [z],
                h,
                tol,
            )
        )
    # Registered analytic op vs the same loss composed from primitives.
    z.zero_grad()
    with Tape() as tape:
        a = wme_batch_loss(z, mask, weights, params, "sum")
        backward(a, tape)
        ga = z.grad.copy()
    z.zero_grad()
    with Tape() as tape:
        c = wme_batch_loss_composed(z, mask, weights, params, "sum")
        backward(c, tape)
        gc = z.grad.copy()
    z.zero_grad()
    agree = max(abs(a.item() - c.item()), float(np.max(np.abs(ga - gc))))
    results.append(CheckResult(name="loss/analytic-vs-composed", error=agree, passed=agree < 1e-9))
    results.extend(curvature_results())
    return results


# --- whole-model suite ------------------------------------------------------------


def run_model_suite(
    width=0.125,
    input_size=32,
    n_samples=16,
    seed=7,
    h=DEFAULT_H,
    tol=DEFAULT_TOL,
) -> list[CheckResult]:
    """Finite differences on a random subset of scalar parameters of a thin model."""
    cfg = ModelConfig(width=width, input_size=input_size)
    rng = Rng(seed)
    model = build_model(cfg, rng)
    x = Tensor(rng.uniforms(input_size * input_size).reshape(1, 1, input_size, input_size))
    mask = np.floor(rng.uniforms(input_size * input_size) * cfg.num_classes)
    mask = mask.astype(np.int64).reshape(1, input_size, input_size)
    weights = ClassWeights.from_rates([0.4, 0.2, 0.2, 0.2])
    params = WmeParams()

    def make_loss():
        return wme_batch_loss(model.forward(x), mask, weights, params, "mean")

    with Tape() as tape:
        loss = make_loss()
        backward(loss, tape)
        grads = {name: p.grad.copy() for name, p in model.params.items()}
    model.params.zero_grads()

    names = model.params.names()
    sizes = [model.params[n].size for n in names]
    total = sum(sizes)
    picks: set[int] = set()
    while len(picks) < n_samples:
        picks.add(rng.randint(total))

    def locate(flat: int):
        for name, size in zip(names, sizes):
            if flat < size:
                return name, flat
            flat -= size
        raise AssertionError

    worst = 0.0
    for flat in sorted(picks):
        name, idx = locate(flat)
        buf = model.params[name].data.ravel()
        orig = buf[idx]
        with no_grad():
            buf[idx] = orig + h
            fp = make_loss().item()
            buf[idx] = orig - h
            fm = make_loss().item()
            buf[idx] = orig
        numeric = (fp - fm) / (2.0 * h)
        analytic = grads[name].ravel()[idx]
        worst = max(worst, abs(analytic - numeric) / max(1.0, abs(analytic)))
    return [CheckResult(name=f"model[width={width},in={input_size},{n_samples} params]", error=worst, passed=worst < tol)]


def run_suite(scope: str = "all") -> list[CheckResult]:
    if scope == "ops":
        return run_ops_suite()
    if scope == "loss":
        return run_loss_suite()
    if scope == "model":
        return run_model_suite()
    if scope == "all":
        return run_ops_suite() + run_loss_suite() + run_model_suite()
    raise ValueError(f"unknown gradcheck scope '{scope}'")

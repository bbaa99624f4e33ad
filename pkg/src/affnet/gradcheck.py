"""Central-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, NonFiniteError, TiePointExcluded
from .tensor import ComputationRecord, Tensor


def _first_non_finite(out: Tensor) -> str | None:
    for node in ComputationRecord(out):
        if not np.all(np.isfinite(node.data)):
            return node.op
    return None


def _evaluate(fn, inputs):
    """Run ``fn`` and return (output, branch decisions seen: pool argmaxes, ReLU masks)."""
    T._branch_trace = []
    try:
        out = fn(*inputs)
        return out, T._branch_trace
    finally:
        T._branch_trace = None


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    max_per_input: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between backprop and central differences.

    The error for one element is ``|a - n| / max(1, |a|, |n|)``.  When
    ``max_per_input`` is given, that many elements per input are drawn at
    random (seeded) instead of checking every element.

    Raises TiePointExcluded if any perturbation changes a max-pool argmax
    or a ReLU mask (the function is not differentiable there), and
    NonFiniteError naming the first op that produced NaN/Inf.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"eps {eps} outside [1e-7, 1e-3]")
    for t in inputs:
        if t.dtype != np.float64:
            raise ContractError("grad_check requires 64-bit inputs")
    saved_flags = [t.requires_grad for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    try:
        out, base_args = _evaluate(fn, inputs)
        bad = _first_non_finite(out)
        if bad is not None:
            raise NonFiniteError(f"non-finite value produced by op '{bad}'", op=bad)
        if out.size != 1:
            raise ContractError(f"grad_check needs a scalar function, got shape {out.shape}")
        T.backward(out, leaves=inputs)
        analytic = [t.grad.copy() for t in inputs]

        rng = np.random.default_rng(seed)
        worst = 0.0
        with T.no_grad():
            for t, a in zip(inputs, analytic):
                flat = t.data.reshape(-1)
                a_flat = a.reshape(-1)
                idxs = np.arange(flat.size)
                if max_per_input is not None and flat.size > max_per_input:
                    idxs = np.sort(rng.choice(flat.size, size=max_per_input, replace=False))
                for i in idxs:
                    orig = flat[i]
                    vals = []
                    for delta in (eps, -eps):
                        flat[i] = orig + delta
                        o, args = _evaluate(fn, inputs)
                        if any(not np.array_equal(p, q) for p, q in zip(args, base_args)):
                            flat[i] = orig
                            raise TiePointExcluded(f"perturbing element {i} changes a max-pool argmax or ReLU mask")
                        v = float(o.data.reshape(-1)[0])
                        if not np.isfinite(v):
                            flat[i] = orig
                            raise NonFiniteError("non-finite output under perturbation", op=o.op)
                        vals.append(v)
                    flat[i] = orig
                    num = (vals[0] - vals[1]) / (2 * eps)
                    ana = float(a_flat[i])
                    err = abs(ana - num) / max(1.0, abs(ana), abs(num))
                    worst = max(worst, err)
        return worst
    finally:
        for t, flag in zip(inputs, saved_flags):
            t.requires_grad = flag


# the standard suite -----------------------------------------------------------

def _project(out: Tensor, rng) -> Tensor:
    """Reduce ``out`` to a scalar with fixed random weights, so every output element matters."""
    return T.tsum(T.mul(out, Tensor(rng.standard_normal(out.shape))))


def _rand(rng, *shape):
    return Tensor(rng.standard_normal(shape))


def _fixed_projection(fn, rng):
    seed = int(rng.integers(2**62))
    return lambda *xs: _project(fn(*xs), np.random.default_rng(seed))


def _suite_cases():
    from . import layers as L
    from .model import build, forward, tiny_config, BatchInput

    def conv2d(rng):
        c, co, k = (int(v) for v in rng.integers(1, 4, size=3))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, k))
        h = int(rng.integers(k, k + 5))
        f = _fixed_projection(lambda x, w, b: T.conv2d(x, w, b, stride, pad), rng)
        return f, [_rand(rng, 2, c, h, h + 1), _rand(rng, co, c, k, k), _rand(rng, co)]

    def maxpool2d(rng):
        h = int(rng.integers(3, 9))
        f = _fixed_projection(lambda x: T.maxpool2d(x, 3, 2), rng)
        return f, [_rand(rng, 2, 2, h, h)]

    def affine(rng):
        n, di, do = (int(v) for v in rng.integers(1, 6, size=3))
        f = _fixed_projection(T.affine, rng)
        return f, [_rand(rng, n, di), _rand(rng, do, di), _rand(rng, do)]

    def activations(rng):
        slope = float(rng.uniform(0.0, 0.2))
        f = _fixed_projection(lambda x: T.concat([T.relu(x), T.leaky_relu(x, slope), T.sigmoid(x)], axis=1), rng)
        return f, [_rand(rng, 3, 5)]

    def gap(rng):
        f = _fixed_projection(T.global_avg_pool, rng)
        return f, [_rand(rng, 2, 3, int(rng.integers(1, 6)), int(rng.integers(1, 6)))]

    def channel_concat(rng):
        f = _fixed_projection(lambda a, b: T.channel_concat([a, b]), rng)
        return f, [_rand(rng, 2, int(rng.integers(1, 4)), 3, 3), _rand(rng, 2, int(rng.integers(1, 4)), 3, 3)]

    def se_forward(rng):
        c = int(rng.choice([4, 8, 16]))
        r = L.se_reduction(c)

        def f(x, w1, b1, w2, b2):
            return L.se_forward(x, L.SEParams(c, r, L.AffineParams(w1, b1), L.AffineParams(w2, b2)))

        h = c // r
        ws = [_rand(rng, h, c), _rand(rng, h), _rand(rng, c, h), _rand(rng, c)]
        return _fixed_projection(f, rng), [_rand(rng, 2, c, 3, 3), *ws]

    def group_normalize(rng):
        c = int(rng.choice([2, 4, 6, 8, 12]))
        cfg = L.GNConfig(L.gn_groups(c))
        return _fixed_projection(lambda x: L.group_normalize(x, cfg), rng), [_rand(rng, 2, c, 3, 4)]

    def adagn_forward(rng):
        c, d = int(rng.choice([2, 4, 8])), int(rng.integers(2, 6))
        base = L.init_params(L.AdaGNSpec(c, d), 0)

        def f(x, ctx, w, b):
            return L.adagn_forward(x, ctx, L.AdaGNParams(base.gn, d, L.AffineParams(w, b)))

        w = _rand(rng, 2 * c, d)
        b = Tensor(base.fc.bias.data + 0.5 * rng.standard_normal(2 * c))
        return _fixed_projection(f, rng), [_rand(rng, 2, c, 3, 3), _rand(rng, 2, d), w, b]

    def smooth_l1(rng):
        from .train import smooth_l1 as loss
        pred = rng.standard_normal((4, 2)) * 2
        d = rng.uniform(0.05, 0.9, size=(4, 2)) * rng.choice([-1, 1], size=(4, 2))
        d[rng.random((4, 2)) < 0.5] *= 3.0  # some elements on the linear branch
        return loss, [Tensor(pred), Tensor(pred - d)]

    def tiny_model(rng):
        cfg = tiny_config(str(rng.choice(["Full", "NoST", "NoSE", "NoAdaGN"])))
        params = build(cfg, int(rng.integers(2**31)))
        # perturb the AdaGN maps away from their identity initialization
        for name, t in params.tensors.items():
            if ".norm" in name or "adagn" in name:
                t.data = t.data + 0.1 * rng.standard_normal(t.shape)
        names = list(params.tensors)
        face, eye_l, eye_r = _rand(rng, 2, 3, 32, 32), _rand(rng, 2, 3, 16, 16), _rand(rng, 2, 3, 16, 16)
        rects = Tensor(rng.uniform(0, 1, size=(2, 12)))

        def f(face, eye_l, eye_r, rects, *ws):
            for name, w in zip(names, ws):
                params.tensors[name] = w
            return forward(params, BatchInput(face, eye_l, eye_r, rects))

        ws = [Tensor(t.data.copy()) for t in params.tensors.values()]
        return _fixed_projection(f, rng), [face, eye_l, eye_r, rects, *ws]

    return {
        "conv2d": (conv2d, None), "maxpool2d": (maxpool2d, None), "affine": (affine, None),
        "activations": (activations, None), "global_avg_pool": (gap, None),
        "channel_concat": (channel_concat, None), "se_forward": (se_forward, None),
        "group_normalize": (group_normalize, None), "adagn_forward": (adagn_forward, None),
        "smooth_l1": (smooth_l1, None), "tiny_model": (tiny_model, 3),
    }


SUITE_MODULES = (
    "conv2d", "maxpool2d", "affine", "activations", "global_avg_pool", "channel_concat",
    "se_forward", "group_normalize", "adagn_forward", "smooth_l1", "tiny_model",
)


def gradient_suite(instances: int = 20, modules=None, seed: int = 0, eps: float = 1e-5) -> dict[str, float]:
    """Worst relative error per module over ``instances`` random float64 cases.

    Cases whose perturbations cross a kink (max-pool argmax or ReLU mask) are redrawn.  The tiny
    end-to-end model checks a seeded sample of elements per tensor.
    """
    cases = _suite_cases()
    names = list(modules) if modules else list(SUITE_MODULES)
    unknown = [n for n in names if n not in cases]
    if unknown:
        raise ContractError(f"unknown gradcheck module(s): {', '.join(unknown)}")
    results = {}
    for name in names:
        make, per_input = cases[name]
        rng = np.random.default_rng([seed, SUITE_MODULES.index(name)])
        worst, done, redraws = 0.0, 0, 0
        while done < instances:
            fn, inputs = make(rng)
            try:
                worst = max(worst, grad_check(fn, inputs, eps, max_per_input=per_input,
                                              seed=int(rng.integers(2**31))))
            except TiePointExcluded:
                redraws += 1
                if redraws > 10 * instances:
                    raise
                continue
            done += 1
        results[name] = worst
    return results

"""Central-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def grad_check(f: Callable[[Sequence[Tensor]], Tensor], params: Sequence[Tensor], h: float = 1e-5,
               max_coords: Optional[int] = None, seed: int = 0) -> float:
    """Max over coordinates of |numeric - analytic| / max(1, |analytic|).

    ``f`` maps the parameter list to a scalar Tensor. With ``max_coords``, at
    most that many coordinates per parameter are probed, chosen by a seeded
    draw; otherwise every coordinate is.
    """
    if h <= 0:
        raise ValueError("step must be positive")
    params = list(params)
    for p in params:
        p.grad = None
    backward(f(params))
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            p.data = np.ascontiguousarray(p.data)
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                up = f(params).item()
                flat[i] = orig - h
                down = f(params).item()
                flat[i] = orig
                num = (up - down) / (2.0 * h)
                ana = a.reshape(-1)[i]
                worst = max(worst, abs(num - ana) / max(1.0, abs(ana)))
    return worst


# ---------------------------------------------------------------------------
# suite used by the ``gradcheck`` command

TOLERANCE = 1e-4


class _Projection:
    """Fixed random linear functional, so every output coordinate matters."""

    def __init__(self, gen: np.random.Generator):
        self.gen = gen
        self.weight: Optional[Tensor] = None

    def __call__(self, out: Tensor) -> Tensor:
        from .tensor import mul, sum_all
        if self.weight is None:
            self.weight = Tensor(self.gen.standard_normal(out.shape))
        return sum_all(mul(out, self.weight))


def _corrupt(fn):
    """Wrap an op so its backward rule returns 1.5x the true gradient."""
    def wrapped(*args, **kwargs):
        out = fn(*args, **kwargs)
        rule = out._backward
        if rule is not None:
            out._backward = lambda g: tuple(None if x is None else 1.5 * x for x in rule(g))
        return out
    return wrapped


def op_cases(seed: int, fault: Optional[str] = None):
    """(name, params, f) triples covering every differentiable op on small random shapes."""
    from . import tensor as T
    from .channel import normalize_power, transmit

    gen = np.random.default_rng(seed)

    def rand(*shape):
        return Tensor(gen.standard_normal(shape), requires_grad=True)

    def ext(lo=1, hi=6):
        return int(gen.integers(lo, hi + 1))

    ops = {
        "add": T.add, "sub": T.sub, "mul": T.mul, "scale": T.scale, "gelu": T.gelu,
        "matmul": T.matmul, "linear": T.linear, "layer_norm": T.layer_norm, "softmax": T.softmax,
        "attention": T.attention, "reshape": T.reshape, "transpose": T.transpose, "roll": T.roll,
        "window_partition": T.window_partition, "window_merge": T.window_merge,
        "sum": T.sum_all, "mean": T.mean_all, "mse": T.mse,
        "normalize_power": normalize_power, "transmit": transmit,
    }
    if fault is not None:
        if fault not in ops:
            raise KeyError(f"unknown op {fault!r}")
        ops[fault] = _corrupt(ops[fault])
    proj_gen = np.random.default_rng(seed + 1000)

    def proj():
        return _Projection(proj_gen)

    m, k, n = ext(), ext(), ext()
    d = ext(2, 6)
    heads = int(gen.choice([h for h in (1, 2, 3) if d % h == 0]))
    t = ext(1, 5)
    win = int(gen.integers(1, 3))
    gh, gw = win * ext(1, 3), win * ext(1, 3)
    cases = [
        ("add", [rand(m, n), rand(n)], lambda p, P=proj(): P(ops["add"](p[0], p[1]))),
        ("sub", [rand(m, n), rand(m, n)], lambda p, P=proj(): P(ops["sub"](p[0], p[1]))),
        ("mul", [rand(m, n), rand(m, n)], lambda p, P=proj(): P(ops["mul"](p[0], p[1]))),
        ("scale", [rand(m, n)], lambda p, P=proj(): P(ops["scale"](p[0], -1.7))),
        ("gelu", [rand(m, n)], lambda p, P=proj(): P(ops["gelu"](p[0]))),
        ("matmul", [rand(m, k), rand(k, n)], lambda p, P=proj(): P(ops["matmul"](p[0], p[1]))),
        ("matmul", [rand(2, m, k), rand(2, k, n)], lambda p, P=proj(): P(ops["matmul"](p[0], p[1]))),
        ("linear", [rand(2, m, k), rand(k, n), rand(n)], lambda p, P=proj(): P(ops["linear"](p[0], p[1], p[2]))),
        ("layer_norm", [rand(m, d), rand(d), rand(d)], lambda p, P=proj(): P(ops["layer_norm"](p[0], p[1], p[2]))),
        ("softmax", [rand(m, d)], lambda p, P=proj(): P(ops["softmax"](p[0]))),
        ("attention", [rand(t, d), rand(t, d), rand(t, d)],
         lambda p, P=proj(): P(ops["attention"](p[0], p[1], p[2], heads))),
        ("reshape", [rand(m, n)], lambda p, P=proj(): P(ops["reshape"](p[0], (n, m)))),
        ("transpose", [rand(m, k, n)], lambda p, P=proj(): P(ops["transpose"](p[0], (2, 0, 1)))),
        ("roll", [rand(m, n)], lambda p, P=proj(): P(ops["roll"](p[0], (1, -1), (0, 1)))),
        ("window_partition", [rand(gh, gw, d)], lambda p, P=proj(): P(ops["window_partition"](p[0], win))),
        ("window_merge", [rand((gh // win) * (gw // win), win * win, d)],
         lambda p, P=proj(): P(ops["window_merge"](p[0], win, gh, gw))),
        ("sum", [rand(m, n)], lambda p: T.scale(ops["sum"](T.mul(p[0], p[0])), 0.5)),
        ("mean", [rand(m, n)], lambda p: ops["mean"](T.gelu(p[0]))),
        ("mse", [rand(m, n), rand(m, n)], lambda p: ops["mse"](p[0], p[1])),
        ("normalize_power", [rand(2, n + 1)], lambda p, P=proj(): P(ops["normalize_power"](p[0]))),
        ("transmit", [rand(2, n)],
         lambda p, P=proj(): P(ops["transmit"](p[0], 3.0, np.random.default_rng(7)))),
    ]
    return cases


def pipeline_case(seed: int = 0):
    """encode -> normalise -> transmit -> decode(dec2) -> combined loss on a tiny 8x8 model.

    The teacher reconstruction is computed once from a fixed received signal
    and held constant, as the distillation loss treats it.
    """
    from fractions import Fraction

    from .channel import normalize_power, transmit
    from .model import ModelConfig, build, decode, encode
    from .training import loss_combined

    cfg = ModelConfig(patch_size=1, stage_dims=(4, 8, 8, 8), encoder_depths=(2, 2, 1, 1),
                      hcd_depths=(1, 2, 1, 1), lcd_depths=(1, 1, 1, 1), heads=(1, 2, 2, 2),
                      window_size=2, shifted_windows=True, compression_ratio=Fraction(1, 16))
    params = build(cfg, seed)
    gen = np.random.default_rng(seed)
    for name in params:
        # move off the symmetric init so every path carries a gradient
        params[name].data = params[name].data + 0.1 * gen.standard_normal(params[name].shape)
    image = gen.random((8, 8, 3))
    with no_grad():
        y0 = transmit(normalize_power(encode(image, params, cfg)), 3.0, np.random.default_rng(1))
        teacher = decode(y0, params, cfg, "dec1", 8, 8)
    names = params.select("enc.") + params.select("dec2.")
    tensors = [params[n] for n in names]

    def f(_):
        y = transmit(normalize_power(encode(image, params, cfg)), 3.0, np.random.default_rng(1))
        return loss_combined(image, decode(y, params, cfg, "dec2", 8, 8), teacher, 0.5)

    return tensors, f


def run_suite(seeds=range(10), fault: Optional[str] = None, pipeline_coords: int = 3,
              out=print) -> bool:
    """Run every per-op check over ``seeds`` plus the pipeline check; True iff all pass."""
    worst: dict = {}
    for seed in seeds:
        for name, params, f in op_cases(seed, fault):
            err = grad_check(f, params)
            worst[name] = max(worst.get(name, 0.0), err)
    tensors, f = pipeline_case()
    worst["pipeline"] = grad_check(f, tensors, max_coords=pipeline_coords)
    ok = True
    for name, err in worst.items():
        passed = err <= TOLERANCE
        ok &= passed
        out(f"{name:18s} max_rel_err={err:.3e} {'PASS' if passed else 'FAIL'}")
    bad = max(worst, key=worst.get)
    out(f"worst: {bad} {worst[bad]:.3e} -> {'OK' if ok else 'FAILED'}")
    return ok

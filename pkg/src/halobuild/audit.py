"""Finite-difference gradient audit over primitives, modules and the full network."""
from __future__ import annotations

import time
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Iterable, List, Optional

import numpy as np

from . import modules as M
from . import tensor as T
from .tensor import ConvKernel, Tensor, grad_check, sum_all

THRESHOLD = 1e-3
AUDIT_EPS = 1e-4


@dataclass
class AuditRow:
    name: str
    max_rel_err: float
    seeds: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < THRESHOLD

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.name:<28}{self.max_rel_err:.3e}\t{self.seeds}\t{self.seconds:.1f}s\t{status}"


def _weighted_sum(y: Tensor, w: np.ndarray) -> Tensor:
    return sum_all(T.mul(y, Tensor(w)))


def _rand(rng, *shape, lo=-1.0, hi=1.0):
    return rng.uniform(lo, hi, size=shape)


def _coords(rng, size: int, limit: Optional[int]):
    if limit is None or size <= limit:
        return None
    return rng.choice(size, size=limit, replace=False)


# each case: rng -> (f, x, coords)
def _case_add(rng):
    b = Tensor(_rand(rng, 1, 3, 1, 1))
    w = _rand(rng, 1, 3, 4, 4)
    return lambda x: _weighted_sum(T.add(x, b), w), _rand(rng, 1, 3, 4, 4)


def _case_mul(rng):
    px = Tensor(_rand(rng, 1, 1, 4, 4))
    w = _rand(rng, 1, 3, 4, 4)
    return lambda x: _weighted_sum(T.mul(T.mul(x, px), x), w), _rand(rng, 1, 3, 4, 4)


def _case_sigmoid(rng):
    return lambda x: sum_all(T.sigmoid(x)), _rand(rng, 1, 2, 3, 3, lo=-2, hi=2)


def _case_relu(rng):
    w = _rand(rng, 1, 2, 3, 3)
    return lambda x: _weighted_sum(T.relu(x), w), _rand(rng, 1, 2, 3, 3)


def _case_concat_split(rng):
    other = Tensor(_rand(rng, 1, 2, 3, 3))
    w = _rand(rng, 1, 3, 3, 3)

    def f(x):
        a, b = T.split_c(T.concat_c([x, other]), [3, 2])
        return T.add(_weighted_sum(a, w), sum_all(T.mul(b, b)))

    return f, _rand(rng, 1, 3, 3, 3)


def _case_linear(rng):
    w1, b1 = Tensor(_rand(rng, 3, 6)), Tensor(_rand(rng, 3))
    w2, b2 = Tensor(_rand(rng, 6, 3)), Tensor(_rand(rng, 6))
    w = _rand(rng, 2, 6, 1, 1)
    return lambda x: _weighted_sum(T.mlp2(x, w1, b1, w2, b2), w), _rand(rng, 2, 6, 1, 1)


def _conv_case(cin, cout, k, groups=1, dilation=1, stride=1, mode="reflect", size=6):
    def case(rng):
        kern = ConvKernel(Tensor(_rand(rng, cout, cin // groups, k, k)), Tensor(_rand(rng, cout)),
                          groups=groups, dilation=dilation, stride=stride, padding_mode=mode)
        ho = (size - 1) // stride + 1
        w = _rand(rng, 1, cout, ho, ho)
        return lambda x: _weighted_sum(T.conv2d(x, kern), w), _rand(rng, 1, cin, size, size)
    return case


def _pool_case(kind):
    def case(rng):
        x = _rand(rng, 1, 4, 3, 3)
        y = T.pool(Tensor(x), kind)
        w = _rand(rng, *y.shape)
        return lambda t: _weighted_sum(T.pool(t, kind), w), x
    return case


def _resize_case(mode):
    def case(rng):
        x = _rand(rng, 1, 2, 4, 4)
        w = _rand(rng, *T.resize(Tensor(x), mode).shape)
        return lambda t: _weighted_sum(T.resize(t, mode), w), x
    return case


def _case_spectral(rng):
    ratio = [Fraction(1), Fraction(1, 2), Fraction(1, 4)][rng.integers(3)]
    x = _rand(rng, 1, 2, 8, 8)
    w = _rand(rng, *T.crop_lf(T.spectral(Tensor(x)), ratio).shape)
    return lambda t: _weighted_sum(T.magnitude(T.crop_lf(T.spectral(t), ratio)), w), x


def _norm_case(fn):
    def case(rng):
        g, b = Tensor(_rand(rng, 4, lo=0.5, hi=1.5)), Tensor(_rand(rng, 4))
        w = _rand(rng, 1, 4, 4, 4)
        return lambda x: _weighted_sum(fn(x, g, b), w), _rand(rng, 1, 4, 4, 4)
    return case


def _case_loss(rng):
    from .train import loss
    mask = rng.integers(0, 2, size=(2, 4, 4))
    return lambda x: loss(x, mask, 0.1, 1.0)[0], _rand(rng, 2, 2, 4, 4, lo=-3, hi=3)


PRIMITIVES = {
    "add(broadcast)": _case_add,
    "mul(broadcast)": _case_mul,
    "sigmoid": _case_sigmoid,
    "relu": _case_relu,
    "concat_c/split_c": _case_concat_split,
    "linear/mlp2": _case_linear,
    "conv2d dense 3x3": _conv_case(3, 4, 3),
    "conv2d depthwise d2": _conv_case(3, 3, 3, groups=3, dilation=2),
    "conv2d 1x1": _conv_case(4, 3, 1),
    "conv2d stride2 zero": _conv_case(2, 3, 3, stride=2, mode="zero"),
    "conv2d grouped": _conv_case(4, 4, 3, groups=2),
    "pool gap": _pool_case("gap_spatial"),
    "pool avg_c": _pool_case("avg_over_channels"),
    "pool max_c": _pool_case("max_over_channels"),
    "resize up2": _resize_case("bilinear_up2"),
    "resize up4": _resize_case("bilinear_up4"),
    "resize down2": _resize_case("avg_down2"),
    "resize down4": _resize_case("avg_down4"),
    "spectral/crop/magnitude": _case_spectral,
    "channel_norm": _norm_case(T.channel_norm),
    "instance_norm": _norm_case(T.instance_norm),
    "loss(ce+dice)": _case_loss,
}


def _randomize(p: M.ParamStore, rng) -> M.ParamStore:
    """Float64 copy with every bias / norm entry perturbed so no branch is trivially zero."""
    out = p.astype(np.float64)
    for k, t in out.items():
        if k.endswith(".b"):
            t.data = rng.uniform(-0.2, 0.2, size=t.shape)
        elif k.endswith(".g"):
            t.data = rng.uniform(0.7, 1.3, size=t.shape)
    return out


def _module_params(build: Callable[[M._Builder], None], seed: int) -> M.ParamStore:
    b = M._Builder(np.random.default_rng(seed), zero_final=False)
    build(b)
    return _randomize(b.store, np.random.default_rng(seed + 1))


def _case_channel_attention(rng, seed):
    p = _module_params(lambda b: M._channel_attention_params(b, "ca", 8, 4), seed).sub("ca")
    w = _rand(rng, 1, 8, 4, 4)
    return lambda x: _weighted_sum(M.channel_attention(x, p), w), _rand(rng, 1, 8, 4, 4), None


def _case_mgfm(rng, seed):
    p = _module_params(lambda b: M._mgfm_params(b, "m", 8, 4), seed).sub("m")
    other = Tensor(_rand(rng, 1, 8, 6, 6))
    w = _rand(rng, 1, 8, 6, 6)
    if rng.random() < 0.5:
        f = lambda x: _weighted_sum(M.mgfm(x, other, p), w)
    else:
        f = lambda x: _weighted_sum(M.mgfm(other, x, p), w)
    return f, _rand(rng, 1, 8, 6, 6), _coords(rng, 288, 96)


def _case_gmgm(rng, seed):
    ch = (4, 6, 8)
    p = _module_params(lambda b: M._gmgm_params(b, "g", ch, 4), seed).sub("g")
    fs = [_rand(rng, 1, ch[0], 16, 16), _rand(rng, 1, ch[1], 8, 8), _rand(rng, 1, ch[2], 4, 4)]
    which = int(rng.integers(3))
    ws = [_rand(rng, 1, c, 16 >> i, 16 >> i) for i, c in enumerate(ch)]

    def f(x):
        args = [Tensor(a) for a in fs]
        args[which] = x
        g = M.gmgm(*args, p)
        return T.add(T.add(_weighted_sum(g.g1, ws[0]), _weighted_sum(g.g2, ws[1])), _weighted_sum(g.g3, ws[2]))

    return f, fs[which], _coords(rng, fs[which].size, 64)


def _case_sffm(rng, seed):
    p = _module_params(lambda b: M._sffm_params(b, "s", 8, 4), seed).sub("s")
    # keep the frequency MLP out of saturation for a meaningful check
    p["freq.fc1.w"].data *= 0.05
    w = _rand(rng, 1, 8, 16, 16)
    return lambda x: _weighted_sum(M.sffm(x, p), w), _rand(rng, 1, 8, 16, 16), _coords(rng, 2048, 64)


def _case_sff_block(rng, seed):
    p = _module_params(lambda b: M._sff_block_params(b, "blk", 8, 4), seed).sub("blk")
    p["sffm.freq.fc1.w"].data *= 0.05
    w = _rand(rng, 1, 8, 16, 16)
    return lambda x: _weighted_sum(M.sff_block(x, p), w), _rand(rng, 1, 8, 16, 16), _coords(rng, 2048, 64)


def network_audit_setup(seed: int, cfg: Optional[M.NetConfig] = None, size: int = 64):
    cfg = cfg or M.NetConfig()
    rng = np.random.default_rng(seed)
    p = _randomize(M.init_params(cfg, seed=seed, zero_final=False), rng)
    image = rng.uniform(0, 1, size=(1, 3, size, size))
    w = _rand(rng, 1, cfg.num_classes, size, size)
    return cfg, p, image, w


def _case_network(rng, seed):
    cfg, p, image, w = network_audit_setup(seed)
    # a 4x4 patch of the input image (single channel chosen at random)
    c = int(rng.integers(3))
    y0, x0 = rng.integers(0, 60, size=2)
    coords = [np.ravel_multi_index((0, c, y0 + i, x0 + j), image.shape) for i in range(4) for j in range(4)]
    return lambda x: _weighted_sum(M.network_forward(x, p, cfg), w), image, coords


MODULES = {
    "channel_attention": _case_channel_attention,
    "mgfm": _case_mgfm,
    "gmgm": _case_gmgm,
    "sffm": _case_sffm,
    "sff_block": _case_sff_block,
    "network(64x64)": _case_network,
}


def audit_primitive(name: str, seeds: Iterable[int], eps: float = AUDIT_EPS) -> AuditRow:
    t0 = time.time()
    worst, n = 0.0, 0
    for s in seeds:
        rng = np.random.default_rng(s)
        f, x = PRIMITIVES[name](rng)
        worst = max(worst, grad_check(f, x, eps, rng=rng))
        n += 1
    return AuditRow(name, worst, n, time.time() - t0)


def audit_module(name: str, seeds: Iterable[int], eps: float = AUDIT_EPS) -> AuditRow:
    t0 = time.time()
    worst, n = 0.0, 0
    for s in seeds:
        rng = np.random.default_rng(1000 + s)
        f, x, coords = MODULES[name](rng, s)
        worst = max(worst, grad_check(f, x, eps, coords=coords, rng=rng))
        n += 1
    return AuditRow(name, worst, n, time.time() - t0)


def param_groups(p: M.ParamStore) -> dict:
    """Group parameter names by owning submodule (enc.sN, gmgm, decN.<part>, head)."""
    groups = {}
    for k in p:
        parts = k.split(".")
        if parts[0] == "enc":
            g = ".".join(parts[:2])
        elif parts[0].startswith("dec"):
            g = ".".join(parts[:2])
        else:
            g = parts[0]
        groups.setdefault(g, []).append(k)
    return groups


def audit_network_params(seed: int, tensors_per_group: int = 3, coords_per_tensor: int = 2,
                         eps: float = AUDIT_EPS, cfg: Optional[M.NetConfig] = None,
                         size: int = 32) -> List[AuditRow]:
    """Central differences on sampled coordinates of every parameter group of the full network.

    A 32x32 input keeps the number of relu pre-activations a single weight
    moves small enough that a kink-free stencil exists at the audit step.
    """
    cfg, p, image, w = network_audit_setup(seed, cfg, size=size)
    img = Tensor(image)
    rng = np.random.default_rng(seed)
    rows = []
    for group, names in param_groups(p).items():
        if group.endswith("plain"):
            continue  # only used by the plain-concat ablation variant
        t0 = time.time()
        worst = 0.0
        for k in rng.choice(names, size=min(tensors_per_group, len(names)), replace=False):
            def f(x, k=k):
                q = M.ParamStore(p)
                q[k] = x
                return _weighted_sum(M.network_forward(img, q, cfg), w)

            coords = _coords(rng, p[k].data.size, coords_per_tensor)
            worst = max(worst, grad_check(f, p[k].data, eps, coords=coords, rng=rng))
        rows.append(AuditRow(f"params[{seed}]:{group}", worst, 1, time.time() - t0))
    return rows


def run_suite(seeds: int = 20, param_seeds: int = 1, include_network: bool = True,
              report: Optional[Callable[[AuditRow], None]] = None) -> List[AuditRow]:
    rows = []

    def emit(row):
        rows.append(row)
        if report:
            report(row)

    for name in PRIMITIVES:
        emit(audit_primitive(name, range(seeds)))
    for name in MODULES:
        if name.startswith("network") and not include_network:
            continue
        emit(audit_module(name, range(seeds)))
    if include_network:
        for s in range(param_seeds):
            for row in audit_network_params(s):
                emit(row)
    return rows

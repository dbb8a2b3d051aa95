"""Segmentation network: channel attention, MGFM, GMGM, SFFM, SFF block, encoder, network.

Every module is a plain function of its inputs and a ``ParamStore`` view; the
network owns a single flat store whose dotted names define checkpoint layout.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import NamedTuple, Optional

import numpy as np

from . import tensor as T
from .errors import CheckpointMismatchError, ContractViolation
from .tensor import ConvKernel, Tensor


class ParamStore(dict):
    """Ordered name -> Tensor map. Missing names raise ``CheckpointMismatchError``."""

    prefix = ""

    def __missing__(self, key):
        raise CheckpointMismatchError(f"parameter {self.prefix + key!r} not found in parameter store")

    def sub(self, prefix: str) -> "ParamStore":
        """View of the entries under ``prefix.``, with the prefix stripped (tensors shared)."""
        p = prefix + "."
        view = ParamStore((k[len(p):], v) for k, v in self.items() if k.startswith(p))
        view.prefix = self.prefix + p
        return view

    def astype(self, dtype) -> "ParamStore":
        return ParamStore((k, Tensor(v.data.astype(dtype), requires_grad=v.requires_grad))
                          for k, v in self.items())

    def copy(self) -> "ParamStore":
        return ParamStore((k, Tensor(v.data.copy(), requires_grad=v.requires_grad)) for k, v in self.items())

    def requires_grad_(self, flag: bool = True) -> "ParamStore":
        for v in self.values():
            v.requires_grad = flag
        return self

    def zero_grad(self):
        for v in self.values():
            v.grad = None

    def num_parameters(self) -> int:
        return int(sum(v.data.size for v in self.values()))


class FeaturePyramid(NamedTuple):
    f1: Tensor
    f2: Tensor
    f3: Tensor
    f4: Tensor


class GuidanceSet(NamedTuple):
    g1: Tensor
    g2: Tensor
    g3: Tensor


@dataclass
class NetConfig:
    channels: tuple = (32, 64, 128, 256)
    reduction: int = 4
    crop_ratio: Fraction = Fraction(1, 4)
    use_mgfm: bool = True
    use_gmgm: bool = True
    use_sffm: bool = True
    num_classes: int = 2

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.crop_ratio = Fraction(self.crop_ratio)
        if len(self.channels) != 4 or min(self.channels) < 1:
            raise ContractViolation(f"channels must be four positive ints, got {self.channels}")
        if self.crop_ratio not in T.CROP_RATIOS:
            raise ContractViolation(f"crop_ratio must be one of 1, 1/2, 1/4, 1/8; got {self.crop_ratio}")

    @classmethod
    def variant(cls, name: str, **kw) -> "NetConfig":
        """Ablation variants: full, no_sffm, no_gmgm, no_mgfm."""
        flags = {"full": {}, "no_sffm": {"use_sffm": False},
                 "no_gmgm": {"use_gmgm": False}, "no_mgfm": {"use_mgfm": False}}
        if name not in flags:
            raise ContractViolation(f"unknown variant {name!r}; expected one of {sorted(flags)}")
        return cls(**{**kw, **flags[name]})


# ---------------------------------------------------------------------------
# parameter construction
# ---------------------------------------------------------------------------

class _Builder:
    def __init__(self, rng: np.random.Generator, zero_final: bool):
        self.rng = rng
        self.zero_final = zero_final
        self.store = ParamStore()

    def _uniform(self, shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return self.rng.uniform(-bound, bound, size=shape).astype(np.float32)

    def conv(self, name, cin, cout, k=1, depthwise=False, final=False):
        shape = (cout, 1, k, k) if depthwise else (cout, cin, k, k)
        fan_in = k * k * (1 if depthwise else cin)
        w = np.zeros(shape, np.float32) if (final and self.zero_final) else self._uniform(shape, fan_in)
        self.store[name + ".w"] = Tensor(w)
        self.store[name + ".b"] = Tensor(np.zeros(cout, np.float32))

    def linear(self, name, cin, cout, final=False):
        w = np.zeros((cout, cin), np.float32) if (final and self.zero_final) else self._uniform((cout, cin), cin)
        self.store[name + ".w"] = Tensor(w)
        self.store[name + ".b"] = Tensor(np.zeros(cout, np.float32))

    def norm(self, name, c):
        self.store[name + ".g"] = Tensor(np.ones(c, np.float32))
        self.store[name + ".b"] = Tensor(np.zeros(c, np.float32))


def _hidden(c: int, r: int) -> int:
    return max(1, c // r)


def _channel_attention_params(b: _Builder, name: str, c: int, r: int):
    b.linear(name + ".fc1", c, _hidden(c, r))
    b.linear(name + ".fc2", _hidden(c, r), c)


def _mgfm_params(b: _Builder, name: str, c: int, r: int):
    _channel_attention_params(b, name + ".ca_enc", c, r)
    _channel_attention_params(b, name + ".ca_dec", c, r)
    for stream in ("enc", "dec"):
        for role in ("q", "k", "v"):
            b.conv(f"{name}.{role}_{stream}", c, c)
    b.conv(name + ".dcm", 2 * c, c)
    # fusion block: inverted depthwise-separable (expand, dw3, project) then dw-separable reduction
    b.conv(name + ".fuse.expand", 4 * c, 4 * c)
    b.conv(name + ".fuse.dw1", 4 * c, 4 * c, k=3, depthwise=True)
    b.conv(name + ".fuse.project", 4 * c, 2 * c)
    b.conv(name + ".fuse.dw2", 2 * c, 2 * c, k=3, depthwise=True)
    b.conv(name + ".fuse.out", 2 * c, c)


def _gmgm_params(b: _Builder, name: str, chans: tuple, r: int):
    s = sum(chans)
    b.conv(name + ".fc1", s, _hidden(s, r))
    b.conv(name + ".fc2", _hidden(s, r), s)
    for i, c in enumerate(chans, 1):
        b.conv(f"{name}.cnbr{i}", s, c)
        b.norm(f"{name}.cnbr{i}.norm", c)


def _sffm_params(b: _Builder, name: str, c: int, r: int):
    b.conv(name + ".dw5", c, c, k=5, depthwise=True)
    b.conv(name + ".pw1", c, c)
    b.conv(name + ".dw7", c, c, k=7, depthwise=True)
    b.conv(name + ".pw2", c, c)
    b.conv(name + ".spatial", 2, 2, k=7)
    b.conv(name + ".proj", c, c, final=True)
    b.linear(name + ".freq.fc1", c, _hidden(c, r))
    b.linear(name + ".freq.fc2", _hidden(c, r), c, final=True)


def _sff_block_params(b: _Builder, name: str, c: int, r: int):
    b.norm(name + ".norm1", c)
    _sffm_params(b, name + ".sffm", c, r)
    b.norm(name + ".norm2", c)
    b.conv(name + ".mlp.fc1", c, 2 * c)
    b.conv(name + ".mlp.fc2", 2 * c, c, final=True)


def _encoder_params(b: _Builder, chans: tuple):
    b.conv("enc.s1.conv1", 3, chans[0], k=3)
    b.norm("enc.s1.norm1", chans[0])
    b.conv("enc.s1.conv2", chans[0], chans[0], k=3)
    b.norm("enc.s1.norm2", chans[0])
    for i in range(1, 4):
        b.conv(f"enc.s{i + 1}.conv1", chans[i - 1], chans[i], k=3)
        b.norm(f"enc.s{i + 1}.norm1", chans[i])


def init_params(cfg: NetConfig, seed: int = 42, zero_final: bool = True) -> ParamStore:
    """Fan-in uniform weights, zero biases/shifts, unit scales.

    With ``zero_final`` the last projection of every SFFM and SFF-block MLP
    branch starts at zero, so each SFF block begins as the identity map.
    The store always holds every name of the full model, whatever the variant.
    """
    b = _Builder(np.random.default_rng(seed), zero_final)
    ch, r = cfg.channels, cfg.reduction
    _encoder_params(b, ch)
    _gmgm_params(b, "gmgm", ch[:3], r)
    for i in (3, 2, 1):
        c = ch[i - 1]
        b.conv(f"dec{i}.proj", ch[i], c)
        _mgfm_params(b, f"dec{i}.mgfm", c, r)
        b.conv(f"dec{i}.plain", 2 * c, c)
        b.conv(f"dec{i}.reduce", 2 * c, c)
        _sff_block_params(b, f"dec{i}.sff", c, r)
    b.conv("head", ch[0], cfg.num_classes)
    return b.store


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def conv(x: Tensor, p: ParamStore, name: str, depthwise: bool = False, dilation: int = 1) -> Tensor:
    w = p[name + ".w"]
    groups = w.shape[0] if depthwise else 1
    return T.conv2d(x, ConvKernel(w, p[name + ".b"], groups=groups, dilation=dilation))


def channel_attention(f: Tensor, p: ParamStore) -> Tensor:
    """f * sigmoid(MLP(GAP(f))), gate broadcast per channel."""
    w1 = p["fc1.w"]
    if w1.shape[1] != f.shape[1]:
        raise ContractViolation(f"channel attention built for {w1.shape[1]} channels, input has {f.shape[1]}")
    desc = T.pool(f, "gap_spatial")
    gate = T.sigmoid(T.mlp2(desc, w1, p["fc1.b"], p["fc2.w"], p["fc2.b"]))
    return T.mul(f, gate)


def _fusion_block(x: Tensor, p: ParamStore) -> Tensor:
    h = T.relu(conv(x, p, "expand"))
    h = conv(h, p, "dw1", depthwise=True)
    h = conv(h, p, "project")
    h = T.relu(conv(h, p, "dw2", depthwise=True))
    return conv(h, p, "out")


def mgfm(f_enc: Tensor, f_dec: Tensor, p: ParamStore) -> Tensor:
    """Mutual-guided fusion of an encoder skip and the (already upsampled) decoder stream."""
    if f_enc.shape != f_dec.shape:
        raise ContractViolation(f"mgfm streams differ in shape: {f_enc.shape} vs {f_dec.shape}")
    fe = channel_attention(f_enc, p.sub("ca_enc"))
    fd = channel_attention(f_dec, p.sub("ca_dec"))
    q_enc, k_enc, v_enc = (conv(fe, p, n) for n in ("q_enc", "k_enc", "v_enc"))
    q_dec, k_dec, v_dec = (conv(fd, p, n) for n in ("q_dec", "k_dec", "v_dec"))
    # bidirectional correction: each stream keyed by the other's queries
    fe_corr = T.add(v_enc, T.mul(q_dec, k_enc))
    fd_corr = T.add(v_dec, T.mul(q_enc, k_dec))
    f_dcm = conv(T.concat_c([fe_corr, fd_corr]), p, "dcm")
    f_corr = T.mul(fe, fd)
    f_cat = T.concat_c([f_enc, f_dec, f_corr, f_dcm])
    return _fusion_block(f_cat, p.sub("fuse"))


def _cnbr(x: Tensor, p: ParamStore, name: str) -> Tensor:
    y = conv(x, p, name)
    return T.relu(T.instance_norm(y, p[name + ".norm.g"], p[name + ".norm.b"]))


def gmgm(f1: Tensor, f2: Tensor, f3: Tensor, p: ParamStore) -> GuidanceSet:
    """Global multi-scale guidance from the three shallow encoder stages."""
    b, _, h, w = f1.shape
    for f, k in ((f2, 2), (f3, 4)):
        if f.ndim != 4 or f.shape[0] != b or f.shape[2] * k != h or f.shape[3] * k != w:
            raise ContractViolation(f"gmgm: non-dyadic pyramid shapes {f1.shape}, {f2.shape}, {f3.shape}")
    sizes = [f1.shape[1], f2.shape[1], f3.shape[1]]
    v_agg = T.concat_c([T.pool(f, "gap_spatial") for f in (f1, f2, f3)])
    scores = conv(T.relu(conv(v_agg, p, "fc1")), p, "fc2")
    w1, w2, w3 = T.split_c(scores, sizes)
    f_global = T.concat_c([
        T.mul(f1, w1),
        T.resize(T.mul(f2, w2), "bilinear_up2"),
        T.resize(T.mul(f3, w3), "bilinear_up4"),
    ])
    g1 = _cnbr(f_global, p, "cnbr1")
    g2 = T.resize(_cnbr(f_global, p, "cnbr2"), "avg_down2")
    g3 = T.resize(_cnbr(f_global, p, "cnbr3"), "avg_down4")
    return GuidanceSet(g1, g2, g3)


def frequency_descriptor(f: Tensor, crop_ratio=Fraction(1, 4)) -> Tensor:
    """Per-channel mean magnitude of the centered low-frequency window, (B, C, 1, 1)."""
    x_low = T.crop_lf(T.spectral(f), crop_ratio)
    return T.pool(T.magnitude(x_low), "gap_spatial")


def sffm(f: Tensor, p: ParamStore, crop_ratio=Fraction(1, 4), enabled: bool = True) -> Tensor:
    """Spatial-frequency focus: f * Attn_spatial * W_freq.

    ``enabled=False`` replaces both gates by ones (the SFFM-off ablation).
    """
    T._check4(f, "sffm")
    if min(f.shape[2:]) < 2:
        raise ContractViolation(f"sffm needs H, W >= 2, got {f.shape[2:]}")
    if not enabled:
        return f
    c = f.shape[1]
    a1 = conv(conv(f, p, "dw5", depthwise=True), p, "pw1")
    a2 = conv(conv(a1, p, "dw7", depthwise=True, dilation=3), p, "pw2")
    a = T.concat_c([a1, a2])
    stats = T.concat_c([T.pool(a, "avg_over_channels"), T.pool(a, "max_over_channels")])
    m = T.sigmoid(conv(stats, p, "spatial"))
    s1, s2 = T.split_c(m, [1, 1])
    attn = conv(T.add(T.mul(a1, s1), T.mul(a2, s2)), p, "proj")

    v_freq = frequency_descriptor(f, crop_ratio)
    w_freq = T.sigmoid(T.mlp2(v_freq, p["freq.fc1.w"], p["freq.fc1.b"], p["freq.fc2.w"], p["freq.fc2.b"]))
    if attn.shape[1] != c:
        raise ContractViolation("sffm projection must return the input channel count")
    return T.mul(T.mul(f, attn), w_freq)


def sff_block(f: Tensor, p: ParamStore, crop_ratio=Fraction(1, 4), sffm_enabled: bool = True) -> Tensor:
    y = T.add(f, sffm(T.channel_norm(f, p["norm1.g"], p["norm1.b"]), p.sub("sffm"), crop_ratio, sffm_enabled))
    h = T.channel_norm(y, p["norm2.g"], p["norm2.b"])
    h = conv(T.relu(conv(h, p, "mlp.fc1")), p, "mlp.fc2")
    return T.add(y, h)


def _down_block(x: Tensor, p: ParamStore, conv_name: str, norm_name: str) -> Tensor:
    # stride-2 3x3 conv realized as stride-1 conv followed by 2x2 averaging
    y = T.resize(conv(x, p, conv_name), "avg_down2")
    return T.relu(T.instance_norm(y, p[norm_name + ".g"], p[norm_name + ".b"]))


def encoder(image: Tensor, p: ParamStore) -> FeaturePyramid:
    """Surrogate pyramid encoder producing 1/4, 1/8, 1/16, 1/32 resolution stages."""
    T._check4(image, "encoder")
    if image.shape[1] != 3:
        raise ContractViolation(f"encoder expects 3-channel images, got {image.shape[1]}")
    h, w = image.shape[2:]
    if h % 32 or w % 32:
        raise ContractViolation(f"image size {h}x{w} must be divisible by 32")
    x = _down_block(image, p, "enc.s1.conv1", "enc.s1.norm1")
    f1 = _down_block(x, p, "enc.s1.conv2", "enc.s1.norm2")
    f2 = _down_block(f1, p, "enc.s2.conv1", "enc.s2.norm1")
    f3 = _down_block(f2, p, "enc.s3.conv1", "enc.s3.norm1")
    f4 = _down_block(f3, p, "enc.s4.conv1", "enc.s4.norm1")
    return FeaturePyramid(f1, f2, f3, f4)


def decoder_stage(f_skip: Tensor, d_prev: Tensor, g: Tensor, p: ParamStore, cfg: NetConfig) -> Tensor:
    d_up = T.resize(conv(d_prev, p, "proj"), "bilinear_up2")
    if cfg.use_mgfm:
        fused = mgfm(f_skip, d_up, p.sub("mgfm"))
    else:
        fused = conv(T.concat_c([f_skip, d_up]), p, "plain")
    x = conv(T.concat_c([fused, g]), p, "reduce")
    return sff_block(x, p.sub("sff"), cfg.crop_ratio, cfg.use_sffm)


def zero_guidance(pyr: FeaturePyramid) -> GuidanceSet:
    return GuidanceSet(*(Tensor(np.zeros(f.shape, dtype=f.dtype)) for f in pyr[:3]))


def network_forward(image: Tensor, p: ParamStore, cfg: Optional[NetConfig] = None) -> Tensor:
    """Image (B, 3, H, W) -> logits (B, num_classes, H, W)."""
    cfg = cfg or NetConfig()
    pyr = encoder(image, p)
    guide = gmgm(pyr.f1, pyr.f2, pyr.f3, p.sub("gmgm")) if cfg.use_gmgm else zero_guidance(pyr)
    d = pyr.f4
    for i in (3, 2, 1):
        d = decoder_stage(pyr[i - 1], d, guide[i - 1], p.sub(f"dec{i}"), cfg)
    return T.resize(conv(d, p, "head"), "bilinear_up4")

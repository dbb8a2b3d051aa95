"""Loss, AdamW + Lookahead with cosine decay, metrics, error maps, checkpoints, training."""
from __future__ import annotations

import logging
import math
import os
import struct
import zlib
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import degrade as D
from .config import Config
from .errors import CheckpointMismatchError, ContractViolation, TrainingDiverged
from .modules import NetConfig, ParamStore, init_params, network_forward
from .tensor import Tensor, _make, bilinear_matrix, no_grad

log = logging.getLogger(__name__)

DICE_EPS = 1.0


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

@dataclass
class LossReport:
    total: float
    ce_part: float
    dice_part: float


def _check_mask(mask: np.ndarray, shape: tuple):
    if mask.shape != shape:
        raise ContractViolation(f"mask shape {mask.shape} does not match logits {shape}")
    if not np.isin(mask, (0, 1)).all():
        raise ContractViolation("mask must be binary (0/1)")


def loss(logits: Tensor, mask, label_smoothing: float = 0.05, lam: float = 1.0):
    """Label-smoothed 2-way cross-entropy plus soft Dice on the building probability.

    Returns ``(scalar Tensor, LossReport)``; the tensor carries the gradient.
    """
    z = logits.data
    if z.ndim != 4 or z.shape[1] != 2:
        raise ContractViolation(f"logits must be (B, 2, H, W), got {z.shape}")
    y = np.asarray(mask)
    _check_mask(y, (z.shape[0],) + z.shape[2:])
    if not 0 <= label_smoothing <= 0.2:
        raise ContractViolation(f"label_smoothing {label_smoothing} outside [0, 0.2]")
    dt = z.dtype
    zd = z.astype(np.float64)
    y = y.astype(np.float64)
    n = y.size
    # log-softmax over the two classes
    mx = zd.max(axis=1, keepdims=True)
    lse = mx + np.log(np.exp(zd - mx).sum(axis=1, keepdims=True))
    logp = zd - lse
    p = np.exp(logp)
    q = np.stack([1 - y, y], axis=1) * (1 - label_smoothing) + label_smoothing / 2
    ce = float(-(q * logp).sum() / n)

    p1 = p[:, 1]
    inter = float((p1 * y).sum())
    denom = float(p1.sum() + y.sum()) + DICE_EPS
    dice = 1.0 - (2 * inter + DICE_EPS) / denom
    report = LossReport(ce + lam * dice, ce, dice)

    def back(g):
        g = float(g)
        gz = (p - q) / n
        dd_dp1 = -(2 * y * denom - (2 * inter + DICE_EPS)) / denom ** 2
        gp = lam * dd_dp1 * p1 * p[:, 0]
        gz[:, 1] += gp
        gz[:, 0] -= gp
        return ((g * gz).astype(dt),)

    return _make(np.asarray(report.total, dtype=dt), (logits,), back), report


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def cosine_lr(lr0: float, progress: float) -> float:
    e = min(max(progress, 0.0), 1.0)
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * e))


def decays(name: str, value: np.ndarray) -> bool:
    """Decoupled weight decay applies to conv / linear weights only."""
    return name.endswith(".w") and value.ndim >= 2


@dataclass
class OptimState:
    lr0: float = 4e-4
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    lookahead_k: int = 5
    lookahead_alpha: float = 0.5
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    slow: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, params: ParamStore, **hyper) -> "OptimState":
        st = cls(**hyper)
        for k, p in params.items():
            st.m[k] = np.zeros(p.shape)
            st.v[k] = np.zeros(p.shape)
            st.slow[k] = p.data.astype(np.float64)
        return st


def optimizer_step(params: ParamStore, grads: Dict[str, np.ndarray], st: OptimState, progress: float) -> float:
    """One AdamW update at cosine-scheduled lr, with a Lookahead sync every k steps.

    Mutates ``params`` and ``st`` in place and returns the learning rate used.
    """
    for k in params:
        g = grads.get(k)
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for parameter {k!r}; step refused")
    lr = cosine_lr(st.lr0, progress)
    st.step += 1
    b1, b2 = st.betas
    c1 = 1.0 - b1 ** st.step
    c2 = 1.0 - b2 ** st.step
    for k, p in params.items():
        g = grads.get(k)
        g = np.zeros(p.shape) if g is None else np.asarray(g, dtype=np.float64)
        m, v = st.m[k], st.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        w = p.data.astype(np.float64)
        if st.weight_decay and decays(k, w):
            w *= 1.0 - lr * st.weight_decay
        w -= lr * (m / c1) / (np.sqrt(v / c2) + st.eps)
        if st.step % st.lookahead_k == 0:
            slow = st.slow[k]
            slow += st.lookahead_alpha * (w - slow)
            w = slow.copy()
        p.data = w.astype(p.data.dtype)
    return lr


# ---------------------------------------------------------------------------
# metrics and error maps
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    tp: int
    fp: int
    fn: int
    tn: int
    iou: float = 0.0
    f1: float = 0.0
    precision: float = 0.0
    recall: float = 0.0
    undefined: tuple = ()

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int, tn: int) -> "MetricsReport":
        undefined = []

        def ratio(name, num, den):
            if den == 0:
                undefined.append(name)
                return 0.0
            return num / den

        precision = ratio("precision", tp, tp + fp)
        recall = ratio("recall", tp, tp + fn)
        iou = ratio("iou", tp, tp + fp + fn)
        f1 = ratio("f1", 2 * precision * recall, precision + recall)
        return cls(int(tp), int(fp), int(fn), int(tn), iou, f1, precision, recall, tuple(undefined))

    def __add__(self, other: "MetricsReport") -> "MetricsReport":
        return MetricsReport.from_counts(self.tp + other.tp, self.fp + other.fp,
                                         self.fn + other.fn, self.tn + other.tn)

    def table(self) -> str:
        rows = [("IoU", self.iou), ("F1", self.f1), ("Precision", self.precision), ("Recall", self.recall)]
        lines = [f"{k:<13}{v:.4f}" for k, v in rows]
        lines.append(f"{'TP/FP/FN/TN':<13}{self.tp}/{self.fp}/{self.fn}/{self.tn}")
        return "\n".join(lines)


def _binary_pair(pred, gt):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ContractViolation(f"prediction shape {pred.shape} != ground truth {gt.shape}")
    if not (np.isin(pred, (0, 1)).all() and np.isin(gt, (0, 1)).all()):
        raise ContractViolation("masks must be binary (0/1)")
    return pred.astype(bool), gt.astype(bool)


def metrics(pred_mask, gt_mask) -> MetricsReport:
    p, g = _binary_pair(pred_mask, gt_mask)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(p.size - tp - fp - fn)
    return MetricsReport.from_counts(tp, fp, fn, tn)


ERROR_COLORS = {"tp": (255, 255, 255), "fp": (255, 0, 0), "fn": (0, 0, 255), "tn": (0, 0, 0)}


def error_map(pred_mask, gt_mask) -> np.ndarray:
    """(H, W, 3) uint8: white TP, red FP, blue FN, black TN."""
    p, g = _binary_pair(pred_mask, gt_mask)
    out = np.zeros(p.shape + (3,), dtype=np.uint8)
    out[p & g] = ERROR_COLORS["tp"]
    out[p & ~g] = ERROR_COLORS["fp"]
    out[~p & g] = ERROR_COLORS["fn"]
    return out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"HALO"
VERSION = 1


def dump_checkpoint(params: ParamStore) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, t in params.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def parse_checkpoint(blob: bytes) -> ParamStore:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointMismatchError("not a HALO checkpoint (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointMismatchError("checkpoint CRC32 mismatch")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointMismatchError(f"unsupported checkpoint version {version}")
    off = 12
    out = ParamStore()
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", body, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", body, off)
            off += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(body, dtype="<f4", count=size, offset=off).reshape(dims)
            off += 4 * size
            out[name] = Tensor(arr.astype(np.float32))
    except (struct.error, ValueError) as exc:
        raise CheckpointMismatchError(f"truncated checkpoint: {exc}") from None
    if off != len(body):
        raise CheckpointMismatchError("trailing bytes after the last parameter")
    return out


def save_checkpoint(params: ParamStore, path: str):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(dump_checkpoint(params))


def load_checkpoint(path: str, expected: Optional[ParamStore] = None) -> ParamStore:
    with open(path, "rb") as fh:
        store = parse_checkpoint(fh.read())
    if expected is not None:
        for name, t in expected.items():
            if name not in store:
                raise CheckpointMismatchError(f"checkpoint lacks parameter {name!r}")
            if store[name].shape != t.shape:
                raise CheckpointMismatchError(f"{name}: checkpoint shape {store[name].shape} != {t.shape}")
    return store


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def scene_seeds(seed: int, n: int) -> list:
    return [seed * 10000 + i for i in range(n)]


def synth_dataset(cfg: Config) -> dict:
    """Deterministic train/val/test scenes (8-bit quantized), split 7:1:2."""
    size = cfg.image_size
    scenes = []
    for s in scene_seeds(cfg.seed, cfg.n_scenes):
        sc = D.synth_scene(s, size, size, cfg.density)
        spec = D.sample_degradation(cfg.degradation, s, size, size, cfg.haze_t, cfg.haze_A,
                                    cfg.ll_gamma, cfg.ll_gain, cfg.ll_sigma)
        scenes.append(D.quantize(D.degrade(sc, spec, seed=s)))
    n_train, n_val, _ = D.split_counts(len(scenes))
    return {"train": scenes[:n_train], "val": scenes[n_train:n_train + n_val],
            "test": scenes[n_train + n_val:]}


def write_dataset(splits: dict, root: str):
    for name, scenes in splits.items():
        for sc in scenes:
            D.write_scene(sc, os.path.join(root, name))


def load_dataset(cfg: Config, splits=("train", "val", "test")) -> dict:
    if cfg.data_dir:
        return {s: D.read_split(os.path.join(cfg.data_dir, s)) for s in splits}
    data = synth_dataset(cfg)
    return {s: data[s] for s in splits}


def _nearest_index(n_in: int, n_out: int) -> np.ndarray:
    return np.minimum(((np.arange(n_out) + 0.5) * n_in / n_out).astype(int), n_in - 1)


def augment(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator, crop: int,
            scale_range=(0.75, 1.25)):
    """Random h/v flips, isotropic rescale and a crop x crop window.

    ``image`` is (3, H, W) float, ``mask`` (H, W); smaller rescales are reflect-padded.
    """
    if rng.random() < 0.5:
        image, mask = image[:, :, ::-1], mask[:, ::-1]
    if rng.random() < 0.5:
        image, mask = image[:, ::-1, :], mask[::-1, :]
    s = rng.uniform(*scale_range)
    h, w = mask.shape
    nh, nw = max(1, int(round(h * s))), max(1, int(round(w * s)))
    mh = bilinear_matrix(h, nh, "<f4")
    mw = bilinear_matrix(w, nw, "<f4")
    image = mh @ image @ mw.T
    mask = mask[_nearest_index(h, nh)][:, _nearest_index(w, nw)]
    ph, pw = max(0, crop - nh), max(0, crop - nw)
    if ph or pw:
        pads = ((ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2))
        image = np.pad(image, ((0, 0),) + pads, mode="reflect")
        mask = np.pad(mask, pads, mode="reflect")
    y0 = rng.integers(0, mask.shape[0] - crop + 1)
    x0 = rng.integers(0, mask.shape[1] - crop + 1)
    return (np.ascontiguousarray(image[:, y0:y0 + crop, x0:x0 + crop], dtype=np.float32),
            np.ascontiguousarray(mask[y0:y0 + crop, x0:x0 + crop]))


def _stack(scenes: Sequence) -> tuple:
    return (np.concatenate([s.image.data for s in scenes], axis=0),
            np.stack([s.mask for s in scenes]))


# ---------------------------------------------------------------------------
# evaluation and training
# ---------------------------------------------------------------------------

def net_config(cfg: Config) -> NetConfig:
    return NetConfig.variant(cfg.variant, channels=cfg.channels, crop_ratio=cfg.crop_ratio)


def predict(params: ParamStore, images: np.ndarray, netcfg: NetConfig, batch: int = 8) -> np.ndarray:
    """Argmax building masks (B, H, W) uint8."""
    out = []
    with no_grad():
        for i in range(0, len(images), batch):
            logits = network_forward(Tensor(images[i:i + batch]), params, netcfg).data
            out.append((logits[:, 1] > logits[:, 0]).astype(np.uint8))
    return np.concatenate(out, axis=0)


def evaluate(params: ParamStore, scenes: Sequence, netcfg: NetConfig, batch: int = 8) -> MetricsReport:
    """Confusion counts pooled over every pixel of every scene."""
    if not scenes:
        raise ContractViolation("evaluate needs at least one scene")
    images, masks = _stack(scenes)
    return metrics(predict(params, images, netcfg, batch), masks)


@dataclass
class EpochLog:
    epoch: int
    loss: float
    val: MetricsReport

    def line(self) -> str:
        v = self.val
        return f"{self.epoch}\t{self.loss:.6f}\t{v.iou:.6f}\t{v.f1:.6f}\t{v.precision:.6f}\t{v.recall:.6f}"


@dataclass
class TrainResult:
    params: ParamStore          # best-validation-IoU weights
    final_params: ParamStore
    history: List[EpochLog]
    best_epoch: int
    best_iou: float
    checkpoint_path: Optional[str] = None


def train(cfg: Config, data: Optional[dict] = None, write: bool = True,
          on_epoch: Optional[Callable[[EpochLog], None]] = None) -> TrainResult:
    """Train from ``data`` (``{"train": [...], "val": [...]}``) or the dataset named by ``cfg``.

    Deterministic in (cfg, data). Writes ``best.halo`` and ``metrics.log`` under
    ``cfg.out_dir`` when ``write`` is set.
    """
    data = data if data is not None else load_dataset(cfg, ("train", "val"))
    train_set, val_set = data["train"], data["val"] or data["train"]
    if not train_set:
        raise ContractViolation("training split is empty")
    netcfg = net_config(cfg)
    rng = np.random.default_rng(cfg.seed)
    params = init_params(netcfg, seed=cfg.seed)
    params.requires_grad_(True)
    st = OptimState.create(params, lr0=cfg.lr0, weight_decay=cfg.weight_decay,
                           lookahead_k=cfg.lookahead_k, lookahead_alpha=cfg.lookahead_alpha)
    n = len(train_set)
    steps_per_epoch = math.ceil(n / cfg.batch)
    total = max(1, cfg.epochs * steps_per_epoch)
    crop = cfg.image_size
    history: List[EpochLog] = []
    best = (-1.0, 0, None)
    ckpt = os.path.join(cfg.out_dir, "best.halo") if write else None
    if write:
        os.makedirs(cfg.out_dir, exist_ok=True)
        log_fh = open(os.path.join(cfg.out_dir, "metrics.log"), "w")
    step = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(n)
            losses = []
            for b0 in range(0, n, cfg.batch):
                idx = order[b0:b0 + cfg.batch]
                imgs, masks = [], []
                for i in idx:
                    sc = train_set[i]
                    if cfg.augment:
                        im, m = augment(sc.image.data[0], sc.mask, rng, crop)
                    else:
                        im, m = sc.image.data[0], sc.mask
                    imgs.append(im)
                    masks.append(m)
                params.zero_grad()
                logits = network_forward(Tensor(np.stack(imgs)), params, netcfg)
                l_t, rep = loss(logits, np.stack(masks), cfg.label_smoothing, cfg.lambda_dice)
                if not math.isfinite(rep.total):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}")
                l_t.backward()
                grads = {k: p.grad for k, p in params.items()}
                optimizer_step(params, grads, st, step / total)
                step += 1
                losses.append(rep.total)
            val = evaluate(params, val_set, netcfg, batch=max(cfg.batch, 8))
            entry = EpochLog(epoch, float(np.mean(losses)), val)
            history.append(entry)
            log.info(entry.line())
            if write:
                log_fh.write(entry.line() + "\n")
                log_fh.flush()
            if on_epoch:
                on_epoch(entry)
            if val.iou > best[0]:
                best = (val.iou, epoch, params.copy())
                if write:
                    save_checkpoint(best[2], ckpt)
    finally:
        if write:
            log_fh.close()
    if best[2] is None:
        best = (evaluate(params, val_set, netcfg).iou, 0, params.copy())
        if write:
            save_checkpoint(best[2], ckpt)
    final = params.copy().requires_grad_(False)
    return TrainResult(best[2].requires_grad_(False), final, history, best[1], best[0], ckpt)


def read_metrics_log(path: str) -> list:
    rows = []
    with open(path) as fh:
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            if len(parts) == 6:
                rows.append((int(parts[0]),) + tuple(float(v) for v in parts[1:]))
    return rows

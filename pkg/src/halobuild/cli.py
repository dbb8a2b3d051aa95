"""``halobuild`` command line: synth, train, eval, gradcheck, errormap, kde.

Every command takes an optional ``--config FILE`` (``key=value`` lines) and
any config key as a ``--key value`` override. Results go to stdout as
tab-separated lines; figures and data files go under ``out_dir``.
Exit status: 0 success, 1 contract or I/O violation, 2 gradient-audit failure.
"""
from __future__ import annotations

import argparse
import os
import sys
from typing import List, Optional, Sequence

import numpy as np
from PIL import Image

from . import config as C
from . import degrade as D
from . import train as TR
from .errors import ContractViolation, HaloError, IngestionError

COMMANDS = ("synth", "train", "eval", "gradcheck", "errormap", "kde")


def _out(*fields) -> None:
    print("\t".join(str(f) for f in fields), flush=True)


def _overrides(rest: Sequence[str]) -> List[tuple]:
    pairs, i = [], 0
    while i < len(rest):
        tok = rest[i]
        if not tok.startswith("--"):
            raise ContractViolation(f"unexpected argument {tok!r}; use --key value")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        elif i + 1 < len(rest):
            value = rest[i + 1]
            i += 2
        else:
            raise ContractViolation(f"missing value for --{key}")
        pairs.append((key.replace("-", "_"), value))
    return pairs


def build_config(config_path: Optional[str], rest: Sequence[str]) -> C.Config:
    cfg = C.load(config_path) if config_path else C.Config()
    return C.parse_pairs(_overrides(rest), cfg)


def _checkpoint_path(cfg: C.Config) -> str:
    return cfg.checkpoint or os.path.join(cfg.out_dir, "best.halo")


def _load_model(cfg: C.Config):
    netcfg = TR.net_config(cfg)
    expected = TR.init_params(netcfg, seed=cfg.seed)
    return TR.load_checkpoint(_checkpoint_path(cfg), expected), netcfg


def _predictions(cfg: C.Config, scenes) -> np.ndarray:
    """Masks from ``pred_dir`` (``<seed>_pred.png``, else ``<seed>_mask.png``) or from the checkpoint."""
    if cfg.pred_dir:
        out = []
        for sc in scenes:
            for name in (f"{sc.seed}_pred.png", f"{sc.seed}_mask.png"):
                path = os.path.join(cfg.pred_dir, name)
                if os.path.exists(path):
                    out.append(D.read_mask(path))
                    break
            else:
                raise IngestionError(f"no prediction for scene {sc.seed} in {cfg.pred_dir}")
        return np.stack(out)
    params, netcfg = _load_model(cfg)
    images = np.concatenate([s.image.data for s in scenes], axis=0)
    return TR.predict(params, images, netcfg, batch=max(cfg.batch, 8))


def _split(cfg: C.Config):
    scenes = TR.load_dataset(cfg, (cfg.split,))[cfg.split]
    if not scenes:
        raise ContractViolation(f"split {cfg.split!r} is empty")
    return scenes


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(cfg: C.Config) -> int:
    root = cfg.data_dir or os.path.join(cfg.out_dir, "data")
    splits = TR.synth_dataset(cfg)
    TR.write_dataset(splits, root)
    with open(os.path.join(root, "config.txt"), "w") as fh:
        fh.write(C.dump(cfg))
    _out("split", "scenes", "directory")
    for name, scenes in splits.items():
        _out(name, len(scenes), os.path.join(root, name))
    return 0


def cmd_train(cfg: C.Config) -> int:
    from .plots import training_figure

    _out("epoch", "loss", "iou", "f1", "precision", "recall")
    res = TR.train(cfg, on_epoch=lambda e: print(e.line(), flush=True))
    with open(os.path.join(cfg.out_dir, "config.txt"), "w") as fh:
        fh.write(C.dump(cfg))
    rows = TR.read_metrics_log(os.path.join(cfg.out_dir, "metrics.log"))
    if rows:
        training_figure(rows, os.path.join(cfg.out_dir, "training.png"))
    _out("best_epoch", res.best_epoch)
    _out("best_val_iou", f"{res.best_iou:.6f}")
    _out("checkpoint", res.checkpoint_path)
    return 0


def cmd_eval(cfg: C.Config) -> int:
    scenes = _split(cfg)
    pred = _predictions(cfg, scenes)
    report = TR.metrics(pred, np.stack([s.mask for s in scenes]))
    print(report.table())
    if report.undefined:
        _out("undefined", ",".join(report.undefined))
    return 0


def cmd_gradcheck(cfg: C.Config) -> int:
    from .audit import run_suite

    _out("check", "max_rel_err", "seeds", "seconds", "status")
    rows = run_suite(seeds=cfg.audit_seeds,
                     report=lambda r: _out(r.name, f"{r.max_rel_err:.3e}", r.seeds, f"{r.seconds:.1f}",
                                           "PASS" if r.passed else "FAIL"))
    failed = [r.name for r in rows if not r.passed]
    _out("summary", f"{len(rows) - len(failed)}/{len(rows)} passed")
    return 2 if failed else 0


def cmd_errormap(cfg: C.Config) -> int:
    from .plots import errormap_panel

    scenes = _split(cfg)
    pred = _predictions(cfg, scenes)
    out = os.path.join(cfg.out_dir, "errormaps")
    os.makedirs(out, exist_ok=True)
    _out("scene", "tp", "fp", "fn", "tn", "file")
    for sc, p in zip(scenes, pred):
        emap = TR.error_map(p, sc.mask)
        path = os.path.join(out, f"{sc.seed}_err.png")
        Image.fromarray(emap, mode="RGB").save(path)
        m = TR.metrics(p, sc.mask)
        _out(sc.seed, m.tp, m.fp, m.fn, m.tn, path)
    # one overview panel for the first scene
    first = scenes[0]
    errormap_panel(first.image.data[0], first.mask, TR.error_map(pred[0], first.mask),
                   os.path.join(out, "panel.png"), title=f"scene {first.seed}")
    return 0


def cmd_kde(cfg: C.Config) -> int:
    from .plots import kde_figure

    os.makedirs(cfg.out_dir, exist_ok=True)
    curves = {}
    if cfg.data_dir:
        label = cfg.degradation if cfg.degradation != "none" else "clear"
        curves[label] = D.kde([s.image for s in _split(cfg)], cfg.kde_bandwidth)
    else:
        clear = cfg.replace(degradation="none")
        curves["clear"] = D.kde([s.image for sp in TR.synth_dataset(clear).values() for s in sp],
                                cfg.kde_bandwidth)
        if cfg.degradation != "none":
            curves[cfg.degradation] = D.kde([s.image for sp in TR.synth_dataset(cfg).values() for s in sp],
                                            cfg.kde_bandwidth)
    _out("set", "mode", "peak", "file")
    for label, curve in curves.items():
        path = os.path.join(cfg.out_dir, f"kde_{label}.txt")
        D.write_curve(curve, path)
        _out(label, f"{curve.mode:.6f}", f"{curve.peak:.6f}", path)
    _out("figure", kde_figure(curves, os.path.join(cfg.out_dir, "kde.png")))
    return 0


HANDLERS = {
    "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
    "gradcheck": cmd_gradcheck, "errormap": cmd_errormap, "kde": cmd_kde,
}


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="halobuild",
        description="Building segmentation under haze and low light: synthesis, training and analysis.",
        epilog="Any config key may be overridden with --key value. Valid keys: " + ", ".join(C.valid_keys()),
    )
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="plain-text key=value config file")
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args, rest = _parser().parse_known_args(argv)
    try:
        cfg = build_config(args.config, rest)
        return HANDLERS[args.command](cfg)
    except (HaloError, OSError) as exc:
        msg = " ".join(str(exc).split())
        print(f"halobuild {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

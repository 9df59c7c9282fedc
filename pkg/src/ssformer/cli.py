"""Command-line entry point.

Subcommands: train, eval, predict, gradcheck, heatmap, synth. Runs are
described by a flat key=value config file; every key has a default and
unknown keys are rejected with their line number. Exit codes: 0 success,
1 usage/config/data error, 2 numerical divergence. `SSF_LOG` selects
quiet/info/debug logging.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass, fields, replace

import numpy as np

from . import data
from . import tensor as T
from . import training
from .decoder import PLDConfig, feature_heatmap
from .encoder import attention_heatmap
from .errors import DivergenceDetected, FormatError, SSFormerError
from .model import SSFormer
from .rng import Rng

log = logging.getLogger("ssformer")


@dataclass(frozen=True)
class RunConfig:
    model_scale: str = "tiny"
    pld_fusion: str = "cat"
    pld_le: bool = True
    pld_sfa: bool = True
    pld_dim: int = 64
    train_epochs: int = 200
    train_batch: int = 4
    train_lr: float = 1e-4
    train_seed: int = 0
    data_size: int = 64
    data_dir: str = ""
    data_synthetic: bool = False
    data_train_n: int = 200
    data_val_n: int = 50


def _parse_choice(options):
    def parse(v):
        if v not in options:
            raise ValueError(f"expected one of {sorted(options)}, got {v!r}")
        return v
    return parse


def _parse_switch(v):
    if v not in ("on", "off"):
        raise ValueError(f"expected on or off, got {v!r}")
    return v == "on"


_KEYS = {
    "model.scale": ("model_scale", _parse_choice({"tiny", "small"})),
    "pld.fusion": ("pld_fusion", _parse_choice({"cat", "add"})),
    "pld.le": ("pld_le", _parse_switch),
    "pld.sfa": ("pld_sfa", _parse_switch),
    "pld.dim": ("pld_dim", int),
    "train.epochs": ("train_epochs", int),
    "train.batch": ("train_batch", int),
    "train.lr": ("train_lr", float),
    "train.seed": ("train_seed", int),
    "data.size": ("data_size", int),
    "data.dir": ("data_dir", str),
    "data.synthetic": ("data_synthetic", _parse_switch),
    "data.train_n": ("data_train_n", int),
    "data.val_n": ("data_val_n", int),
}


def parse_run_config(path: str | None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as e:
        raise FormatError(f"cannot read config: {e}")
    values = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"config line {lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _KEYS:
            raise FormatError(f"config line {lineno}: unknown key {key!r}")
        field, parse = _KEYS[key]
        try:
            values[field] = parse(value)
        except ValueError as e:
            raise FormatError(f"config line {lineno}: bad value for {key}: {e}")
    return replace(cfg, **values)


def echo_config(cfg: RunConfig) -> str:
    """Full effective configuration, one canonical key=value per line."""
    by_field = {field: key for key, (field, _) in _KEYS.items()}

    def fmt(v):
        if isinstance(v, bool):
            return "on" if v else "off"
        return repr(v) if isinstance(v, float) else str(v)

    return "".join(f"{by_field[f.name]}={fmt(getattr(cfg, f.name))}\n"
                   for f in fields(cfg))


def _build_model(cfg: RunConfig) -> SSFormer:
    pld = PLDConfig(unified_dim=cfg.pld_dim, fusion_mode=cfg.pld_fusion,
                    le_enabled=cfg.pld_le, sfa_enabled=cfg.pld_sfa)
    return SSFormer(cfg.model_scale, pld, seed=cfg.train_seed)


def _resize_samples(samples, size):
    out = []
    for s in samples:
        if s.image.shape[1:] != (size, size):
            s = data.Sample(image=data.resize(s.image, (size, size)),
                            mask=data.resize(s.mask, (size, size), "nearest"),
                            id=s.id)
        out.append(s)
    return out


def _train_datasets(cfg: RunConfig):
    if cfg.data_synthetic:
        root = Rng(cfg.train_seed)
        train = data.synth_dataset(cfg.data_train_n, cfg.data_size, int(root.spawn(1).seed))
        val = data.synth_dataset(cfg.data_val_n, cfg.data_size, int(root.spawn(2).seed))
        return train, val
    train = _resize_samples(data.load_dataset(os.path.join(cfg.data_dir, "train")), cfg.data_size)
    val = _resize_samples(data.load_dataset(os.path.join(cfg.data_dir, "val")), cfg.data_size)
    return train, val


def _load_model_from(ckpt_path: str, cfg: RunConfig) -> SSFormer:
    model = _build_model(cfg)
    model.load_state(data.checkpoint_load(ckpt_path))
    return model


def cmd_train(args) -> int:
    cfg = parse_run_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, train_seed=args.seed)
    if args.data is not None:
        cfg = replace(cfg, data_dir=args.data)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(echo_config(cfg))

    train, val = _train_datasets(cfg)
    if not train or not val:
        print("no samples", file=sys.stderr)
        return 1
    model = _build_model(cfg)
    optim = training.AdamW(model.named_params(), lr=cfg.train_lr)
    sched = training.Schedule(base_lr=cfg.train_lr,
                              total_epochs=max(cfg.train_epochs, 1))
    data_rng = Rng(cfg.train_seed)

    log_path = os.path.join(args.out, "log.csv")
    with open(log_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,lr,train_loss,train_mdice,val_mdice,val_miou\n")
        for epoch in range(cfg.train_epochs):
            optim.lr = training.lr_at(epoch, sched)
            try:
                loss, tmdice = training.train_epoch(
                    model, train, optim, data_rng.spawn(3 + epoch),
                    batch_size=cfg.train_batch)
            except DivergenceDetected as e:
                print(f"diverged: {e}", file=sys.stderr)
                return 2
            vdice, viou = training.evaluate(model, val)
            fh.write(f"{epoch},{optim.lr:.10g},{loss:.6f},{tmdice:.6f},"
                     f"{vdice:.6f},{viou:.6f}\n")
            fh.flush()
            log.info("epoch %d: loss %.4f train %.4f val %.4f/%.4f",
                     epoch, loss, tmdice, vdice, viou)

    data.checkpoint_save(model.state(), os.path.join(args.out, "model.ckpt"))
    return 0


def cmd_eval(args) -> int:
    cfg = parse_run_config(args.config)
    if args.data is not None:
        cfg = replace(cfg, data_dir=args.data)
    model = _load_model_from(args.ckpt, cfg)
    samples = _resize_samples(data.load_dataset(cfg.data_dir), cfg.data_size)
    if not samples:
        print("no samples", file=sys.stderr)
        return 1
    mdice, miou = training.evaluate(model, samples)
    print(f"mDice={mdice:.6f} mIoU={miou:.6f}")
    return 0


def cmd_predict(args) -> int:
    cfg = parse_run_config(args.config)
    model = _load_model_from(args.ckpt, cfg)
    image = data.load_netpbm(args.image)
    orig_hw = image.shape[1:]
    if image.shape[0] == 1:
        image = np.repeat(image, 3, axis=0)
    resized = data.resize(image, (cfg.data_size, cfg.data_size))
    logits = model.forward(T.Tensor(resized[None].astype(np.float32)))
    mask = training.binarize_logits(logits.data[0]).astype(np.float32)
    mask = data.resize(mask, orig_hw, "nearest")
    data.save_netpbm(mask, args.out)
    log.info("wrote %s", args.out)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradchecks import run_suite

    return 0 if run_suite(emit=print) else 1


def cmd_heatmap(args) -> int:
    cfg = parse_run_config(args.config)
    model = _load_model_from(args.ckpt, cfg)
    image = data.load_netpbm(args.image)
    if image.shape[0] == 1:
        image = np.repeat(image, 3, axis=0)
    resized = data.resize(image, (cfg.data_size, cfg.data_size))
    os.makedirs(args.out, exist_ok=True)

    x = T.Tensor(resized[None].astype(np.float32))
    feats, records = model.encoder.forward(x, record_attention=True)
    les, fused = model.decoder.intermediates(feats)
    for i in range(4):
        data.save_netpbm(feature_heatmap(feats[i])[None],
                         os.path.join(args.out, f"stage{i + 1}_raw.pgm"))
        data.save_netpbm(feature_heatmap(les[i])[None],
                         os.path.join(args.out, f"stage{i + 1}_le.pgm"))
        data.save_netpbm(feature_heatmap(fused[i])[None],
                         os.path.join(args.out, f"stage{i + 1}_fused.pgm"))
        h, w = feats[i].shape[2:]
        center = (h // 2) * w + w // 2
        data.save_netpbm(attention_heatmap(records[i], center)[None],
                         os.path.join(args.out, f"attn{i + 1}.pgm"))
    log.info("wrote 16 heatmaps to %s", args.out)
    return 0


def cmd_synth(args) -> int:
    samples = data.synth_dataset(args.n, args.size, args.seed if args.seed is not None else 0)
    data.save_dataset(samples, args.out)
    log.info("wrote %d samples to %s", len(samples), args.out)
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ssformer",
        description="Train and run the segmentation model on netpbm datasets.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text,
                           formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        p.set_defaults(fn=fn)
        p.add_argument("--config", default=None, metavar="PATH",
                       help="key=value run config (default: builtin defaults)")
        return p

    p = add("train", cmd_train, "train a model and write ckpt + csv log")
    p.add_argument("--out", required=True, metavar="DIR", help="output directory")
    p.add_argument("--data", default=None, metavar="DIR", help="dataset root override")
    p.add_argument("--seed", type=int, default=None, help="train.seed override")

    p = add("eval", cmd_eval, "report mDice/mIoU of a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True, metavar="PATH", help="checkpoint file")
    p.add_argument("--data", default=None, metavar="DIR", help="dataset dir override")

    p = add("predict", cmd_predict, "write a binary mask PGM for one image")
    p.add_argument("image", help="input image (P5/P6)")
    p.add_argument("out", help="output mask path (.pgm)")
    p.add_argument("--ckpt", required=True, metavar="PATH", help="checkpoint file")

    add("gradcheck", cmd_gradcheck, "run the finite-difference verification suite")

    p = add("heatmap", cmd_heatmap, "export per-stage feature/attention heatmaps")
    p.add_argument("image", help="input image (P5/P6)")
    p.add_argument("--ckpt", required=True, metavar="PATH", help="checkpoint file")
    p.add_argument("--out", required=True, metavar="DIR", help="output directory")

    p = add("synth", cmd_synth, "materialize a synthetic dataset")
    p.add_argument("n", type=int, help="number of samples")
    p.add_argument("size", type=int, help="square image size (multiple of 32)")
    p.add_argument("--out", required=True, metavar="DIR", help="output directory")
    p.add_argument("--seed", type=int, default=None, help="generator seed")
    return parser


def _setup_logging() -> None:
    level = {"quiet": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("SSF_LOG", "info"), logging.INFO)
    logging.basicConfig(level=level, format="%(message)s")


def main(argv=None) -> int:
    _setup_logging()
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    try:
        return args.fn(args)
    except DivergenceDetected as e:
        print(f"diverged: {e}", file=sys.stderr)
        return 2
    except (SSFormerError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

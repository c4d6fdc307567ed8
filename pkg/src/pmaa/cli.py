"""Command-line entry point: synth, train, eval, count, ablate.

Every run echoes its fully resolved configuration before doing work, so the
echo alone suffices to reproduce it.  Exit codes: 0 success, 1 runtime
failure (I/O, corrupt files, divergence), 2 usage error.
"""

import argparse
import os
import sys
from pathlib import Path

from pmaa import checkpoint as ckpt_io
from pmaa import cost, data, metrics, train
from pmaa.data import TensorFileError
from pmaa.model import ModelConfig, PmaaModel

TRAIN_KEYS = ("epochs", "batch_size", "seed", "lr0", "lr_min", "weight_decay")


class UsageError(ValueError):
    """Bad flags or config values: exit code 2."""


def _read_config_file(path) -> dict[str, str]:
    kv = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = stripped.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {stripped!r}")
        kv[key.strip()] = value.strip()
    return kv


def _split_config(kv: dict[str, str]) -> tuple[dict[str, str], dict[str, str]]:
    model_kv, train_kv = {}, {}
    for key, value in kv.items():
        if key in ModelConfig._KV_FIELDS:
            model_kv[key] = value
        elif key in TRAIN_KEYS:
            train_kv[key] = value
        else:
            raise UsageError(f"unknown config key {key!r}")
    return model_kv, train_kv


_MODEL_FLAGS = {
    "hidden_channels": "--hidden-channels",
    "downsamples": "--downsamples",
    "stages": "--stages",
    "attention_kernel": "--attention-kernel",
    "lim_kernel": "--lim-kernel",
    "ffn_expansion": "--ffn-expansion",
    "fusion_mode": "--fusion",
    "attention_mode": "--attention",
    "selective_attention": "--selective",
    "lim": "--lim",
    "patch_size": "--patch-size",
}


def _add_model_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value config file; flags override it")
    parser.add_argument("--hidden-channels", type=int)
    parser.add_argument("--downsamples", type=int)
    parser.add_argument("--stages", type=int)
    parser.add_argument("--attention-kernel", type=int)
    parser.add_argument("--lim-kernel", type=int)
    parser.add_argument("--ffn-expansion", type=float)
    parser.add_argument("--fusion", choices=["sum", "concat", "none"])
    parser.add_argument("--attention", choices=["nonpatch", "patch", "off"])
    parser.add_argument("--selective", choices=["on", "off"])
    parser.add_argument("--lim", choices=["on", "off"])
    parser.add_argument("--patch-size", type=int)


def _resolve_seed(args, train_kv: dict[str, str]) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    if "seed" in train_kv:
        return int(train_kv["seed"])
    env = os.environ.get("PMAA_SEED")
    if env is not None:
        return int(env)
    return 0


def _resolve_model_config(args, extra: dict[str, str] | None = None) -> ModelConfig:
    file_kv = _read_config_file(args.config) if getattr(args, "config", None) else {}
    model_kv, _ = _split_config(file_kv)
    if extra:
        model_kv.update(extra)
    for field, flag in _MODEL_FLAGS.items():
        value = getattr(args, flag.lstrip("-").replace("-", "_"), None)
        if value is not None:
            model_kv[field] = str(value).lower() if isinstance(value, bool) else str(value)
    try:
        return ModelConfig.from_kv(model_kv)
    except ValueError as err:
        raise UsageError(str(err)) from err


def _resolve_train_config(args, checkpoint_path=None) -> train.TrainConfig:
    file_kv = _read_config_file(args.config) if getattr(args, "config", None) else {}
    _, train_kv = _split_config(file_kv)
    tcfg = train.TrainConfig(checkpoint_path=checkpoint_path)
    for key in ("epochs", "lr0", "lr_min", "weight_decay", "batch_size"):
        if key in train_kv:
            kind = float if key in ("lr0", "lr_min", "weight_decay") else int
            setattr(tcfg, key, kind(train_kv[key]))
    if getattr(args, "epochs", None) is not None:
        tcfg.epochs = args.epochs
    if getattr(args, "batch", None) is not None:
        tcfg.batch_size = args.batch
    tcfg.seed = _resolve_seed(args, train_kv)
    try:
        tcfg.validate()
    except ValueError as err:
        raise UsageError(str(err)) from err
    return tcfg


def _echo_config(command: str, entries: dict) -> None:
    print("# resolved configuration")
    print(f"command\t{command}")
    for key in sorted(entries):
        print(f"{key}\t{entries[key]}")
    print("# end configuration")


def _find_manifest(data_dir: Path, split: str | None) -> Path:
    candidates = [split] if split else ["test", "val", "train"]
    for name in candidates:
        path = data_dir / f"{name}.manifest"
        if path.exists():
            return path
    raise UsageError(f"no manifest found under {data_dir} (tried {candidates})")


def _load_split(data_dir: str, split: str | None, pixel_max: float):
    manifest = _find_manifest(Path(data_dir), split)
    samples = data.load_dataset(manifest, pixel_max)
    if not samples:
        raise UsageError(f"dataset manifest {manifest} is empty")
    return samples, manifest


def cmd_synth(args) -> int:
    if not 0.0 <= args.coverage <= 1.0:
        raise UsageError(f"--coverage must be in [0, 1], got {args.coverage}")
    if args.count < 1:
        raise UsageError(f"--count must be >= 1, got {args.count}")
    if args.size < 16 or args.size % 16 != 0:
        raise UsageError(f"--size must be a positive multiple of 16, got {args.size}")
    if args.pixel_max <= 0:
        raise UsageError(f"--pixel-max must be > 0, got {args.pixel_max}")
    seed = args.seed if args.seed is not None else int(os.environ.get("PMAA_SEED", "0"))
    _echo_config("synth", {
        "out": args.out, "count": args.count, "size": args.size,
        "coverage": args.coverage, "seed": seed, "pixel_max": args.pixel_max,
        "split": args.split,
    })
    manifest = data.synth_generate(args.out, args.count, args.size, args.coverage,
                                   seed, args.pixel_max, args.split)
    print(f"wrote {args.count} samples; manifest {manifest}")
    return 0


def cmd_train(args) -> int:
    samples, manifest = _load_split(args.data, "train", args.pixel_max)
    val_path = Path(args.data) / "val.manifest"
    if val_path.exists():
        val_samples = data.load_dataset(val_path, args.pixel_max)
    else:
        val_samples = samples

    h, w = samples[0].target.shape[2], samples[0].target.shape[3]
    config = _resolve_model_config(args, extra={"height": str(h), "width": str(w)})
    tcfg = _resolve_train_config(args, checkpoint_path=args.out)

    echo = {f"model.{k}": v for k, v in config.to_kv().items()}
    echo.update({"data": args.data, "train_manifest": str(manifest), "out": args.out,
                 "epochs": tcfg.epochs, "batch_size": tcfg.batch_size,
                 "seed": tcfg.seed, "lr0": tcfg.lr0, "lr_min": tcfg.lr_min,
                 "weight_decay": tcfg.weight_decay, "pixel_max": args.pixel_max})
    _echo_config("train", echo)

    model = PmaaModel(config, seed=tcfg.seed)
    log_path = Path(args.log) if args.log else Path(args.out).with_suffix(".log")
    lines: list[str] = []

    def on_epoch(log: train.EpochLog) -> None:
        line = log.to_line()
        lines.append(line)
        print(f"epoch\t{line}")

    result = train.train_loop(model, samples, val_samples, tcfg, log_fn=on_epoch)
    log_path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    print(f"best ssim {result.best_ssim:.8f} at epoch {result.best_epoch}; "
          f"checkpoint {args.out}; log {log_path}")
    return 0


def cmd_eval(args) -> int:
    try:
        ckpt = ckpt_io.load_checkpoint(args.ckpt)
    except ckpt_io.CheckpointError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    samples, manifest = _load_split(args.data, args.split, args.pixel_max)

    echo = {f"model.{k}": v for k, v in ckpt.config.to_kv().items()}
    echo.update({"ckpt": args.ckpt, "data": args.data, "manifest": str(manifest),
                 "pixel_max": args.pixel_max, "epoch": ckpt.epoch})
    _echo_config("eval", echo)

    model = PmaaModel(ckpt.config, seed=0)
    try:
        ckpt_io.restore_params(model.params, ckpt)
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    report = metrics.evaluate_dataset(model, samples)
    print(report.to_text(), end="")
    return 0


def cmd_count(args) -> int:
    config = _resolve_model_config(args)
    if args.hw:
        try:
            h, w = (int(v) for v in args.hw.split(","))
        except ValueError as err:
            raise UsageError(f"--hw expects H,W integers, got {args.hw!r}") from err
    else:
        h, w = config.height, config.width
    scale = 2 ** config.downsamples
    if h % scale != 0 or w % scale != 0:
        raise UsageError(f"--hw {h},{w} not divisible by 2^{config.downsamples}")

    echo = {f"model.{k}": v for k, v in config.to_kv().items()}
    echo.update({"hw": f"{h},{w}"})
    _echo_config("count", echo)

    from pmaa.model import PmaaParams

    params = PmaaParams(config, seed=0)
    report = cost.count_params(params).merged(cost.count_macs(config, (h, w), params))
    print(report.to_text(), end="")
    print(report.to_table(), end="")
    return 0


# Toggle grid mirroring the published ablation table rows.
DEFAULT_GRID = [
    {"fusion_mode": "none", "attention_mode": "off", "selective_attention": "false", "lim": "false"},
    {"fusion_mode": "none", "attention_mode": "nonpatch", "selective_attention": "true", "lim": "true"},
    {"fusion_mode": "concat", "attention_mode": "nonpatch", "selective_attention": "true", "lim": "true"},
    {"fusion_mode": "sum", "attention_mode": "off", "selective_attention": "true", "lim": "true"},
    {"fusion_mode": "sum", "attention_mode": "patch", "selective_attention": "true", "lim": "true"},
    {"fusion_mode": "sum", "attention_mode": "nonpatch", "selective_attention": "false", "lim": "true"},
    {"fusion_mode": "sum", "attention_mode": "nonpatch", "selective_attention": "true", "lim": "false"},
    {"fusion_mode": "sum", "attention_mode": "nonpatch", "selective_attention": "true", "lim": "true"},
]

_GRID_KEYS = {"fusion": "fusion_mode", "attention": "attention_mode",
              "selective": "selective_attention", "lim": "lim"}


def _parse_grid_file(path) -> list[dict[str, str]]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        row = {}
        for token in stripped.split():
            key, sep, value = token.partition("=")
            if not sep or key not in _GRID_KEYS:
                raise UsageError(f"{path}:{lineno}: bad grid token {token!r} "
                                 f"(keys: {sorted(_GRID_KEYS)})")
            field = _GRID_KEYS[key]
            if field in ("selective_attention", "lim"):
                row[field] = "true" if value == "on" else "false"
            else:
                row[field] = value
        rows.append(row)
    if not rows:
        raise UsageError(f"grid file {path} has no rows")
    return rows


def cmd_ablate(args) -> int:
    samples, manifest = _load_split(args.data, "train", args.pixel_max)
    h, w = samples[0].target.shape[2], samples[0].target.shape[3]
    rows = _parse_grid_file(args.grid) if args.grid else DEFAULT_GRID
    tcfg_base = _resolve_train_config(args)

    echo = {"data": args.data, "manifest": str(manifest), "rows": len(rows),
            "epochs": tcfg_base.epochs, "batch_size": tcfg_base.batch_size,
            "seed": tcfg_base.seed, "lr0": tcfg_base.lr0, "lr_min": tcfg_base.lr_min,
            "weight_decay": tcfg_base.weight_decay, "hw": f"{h},{w}",
            "pixel_max": args.pixel_max}
    _echo_config("ablate", echo)

    print("fusion\tattention\tselective\tlim\tpsnr\tssim\tparams\tmacs")
    for row in rows:
        overrides = dict(row)
        overrides.update({"height": str(h), "width": str(w)})
        config = _resolve_model_config(args, extra=overrides)
        model = PmaaModel(config, seed=tcfg_base.seed)
        tcfg = train.TrainConfig(
            epochs=tcfg_base.epochs, batch_size=tcfg_base.batch_size,
            seed=tcfg_base.seed, lr0=tcfg_base.lr0, lr_min=tcfg_base.lr_min,
            weight_decay=tcfg_base.weight_decay)
        train.train_loop(model, samples, samples, tcfg)
        report = metrics.evaluate_dataset(model, samples)
        counts = cost.count_params(model.params).merged(
            cost.count_macs(config, (h, w), model.params))
        psnr_txt = "inf" if report.mean_psnr == float("inf") else f"{report.mean_psnr:.4f}"
        print(f"{config.fusion_mode}\t{config.attention_mode}\t"
              f"{'on' if config.selective_attention else 'off'}\t"
              f"{'on' if config.lim else 'off'}\t{psnr_txt}\t{report.mean_ssim:.4f}\t"
              f"{counts.total_params}\t{counts.total_macs}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pmaa",
                                     description="multi-temporal cloud removal, desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--coverage", type=float, default=0.3)
    p.add_argument("--seed", type=int)
    p.add_argument("--pixel-max", type=float, default=255.0)
    p.add_argument("--split", default="train")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train and checkpoint on best validation SSIM")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--pixel-max", type=float, default=255.0)
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split")
    p.add_argument("--pixel-max", type=float, default=255.0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("count", help="report parameter and MAC counts")
    p.add_argument("--hw", help="input resolution H,W (default: config height,width)")
    _add_model_flags(p)
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("ablate", help="train/evaluate a toggle grid")
    p.add_argument("--data", required=True)
    p.add_argument("--grid", help="file of rows like 'fusion=sum attention=nonpatch "
                                  "selective=on lim=on' (default: built-in grid)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--pixel-max", type=float, default=255.0)
    _add_model_flags(p)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (TensorFileError, ckpt_io.CheckpointError, train.TrainDiverged,
            FileNotFoundError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    entry()

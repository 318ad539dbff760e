"""Command-line front end: gen-data, train, eval, reconstruct, edit, sweep.

Run configuration is a flat key=value space (file via --config, overridden
by flags); the effective configuration is echoed into every output
directory. Exit codes: 0 success, 2 usage error, 3 invalid
configuration/data, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .autograd import Tensor
from .data import (build_prototype_bank, default_concept_spec, gen_synthetic,
                   load_dataset_dir, load_prototype_bank, read_ppm, save_folder,
                   save_prototype_bank, write_ppm)
from .errors import ConceptMapError, ConfigError, IngestError, ValidationError
from .layers import AdamW
from .losses import LossWeights
from .model import ConceptMapModel, ModelConfig, patchify, unpatchify
from .trainer import (TrainConfig, compose_visible, evaluate, load_checkpoint,
                      mask_ratio_sweep, restore_model, save_checkpoint, train)


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# flat key=value configuration

_CONFIG_KEYS = {
    # model
    "image_size": int, "patch_size": int, "embed_dim": int, "num_heads": int,
    "enc_layers": int, "enc_mlp_dim": int, "dec_mlp_dim": int,
    "variant": str, "attn_scale": str, "pos_embed": bool, "dtype": str,
    # training
    "epochs": int, "batch_size": int, "mask_ratio": float, "mask_shape": str,
    "lr": float, "weight_decay": float, "alpha": float, "beta": float,
    "weight_scale": float, "eps_freq": float, "uniform_weights": bool,
    "seed_init": int, "seed_data": int, "seed_mask": int,
    # data / bank
    "bank_seed": int,
}

_PRESETS = {
    "tiny": {"epochs": 250},
    "paper-small": {"image_size": 48, "patch_size": 6, "embed_dim": 512,
                    "num_heads": 4, "enc_layers": 2, "enc_mlp_dim": 128,
                    "dec_mlp_dim": 128, "epochs": 50},
}

_DEFAULTS = {
    "image_size": 24, "patch_size": 6, "embed_dim": 64, "num_heads": 4,
    "enc_layers": 2, "enc_mlp_dim": 128, "dec_mlp_dim": 128,
    "variant": "full", "attn_scale": "per_head", "pos_embed": True,
    "dtype": "float32",
    "epochs": 250, "batch_size": 32, "mask_ratio": 0.25, "mask_shape": "random",
    "lr": 1e-3, "weight_decay": 0.01, "alpha": 1.0, "beta": 1.0,
    "weight_scale": 1.0, "eps_freq": 1e-6, "uniform_weights": False,
    "seed_init": 0, "seed_data": 1, "seed_mask": 2, "bank_seed": 7,
}


def _coerce(key: str, raw: str):
    kind = _CONFIG_KEYS[key]
    if kind is bool:
        low = str(raw).strip().lower()
        if low in ("1", "true", "on", "yes"):
            return True
        if low in ("0", "false", "off", "no"):
            return False
        raise UsageError(f"config key {key}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError:
        raise UsageError(f"config key {key}: expected {kind.__name__}, got {raw!r}") from None


def parse_config_file(path) -> dict:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (t.strip() for t in text.split("=", 1))
        if key not in _CONFIG_KEYS:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = _coerce(key, value)
    return out


def resolve_run_config(args, num_concepts: int | None = None) -> dict:
    """defaults <- preset <- config file <- explicit flags; unknown keys rejected."""
    merged = dict(_DEFAULTS)
    preset = getattr(args, "preset", None)
    if preset:
        if preset not in _PRESETS:
            raise UsageError(f"unknown preset {preset!r}; choose from {sorted(_PRESETS)}")
        merged.update(_PRESETS[preset])
    if getattr(args, "config", None):
        merged.update(parse_config_file(args.config))
    for key in _CONFIG_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
    if not 0.0 <= merged["mask_ratio"] <= 1.0:
        raise UsageError(f"mask ratio must be in [0, 1], got {merged['mask_ratio']}")
    if num_concepts is not None:
        merged["num_concepts"] = num_concepts
    return merged


def model_config_from(merged: dict, num_concepts: int) -> ModelConfig:
    return ModelConfig(
        height=merged["image_size"], width=merged["image_size"], channels=3,
        patch_size=merged["patch_size"], embed_dim=merged["embed_dim"],
        num_heads=merged["num_heads"], enc_layers=merged["enc_layers"],
        enc_mlp_dim=merged["enc_mlp_dim"], dec_mlp_dim=merged["dec_mlp_dim"],
        num_concepts=num_concepts, variant=merged["variant"],
        attn_scale=merged["attn_scale"], pos_embed=merged["pos_embed"],
        dtype=merged["dtype"])


def train_config_from(merged: dict, preset: str) -> TrainConfig:
    lw = LossWeights(alpha=merged["alpha"], beta=merged["beta"],
                     scale=merged["weight_scale"], eps_freq=merged["eps_freq"],
                     uniform_weights=merged["uniform_weights"])
    return TrainConfig(epochs=merged["epochs"], batch_size=merged["batch_size"],
                       mask_ratio=merged["mask_ratio"], mask_shape=merged["mask_shape"],
                       weights=lw, lr=merged["lr"], weight_decay=merged["weight_decay"],
                       seed_init=merged["seed_init"], seed_data=merged["seed_data"],
                       seed_mask=merged["seed_mask"], preset=preset)


def echo_config(out_dir: Path, merged: dict) -> None:
    lines = [f"{k}={merged[k]}" for k in sorted(merged)]
    (out_dir / "config.txt").write_text("\n".join(lines) + "\n")


def _prepare_out_dir(path, force: bool = True) -> Path:
    out = Path(path)
    if out.exists() and not force and any(out.iterdir()):
        raise UsageError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    if args.seed < 0:
        raise UsageError("--seed must be non-negative")
    out = _prepare_out_dir(args.out, force=args.force)
    if args.probs:
        try:
            spec = default_concept_spec(tuple(float(p) for p in args.probs.split(",")))
        except (ValueError, ConfigError) as exc:
            raise UsageError(f"--probs: {exc}") from None
    else:
        spec = default_concept_spec()
    records = gen_synthetic(args.n, spec, args.image_size, args.image_size, 3, args.seed)
    save_folder(records, out, spec.names)
    manifest = {"seed": args.seed, "n": args.n, "height": args.image_size,
                "width": args.image_size, "channels": 3,
                "concepts": list(spec.names),
                "probabilities": list(spec.probabilities)}
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    print(f"wrote {args.n} images to {out}")
    return 0


def _load_training_inputs(args, merged):
    records, names = load_dataset_dir(args.data, merged["image_size"],
                                      merged["image_size"], 3)
    if args.bank:
        bank = load_prototype_bank(args.bank)
        if bank.num_concepts != len(names) or list(bank.names) != list(names):
            raise ConfigError(f"bank concepts {bank.names} do not match dataset {names}")
    else:
        bank = build_prototype_bank(names, merged["embed_dim"], merged["bank_seed"])
    return records, names, bank


def cmd_train(args) -> int:
    merged = resolve_run_config(args)
    out = _prepare_out_dir(args.out)
    records, names, bank = _load_training_inputs(args, merged)
    model_cfg = model_config_from(merged, len(names))
    train_cfg = train_config_from(merged, args.preset or "tiny")
    print(f"training on {len(records)} images, {model_cfg.num_patches} patches per image, "
          f"mask ratio {train_cfg.mask_ratio}")
    model = ConceptMapModel(model_cfg)
    model.init_params(train_cfg.seed_init)
    optimizer = AdamW(model.registry, lr=train_cfg.lr,
                      weight_decay=train_cfg.weight_decay)
    run = train(model, records, bank, train_cfg, optimizer=optimizer,
                log_path=out / "train_log.csv")
    rng_states = {"seed_init": train_cfg.seed_init, "seed_data": train_cfg.seed_data,
                  "seed_mask": train_cfg.seed_mask}
    merged["num_concepts"] = len(names)
    save_checkpoint(out / "model.ckpt", model, optimizer, rng_states, run.step,
                    extra={"run_config": {k: merged[k] for k in sorted(merged)}})
    save_prototype_bank(out / "bank.txt", bank)
    echo_config(out, merged)
    if run.records:
        print(f"finished {run.step} steps in {run.seconds:.1f}s; "
              f"final loss {run.records[-1]['total']:.6f}")
    else:
        print("no steps run")
    return 0


def _load_model_for_inference(ckpt_path):
    ckpt = load_checkpoint(ckpt_path)
    model, _ = restore_model(ckpt)
    return model, ckpt


def _load_bank_for(args, ckpt_path):
    bank_path = args.bank or (Path(ckpt_path).parent / "bank.txt")
    if not Path(bank_path).exists():
        raise ConfigError(f"no prototype bank at {bank_path}; pass --bank")
    return load_prototype_bank(bank_path)


def _masked_visualization(image: np.ndarray, plan, cfg) -> np.ndarray:
    patches = patchify(image, cfg.patch_size)
    patches[plan.masked] = 0.5
    return unpatchify(patches, cfg.height, cfg.width, cfg.channels, cfg.patch_size)


def _reconstruct_image(model, image, ratio, seed, shape):
    cfg = model.cfg
    if image.shape != (cfg.height, cfg.width, cfg.channels):
        raise ConfigError(f"image shape {image.shape} does not match checkpoint "
                          f"{(cfg.height, cfg.width, cfg.channels)}")
    fwd = model.forward(image[None], ratio, seed, mask_shape=shape)
    composite = compose_visible(fwd.recon_patches.data, fwd.target_patches,
                                fwd.plan.visible)[0]
    recon = unpatchify(np.clip(composite, 0.0, 1.0), cfg.height, cfg.width,
                       cfg.channels, cfg.patch_size)
    return fwd, recon


def cmd_reconstruct(args) -> int:
    model, _ = _load_model_for_inference(args.ckpt)
    out = _prepare_out_dir(args.out)
    image = read_ppm(args.image)
    fwd, recon = _reconstruct_image(model, image, args.test_mask_ratio,
                                    args.seed, args.mask_shape)
    write_ppm(out / "masked.ppm", _masked_visualization(image, fwd.plan, model.cfg))
    write_ppm(out / "recon.ppm", recon)
    print(f"reconstructed with {fwd.plan.num_masked}/{model.cfg.num_patches} patches masked")
    return 0


def _parse_edits(set_flags, bank):
    edits, seen = [], set()
    for flag in set_flags:
        if "=" not in flag:
            raise UsageError(f"--set expects name=pos|neg, got {flag!r}")
        name, polarity = flag.split("=", 1)
        if polarity not in ("pos", "neg"):
            raise UsageError(f"--set polarity must be pos or neg, got {polarity!r}")
        if name not in bank.names:
            raise UsageError(f"unknown concept {name!r}; bank has {list(bank.names)}")
        if name in seen:
            raise UsageError(f"duplicate --set for concept {name!r}")
        seen.add(name)
        j = list(bank.names).index(name)
        edits.append((j, bank.vector(j, polarity == "pos")))
    return edits


def cmd_edit(args) -> int:
    model, _ = _load_model_for_inference(args.ckpt)
    bank = _load_bank_for(args, args.ckpt)
    out = _prepare_out_dir(args.out)
    image = read_ppm(args.image)
    edits = _parse_edits(args.set or [], bank)
    cfg = model.cfg
    if image.shape != (cfg.height, cfg.width, cfg.channels):
        raise ConfigError(f"image shape {image.shape} does not match checkpoint "
                          f"{(cfg.height, cfg.width, cfg.channels)}")
    fwd = model.forward(image[None], args.test_mask_ratio, args.seed,
                        mask_shape=args.mask_shape)
    if edits:
        positions = [j for j, _ in edits]
        rows = model.project_prototypes(
            Tensor(np.stack([r for _, r in edits]).astype(cfg.np_dtype)))
        recon_t, _ = model.decode_with_replaced_concepts(fwd, positions, rows)
        recon_patches = recon_t.data
    else:
        recon_patches = fwd.recon_patches.data
    composite = compose_visible(recon_patches, fwd.target_patches, fwd.plan.visible)[0]
    img = unpatchify(np.clip(composite, 0.0, 1.0), cfg.height, cfg.width,
                     cfg.channels, cfg.patch_size)
    write_ppm(out / "edited.ppm", img)
    print(f"edited {len(edits)} concept(s) at mask ratio {args.test_mask_ratio}")
    return 0


def _report_lines(report, test_ratio):
    return [
        f"test_mask_ratio: {test_ratio}",
        f"accuracy: {report.accuracy:.6f}",
        f"precision: {report.precision:.6f}",
        f"recall: {report.recall:.6f}",
        f"f1: {report.f1:.6f}",
        f"masked_mse: {report.masked_mse:.8f}",
        f"masked_psnr: {report.masked_psnr:.4f}",
        f"loss_recon: {report.loss_recon:.8f}",
        f"loss_disentangle: {report.loss_disentangle:.8f}",
        f"loss_concept: {report.loss_concept:.8f}",
    ]


def cmd_eval(args) -> int:
    model, _ = _load_model_for_inference(args.ckpt)
    bank = _load_bank_for(args, args.ckpt)
    out = _prepare_out_dir(args.out)
    cfg = model.cfg
    records, names = load_dataset_dir(args.data, cfg.height, cfg.width, cfg.channels)
    if len(names) != cfg.num_concepts:
        raise ConfigError(f"dataset has {len(names)} concepts, model expects {cfg.num_concepts}")
    report = evaluate(model, records, bank, args.test_mask_ratio, args.seed)
    lines = _report_lines(report, args.test_mask_ratio)
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    header = "test_mask_ratio,accuracy,precision,recall,f1,masked_mse,masked_psnr"
    row = (f"{args.test_mask_ratio},{report.accuracy:.6f},{report.precision:.6f},"
           f"{report.recall:.6f},{report.f1:.6f},{report.masked_mse:.8f},"
           f"{report.masked_psnr:.4f}")
    (out / "report.csv").write_text(header + "\n" + row + "\n")
    print("\n".join(lines))
    return 0


def cmd_sweep(args) -> int:
    merged = resolve_run_config(args)
    out = _prepare_out_dir(args.out)
    try:
        ratios = [float(r) for r in args.ratios.split(",") if r.strip()]
    except ValueError:
        raise UsageError(f"--ratios expects comma-separated floats, got {args.ratios!r}") from None
    if not ratios or any(not 0.0 <= r <= 1.0 for r in ratios):
        raise UsageError(f"sweep ratios must lie in [0, 1], got {args.ratios!r}")
    records, names, bank = _load_training_inputs(args, merged)
    model_cfg = model_config_from(merged, len(names))
    train_cfg = train_config_from(merged, args.preset or "tiny")
    rows = mask_ratio_sweep(model_cfg, train_cfg, records, bank, ratios,
                            csv_path=out / "sweep.csv", test_seed=args.seed)
    merged["num_concepts"] = len(names)
    echo_config(out, merged)
    for ratio, report, seconds in rows:
        print(f"ratio {ratio}: f1 {report.f1:.4f}, masked_psnr {report.masked_psnr:.2f}, "
              f"train {seconds:.1f}s")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_config_flags(p):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--preset", choices=sorted(_PRESETS), help="named hyperparameter preset")
    for key, kind in _CONFIG_KEYS.items():
        flag = "--" + key.replace("_", "-")
        if kind is bool:
            p.add_argument(flag, dest=key, type=_coerce_key_bool, default=None,
                           metavar="BOOL")
        else:
            p.add_argument(flag, dest=key, type=kind, default=None)


def _coerce_key_bool(s):
    low = s.strip().lower()
    if low in ("1", "true", "on", "yes"):
        return True
    if low in ("0", "false", "off", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conceptmap",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic concept dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--image-size", type=int, default=24)
    g.add_argument("--probs", help="comma-separated per-concept frequencies")
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a dataset folder")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--bank", help="prototype bank file (default: seeded synthetic)")
    _add_config_flags(t)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("reconstruct", help="reconstruct one image from a checkpoint")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--image", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--test-mask-ratio", type=float, default=0.75)
    r.add_argument("--mask-shape", choices=("random", "square"), default="random")
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(func=cmd_reconstruct)

    e = sub.add_parser("edit", help="reconstruct with edited concepts")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--image", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--set", action="append", metavar="CONCEPT=pos|neg")
    e.add_argument("--bank")
    e.add_argument("--test-mask-ratio", type=float, default=0.75)
    e.add_argument("--mask-shape", choices=("random", "square"), default="random")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_edit)

    v = sub.add_parser("eval", help="metrics report for a checkpoint on a dataset")
    v.add_argument("--ckpt", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--bank")
    v.add_argument("--test-mask-ratio", type=float, default=0.25)
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="train and evaluate across mask ratios")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--ratios", required=True, help="comma-separated, e.g. 0,0.5,0.9")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--bank")
    _add_config_flags(s)
    s.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name in ("test_mask_ratio",):
        value = getattr(args, name, None)
        if value is not None and not 0.0 <= value <= 1.0:
            print(f"error: {name.replace('_', '-')} must be in [0, 1], got {value}",
                  file=sys.stderr)
            return 2
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ValidationError, IngestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ConceptMapError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

"""Command-line bench.

    ldrsplit {screen,train,truncate,sweep,distort,stdreport,plot} [options]

Settings come from a flat ``key=value`` file (``--config``), then ``--set
key=value`` overrides, then the dedicated flags. Every verb writes a
``<verb>.run.txt`` echo (settings, seed, model hashes) into ``--out``.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench, codec, nn, trainer
from .augment import AugmentSpec
from .data import DatasetHandle, load_cifar_binary, load_idx, make_gaussian_mixture
from .errors import ConfigError, LdrError
from .ldr import LdrConfig

log = logging.getLogger("ldrsplit")

MODEL_TAGS = ("CE-T", "DuPHiL", "LDR-FT")
TRUNC_TAGS = ("LDR-FT-trunc", "CE-FT-trunc")

DEFAULTS = {
    "dataset": "gauss",
    "seed": "0",
    "dy": "16",
    "s_grid": "0.1:4.0:0.1",
    "budget": "none",
    "drop_policy": "reject",
    "keep": "last_half",
    "ft_fraction": "0.5",
    "screening_dims": "4,8,32",
    # synthetic mixture
    "k": "3",
    "d_in": "32",
    "n_per_class": "200",
    "n_test_per_class": "100",
    "separation": "3.0",
    "intrinsic_dim": "none",
    # distortion used by the `distort` verb; empty kinds means the dataset default
    "distort.kinds": "",
    "distort.noise_sigma": "0.5",
}


def read_config(path) -> dict:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _opt(value: str):
    return None if value.lower() in ("", "none", "unlimited") else value


def _parse_like(default, text: str):
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float) or default is None:
        return None if _opt(text) is None else float(text)
    if isinstance(default, tuple):
        return tuple(v.strip() for v in text.split(",") if v.strip())
    return text


def build_train_config(settings: dict, ds: DatasetHandle) -> trainer.TrainConfig:
    base = trainer.TrainConfig()
    kw = {}
    for f in dataclasses.fields(trainer.TrainConfig):
        if f.name in ("ldr", "augment"):
            continue
        if f.name in settings:
            val = _parse_like(getattr(base, f.name), settings[f.name])
            if f.name == "screening_dims":
                val = tuple(int(v) for v in val)
            kw[f.name] = val
    kw["seed"] = int(settings["seed"])
    kw.setdefault("screening_dims", tuple(int(v) for v in settings["screening_dims"].split(",")))
    ldr_kw = {}
    for f in dataclasses.fields(LdrConfig):
        key = f"ldr.{f.name}"
        if key in settings:
            ldr_kw[f.name] = _parse_like(getattr(LdrConfig(), f.name), settings[key])
    if ldr_kw.get("input_dim") is not None:
        ldr_kw["input_dim"] = int(ldr_kw["input_dim"])
    if ldr_kw.get("scale_dim_mode") == "input_dim":
        ldr_kw.setdefault("input_dim", ds.d_in)
    kw["ldr"] = LdrConfig(**ldr_kw)
    kw["augment"] = _augment(settings, "augment", ds, kw["seed"], training=True)
    return trainer.TrainConfig(**kw)


def _augment(settings: dict, prefix: str, ds: DatasetHandle, seed: int, training: bool) -> AugmentSpec:
    if ds.image_shape is not None:
        default_kinds = ("horizontal_flip", "shift", "gaussian_noise", "brightness") if training \
            else ("rotate90", "horizontal_flip", "brightness")
        base = AugmentSpec.for_images(ds.image_shape, seed=seed, kinds=default_kinds)
    else:
        base = AugmentSpec.for_vectors(seed=seed) if training else AugmentSpec(
            kinds=("sign_flip_pair",), seed=seed)
    kw = {}
    for f in dataclasses.fields(AugmentSpec):
        key = f"{prefix}.{f.name}"
        if key in settings and settings[key] != "" and f.name not in ("image_shape", "seed"):
            kw[f.name] = _parse_like(getattr(base, f.name), settings[key])
    return dataclasses.replace(base, **kw)


def load_dataset(settings: dict) -> DatasetHandle:
    name = settings["dataset"]
    seed = int(settings["seed"])
    if name == "gauss":
        intrinsic = _opt(settings["intrinsic_dim"])
        return make_gaussian_mixture(int(settings["k"]), int(settings["d_in"]), int(settings["n_per_class"]),
                                     float(settings["separation"]), seed,
                                     n_test_per_class=int(settings["n_test_per_class"]),
                                     intrinsic_dim=None if intrinsic is None else int(intrinsic))
    if name == "idx":
        try:
            train = load_idx(settings["train_images"], settings["train_labels"])
            test = load_idx(settings["test_images"], settings["test_labels"])
        except KeyError as exc:
            raise ConfigError(f"idx dataset needs {exc.args[0]}") from None
        ds = train.with_test(test)
    elif name == "cifar":
        lb = int(settings.get("label_bytes", "1"))
        take = _opt(settings.get("take_n", "2000"))
        take_test = _opt(settings.get("take_test", "1000"))
        try:
            train = load_cifar_binary(settings["cifar_train"], None if take is None else int(take), lb)
            test = load_cifar_binary(settings["cifar_test"], None if take_test is None else int(take_test), lb)
        except KeyError as exc:
            raise ConfigError(f"cifar dataset needs {exc.args[0]}") from None
        ds = train.with_test(test)
    else:
        raise ConfigError(f"unknown dataset {name!r}")
    ds.name = name
    return ds


def git_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _write_run(out: Path, verb: str, settings: dict, cfg=None, models=None) -> None:
    lines = [f"verb={verb}"]
    lines += [f"{k}={settings[k]}" for k in sorted(settings)]
    if cfg is not None:
        echo = cfg.echo()
        lines += [f"train.{k}={echo[k]}" for k in sorted(echo)]
    for tag, model in sorted((models or {}).items()):
        lines.append(f"model.{tag}.git_hash={git_hash(nn.model_bytes(model))}")
    (out / f"{verb}.run.txt").write_text("\n".join(lines) + "\n")


def _load_models(out: Path, tags) -> dict:
    models = {}
    for tag in tags:
        path = out / f"{tag}.ldrm"
        if path.exists():
            models[tag] = nn.load_model(path)
    if not models:
        raise ConfigError(f"no model files for {', '.join(tags)} in {out}; run `train` first")
    return models


def _channel(settings) -> bench.ChannelSpec:
    budget = _opt(settings["budget"])
    return bench.ChannelSpec(None if budget is None else int(budget), settings["drop_policy"])


def _save_models(out: Path, models: dict, ds: DatasetHandle) -> None:
    for tag, model in models.items():
        nn.save_model(model, out / f"{tag}.ldrm")
        codec.save_profile(bench.fit_model_profile(model, ds), out / f"{tag}.ldrp")


def cmd_screen(settings, out):
    ds = load_dataset(settings)
    cfg = build_train_config(settings, ds)
    best, table = trainer.screen_latent_dims(ds.train, ds.test, cfg)
    with open(out / "screen.csv", "w") as fh:
        fh.write("d_y,accuracy\n")
        for d, acc in table:
            fh.write(f"{d},{acc!r}\n")
    _write_run(out, "screen", dict(settings, chosen_dy=str(best)), cfg)
    print(f"chosen d_y={best}")


def cmd_train(settings, out):
    ds = load_dataset(settings)
    cfg = build_train_config(settings, ds)
    trained = bench.train_model_set(ds, cfg, int(settings["dy"]))
    models = {tag: m for tag, (m, _) in trained.items()}
    _save_models(out, models, ds)
    for tag, (_, rep) in trained.items():
        rep.write_csv(out / f"train_{tag}.csv")
        print(f"{tag}: train acc {rep.train_accuracy:.4f}, test acc {rep.test_accuracy:.4f}")
    _write_run(out, "train", settings, cfg, models)


def cmd_truncate(settings, out):
    ds = load_dataset(settings)
    cfg = build_train_config(settings, ds)
    base = _load_models(out, ("CE-T",))["CE-T"]
    keep = settings["keep"]
    if keep == "last_half":
        mask = trainer.keep_first_half(base.d_y)
    else:
        mask = np.array([int(v) for v in keep.split(",")])
    ft_cfg = cfg.scaled(float(settings["ft_fraction"]))
    models = {}
    for tag, mode in zip(TRUNC_TAGS, ("ldr_ft", "ce_ft")):
        model, rep = trainer.truncate_and_finetune(base, mask, mode, ds.train, ds.test, ft_cfg)
        rep.write_csv(out / f"train_{tag}.csv")
        models[tag] = model
        print(f"{tag}: d_y={model.d_y}, test acc {rep.test_accuracy:.4f}")
    _save_models(out, models, ds)
    points = bench.sweep_rate_accuracy(models, ds, bench.parse_grid(settings["s_grid"]), _channel(settings))
    bench.write_points(points, out / "sweep_truncated.csv")
    bench.emit_plot(points, out / "sweep_truncated.svg", "truncated latents")
    _write_run(out, "truncate", settings, ft_cfg, models)


def cmd_sweep(settings, out):
    ds = load_dataset(settings)
    models = _load_models(out, MODEL_TAGS + TRUNC_TAGS)
    points = bench.sweep_rate_accuracy(models, ds, bench.parse_grid(settings["s_grid"]), _channel(settings))
    bench.write_points(points, out / "sweep.csv")
    bench.emit_plot(points, out / "sweep.svg", "rate-accuracy")
    _write_run(out, "sweep", settings, models=models)


def cmd_distort(settings, out):
    ds = load_dataset(settings)
    models = _load_models(out, MODEL_TAGS)
    spec = _augment(settings, "distort", ds, int(settings["seed"]), training=False)
    points = bench.eval_distortion_robustness(models, ds, spec, bench.parse_grid(settings["s_grid"]),
                                              _channel(settings))
    bench.write_points(points, out / "distort.csv")
    bench.emit_plot(points, out / "distort.svg", "distorted test set")
    _write_run(out, "distort", settings, models=models)


def cmd_stdreport(settings, out):
    ds = load_dataset(settings)
    models = _load_models(out, MODEL_TAGS + TRUNC_TAGS)
    reports = {}
    for tag, model in models.items():
        reports[tag] = bench.latent_std_report(model, ds)
        bench.write_std_report(reports[tag], out / f"std_{tag}.csv")
    bench.emit_std_plot(reports, out / "std.svg")
    _write_run(out, "stdreport", settings, models=models)


def cmd_plot(settings, out, csv_path=None):
    src = Path(csv_path) if csv_path else out / "sweep.csv"
    points = bench.read_points(src)
    bench.emit_plot(points, out / (src.stem + ".svg"), src.stem)


VERBS = {
    "screen": cmd_screen,
    "train": cmd_train,
    "truncate": cmd_truncate,
    "sweep": cmd_sweep,
    "distort": cmd_distort,
    "stdreport": cmd_stdreport,
    "plot": cmd_plot,
}


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ldrsplit", description="LDR-guided split autoencoder bench")
    p.add_argument("verb", choices=sorted(VERBS))
    p.add_argument("--config", help="key=value settings file")
    p.add_argument("--seed", type=int)
    p.add_argument("--dataset", choices=("gauss", "idx", "cifar"))
    p.add_argument("--dy", type=int)
    p.add_argument("--s-grid", dest="s_grid", help="a:b:step or comma list")
    p.add_argument("--budget", help="bits per sample, or 'unlimited'")
    p.add_argument("--out", default="runs", help="output directory")
    p.add_argument("--csv", help="input CSV for `plot`")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any setting")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_settings(args) -> dict:
    settings = dict(DEFAULTS)
    if args.config:
        settings.update(read_config(args.config))
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        settings[k.strip()] = v.strip()
    for key in ("seed", "dataset", "dy", "s_grid", "budget"):
        val = getattr(args, key)
        if val is not None:
            settings[key] = str(val)
    return settings


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        settings = resolve_settings(args)
        if args.verb == "plot":
            cmd_plot(settings, out, args.csv)
        else:
            VERBS[args.verb](settings, out)
    except (LdrError, OSError) as exc:
        print(f"ldrsplit: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry points: ``synth``, ``train``, ``decompose``, ``render`` and ``eval``.

Exit codes: 0 success, 2 usage or ingestion error, 3 numeric failure.

``train`` reads an optional YAML config tree with three sections::

    data:    {path, downsample, num_train, split_seed}
    output:  {dir, log_every, render_every}
    train:   every TrainConfig field, with nested ``loss`` and ``encoding``

Unknown keys are rejected.  Any leaf can be overridden from the command line
with its dotted path, e.g. ``--train.num_steps 200`` or
``--train.loss.lambda_smooth 0``.  The effective tree is written to
``<output.dir>/config.yaml``, which can be passed back with ``--config`` to
rerun the same experiment.
"""

from __future__ import annotations

import argparse
import copy
import shutil
import sys
from pathlib import Path

import numpy as np
import yaml

from .data import SceneDataset, SyntheticSpec, export_dataset, generate_synthetic_scene, load_photocollection, save_image
from .evaluation import MetricReport, right_half
from .exceptions import CheckpointError, ConfigError, IngestionError, NumericError
from .pipeline import decompose, decomposition_stats, evaluate_test_views, reference_image
from .trainer import ScalarLog, Trainer, TrainConfig, fit_test_embedding, load_checkpoint, render_image

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# Config tree


def default_run_config() -> dict:
    return {
        "data": {"path": None, "downsample": 2, "num_train": None, "split_seed": 0},
        "output": {"dir": None, "log_every": 10, "render_every": 0},
        "train": TrainConfig().to_dict(),
    }


def _merge(base: dict, update: dict, prefix: str = "") -> dict:
    """Recursive merge that refuses keys missing from ``base``."""
    out = copy.deepcopy(base)
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in out:
            raise ConfigError(f"unknown config key: {path}")
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path} must be a mapping")
            out[key] = _merge(out[key], value, path + ".")
        else:
            if isinstance(value, dict):
                raise ConfigError(f"config key {path} is a leaf, got a mapping")
            out[key] = value
    return out


def _parse_overrides(tokens: list[str]) -> dict:
    """Turn ``--a.b value`` / ``--a.b=value`` pairs into a nested dict (values parsed as YAML scalars)."""
    tree: dict = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or "." not in tok:
            raise UsageError(f"unrecognised argument: {tok}")
        if "=" in tok:
            key, raw = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise UsageError(f"missing value for {tok}")
            key, raw = tok[2:], tokens[i + 1]
            i += 2
        node = tree
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(raw)
    return tree


def resolve_run_config(config_path, overrides: dict) -> dict:
    cfg = default_run_config()
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise IngestionError(f"config file not found: {path}")
        loaded = yaml.safe_load(path.read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path} must hold a mapping")
        cfg = _merge(cfg, loaded)
    cfg = _merge(cfg, overrides)
    TrainConfig.from_dict(cfg["train"])  # validate early
    return cfg


def _train_config(tree: dict) -> TrainConfig:
    d = dict(tree)
    if isinstance(d.get("field_skip"), str) and d["field_skip"].lower() == "none":
        d["field_skip"] = None
    return TrainConfig.from_dict(d)


# --------------------------------------------------------------------------
# Helpers


def _prepare_out(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise UsageError(f"output directory {out} is not empty (use --force to overwrite)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_data(data_cfg: dict) -> SceneDataset:
    if data_cfg.get("path") is None:
        raise UsageError("no dataset path given (data.path / --data)")
    path = Path(data_cfg["path"])
    if not path.is_dir():
        raise IngestionError(f"dataset directory not found: {path}")
    return load_photocollection(
        path, factor=int(data_cfg["downsample"]), num_train=data_cfg.get("num_train"), seed=int(data_cfg.get("split_seed", 0))
    )


def _load_trained(args) -> tuple[Trainer, SceneDataset]:
    ck = load_checkpoint(args.checkpoint)
    data_cfg = dict(ck.meta.get("run", {}).get("data", default_run_config()["data"]))
    if args.data is not None:
        data_cfg["path"] = args.data
    if args.downsample is not None:
        data_cfg["downsample"] = args.downsample
    dataset = _load_data(data_cfg)
    return Trainer.from_checkpoint(args.checkpoint, dataset), dataset


def _write(out: Path, stem: str, img: np.ndarray, floats: bool) -> None:
    save_image(out / f"{stem}.png", img)
    if floats:
        save_image(out / f"{stem}.npy", img)


# --------------------------------------------------------------------------
# Commands


def cmd_synth(args) -> int:
    lo, hi = args.occluders_min, args.occluders_max
    if args.occluders is not None:
        lo = hi = args.occluders
    spec = SyntheticSpec(
        num_train=args.images,
        num_test=args.test_images,
        height=args.size,
        width=args.size,
        occluders_min=lo,
        occluders_max=hi,
        jitter=args.jitter,
        quadrature=args.quadrature,
    )
    out = _prepare_out(args.out, args.force)
    dataset = generate_synthetic_scene(spec, seed=args.seed)
    export_dataset(dataset, out, image_format=args.format)
    print(f"wrote {len(dataset)} views ({len(dataset.train_ids)} train, {len(dataset.test_ids)} test) to {out}")
    return EXIT_OK


def cmd_train(args, extra: list[str]) -> int:
    overrides = _parse_overrides(extra)
    shortcuts = {("data", "path"): args.data, ("output", "dir"): args.out, ("train", "seed"): args.seed, ("train", "num_steps"): args.steps}
    for (section, key), value in shortcuts.items():
        if value is not None:
            overrides.setdefault(section, {})[key] = value
    cfg = resolve_run_config(args.config, overrides)
    if cfg["output"]["dir"] is None:
        raise UsageError("no output directory given (output.dir / --out)")
    dataset = _load_data(cfg["data"])
    tcfg = _train_config(cfg["train"])
    out = _prepare_out(cfg["output"]["dir"], args.force)
    (out / "config.yaml").write_text(yaml.safe_dump(cfg, sort_keys=True))

    log = ScalarLog(out / "scalars.tsv")
    log_every = max(1, int(cfg["output"]["log_every"]))
    render_every = int(cfg["output"]["render_every"])
    trainer = Trainer(tcfg, dataset)

    def callback(step, terms, tr):
        if step % log_every == 0 or step == tcfg.num_steps - 1:
            log.write(step, terms)
            if not args.quiet:
                print(f"step {step}: total {terms['total']:.6g}", flush=True)
        if render_every > 0 and (step + 1) % render_every == 0:
            (out / "renders").mkdir(exist_ok=True)
            img = render_image(tr.model, dataset.cameras[tr.data.ids[0]], tr.model.appearance.weight[0].detach())["static"]
            save_image(out / "renders" / f"step_{step + 1:06d}.png", img.numpy())

    trainer.run(callback=callback)
    trainer.save(out / "checkpoint.sfck", extra_meta={"data": cfg["data"]})
    print(f"checkpoint written to {out / 'checkpoint.sfck'}")
    return EXIT_OK


def cmd_decompose(args) -> int:
    trainer, dataset = _load_trained(args)
    ids = args.ids if args.ids else trainer.data.ids
    bad = [i for i in ids if i not in trainer.data.ids]
    if bad:
        raise KeyError(f"image {bad[0]} is not a training image; valid ids: {trainer.data.ids}")
    out = _prepare_out(args.out, args.force)
    for i in ids:
        maps = decompose(trainer.model, dataset, trainer.data.ids, i)
        name = dataset.names[i]
        _write(out, f"{name}_static", maps["static"], args.floats)
        _write(out, f"{name}_transient", maps["transient"], args.floats)
        _write(out, f"{name}_blended", maps["blended"], args.floats)
        _write(out, f"{name}_opacity", maps["opacity"], args.floats)
        beta = maps["uncertainty"]
        save_image(out / f"{name}_uncertainty.png", beta / max(beta.max(), 1e-12))
        if args.floats:
            save_image(out / f"{name}_uncertainty.npy", beta)
    print(f"decomposed {len(ids)} images into {out}")
    return EXIT_OK


def cmd_render(args) -> int:
    trainer, dataset = _load_trained(args)
    model = trainer.model
    out = _prepare_out(args.out, args.force)
    ids = args.ids if args.ids else dataset.test_ids
    for i in ids:
        if not 0 <= i < len(dataset):
            raise KeyError(f"image {i} does not exist; dataset has {len(dataset)} views")
        cam = dataset.cameras[i]
        if args.appearance == "fit":
            code = fit_test_embedding(model, dataset.images[i], cam, image_id=dataset.names[i])
        elif args.appearance == "mean":
            code = model.appearance.weight.detach().mean(0)
        else:
            j = int(args.appearance)
            if j not in trainer.data.ids:
                raise KeyError(f"appearance source {j} is not a training image; valid ids: {trainer.data.ids}")
            code = model.appearance.weight[trainer.data.ids.index(j)].detach()
        img = render_image(model, cam, code)["static"].numpy()
        _write(out, dataset.names[i], img, True)
    print(f"rendered {len(ids)} views into {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if (args.checkpoint is None) == (args.renders is None):
        raise UsageError("give exactly one of --checkpoint or --renders")
    if args.checkpoint is not None:
        trainer, dataset = _load_trained(args)
        ids = args.ids if args.ids else dataset.test_ids
        report, renders = evaluate_test_views(trainer.model, dataset, ids, steps=args.steps)
        if dataset.masks is not None and trainer.config.transient_mode in ("concrete", "sigmoid"):
            report.summary_iou = decomposition_stats(trainer.model, dataset, trainer.data.ids)["iou"]
    else:
        if args.data is None:
            raise UsageError("--renders needs --data")
        dataset = _load_data({"path": args.data, "downsample": args.downsample or 1, "num_train": None, "split_seed": 0})
        ids = args.ids if args.ids else dataset.test_ids
        renders = {}
        for i in ids:
            path = Path(args.renders) / f"{dataset.names[i]}.npy"
            if not path.exists():
                raise IngestionError(f"missing render {path}")
            renders[i] = np.load(path).astype(np.float64)
        report = MetricReport()
        for i in ids:
            report.add(dataset.names[i], right_half(renders[i]), right_half(reference_image(dataset, i)))
    out = _prepare_out(args.out, args.force)
    report.write(out / "report.tsv")
    if args.checkpoint is not None:
        (out / "renders").mkdir()
        for i, img in renders.items():
            _write(out / "renders", dataset.names[i], img, True)
    print(report.to_text(), end="")
    return EXIT_OK


# --------------------------------------------------------------------------
# Argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sfnerf", allow_abbrev=False, description="Static/transient radiance-field decomposition.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate the synthetic occluder dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--images", type=int, default=15, help="training views")
    s.add_argument("--test-images", type=int, default=5, help="clean held-out views")
    s.add_argument("--occluders", type=int, default=None, help="fixed occluder count per training view")
    s.add_argument("--occluders-min", type=int, default=3)
    s.add_argument("--occluders-max", type=int, default=5)
    s.add_argument("--size", type=int, default=64, help="image height and width")
    s.add_argument("--jitter", type=float, default=0.15, help="per-channel gain jitter")
    s.add_argument("--quadrature", type=int, default=4096, help="reference samples per ray")
    s.add_argument("--format", choices=("npy", "png"), default="npy")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--force", action="store_true")

    t = sub.add_parser("train", help="train a model; extra --section.key VALUE flags override the config")
    t.add_argument("--config", default=None)
    t.add_argument("--data", default=None, help="alias for --data.path")
    t.add_argument("--out", default=None, help="alias for --output.dir")
    t.add_argument("--seed", type=int, default=None, help="alias for --train.seed")
    t.add_argument("--steps", type=int, default=None, help="alias for --train.num_steps")
    t.add_argument("--force", action="store_true")
    t.add_argument("--quiet", action="store_true")

    def trained(sp, checkpoint_required=True):
        sp.add_argument("--checkpoint", required=checkpoint_required, default=None)
        sp.add_argument("--data", default=None, help="dataset directory (default: the one used for training)")
        sp.add_argument("--downsample", type=int, default=None)
        sp.add_argument("--ids", type=int, nargs="*", default=None)
        sp.add_argument("--out", required=True)
        sp.add_argument("--force", action="store_true")

    d = sub.add_parser("decompose", help="write static/transient/opacity/uncertainty/blended images")
    trained(d)
    d.add_argument("--floats", action="store_true", help="also write float32 .npy dumps")

    r = sub.add_parser("render", help="render static views")
    trained(r)
    r.add_argument("--appearance", default="fit", help="'fit' (left-half fit), 'mean', or a training image id")

    e = sub.add_parser("eval", help="right-half PSNR/SSIM on the test split")
    trained(e, checkpoint_required=False)
    e.add_argument("--renders", default=None, help="evaluate saved <name>.npy renders instead of a checkpoint")
    e.add_argument("--steps", type=int, default=None, help="embedding-fit steps (default: train.test_steps)")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "train":
            return cmd_train(args, extra)
        if extra:
            raise UsageError(f"unrecognised arguments: {' '.join(extra)}")
        return {"synth": cmd_synth, "decompose": cmd_decompose, "render": cmd_render, "eval": cmd_eval}[args.command](args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, IngestionError, CheckpointError, KeyError, FileNotFoundError, ValueError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

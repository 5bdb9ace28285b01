"""Command-line entry point.

Subcommands: gen-data, train, eval, spectra, pyramid-dump, attn-probe.

Exit codes: 0 success, 2 invalid config or inputs, 3 I/O failure,
4 non-finite training loss (the last good checkpoint is kept).

Config files are flat ``key = value`` text; an ``include = other.cfg``
line merges another file first (paths relative to the including file),
and later keys win. Every run is deterministic given (config, seed).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import __version__, ops
from .attention import (
    AttentionParams,
    apply_query,
    efficient_context,
    frequency_context,
    fuse,
)
from .checkpoint import (
    Checkpoint,
    CheckpointError,
    build_model,
    load_checkpoint,
    restore_into,
    save_checkpoint,
)
from .data import (
    DataError,
    DatasetManifest,
    gen_texture_dataset,
    load_input_tensor,
    write_dataset,
)
from .model import ModelConfig, Segmenter
from .pyramid import GaussianSpec, build_pyramid
from .spectral import layerwise_probe, write_radial_csvs, write_report_csv
from .tensor import _wrap
from .tensorio import TensorIOError, save_tensor
from .training import (
    LossConfig,
    NonFiniteLossError,
    SgdConfig,
    evaluate,
    train_model,
)


class ConfigError(ValueError):
    pass


ABLATIONS = ("disable_frequency_attention", "disable_bridge", "disable_des",
             "baseline_self_attention")

_MODEL_KEYS = {
    "height": int, "width": int, "in_channels": int, "base_width": int,
    "num_classes": int, "dtype": str,
}
_MODEL_LIST_KEYS = {
    "multipliers": int, "encoder_depths": int, "decoder_depths": int,
    "heads": int, "sigmas": float,
}
_RUN_KEYS = {
    "manifest": str, "out_dir": str, "epochs": int, "batch_size": int,
    "lr": float, "momentum": float, "weight_decay": float, "gamma": float,
    "seed": int, "checkpoint_every": int, "eval_subset": int,
    "spectra_samples": int, "ablate": str,
}


def parse_kv_file(path) -> dict:
    """Flat key=value parser with include resolution."""
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    merged: dict[str, str] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = key.strip(), value.strip()
            if key == "include":
                child = os.path.join(os.path.dirname(os.path.abspath(path)), value)
                merged.update(parse_kv_file(child))
            else:
                merged[key] = value
    return merged


@dataclass
class RunConfig:
    model: ModelConfig
    manifest_path: str = ""
    out_dir: str = ""
    epochs: int = 10
    batch_size: int = 4
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0001
    gamma: float = 0.6
    seed: int = 0
    checkpoint_every: int = 0
    eval_subset: int = 32
    spectra_samples: int = 8
    ablate: tuple = ()

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "RunConfig":
        raw = parse_kv_file(path)
        if overrides:
            raw.update({k: str(v) for k, v in overrides.items() if v is not None})
        known = set(_MODEL_KEYS) | set(_MODEL_LIST_KEYS) | set(_RUN_KEYS)
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            model_kwargs = {k: t(raw[k]) for k, t in _MODEL_KEYS.items() if k in raw}
            for k, t in _MODEL_LIST_KEYS.items():
                if k in raw:
                    model_kwargs[k] = tuple(t(v) for v in raw[k].split(",") if v.strip())
            run_kwargs = {k: t(raw[k]) for k, t in _RUN_KEYS.items() if k in raw}
        except ValueError as exc:
            raise ConfigError(f"bad config value: {exc}") from exc
        ablate_raw = run_kwargs.pop("ablate", "none")
        flags = tuple(f for f in (s.strip() for s in ablate_raw.split(","))
                      if f and f != "none")
        for flag in flags:
            if flag not in ABLATIONS:
                raise ConfigError(
                    f"unknown ablation {flag!r}; valid: {', '.join(ABLATIONS)}"
                )
        manifest_path = run_kwargs.pop("manifest", "")
        model = ModelConfig(**model_kwargs)
        apply_ablations(model, flags)
        try:
            model.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        cfg = cls(model=model, manifest_path=manifest_path, ablate=flags,
                  **run_kwargs)
        if not 0.0 <= cfg.gamma <= 1.0:
            raise ConfigError(f"gamma must be in [0, 1], got {cfg.gamma}")
        if cfg.epochs < 1 or cfg.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        return cfg

    def load_manifest(self) -> DatasetManifest:
        if not self.manifest_path:
            raise ConfigError("config is missing a 'manifest' entry")
        if not os.path.isfile(self.manifest_path):
            raise ConfigError(f"manifest not found: {self.manifest_path}")
        return DatasetManifest.from_file(self.manifest_path)

    def snapshot(self, path):
        """Write the fully resolved flat config (includes folded in)."""
        m = self.model
        lines = [
            f"height = {m.height}", f"width = {m.width}",
            f"in_channels = {m.in_channels}", f"base_width = {m.base_width}",
            f"num_classes = {m.num_classes}",
            f"multipliers = {','.join(str(v) for v in m.multipliers)}",
            f"encoder_depths = {','.join(str(v) for v in m.encoder_depths)}",
            f"decoder_depths = {','.join(str(v) for v in m.decoder_depths)}",
            f"heads = {','.join(str(v) for v in m.heads)}",
            f"sigmas = {','.join(repr(v) for v in m.sigmas)}",
            f"dtype = {m.dtype}",
            f"manifest = {self.manifest_path}",
            f"out_dir = {self.out_dir}",
            f"epochs = {self.epochs}", f"batch_size = {self.batch_size}",
            f"lr = {self.lr!r}", f"momentum = {self.momentum!r}",
            f"weight_decay = {self.weight_decay!r}", f"gamma = {self.gamma!r}",
            f"seed = {self.seed}",
            f"checkpoint_every = {self.checkpoint_every}",
            f"eval_subset = {self.eval_subset}",
            f"spectra_samples = {self.spectra_samples}",
            f"ablate = {','.join(self.ablate) if self.ablate else 'none'}",
        ]
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def apply_ablations(model: ModelConfig, flags):
    for flag in flags:
        if flag == "disable_frequency_attention":
            model.frequency_attention = False
        elif flag == "disable_bridge":
            model.use_bridge = False
        elif flag == "disable_des":
            model.use_des = False
        elif flag == "baseline_self_attention":
            model.frequency_attention = False
            model.baseline_self_attention = True


class _Lock:
    """Exclusive ownership of an output directory while a run is live."""

    def __init__(self, out_dir):
        self.path = os.path.join(out_dir, ".lock")
        self.fd = None

    def __enter__(self):
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            os.write(self.fd, str(os.getpid()).encode())
        except FileExistsError:
            raise OSError(
                f"output directory is locked by another run: {self.path}"
            ) from None
        return self

    def __exit__(self, exc_type, exc, tb):
        if self.fd is not None:
            os.close(self.fd)
            os.unlink(self.path)
        return False


def _build_from_config(cfg: RunConfig) -> Segmenter:
    return Segmenter(cfg.model, np.random.default_rng(cfg.seed))


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args) -> int:
    if not os.path.isfile(args.manifest):
        raise ConfigError(f"manifest not found: {args.manifest}")
    manifest = DatasetManifest.from_file(args.manifest)
    if os.path.isdir(args.out) and os.listdir(args.out) and not args.force:
        raise ConfigError(f"output dir {args.out} is not empty (use --force)")
    write_dataset(args.out, manifest)
    total = manifest.train_samples + manifest.test_samples
    print(f"wrote {total} samples ({manifest.train_samples} train, "
          f"{manifest.test_samples} test) to {args.out}")
    return 0


def cmd_train(args) -> int:
    overrides = {"epochs": args.epochs, "seed": args.seed, "out_dir": args.out,
                 "ablate": args.ablate}
    cfg = RunConfig.from_file(args.config, overrides)
    if not cfg.out_dir:
        raise ConfigError("no output directory (set out_dir or pass --out)")
    manifest = cfg.load_manifest()
    if manifest.height != cfg.model.height or manifest.width != cfg.model.width:
        raise ConfigError(
            f"manifest geometry {manifest.height}x{manifest.width} does not "
            f"match model {cfg.model.height}x{cfg.model.width}"
        )
    if manifest.num_classes != cfg.model.num_classes:
        raise ConfigError("manifest and model disagree on num_classes")

    os.makedirs(cfg.out_dir, exist_ok=True)
    with _Lock(cfg.out_dir):
        cfg.snapshot(os.path.join(cfg.out_dir, "config.cfg"))
        train_samples = gen_texture_dataset(manifest, "train")
        test_samples = gen_texture_dataset(manifest, "test")
        eval_samples = test_samples[: cfg.eval_subset]
        model = _build_from_config(cfg)
        print(f"model: {model.param_count()} parameters, "
              f"ablate={','.join(cfg.ablate) if cfg.ablate else 'none'}")

        metrics_path = os.path.join(cfg.out_dir, "metrics.jsonl")
        loss_cfg = LossConfig(gamma=cfg.gamma).validate()
        opt = SgdConfig(lr=cfg.lr, momentum=cfg.momentum,
                        weight_decay=cfg.weight_decay)
        rng_tag = np.random.default_rng(cfg.seed).bit_generator.state

        def checkpoint_to(path, state, epoch):
            save_checkpoint(path, cfg.model, dict(model.named_parameters()),
                            velocities=dict(zip(
                                (n for n, _ in model.named_parameters()),
                                state.velocities)),
                            epoch=epoch, rng_state=rng_tag)

        with open(metrics_path, "w") as metrics_fh:
            def on_epoch(record, state):
                metrics_fh.write(json.dumps(record, sort_keys=True) + "\n")
                metrics_fh.flush()
                epoch = record["epoch"]
                checkpoint_to(os.path.join(cfg.out_dir, "checkpoint_last.lpck"),
                              state, epoch)
                if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                    checkpoint_to(
                        os.path.join(cfg.out_dir, f"checkpoint_{epoch:03d}.lpck"),
                        state, epoch)
                print(json.dumps(record, sort_keys=True))

            try:
                records = train_model(
                    model, train_samples, epochs=cfg.epochs, opt=opt,
                    loss_cfg=loss_cfg, batch_size=cfg.batch_size,
                    seed=cfg.seed + 1, eval_samples=eval_samples,
                    on_epoch=on_epoch)
            except NonFiniteLossError as exc:
                print(f"error: {exc}; last good checkpoint retained",
                      file=sys.stderr)
                return 4

        final = os.path.join(cfg.out_dir, "checkpoint_final.lpck")
        save_checkpoint(final, cfg.model, dict(model.named_parameters()),
                        epoch=len(records), rng_state=rng_tag)
        print(f"done: {final}")
    return 0


def cmd_eval(args) -> int:
    cfg = RunConfig.from_file(args.config, {"ablate": args.ablate})
    if not os.path.isfile(args.checkpoint):
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    ck = load_checkpoint(args.checkpoint)
    model = _build_from_config(cfg)
    restore_into(model, ck.params)   # raises with the offending name on mismatch
    manifest = cfg.load_manifest()
    samples = gen_texture_dataset(manifest, args.split)
    result = evaluate(model, samples, loss_cfg=LossConfig(gamma=cfg.gamma))
    result["split"] = args.split
    result["n_samples"] = len(samples)
    text = json.dumps(result, sort_keys=True)
    print(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    return 0


def cmd_spectra(args) -> int:
    cfg = RunConfig.from_file(args.config)
    manifest = cfg.load_manifest()
    batch = [s.image for s in
             gen_texture_dataset(manifest, "test")[: cfg.spectra_samples]]
    os.makedirs(args.out, exist_ok=True)
    for tag, path in (("model_a", args.checkpoint_a), ("model_b", args.checkpoint_b)):
        if not os.path.isfile(path):
            raise ConfigError(f"checkpoint not found: {path}")
        model = build_model(load_checkpoint(path))
        report = layerwise_probe(model, batch, cutoff=args.cutoff, tag=tag)
        report_path = os.path.join(args.out, f"{tag}_report.csv")
        write_report_csv(report, report_path)
        write_radial_csvs(report, args.out, tag)
        last = report.rows[-1]
        print(f"{tag}: {len(report.rows)} layers, "
              f"last-layer retention ratio {last.ratio:.6f} -> {report_path}")
    return 0


def _parse_sigmas(text) -> GaussianSpec:
    try:
        return GaussianSpec(tuple(float(s) for s in text.split(",") if s.strip()))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_pyramid_dump(args) -> int:
    spec = _parse_sigmas(args.sigmas)
    if not os.path.isfile(args.input):
        raise ConfigError(f"input not found: {args.input}")
    arr = load_input_tensor(args.input)
    os.makedirs(args.out, exist_ok=True)
    stack = build_pyramid(_wrap(arr, False), spec)
    for i, band in enumerate(stack.bands):
        path = os.path.join(args.out, f"band_{i:02d}.lpt")
        save_tensor(path, band.data)
        print(f"band {i}: shape {band.shape} -> {path}")
    path = os.path.join(args.out, "residual.lpt")
    save_tensor(path, stack.residual.data)
    print(f"residual: shape {stack.residual.shape} -> {path}")
    return 0


def cmd_attn_probe(args) -> int:
    spec = _parse_sigmas(args.sigmas)
    if args.input:
        if not os.path.isfile(args.input):
            raise ConfigError(f"input not found: {args.input}")
        arr = load_input_tensor(args.input)
    else:
        try:
            h, w, c = (int(v) for v in args.shape.split(","))
        except ValueError as exc:
            raise ConfigError(f"--shape must be H,W,C: {exc}") from exc
        arr = np.random.default_rng(args.seed).normal(
            size=(h, w, c)).astype(np.float32)
    h, w, c = arr.shape
    if c % args.heads:
        raise ConfigError(f"channels {c} not divisible by {args.heads} heads")
    rng = np.random.default_rng(args.seed)
    params = AttentionParams(rng, c, args.heads, spec.levels + 1)
    x = _wrap(arr.astype(np.float32), False)
    flat = ops.reshape(x, (h * w, c))
    ctx_e = efficient_context(params.w_k(flat), params.w_v(flat), params.heads)
    ctx_f = frequency_context(x, params, spec)
    q = params.w_q(flat)
    e = apply_query(q, ctx_e, params.heads)
    f = apply_query(q, ctx_f, params.heads)
    fused = fuse(params.fusion, e, f)
    os.makedirs(args.out, exist_ok=True)
    for name, t in (("efficient", e), ("frequency", f), ("fused", fused),
                    ("context_efficient", ctx_e), ("context_frequency", ctx_f)):
        path = os.path.join(args.out, f"{name}.lpt")
        save_tensor(path, t.data)
        print(f"{name}: shape {t.shape} -> {path}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lapseg",
        description="Train, evaluate and analyse the pyramid-attention "
                    "segmentation model.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="materialise a synthetic texture dataset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="override out_dir")
    p.add_argument("--ablate", default=None,
                   help=f"comma list of {', '.join(ABLATIONS)} or 'none'")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--out", default=None, help="also write the JSON here")
    p.add_argument("--ablate", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("spectra",
                       help="frequency-retention report for two checkpoints")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint-a", required=True)
    p.add_argument("--checkpoint-b", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cutoff", type=float, default=0.5)
    p.set_defaults(func=cmd_spectra)

    p = sub.add_parser("pyramid-dump",
                       help="write each pyramid band/residual of an input")
    p.add_argument("--input", required=True, help=".lpt tensor or 8-bit PNG")
    p.add_argument("--out", required=True)
    p.add_argument("--sigmas", default="1,2,4")
    p.set_defaults(func=cmd_pyramid_dump)

    p = sub.add_parser("attn-probe",
                       help="dump attention branch outputs and contexts")
    p.add_argument("--input", default=None, help=".lpt tensor or 8-bit PNG")
    p.add_argument("--shape", default="16,16,8", help="H,W,C for a random input")
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--sigmas", default="1,2,4")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attn_probe)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataError, CheckpointError, TensorIOError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

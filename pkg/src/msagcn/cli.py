"""Command-line entry point.

Subcommands: train, eval, predict, gradcheck, ablate, synth.  Runs are
driven by a single TOML config file with flag overrides (flags beat the
file, the file beats built-in defaults).  stdout carries machine-readable
JSON only; diagnostics go to stderr.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_CONFIG_SECTIONS = ("model", "train", "data", "synth")
_DATA_KEYS = {"path", "synthetic", "synth_seed", "frames", "noise_sigma",
              "heading_range", "jitter", "joint_count"}
_SYNTH_KEYS = {"n_per_class", "seed", "frames", "noise_sigma",
               "heading_range", "jitter"}


def _load_toml(path):
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _load_config(path):
    """Parse and validate the run config file; {} when no file given."""
    from .graphs import ConfigurationError

    if path is None:
        return {}
    try:
        raw = _load_toml(path)
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}")
    except Exception as exc:  # tomllib.TOMLDecodeError has no stable home
        raise ConfigurationError(f"cannot parse {path}: {exc}")
    unknown = set(raw) - set(_CONFIG_SECTIONS)
    if unknown:
        raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")
    for section, allowed in (("data", _DATA_KEYS), ("synth", _SYNTH_KEYS)):
        extra = set(raw.get(section, {})) - allowed
        if extra:
            raise ConfigurationError(
                f"unknown keys in [{section}]: {sorted(extra)}"
            )
    return raw


def _model_config(raw, args):
    from .model import MsaGcnConfig

    return MsaGcnConfig.from_dict(raw.get("model", {}))


def _train_config(raw, args):
    from .training import TrainConfig

    d = dict(raw.get("train", {}))
    if getattr(args, "epochs", None) is not None:
        d["epochs"] = args.epochs
        d["decay_epochs"] = [e for e in d.get("decay_epochs", (200, 300, 350))
                             if e < args.epochs]
    if args.seed is not None:
        d["seed"] = args.seed
    return TrainConfig.from_dict(d)


def _synth_params(section, seed_override):
    from .data import SynthParams

    kwargs = {k: v for k, v in section.items() if k != "n_per_class"}
    if seed_override is not None:
        kwargs["seed"] = seed_override
    return int(section.get("n_per_class", 25)), SynthParams(**kwargs)


def _load_dataset(raw, args):
    """Dataset from --data / [data].path, or the configured generator."""
    from . import data as D
    from .graphs import ConfigurationError

    section = dict(raw.get("data", {}))
    path = args.data or section.get("path")
    if path:
        return D.load_canonical(path)
    if "synthetic" in section:
        n = int(section["synthetic"])
        kwargs = {k: section[k] for k in
                  ("frames", "noise_sigma", "heading_range", "jitter")
                  if k in section}
        seed = args.seed if args.seed is not None else section.get("synth_seed", 0)
        return D.generate_synthetic(n, D.SynthParams(seed=seed, **kwargs))
    raise ConfigurationError(
        "no dataset: pass --data PATH or set [data].path / [data].synthetic"
    )


def _emit(obj):
    json.dump(obj, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def _note(msg):
    print(msg, file=sys.stderr)


def _build_model(model_cfg, joint_count, seed):
    from .graphs import default_pyramid
    from .model import build

    pyramid = default_pyramid(joint_count, num_scales=max(model_cfg.scales) + 1)
    return build(model_cfg, pyramid, seed=seed)


def _split_arrays(dataset, train_cfg):
    from .data import dataset_arrays
    from .training import split_dataset

    tr, va, te = split_dataset(dataset.samples, seed=train_cfg.seed,
                               ratios=train_cfg.split)
    out = []
    for part in (tr, va, te):
        if part:
            out.append(dataset_arrays(part))
        else:
            out.append((None, None))
    return out


def _run_training(raw, args, model_cfg, train_cfg, out_dir):
    from .model import save_checkpoint
    from .training import evaluate, train

    dataset = _load_dataset(raw, args)
    (xtr, ytr), (xva, yva), (xte, yte) = _split_arrays(dataset, train_cfg)
    seed = args.seed if args.seed is not None else train_cfg.seed
    model = _build_model(model_cfg, dataset.joint_count, seed)

    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "log.jsonl")
    if xva is None:
        xva, yva = xtr, ytr
    log, best = train(model, xtr, ytr, xva, yva, train_cfg, log_path=log_path,
                      progress=lambda e: _note(
                          f"epoch {e['epoch']} loss {e['train_loss']:.4f} "
                          f"val mAP {e['val_mAP']:.3f}"))
    if xte is None:
        xte, yte = xtr, ytr
        _note("test split empty, reporting on the training split")
    report = evaluate(model, xte, yte)

    ckpt_path = os.path.join(out_dir, "model.ckpt")
    save_checkpoint(model, ckpt_path)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump({"model": model_cfg.to_dict(), "train": train_cfg.to_dict()},
                  fh, indent=2, sort_keys=True)
    metrics = {"best_val_mAP": best, "test": report.to_dict()}
    with open(os.path.join(out_dir, "metrics.json"), "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
    return {"out": out_dir, "checkpoint": ckpt_path, **metrics}


def cmd_train(args):
    raw = _load_config(args.config)
    model_cfg = _model_config(raw, args)
    train_cfg = _train_config(raw, args)
    result = _run_training(raw, args, model_cfg, train_cfg,
                           args.out or "msagcn-run")
    _emit(result)
    return EXIT_OK


def cmd_eval(args):
    from .data import dataset_arrays, load_canonical
    from .graphs import ConfigurationError
    from .model import load_checkpoint
    from .training import evaluate

    if not args.checkpoint:
        raise ConfigurationError("eval requires --checkpoint")
    if not args.data:
        raise ConfigurationError("eval requires --data")
    model = load_checkpoint(args.checkpoint)
    dataset = load_canonical(args.data)
    if dataset.joint_count != model.pyramid.scales[0].vertex_count:
        raise ConfigurationError(
            f"checkpoint expects {model.pyramid.scales[0].vertex_count} joints, "
            f"dataset has {dataset.joint_count}"
        )
    x, y = dataset_arrays(dataset.samples)
    report = evaluate(model, x, y)
    out = report.to_dict()
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "metrics.json"), "w") as fh:
            json.dump(out, fh, indent=2, sort_keys=True)
    _emit(out)
    return EXIT_OK


def cmd_predict(args):
    from .data import LABELS, dataset_arrays, load_canonical
    from .graphs import ConfigurationError
    from .model import load_checkpoint
    from .training import predict_proba

    if not args.checkpoint:
        raise ConfigurationError("predict requires --checkpoint")
    if not args.data:
        raise ConfigurationError("predict requires --data")
    model = load_checkpoint(args.checkpoint)
    dataset = load_canonical(args.data)
    x, _ = dataset_arrays(dataset.samples)
    proba = predict_proba(model, x)
    out = [
        {
            "id": sample.id,
            "label": LABELS[int(p.argmax())],
            "proba": {name: float(v) for name, v in zip(LABELS, p)},
        }
        for sample, p in zip(dataset.samples, proba)
    ]
    _emit(out)
    return EXIT_OK


def cmd_gradcheck(args):
    import numpy as np

    from . import layers as L
    from . import tensor as T
    from .gradcheck import REL_TOL, grad_check
    from .graphs import default_pyramid
    from .model import MsaGcnConfig, StageConfig, build
    from .training import cross_entropy

    seed0 = args.seed if args.seed is not None else 0
    pyramid = default_pyramid(16, num_scales=2)
    g16 = pyramid.scales[0]

    def scalar(y):
        return T.mean(y, axes=tuple(range(y.ndim)))

    def check(make, seeds=3):
        worst = 0.0
        for s in range(seed0, seed0 + seeds):
            rng = np.random.default_rng(1000 + s)
            f, params = make(rng, s)
            worst = max(worst, grad_check(f, params, samples_per_param=3, seed=s))
        return worst

    def mk_gcn(rng, s):
        m = L.GcnLayer(3, 4, g16, np.random.default_rng(s))
        x = T.Tensor(rng.normal(size=(2, 3, 6, 16)), requires_grad=True)
        return (lambda: scalar(m.forward(x))), [x] + m.trainable_parameters()

    def mk_astcn(rng, s):
        m = L.AsTcn(4, 5, 9, 1, np.random.default_rng(s))
        x = T.Tensor(rng.normal(size=(2, 4, 12, 5)), requires_grad=True)
        return (lambda: scalar(m.forward(x))), [x] + m.trainable_parameters()

    def mk_asst(rng, s):
        m = L.AsstGcnBlock(3, 4, g16, 2, (5, 9), np.random.default_rng(s))
        x = T.Tensor(rng.normal(size=(2, 3, 12, 16)), requires_grad=True)
        return (lambda: scalar(m.forward(x, training=True))), \
            [x] + m.trainable_parameters()

    def mk_csfm(rng, s):
        m = L.CsfmBlock(4, np.random.default_rng(s))
        xa = T.Tensor(rng.normal(size=(2, 4, 6, 16)), requires_grad=True)
        xb = T.Tensor(rng.normal(size=(2, 4, 6, 10)), requires_grad=True)
        return (lambda: scalar(m.forward(xa, xb))), \
            [xa, xb] + m.trainable_parameters()

    def mk_fusion(rng, s):
        m = L.ScaleAttentionFusion(4, 3, np.random.default_rng(s))
        xs = [T.Tensor(rng.normal(size=(2, 4, 6, 16)), requires_grad=True)
              for _ in range(3)]
        return (lambda: scalar(m.forward(xs))), xs + m.trainable_parameters()

    def mk_head(rng, s):
        m = L.ClassifierHead(4, 4, np.random.default_rng(s))
        x = T.Tensor(rng.normal(size=(2, 4, 6, 16)), requires_grad=True)
        return (lambda: scalar(m.forward(x))), [x] + m.trainable_parameters()

    def mk_end_to_end(rng, s):
        cfg = MsaGcnConfig(scales=(0, 1), stages=(StageConfig(4, 1, 1, 1),
                                                  StageConfig(8, 1, 0, 2)))
        m = build(cfg, pyramid, seed=s)
        x = T.Tensor(rng.normal(size=(2, 3, 12, 16)), requires_grad=True)
        labels = rng.integers(0, 4, size=2)
        return (lambda: cross_entropy(m.forward(x, training=True), labels)), \
            [x] + m.trainable_parameters()

    results = {}
    for name, mk in (("gcn", mk_gcn), ("astcn", mk_astcn), ("asst", mk_asst),
                     ("csfm", mk_csfm), ("fusion", mk_fusion), ("head", mk_head)):
        results[name] = check(mk)
        _note(f"{name}: {results[name]:.3e}")
    results["end_to_end"] = check(mk_end_to_end, seeds=5)
    _note(f"end_to_end: {results['end_to_end']:.3e}")

    worst = max(results.values())
    _emit({"max_rel_error": worst, "tolerance": REL_TOL, "per_check": results})
    return EXIT_OK if worst < REL_TOL else EXIT_NUMERIC


_SCALE_SUBSETS = ((0,), (0, 1), (0, 2), (0, 3), (0, 1, 2), (0, 1, 3),
                  (0, 2, 3), (0, 1, 2, 3))
_KERNEL_PAIRS = ((5, 7), (5, 9), (7, 9), (5, 25), (5, 75), (9, 25))
_CSFM_LEVELS = (0, 1, 2, 3, 4)


def _ablation_cells(axis, base):
    from .graphs import ConfigurationError
    from .model import MsaGcnConfig, StageConfig

    base_dict = base.to_dict()
    if axis == "scales":
        for scales in _SCALE_SUBSETS:
            d = dict(base_dict, scales=list(scales))
            yield {"scales": list(scales)}, MsaGcnConfig.from_dict(d)
    elif axis == "kernels":
        for pair in _KERNEL_PAIRS:
            d = dict(base_dict, kernel_pair=list(pair))
            yield {"kernel_pair": list(pair)}, MsaGcnConfig.from_dict(d)
    elif axis == "csfm-levels":
        for level in _CSFM_LEVELS:
            stages = []
            for i, s in enumerate(base.stages):
                stages.append(StageConfig(
                    channels=s.channels, asst_blocks=s.asst_blocks,
                    csfm_blocks=1 if i < level else 0, stride=s.stride,
                ))
            d = dict(base_dict, stages=[s.to_dict() for s in stages])
            yield {"csfm_levels": level}, MsaGcnConfig.from_dict(d)
    else:
        raise ConfigurationError(
            f"unknown ablation axis {axis!r}; "
            "expected scales, csfm-levels, or kernels"
        )


def cmd_ablate(args):
    from .graphs import ConfigurationError
    from .training import evaluate, train

    if not args.axis:
        raise ConfigurationError("ablate requires --axis")
    raw = _load_config(args.config)
    base = _model_config(raw, args)
    train_cfg = _train_config(raw, args)
    dataset = _load_dataset(raw, args)
    (xtr, ytr), (xva, yva), (xte, yte) = _split_arrays(dataset, train_cfg)
    if xva is None:
        xva, yva = xtr, ytr
    if xte is None:
        xte, yte = xtr, ytr
    seed = args.seed if args.seed is not None else train_cfg.seed

    cells = []
    for tag, cfg in _ablation_cells(args.axis, base):
        _note(f"ablate {tag}")
        model = _build_model(cfg, dataset.joint_count, seed)
        _, best = train(model, xtr, ytr, xva, yva, train_cfg)
        report = evaluate(model, xte, yte)
        cells.append({**tag, "best_val_mAP": best, "test": report.to_dict()})
        _note(f"  test mAP {report.mAP:.3f}")

    result = {"axis": args.axis, "cells": cells}
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, f"ablation-{args.axis}.json"), "w") as fh:
            json.dump(result, fh, indent=2, sort_keys=True)
    _emit(result)
    return EXIT_OK


def cmd_synth(args):
    from .data import generate_synthetic, save_canonical
    from .graphs import ConfigurationError

    if not args.out:
        raise ConfigurationError("synth requires --out FILE")
    raw = _load_config(args.config)
    n, params = _synth_params(dict(raw.get("synth", {})), args.seed)
    dataset = generate_synthetic(n, params)
    parent = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(parent, exist_ok=True)
    save_canonical(dataset, args.out)
    _emit({"out": args.out, "samples": len(dataset.samples),
           "per_class": dataset.class_histogram()})
    return EXIT_OK


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="msagcn",
        description="Gait emotion recognition on skeleton sequences.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "train": cmd_train,
        "eval": cmd_eval,
        "predict": cmd_predict,
        "gradcheck": cmd_gradcheck,
        "ablate": cmd_ablate,
        "synth": cmd_synth,
    }
    for name, fn in commands.items():
        p = sub.add_parser(name)
        p.add_argument("--config", metavar="PATH")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", metavar="DIR")
        p.add_argument("--data", metavar="PATH")
        p.add_argument("--checkpoint", metavar="PATH")
        p.add_argument("--epochs", type=int)
        p.add_argument("--axis", metavar="NAME")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None):
    threads = os.environ.get("MSAGCN_NUM_THREADS")
    if threads:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)

    args = _build_parser().parse_args(argv)

    from . import data as D
    from . import tensor as T
    from .graphs import ConfigurationError, TopologyError
    from .model import CheckpointCorruptError, CheckpointFormatError
    from .training import TrainingDivergedError

    try:
        return args.fn(args)
    except (ConfigurationError, TopologyError, CheckpointFormatError,
            ValueError) as exc:
        if isinstance(exc, (D.ParseError, D.DatasetError, D.LabelError,
                            CheckpointCorruptError)):
            _note(f"data error: {exc}")
            return EXIT_DATA
        _note(f"config error: {exc}")
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        _note(f"data error: {exc}")
        return EXIT_DATA
    except (T.NumericError, TrainingDivergedError, FloatingPointError) as exc:
        _note(f"numeric failure: {exc}")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

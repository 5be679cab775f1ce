"""Command-line entry point: ``ftl {train,eval,sweep,audit,datagen}``.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 audit failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import platform
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .config import (RunConfig, load_config_file, load_family, load_triples, loss_function, model_config,
                     resolve_config)
from .data import export_dataset, warp
from .errors import (CheckpointError, ConfigError, DegenerateBatchError, DimensionError, DomainError,
                     FormatError, FTLError, ParameterError)
from .evaluation import (EvalReport, check_grid, config_hash, emit_report, evaluate_classifier,
                         plain_reconstruction_error, stability_sweep, transformed_reconstruction_error)
from .network import ClassifierHead, EncoderDecoder, HeadConfig, load_checkpoint, save_checkpoint
from .optim import Adam
from .tensor import no_grad
from .train import TrainHistory, TrainSettings, train
from .transform import (AUDIT_THRESHOLDS, audit_homomorphism, face_family, mnist_family, planar_family,
                        rotation_family)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_AUDIT = 0, 1, 2, 3

AUDIT_FAMILIES = {
    "mnist": mnist_family,
    "face": face_family,
    "desk": lambda: planar_family(5),
    "rotation": lambda: rotation_family(15),
}


class UsageError(FTLError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def configure_threads(env=os.environ) -> int | None:
    """Apply FTL_THREADS to the BLAS pool when threadpoolctl is available."""
    raw = env.get("FTL_THREADS")
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"FTL_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"FTL_THREADS must be a positive integer, got {raw!r}")
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return n
    threadpool_limits(n)
    return n


def parse_grid(text: str) -> list[float]:
    parts = text.split(":")
    if len(parts) != 3:
        raise UsageError(f"--grid expects 'a:b:n', got {text!r}")
    try:
        a, b, n = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError:
        raise UsageError(f"--grid expects numbers 'a:b:n', got {text!r}") from None
    if n < 1:
        raise UsageError(f"--grid needs n >= 1, got {n}")
    if n > 1 and not b > a:
        raise UsageError(f"--grid needs a < b when n > 1, got {text!r}")
    return [a] if n == 1 else [float(v) for v in np.linspace(a, b, n)]


def run_info(command: str, seed: int, threads: int | None) -> dict:
    return {
        "command": command,
        "seed": seed,
        "ftl_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "threads": threads,
    }


def _dump(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _echo_doc(cfg: RunConfig) -> dict:
    # the output directory is where this file lives; leaving it out keeps
    # reruns into different directories byte-identical
    doc = cfg.to_json()
    doc.pop("out")
    return doc


def _start_run(out: Path, config_doc: dict, info: dict) -> None:
    """Echo the resolved config and run info to stdout and the run directory."""
    print(json.dumps({"resolved_config": config_doc, "run": info}, sort_keys=True))
    out.mkdir(parents=True, exist_ok=True)
    _dump(out / "resolved_config.json", config_doc)
    _dump(out / "run_info.json", info)


def write_pgm(path: Path, image: np.ndarray) -> None:
    """8-bit binary portable graymap; values in [0, 1] map to 0..255."""
    img = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h = int(tokens[1]), int(tokens[2])
    return np.frombuffer(raw[pos + 1 : pos + 1 + w * h], dtype=np.uint8).reshape(h, w) / 255.0


def _overrides(args, names: dict[str, str]) -> dict:
    out: dict = {}
    for attr, dotted in names.items():
        value = getattr(args, attr, None)
        if value is None:
            continue
        node = out
        *head, leaf = dotted.split(".")
        for key in head:
            node = node.setdefault(key, {})
        node[leaf] = value
    return out


def _resolve(args, extra: dict | None = None) -> RunConfig:
    doc = load_config_file(args.config) if args.config else {}
    overrides = extra or {}
    if args.preset is not None:
        overrides["preset"] = args.preset
    if args.out is not None:
        overrides["out"] = args.out
    return resolve_config(doc, overrides)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

TRAIN_FLAGS = {"lr": "optimizer.lr", "epochs": "epochs", "batch": "batch", "iterations": "iterations",
               "alpha": "loss.alpha", "gamma": "loss.gamma", "reg_weight": "loss.reg_weight",
               "loss": "loss.kind", "seed": "seed"}


def history_csv(history: TrainHistory) -> str:
    lines = [",".join(TrainHistory.COLUMNS)]
    for row in history.rows:
        lines.append(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c])
                              for c in TrainHistory.COLUMNS))
    return "\n".join(lines) + "\n"


def cmd_train(args, threads) -> int:
    extra = _overrides(args, TRAIN_FLAGS)
    if args.reg_weight is not None:
        extra.setdefault("loss", {})["regularize"] = True
    cfg = _resolve(args, extra)
    mcfg = model_config(cfg)
    model = EncoderDecoder(mcfg, seed=cfg.seed)
    triples = load_triples(cfg.dataset, model.family, mcfg.input_shape)
    head = None
    if cfg.loss.classify:
        if (triples.label < 0).any():
            raise FormatError("classification requested but the dataset has unlabeled items")
        classes = int(triples.label.max()) + 1
        head = ClassifierHead(HeadConfig(in_dim=model.family.signature_dim, classes=max(classes, 2)),
                              seed=cfg.seed)
    loss_fn = loss_function(cfg)
    out = Path(cfg.out)
    doc = _echo_doc(cfg)
    _start_run(out, doc, run_info("train", cfg.seed, threads))

    params = model.parameters() + (head.parameters() if head is not None else [])
    opt = Adam(params, lr=cfg.optimizer.lr, beta1=cfg.optimizer.beta1, beta2=cfg.optimizer.beta2)
    extra_doc = {"run_config": doc}

    def on_step(step: int) -> None:
        if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            (out / "checkpoints").mkdir(exist_ok=True)
            save_checkpoint(out / "checkpoints" / f"step_{step:07d}.ftl", model, head, opt.state, cfg.seed,
                            step, extra_doc)

    settings = TrainSettings(lr=cfg.optimizer.lr, beta1=cfg.optimizer.beta1, beta2=cfg.optimizer.beta2,
                             batch=cfg.batch, epochs=cfg.epochs, iterations=cfg.iterations,
                             milestones=tuple(cfg.optimizer.milestones),
                             reg_weight=cfg.loss.reg_weight if cfg.loss.regularize else 0.0,
                             class_weight=cfg.loss.class_weight, log_every=cfg.log_every, seed=cfg.seed)
    history = train(model, triples, loss_fn, settings, head=head, optimizer=opt, on_step=on_step)
    (out / "loss_history.csv").write_text(history_csv(history))
    save_checkpoint(out / "checkpoint.ftl", model, head, opt.state, cfg.seed, history.steps, extra_doc)
    final = transformed_reconstruction_error(model, triples, loss_fn)
    summary = {"steps": history.steps, "final_loss": final["mean"], "identity_baseline": final["baseline_mean"],
               "config_hash": config_hash(doc)}
    _dump(out / "train_summary.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _checkpoint_config(args, ckpt) -> RunConfig:
    """Eval/sweep config: the training run's config, then file, then flags."""
    base = ckpt.extra.get("run_config", {})
    doc = load_config_file(args.config) if args.config else {}
    if base:
        preset = doc.get("preset", base.get("preset"))
        merged = {k: v for k, v in base.items() if k != "preset"}
        merged.update({k: v for k, v in doc.items() if k != "preset"})
        if preset is not None:
            merged["preset"] = preset
        doc = merged
    overrides = {}
    if args.out is not None:
        overrides["out"] = args.out
    if args.preset is not None:
        overrides["preset"] = args.preset
    if getattr(args, "seed", None) is not None:
        overrides["dataset"] = {"seed": args.seed}
    cfg = resolve_config(doc, overrides)
    family = load_family(cfg.family)
    if family is not None and family.to_json() != ckpt.model.family.to_json():
        raise ConfigError("incompatible family: the config's transform family differs from the checkpoint's")
    return cfg


def cmd_eval(args, threads) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = _checkpoint_config(args, ckpt)
    model = ckpt.model
    triples = load_triples(cfg.dataset, model.family, model.config.input_shape)
    loss_fn = loss_function(cfg)
    out = Path(cfg.out)
    doc = _echo_doc(cfg)
    h = config_hash(doc)
    _start_run(out, doc, run_info("eval", cfg.dataset.seed, threads))
    result = transformed_reconstruction_error(model, triples, loss_fn)
    report = EvalReport(run_id=f"eval-{h}-{cfg.dataset.seed}", seed=cfg.dataset.seed, preset=cfg.preset,
                        config_hash=h)
    report.add_metric("transformed_loss", result["mean"])
    report.add_metric("identity_baseline_loss", result["baseline_mean"])
    ratio = result["mean"] / result["baseline_mean"] if result["baseline_mean"] > 0 else None
    report.add_metric("transformed_to_baseline_ratio", ratio)
    report.add_metric("plain_reconstruction_loss", plain_reconstruction_error(model, triples.x, loss_fn))
    report.add_metric("item_count", len(triples))
    with (out / "per_item.csv").open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index", "model_loss", "baseline_loss"])
        for row in result["rows"]:
            writer.writerow([row["index"], repr(row["model"]), repr(row["baseline"])])
    report.artifacts.append("per_item.csv")
    if ckpt.head is not None and len(triples) and (triples.label >= 0).all():
        metrics = evaluate_classifier(model, ckpt.head, triples.x, triples.label,
                                      classes=ckpt.head.config.classes, features=ckpt.head.config.features)
        for key in ("accuracy", "error", "confusion"):
            report.add_metric(f"classifier_{key}", metrics[key])
    emit_report(report, out)
    print(json.dumps({k: v["value"] for k, v in report.metrics.items() if k != "classifier_confusion"},
                     sort_keys=True))
    return EXIT_OK


def cmd_sweep(args, threads) -> int:
    if not args.dof:
        raise UsageError("sweep needs --dof")
    if not args.grid:
        raise UsageError("sweep needs --grid a:b:n")
    grid = parse_grid(args.grid)
    ckpt = load_checkpoint(args.checkpoint)
    cfg = _checkpoint_config(args, ckpt)
    model = ckpt.model
    family = model.family
    if args.dof not in family.names:
        raise ConfigError(f"unknown dof {args.dof!r}; the checkpoint family has {family.names}")
    check_grid(family, args.dof, grid)
    if args.inputs < 2:
        raise UsageError("--inputs must be at least 2 (the stability curve compares identities)")
    spec = cfg.dataset
    spec.count = args.inputs
    triples = load_triples(spec, family, model.config.input_shape)
    images, frames = triples.x[: args.inputs], triples.frame[: args.inputs]
    out = Path(cfg.out)
    doc = _echo_doc(cfg)
    h = config_hash(doc)
    info = run_info("sweep", spec.seed, threads)
    info.update({"dof": args.dof, "grid": grid})
    _start_run(out, doc, info)

    identity = family.identity_params()
    img_dir = out / "images"
    img_dir.mkdir(exist_ok=True)
    rows = []
    with no_grad():
        for i, img in enumerate(images):
            batch = np.repeat(img[None], len(grid), axis=0)
            decoded = model.forward_transformed(batch, [identity.replace(**{args.dof: g}) for g in grid]).data
            for j, frame in enumerate(decoded):
                write_pgm(img_dir / f"input{i:03d}_value{j:03d}.pgm", frame)
            rows.append(np.concatenate(list(decoded), axis=1))
    write_pgm(out / "montage.pgm", np.concatenate(rows, axis=0))

    report = EvalReport(run_id=f"sweep-{h}-{spec.seed}", seed=spec.seed, preset=cfg.preset, config_hash=h)
    for metric in ("cosine", "l2"):
        report.curves.append(stability_sweep(model, family, images, args.dof, grid, metric, frames=frames))
    report.add_metric("grid", grid)
    report.add_metric("inputs", int(len(images)))
    report.artifacts.extend(["montage.pgm", "images/"])
    emit_report(report, out)
    return EXIT_OK


def cmd_audit(args, threads) -> int:
    if args.trials < 1:
        raise UsageError(f"--trials must be >= 1, got {args.trials}")
    name = args.family or "mnist"
    if name in AUDIT_FAMILIES:
        family = AUDIT_FAMILIES[name]()
    else:
        family = load_family(name)
    seed = 0 if args.seed is None else args.seed
    out = Path(args.out) if args.out else None
    doc = {"family": family.to_json(), "trials": args.trials, "seed": seed}
    if out is not None:
        _start_run(out, doc, run_info("audit", seed, threads))
    report = audit_homomorphism(family, args.trials, seed)
    result = report.to_json()
    result["thresholds"] = dict(AUDIT_THRESHOLDS)
    text = json.dumps(result, indent=2, sort_keys=True)
    print(text)
    if out is not None:
        (out / "audit.json").write_text(text + "\n")
    return EXIT_OK if report.passed else EXIT_AUDIT


def cmd_datagen(args, threads) -> int:
    extra = {}
    if args.seed is not None:
        extra["dataset"] = {"seed": args.seed}
    if args.count is not None:
        extra.setdefault("dataset", {})["count"] = args.count
    cfg = _resolve(args, extra)
    if cfg.dataset.kind == "dir":
        raise ConfigError("config field 'dataset.kind': datagen writes datasets, it cannot read one")
    mcfg = model_config(cfg)
    family = mcfg.family
    out = Path(cfg.out)
    doc = _echo_doc(cfg)
    triples = load_triples(cfg.dataset, family, mcfg.input_shape)
    _start_run(out, doc, run_info("datagen", cfg.dataset.seed, threads))
    ranges = {d.name: ([0.0, 2.0 * np.pi] if d.kind == "circle" else [d.lo, d.hi]) for d in family.dofs}
    meta = {"seed": cfg.dataset.seed, "resolution": list(mcfg.input_shape), "spec": asdict(cfg.dataset),
            "dof_ranges": ranges}
    manifest = export_dataset(out, triples, family, meta)
    print(json.dumps({"count": manifest["count"], "dir": str(out)}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ftl", description="Feature-transforming autoencoders: train, evaluate, sweep, audit.")
    parser.add_argument("--version", action="version", version=f"ftl {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--preset", help="named run preset")

    p = sub.add_parser("train", help="train an encoder/decoder")
    common(p)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--loss", choices=("l1", "face", "bce"))
    p.add_argument("--alpha", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--reg-weight", type=float, dest="reg_weight")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("sweep", help="decode a one-dof sweep and measure stability")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dof")
    p.add_argument("--grid", help="a:b:n, n evenly spaced values from a to b")
    p.add_argument("--inputs", type=int, default=10, help="number of input images")

    p = sub.add_parser("audit", help="check the transform algebra numerically")
    p.add_argument("--family", help=f"family JSON file or inline JSON, or one of {sorted(AUDIT_FAMILIES)}")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = sub.add_parser("datagen", help="write a synthetic triple dataset")
    common(p)
    p.add_argument("--count", type=int)
    return parser


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "audit": cmd_audit, "datagen": cmd_datagen}


def main(argv=None) -> int:
    try:
        threads = configure_threads()
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("choose a subcommand: " + ", ".join(COMMANDS))
        return COMMANDS[args.command](args, threads)
    except (UsageError, ConfigError, DomainError, ParameterError) as exc:
        print(f"ftl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, CheckpointError, DimensionError, DegenerateBatchError, OSError) as exc:
        print(f"ftl: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

"""``acan`` command line: synth, train, eval, gradcheck, confusion.

Exit codes: 0 success, 1 runtime or check failure, 2 usage/config error,
3 training divergence.

Options may also come from ``--config FILE``: either a flat ``key = value``
text file (``#`` starts a comment) or a run manifest JSON written by an
earlier invocation. Explicit flags win over the file, the file over defaults.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .core import DimensionError, load_model, save_model
from .data import DatasetError, SynthConfig, file_digest, generate_synthetic, load_csv, metadata_path, save_csv
from .evaluation import confusion_from_probs, evaluate, inter_camera_discrepancy, off_diagonal_uniformity
from .trainer import DivergenceError, TrainConfig, train

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _ints(text) -> list:
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    text = str(text).strip().strip("[]")
    return [int(v) for v in text.replace(",", " ").split()] if text else []


# name -> (type, default, help). Names double as config-file keys.
SYNTH_OPTIONS = {
    "out": (str, None, "dataset CSV to write (metadata goes next to it)"),
    "cameras": (int, 4, "number of cameras C"),
    "identities": (int, 32, "training identities per camera"),
    "per": (int, 8, "samples per identity per camera"),
    "dim": (int, 16, "feature dimension"),
    "shift": (float, 3.0, "norm of the per-camera translation"),
    "noise": (float, 0.5, "within-identity noise sigma"),
    "overlap": (int, 16, "evaluation identities seen by every camera"),
    "seed": (int, 7, "generator seed"),
}

TRAIN_OPTIONS = {
    "data": (str, None, "dataset CSV"),
    "out": (str, None, "model JSON to write"),
    "scheme": (str, None, "adversarial scheme: grl | oce | ace | none"),
    "lambda": (float, 1.0, "weight of the camera alignment term"),
    "margin": (float, 0.3, "triplet margin"),
    "P": (int, 32, "identities per PK batch"),
    "K": (int, 4, "samples per identity in a PK batch"),
    "adv_base": (int, 64, "camera-balanced batch base (quota = base // C)"),
    "epochs": (int, 300, "training epochs"),
    "lr": (float, 0.1, "initial learning rate"),
    "lr_decay_epochs": (_ints, "100,200", "epochs at which the learning rate decays"),
    "lr_decay_factor": (float, 0.1, "multiplicative learning-rate decay"),
    "seed": (int, 0, "training seed"),
    "hidden": (_ints, "64,64", "hidden layer widths of the extractor"),
    "embedding_dim": (int, 128, "embedding width (discriminator input)"),
    "log": (str, None, "training log path (default: <out stem>.log.jsonl)"),
    "checkpoint": (str, None, "also write a resumable checkpoint here"),
}

EVAL_OPTIONS = {
    "data": (str, None, "dataset CSV"),
    "model": (str, None, "model JSON"),
    "out": (str, None, "EvalReport JSON to write"),
    "split": (str, "test", "samples for discrepancy/confusion: test | train"),
    "max_rank": (int, 50, "length of the CMC curve"),
}

GRADCHECK_OPTIONS = {
    "seed": (int, 0, "base seed of the random instances"),
    "tol": (float, 1e-4, "relative error tolerance"),
    "instances": (int, 10, "random instances per operation"),
}

CONFUSION_OPTIONS = {
    "data": (str, None, "dataset CSV"),
    "model": (str, None, "model JSON"),
    "out": (str, None, "confusion matrix CSV to write"),
    "split": (str, "test", "samples to use: test | train"),
}

REQUIRED = {
    "synth": ("out",),
    "train": ("data", "scheme", "out"),
    "eval": ("data", "model", "out"),
    "gradcheck": (),
    "confusion": ("data", "model", "out"),
}

OPTIONS = {
    "synth": SYNTH_OPTIONS,
    "train": TRAIN_OPTIONS,
    "eval": EVAL_OPTIONS,
    "gradcheck": GRADCHECK_OPTIONS,
    "confusion": CONFUSION_OPTIONS,
}


def read_config_file(path) -> dict:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        doc = json.loads(text)
        return dict(doc.get("config", doc))
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def resolve(command: str, ns: argparse.Namespace) -> dict:
    """Merge flag > config file > default into one dict of typed values."""
    options = OPTIONS[command]
    from_file = read_config_file(ns.config) if ns.config else {}
    unknown = set(from_file) - set(options)
    if unknown:
        raise UsageError(f"unknown config keys for '{command}': {', '.join(sorted(unknown))}")
    cfg = {}
    for name, (typ, default, _) in options.items():
        flag = getattr(ns, name)
        value = flag if flag is not None else from_file.get(name, default)
        if value is not None:
            try:
                value = typ(value)
            except (TypeError, ValueError):
                raise UsageError(f"invalid value for {name}: {value!r}") from None
        cfg[name] = value
    missing = [n for n in REQUIRED[command] if cfg.get(n) is None]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")
    return cfg


def _stem_path(path, suffix: str) -> Path:
    p = Path(path)
    return p.with_name(p.stem + suffix)


def write_manifest(path, command: str, cfg: dict, **extra) -> None:
    doc = {"command": command, "version": __version__, "config": cfg, **extra}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


# -- commands ---------------------------------------------------------------------

def cmd_synth(cfg: dict) -> int:
    sc = SynthConfig(
        cameras=cfg["cameras"],
        identities_per_camera=cfg["identities"],
        samples_per_identity=cfg["per"],
        input_dim=cfg["dim"],
        identity_spread=cfg["noise"],
        camera_shift_scale=cfg["shift"],
        cross_camera_overlap=cfg["overlap"],
        seed=cfg["seed"],
    )
    try:
        sc.validate()
    except DatasetError as exc:
        raise UsageError(str(exc)) from None
    ds = generate_synthetic(sc)
    out = Path(cfg["out"])
    save_csv(ds, out)
    d_raw = inter_camera_discrepancy(ds.features, ds.cameras, ds.num_cameras)
    write_manifest(_stem_path(out, ".manifest.json"), "synth", cfg,
                   outputs={"data": str(out), "metadata": str(metadata_path(out))},
                   dataset_sha256=file_digest(out))
    counts = {s: int((ds.splits == s).sum()) for s in ("train", "query", "gallery")}
    print(f"wrote {out}: {len(ds)} samples, {ds.num_cameras} cameras, dim {ds.input_dim}; "
          f"train={counts['train']} query={counts['query']} gallery={counts['gallery']}; "
          f"d_inter_camera(raw)={d_raw:.6f}")
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    ds = load_csv(cfg["data"])
    tc = TrainConfig(
        scheme=cfg["scheme"],
        lam=cfg["lambda"],
        margin=cfg["margin"],
        P=cfg["P"],
        K=cfg["K"],
        adversarial_batch_base=cfg["adv_base"],
        epochs=cfg["epochs"],
        lr=cfg["lr"],
        lr_decay_epochs=tuple(cfg["lr_decay_epochs"]),
        lr_decay_factor=cfg["lr_decay_factor"],
        seed=cfg["seed"],
        hidden=tuple(cfg["hidden"]),
        embedding_dim=cfg["embedding_dim"],
    )
    try:
        tc.validate(ds)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(cfg["out"])
    log_path = Path(cfg["log"]) if cfg["log"] else _stem_path(out, ".log.jsonl")
    from .trainer import initial_state, save_checkpoint

    state = initial_state(ds, tc)
    try:
        net, log = train(ds, tc, state=state, log_path=log_path)
    except DivergenceError as exc:
        snap = _stem_path(out, ".diverged.json")
        with open(snap, "w", encoding="utf-8") as fh:
            json.dump(exc.snapshot, fh)
        print(f"error: {exc} (state written to {snap})", file=sys.stderr)
        return EXIT_DIVERGED
    save_model(net, out)
    outputs = {"model": str(out), "log": str(log_path)}
    if cfg["checkpoint"]:
        save_checkpoint(state, cfg["checkpoint"])
        outputs["checkpoint"] = cfg["checkpoint"]
    write_manifest(_stem_path(out, ".manifest.json"), "train", cfg, outputs=outputs,
                   dataset_sha256=file_digest(cfg["data"]), effective=tc.to_dict())
    last = log[-1]
    print(f"trained {tc.scheme.value} for {tc.epochs} epochs ({len(log)} iterations); "
          f"final triplet={last.triplet_loss:.6f} -> {out}")
    return EXIT_OK


def _load_pair(cfg):
    ds = load_csv(cfg["data"])
    net = load_model(cfg["model"])
    if net.input_dim != ds.input_dim or net.num_cameras != ds.num_cameras:
        raise UsageError(
            f"model expects input_dim={net.input_dim}, cameras={net.num_cameras}; "
            f"dataset has input_dim={ds.input_dim}, cameras={ds.num_cameras}"
        )
    return ds, net


def cmd_eval(cfg: dict) -> int:
    if cfg["split"] not in ("test", "train"):
        raise UsageError("--split must be test or train")
    if cfg["max_rank"] < 1:
        raise UsageError("--max-rank must be >= 1")
    ds, net = _load_pair(cfg)
    report = evaluate(net, ds, max_rank=cfg["max_rank"], split=cfg["split"])
    out = Path(cfg["out"])
    out.write_text(report.dumps(), encoding="utf-8")
    write_manifest(_stem_path(out, ".manifest.json"), "eval", cfg, outputs={"report": str(out)},
                   dataset_sha256=file_digest(cfg["data"]), model_sha256=file_digest(cfg["model"]))
    print(report.summary_line())
    return EXIT_OK


def cmd_gradcheck(cfg: dict) -> int:
    from .gradcheck import run_suite

    reports = run_suite(seed=cfg["seed"], tolerance=cfg["tol"], instances=cfg["instances"])
    for r in reports:
        print(r.line())
    ok = all(r.passed for r in reports)
    print(f"{sum(r.passed for r in reports)}/{len(reports)} operations passed")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_confusion(cfg: dict) -> int:
    if cfg["split"] not in ("test", "train"):
        raise UsageError("--split must be test or train")
    ds, net = _load_pair(cfg)
    from .core import forward_discriminator, forward_extractor

    idx = ds.test_indices() if cfg["split"] == "test" else ds.indices("train")
    emb, _ = forward_extractor(net, ds.features[idx])
    _, probs = forward_discriminator(net, emb)
    m = confusion_from_probs(probs, ds.cameras[idx], ds.num_cameras)
    score = off_diagonal_uniformity(m)
    out = Path(cfg["out"])
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(",".join(f"cam{j}" for j in range(m.shape[1])) + "\n")
        for row in m:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    write_manifest(_stem_path(out, ".manifest.json"), "confusion", cfg,
                   outputs={"confusion": str(out)}, off_diagonal_uniformity=score,
                   dataset_sha256=file_digest(cfg["data"]), model_sha256=file_digest(cfg["model"]))
    np.set_printoptions(precision=4, suppress=True)
    print(m)
    print(f"off_diagonal_uniformity={score:.6f}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "confusion": cmd_confusion,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="acan", description="Adversarial camera alignment on multi-camera data")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, options in OPTIONS.items():
        p = sub.add_parser(name, help=COMMANDS[name].__name__.replace("cmd_", ""))
        p.add_argument("--config", help="key = value file or a run manifest JSON")
        for opt, (typ, default, help_text) in options.items():
            flag = "--" + opt.replace("_", "-")
            kind = str if typ is _ints else typ
            p.add_argument(flag, dest=opt, type=kind, default=None,
                           help=f"{help_text} (default: {default})" if default is not None else help_text)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        cfg = resolve(ns.command, ns)
        return COMMANDS[ns.command](cfg)
    except UsageError as exc:
        print(f"acan {ns.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, DimensionError, ValueError) as exc:
        print(f"acan {ns.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"acan {ns.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

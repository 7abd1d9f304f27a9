"""Command-line entry point: ``metacvr <command> [flags]``.

Every command writes its artifacts plus one ``<command>.manifest.json`` into
``--out``. Inputs produced by an earlier command are checked against the
hashes in that command's manifest before use.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error,
3 provenance mismatch.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

from . import evalreport as ev
from .config import ConfigError, RunConfig, describe_keys, validate_config
from .experiment import evaluate, load_splits, similarity_banks
from .metric_ensemble import MetricKind
from .prototypes import PrototypeBank, build_bank
from .simgen import write_dataset
from .trainer import (CheckpointError, ModelCheckpoint, ProvenanceError, finetune_base,
                      load_checkpoint, save_checkpoint, train_base, train_meta)

log = logging.getLogger("metacvr")

COMMANDS = ("simulate", "train-base", "finetune-base", "build-prototypes", "train-meta",
            "evaluate", "proto-sim", "ablate-metrics")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_PROVENANCE = 0, 1, 2, 3


class UsageError(Exception):
    pass


# -- manifests -----------------------------------------------------------------------

def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def recorded_hash(path: Path) -> str | None:
    """Hash recorded for ``path`` by a manifest in the same directory, if any."""
    for manifest in sorted(path.parent.glob("*.manifest.json")):
        try:
            outputs = json.loads(manifest.read_text(encoding="utf-8")).get("outputs", {})
        except (OSError, ValueError):
            continue
        if path.name in outputs:
            return outputs[path.name]
    return None


def verified_input(path: Path) -> str:
    """Hash of an input file, checked against the manifest that produced it."""
    if not path.exists():
        raise UsageError(f"input not found: {path}")
    actual = sha256_file(path)
    expected = recorded_hash(path)
    if expected is not None and expected != actual:
        raise ProvenanceError(f"{path} does not match the hash recorded by its manifest "
                              f"({actual[:12]} != {expected[:12]})")
    return actual


def write_manifest(out: Path, command: str, cfg: RunConfig, inputs: dict[str, str],
                   outputs: list[Path], provenance: dict[str, str], started: float) -> Path:
    manifest = {
        "command": command,
        "config_path": cfg.source or None,
        "config": cfg.values,
        "seed": cfg["seed"],
        "inputs": inputs,
        "outputs": {p.name: sha256_file(p) for p in outputs},
        "provenance": provenance,
        "duration_s": round(time.time() - started, 3),
    }
    path = out / f"{command}.manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# -- commands ------------------------------------------------------------------------

def _need(args, name: str) -> Path:
    value = getattr(args, name)
    if value is None:
        raise UsageError(f"{args.command} requires --{name}")
    return Path(value[0] if isinstance(value, list) else value)


def _data_inputs(data: Path, names) -> dict[str, str]:
    return {str(data / f): verified_input(data / f) for f in ("schema.json",) + tuple(f"{n}.tsv" for n in names)}


def _load_ckpt(path: Path) -> tuple[ModelCheckpoint, str]:
    digest = verified_input(path)
    return load_checkpoint(path), digest


def _require_stage1(ckpt: ModelCheckpoint, path: Path) -> None:
    if ckpt.metadata.get("stage") != "1":
        raise ProvenanceError(f"{path} is not a stage-1 checkpoint (stage={ckpt.metadata.get('stage')})")


def cmd_simulate(args, cfg: RunConfig, out: Path):
    paths = write_dataset(out, cfg.sim_params(), seed=cfg["seed"], seq_len=cfg["seq_len"])
    return {}, list(paths.values()), {}


def cmd_train_base(args, cfg, out):
    data = _need(args, "data")
    inputs = _data_inputs(data, ["train"])
    splits = load_splits(data, ["train"])
    ckpt = train_base(splits.train, splits.schema, cfg.train_config())
    path = out / "stage1.ckpt"
    save_checkpoint(ckpt, path)
    return inputs, [path], {"stage1_id": ckpt.checkpoint_id()}


def cmd_finetune_base(args, cfg, out):
    data, src = _need(args, "data"), _need(args, "checkpoint")
    stage1, digest = _load_ckpt(src)
    _require_stage1(stage1, src)
    inputs = {**_data_inputs(data, ["recent"]), str(src): digest}
    splits = load_splits(data, ["recent"])
    ckpt = finetune_base(stage1, splits.recent, cfg.train_config())
    path = out / "basef.ckpt"
    save_checkpoint(ckpt, path)
    return inputs, [path], {"parent_id": stage1.checkpoint_id(), "basef_id": ckpt.checkpoint_id()}


def _bank(stage1: ModelCheckpoint, recent, cfg: RunConfig) -> PrototypeBank:
    return build_bank(recent, stage1.model_params(), cap=cfg["support_cap"], seed=cfg["seed"],
                      checkpoint_id=stage1.checkpoint_id())


def _bank_checkpoint(bank: PrototypeBank) -> ModelCheckpoint:
    return ModelCheckpoint(bank.to_tensors(), {"kind": "prototypes", **bank.provenance})


def cmd_build_prototypes(args, cfg, out):
    data, src = _need(args, "data"), _need(args, "checkpoint")
    stage1, digest = _load_ckpt(src)
    _require_stage1(stage1, src)
    inputs = {**_data_inputs(data, ["recent"]), str(src): digest}
    bank = _bank(stage1, load_splits(data, ["recent"]).recent, cfg)
    path = out / "prototypes.ckpt"
    save_checkpoint(_bank_checkpoint(bank), path)
    return inputs, [path], dict(bank.provenance)


def _train_meta_from(args, cfg, stage1, src, recent, kind: str):
    if args.prototypes:
        proto_path = Path(args.prototypes)
        blob, digest = _load_ckpt(proto_path)
        prov = {k: v for k, v in blob.metadata.items() if k != "kind"}
        bank = PrototypeBank.from_tensors(blob.tensors, prov)
        extra = {str(proto_path): digest}
    else:
        bank, extra = _bank(stage1, recent, cfg), {}
    return train_meta(stage1, recent, bank, cfg.train_config(metric_kind=kind)), extra


def cmd_train_meta(args, cfg, out):
    data, src = _need(args, "data"), _need(args, "checkpoint")
    stage1, digest = _load_ckpt(src)
    _require_stage1(stage1, src)
    inputs = {**_data_inputs(data, ["recent"]), str(src): digest}
    recent = load_splits(data, ["recent"]).recent
    ckpt, extra = _train_meta_from(args, cfg, stage1, src, recent, cfg["metric_kind"])
    inputs.update(extra)
    path = out / "stage2.ckpt"
    save_checkpoint(ckpt, path)
    return inputs, [path], {"stage1_id": stage1.checkpoint_id(), "stage2_id": ckpt.checkpoint_id(),
                            "metric_kind": cfg["metric_kind"]}


def cmd_evaluate(args, cfg, out):
    data = _need(args, "data")
    if not args.checkpoint:
        raise UsageError("evaluate requires at least one --checkpoint")
    inputs = _data_inputs(data, ["valid"])
    valid = load_splits(data, ["valid"]).valid
    reports, prov = [], {}
    for raw in args.checkpoint:
        src = Path(raw)
        ckpt, digest = _load_ckpt(src)
        inputs[str(src)] = digest
        reports.append(evaluate(ckpt, valid))
        prov[src.name] = ckpt.checkpoint_id()
    csv_path, txt_path = ev.emit_report(reports, out / "report")
    if not args.quiet:
        sys.stdout.write(txt_path.read_text(encoding="utf-8"))
    return inputs, [csv_path, txt_path], prov


def cmd_proto_sim(args, cfg, out):
    data, src = _need(args, "data"), _need(args, "checkpoint")
    stage1, digest = _load_ckpt(src)
    _require_stage1(stage1, src)
    inputs = {**_data_inputs(data, ["train", "valid"]), str(src): digest}
    splits = load_splits(data, ["train", "valid"])
    mats = similarity_banks(stage1, splits.train, splits.valid)
    txt = out / "proto_sim.txt"
    lines = [ev.format_similarity(mats)]
    for cls, m in mats.items():
        lines.append(f"{cls}: diagonal dominant = {m.diagonal_dominant()}")
    txt.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    csv = out / "proto_sim.csv"
    rows = ["cls,occ_a,occ_b,cosine"]
    for cls, m in mats.items():
        for i, a in enumerate(m.labels):
            rows += [f"{cls},{a},{b},{m.values[i, j]:.6f}" for j, b in enumerate(m.labels)]
    csv.write_text("\n".join(rows) + "\n", encoding="utf-8", newline="\n")
    if not args.quiet:
        sys.stdout.write(txt.read_text(encoding="utf-8"))
    prov = {k: v for k, v in next(iter(mats.values())).provenance.items()}
    return inputs, [txt, csv], prov


def cmd_ablate_metrics(args, cfg, out):
    data, src = _need(args, "data"), _need(args, "checkpoint")
    stage1, digest = _load_ckpt(src)
    _require_stage1(stage1, src)
    inputs = {**_data_inputs(data, ["recent", "valid"]), str(src): digest}
    splits = load_splits(data, ["recent", "valid"])
    bank = _bank(stage1, splits.recent, cfg)
    reports, outputs, prov = [], [], {"stage1_id": stage1.checkpoint_id()}
    for kind in MetricKind:
        ckpt = train_meta(stage1, splits.recent, bank, cfg.train_config(metric_kind=kind.value))
        path = out / f"stage2-{kind.value}.ckpt"
        save_checkpoint(ckpt, path)
        outputs.append(path)
        prov[path.name] = ckpt.checkpoint_id()
        reports.append(evaluate(ckpt, splits.valid))
    csv_path, txt_path = ev.emit_report(reports, out / "ablation")
    if not args.quiet:
        sys.stdout.write(txt_path.read_text(encoding="utf-8"))
    return inputs, outputs + [csv_path, txt_path], prov


HANDLERS = {
    "simulate": cmd_simulate, "train-base": cmd_train_base, "finetune-base": cmd_finetune_base,
    "build-prototypes": cmd_build_prototypes, "train-meta": cmd_train_meta,
    "evaluate": cmd_evaluate, "proto-sim": cmd_proto_sim, "ablate-metrics": cmd_ablate_metrics,
}


# -- argument parsing ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metacvr", description="Occasion-prototype CVR model: simulate, train, evaluate.",
        epilog="Config keys (key=value, '#' comments):\n" + describe_keys(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("command", choices=COMMANDS, metavar="command",
                        help="one of: " + ", ".join(COMMANDS))
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--seed", type=int, help="overrides the config seed")
    parser.add_argument("--out", help="output directory (default: current directory)")
    parser.add_argument("--data", help="dataset directory written by 'simulate'")
    parser.add_argument("--checkpoint", action="append",
                        help="input checkpoint (repeat for several with 'evaluate')")
    parser.add_argument("--prototypes", help="prototype bank from 'build-prototypes' (train-meta)")
    parser.add_argument("--metric", choices=[k.value for k in MetricKind], help="overrides metric_kind")
    parser.add_argument("--quiet", action="store_true", help="only report errors")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:          # argparse already printed usage
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    try:
        cfg = validate_config(args.config).with_overrides(seed=args.seed, metric_kind=args.metric)
        out = Path(args.out or ".")
        out.mkdir(parents=True, exist_ok=True)
        inputs, outputs, prov = HANDLERS[args.command](args, cfg, out)
        manifest = write_manifest(out, args.command, cfg, inputs, outputs, prov, started)
        log.info("wrote %s", manifest)
        return EXIT_OK
    except (ConfigError, UsageError) as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ProvenanceError as exc:
        print(f"provenance error: {exc}", file=sys.stderr)
        return EXIT_PROVENANCE
    except (CheckpointError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: training pipelines, dataset generation, evaluation."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import shlex
import sys
import time
import uuid
from dataclasses import dataclass, field

import numpy as np

from .config import DESK_SCALE, ExperimentConfig, parse_values
from .data import DATA_DIR_ENV, ImageSet, load_label_override, load_mnist, mnist_paths, write_idx, write_label_override
from .evaluation import Evaluator, RobustnessReport, emit_reports, select_probe
from .invariance import (
    KnnOracle,
    as_image_set,
    build_inv_dataset,
    export_inv_set,
    inv_set_paths,
    label_change_fraction,
    load_inv_set,
)
from .model import CheckpointError, load_checkpoint
from .pgd import pgd_linf
from .training import fresh_state, retrain_invariance, train_ptb_adversarial, train_simultaneous, train_standard

log = logging.getLogger("invrobust")

MANIFEST_NAME = "manifest.json"


class UsageError(Exception):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class RunManifest:
    run_id: str
    command: list[str]
    config: dict[str, str]
    config_hash: str
    inputs: dict[str, str] = field(default_factory=dict)  # path -> sha256
    outputs: dict[str, str] = field(default_factory=dict)  # artifact name -> path
    timings: dict[str, float] = field(default_factory=dict)

    def record_input(self, path) -> None:
        self.inputs[os.path.abspath(path)] = sha256_file(path)

    def validate(self) -> None:
        missing = [p for p in self.outputs.values() if not os.path.exists(p)]
        if missing:
            raise RuntimeError(f"declared artifacts were not written: {missing}")
        if ExperimentConfig().with_overrides(self.config).digest() != self.config_hash:
            raise RuntimeError("manifest config does not match its hash")

    def write(self, out_dir) -> str:
        path = os.path.join(out_dir, MANIFEST_NAME)
        with open(path, "w") as f:
            json.dump(dataclasses.asdict(self), f, indent=2, sort_keys=True)
            f.write("\n")
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        with open(path) as f:
            return cls(**json.load(f))


# ---------------------------------------------------------------------------
# argument handling


def _override_args(extra: list[str]) -> dict[str, str]:
    """``--key value`` / ``--key=value`` pairs left over after argparse."""
    out: dict[str, str] = {}
    it = iter(extra)
    for tok in it:
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            value = next(it, None)
            if value is None:
                raise UsageError(f"override {tok} needs a value")
        out[key.replace("-", "_")] = value
    return out


def resolve_config(args, extra: list[str]) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = dict(DESK_SCALE) if args.desk_scale else {}
    overrides.update(_override_args(extra))
    if getattr(args, "labels", None):
        overrides["label_mode"] = args.labels
    try:
        parse_values(overrides)
    except KeyError as err:
        raise UsageError(str(err.args[0])) from None
    return cfg.with_overrides(overrides)


def _start(args, cfg: ExperimentConfig, argv: list[str]) -> RunManifest:
    os.makedirs(args.out, exist_ok=True)
    root = logging.getLogger()
    for h in [h for h in root.handlers if getattr(h, "run_log", False)]:
        root.removeHandler(h)
        h.close()
    handler = logging.FileHandler(os.path.join(args.out, "run.log"), mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    handler.run_log = True
    root.addHandler(handler)
    config_path = os.path.join(args.out, "config.txt")
    cfg.save(config_path)
    manifest = RunManifest(
        run_id=uuid.uuid4().hex,
        command=list(argv),
        config={k: v for k, v in (line.split(" = ", 1) for line in cfg.to_text().splitlines())},
        config_hash=cfg.digest(),
    )
    manifest.outputs["config"] = config_path
    manifest.timings["start"] = time.time()
    return manifest


def _finish(manifest: RunManifest, out_dir) -> int:
    manifest.timings["end"] = time.time()
    manifest.timings["seconds"] = manifest.timings["end"] - manifest.timings["start"]
    manifest.validate()
    path = manifest.write(out_dir)
    log.info("wrote %s", path)
    return 0


def _mnist(args, manifest: RunManifest) -> tuple[ImageSet, ImageSet]:
    train, test = load_mnist(args.data_dir)
    for pair in mnist_paths(args.data_dir).values():
        for p in pair:
            manifest.record_input(p)
    return train, test


def _init(path, manifest: RunManifest, cfg: ExperimentConfig):
    if not path:
        raise UsageError("this pipeline needs --init <checkpoint>")
    if not os.path.exists(path):
        raise UsageError(f"checkpoint not found: {path}")
    manifest.record_input(path)
    net, state = load_checkpoint(path)
    if net.pool_stride != cfg.pool_stride:
        raise UsageError(f"{path} uses pool stride {net.pool_stride} but the config says {cfg.pool_stride}")
    if state is None:
        state = fresh_state(net, cfg)
    return net, state


def _inv_examples(prefix, manifest: RunManifest, label_csv=None):
    for p in inv_set_paths(prefix).values():
        if not os.path.exists(p):
            raise UsageError(f"invariance set file not found: {p}")
        manifest.record_input(p)
    if label_csv:
        manifest.record_input(label_csv)
    return load_inv_set(prefix)


def _evaluator(cfg: ExperimentConfig, test: ImageSet, inv_test: ImageSet | None) -> Evaluator:
    clean = test.subset(np.arange(min(cfg.clean_eval_size, len(test))))
    return Evaluator(clean, select_probe(test, cfg.probe_size, cfg.seed), cfg.pgd(), inv_test, cfg.digest())


def _write_trace(trace, out_dir, manifest: RunManifest) -> None:
    path = os.path.join(out_dir, "trace.csv")
    trace.write_csv(path)
    manifest.outputs["trace"] = path
    if trace.terminal_checkpoint:
        manifest.outputs["checkpoint"] = trace.terminal_checkpoint
    if trace.best_checkpoint and trace.best_checkpoint != trace.terminal_checkpoint:
        manifest.outputs["best_checkpoint"] = trace.best_checkpoint


# ---------------------------------------------------------------------------
# commands


def cmd_train(args, cfg: ExperimentConfig, argv: list[str]) -> int:
    manifest = _start(args, cfg, argv)
    train, test = _mnist(args, manifest)
    inv_test = None
    if args.inv_test:
        inv_test = as_image_set(_inv_examples(args.inv_test, manifest), "oracle")
    evaluator = _evaluator(cfg, test, inv_test)

    if args.pipeline == "standard":
        result = train_standard(cfg, train, evaluator, args.out)
    else:
        net, state = _init(args.init, manifest, cfg)
        if args.pipeline == "ptb":
            result = train_ptb_adversarial(net, state, cfg, train, evaluator, args.out)
        else:
            if not args.inv_train:
                raise UsageError(f"train {args.pipeline} needs --inv-train <prefix>")
            override = None
            if cfg.label_mode == "file":
                if not args.label_file:
                    raise UsageError("--labels file needs --label-file <csv>")
                override = load_label_override(args.label_file)
            examples = _inv_examples(args.inv_train, manifest, args.label_file)
            inv_train = as_image_set(examples, cfg.label_mode, override)
            if args.pipeline == "simultaneous":
                result = train_simultaneous(net, state, cfg, train, inv_train, evaluator, args.out)
            else:
                result = retrain_invariance(net, state, inv_train, cfg, evaluator, args.out)
    _write_trace(result.trace, args.out, manifest)
    return _finish(manifest, args.out)


def _inv_oracle_and_sources(cfg, train, test, split):
    oracle = KnnOracle(train, cfg.oracle_k)
    sources = train if split == "train" else test
    return oracle, sources


def cmd_genset(args, cfg: ExperimentConfig, argv: list[str]) -> int:
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    if args.kind == "ptb" and not args.init:
        raise UsageError("genset ptb needs --init <checkpoint> to attack")
    manifest = _start(args, cfg, argv)
    train, test = _mnist(args, manifest)
    prefix = os.path.join(args.out, args.name)
    sources = train if args.split == "train" else test
    if args.kind == "inv":
        exclude = ()
        if args.exclude:
            exclude = [e.source_index for e in _inv_examples(args.exclude, manifest)]
        inv_cfg = cfg.inv_config()
        _, examples = build_inv_dataset(
            train, args.count, inv_cfg, KnnOracle(train, cfg.oracle_k), "oracle", sources=sources,
            exclude_sources=exclude,
        )
        paths = export_inv_set(examples, sources, prefix, "oracle")
        log.info("label-change fraction (oracle != source): %.3f", label_change_fraction(examples))
    else:
        net, _ = _init(args.init, manifest, cfg)
        chosen = select_probe(sources, args.count, cfg.seed)
        adv = pgd_linf(net, chosen.images, chosen.labels, cfg.pgd()) if len(chosen) else chosen.images
        paths = inv_set_paths(prefix)
        write_idx(ImageSet(adv, chosen.labels, "generated"), paths["images"], paths["labels"], exact=True)
        with open(paths["meta"], "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["index", "source_index", "label", "linf_distance"])
            for i, (sid, lab) in enumerate(zip(chosen.ids(), chosen.labels)):
                w.writerow([i, int(sid), int(lab), f"{float(np.abs(adv[i] - chosen.images[i]).max()):.6f}"])
    for key, path in paths.items():
        manifest.outputs[key] = path
    return _finish(manifest, args.out)


def cmd_eval(args, cfg: ExperimentConfig, argv: list[str]) -> int:
    models = []
    for spec in args.model:
        name, sep, path = spec.partition("=")
        if not sep:
            name, path = os.path.splitext(os.path.basename(spec))[0], spec
        models.append((name, path))
    if not models:
        raise UsageError("eval needs at least one --model name=checkpoint")
    manifest = _start(args, cfg, argv)
    _, test = _mnist(args, manifest)
    inv_test = as_image_set(_inv_examples(args.inv_test, manifest), "oracle") if args.inv_test else None
    evaluator = _evaluator(cfg, test, inv_test)
    reports: dict[str, RobustnessReport] = {}
    for name, path in models:
        net, _ = _init(path, manifest, cfg)
        reports[name] = evaluator.report(net)
        log.info("%s: %s", name, reports[name])
    report_path = os.path.join(args.out, "reports.json")
    with open(report_path, "w") as f:
        json.dump({n: dataclasses.asdict(r) for n, r in reports.items()}, f, indent=2)
        f.write("\n")
    manifest.outputs["reports"] = report_path
    if inv_test is not None:
        manifest.outputs.update(emit_reports({}, args.out, reports))
    return _finish(manifest, args.out)


def cmd_labels(args, cfg: ExperimentConfig, argv: list[str]) -> int:
    examples = load_inv_set(args.set)
    override = load_label_override(args.csv, size=len(examples))
    missing = len(examples) - len(override)
    dest = args.dest or f"{args.set}-labels.csv"
    write_label_override(override, dest)
    agree = sum(override[i] == examples[i].oracle_label for i in override)
    print(f"{len(override)} labels imported to {dest}; {missing} examples without a label; "
          f"{agree} agree with the k-NN oracle")
    return 0


def cmd_rerun(args, argv: list[str]) -> int:
    """Re-execute a recorded command into a new directory and compare every artifact."""
    old = RunManifest.read(args.manifest)
    for path, digest in old.inputs.items():
        if not os.path.exists(path) or sha256_file(path) != digest:
            raise UsageError(f"input changed since the original run: {path}")
    old_dir = os.path.dirname(os.path.abspath(args.manifest))
    cmd = _replace_out(old.command, args.out)
    cmd = _replace_config(cmd, os.path.join(old_dir, "config.txt"))
    log.info("rerunning: %s", shlex.join(cmd))
    status = main(cmd)
    if status != 0:
        return status
    new = RunManifest.read(os.path.join(args.out, MANIFEST_NAME))
    same = True
    for key, a in sorted(old.outputs.items()):
        b = new.outputs.get(key)
        equal = b is not None and sha256_file(a) == sha256_file(b)
        print(f"{key}: {'identical' if equal else 'DIFFERENT'} ({a} vs {b})")
        same &= equal
    return 0 if same else 1


def _replace_out(cmd: list[str], out: str) -> list[str]:
    cmd = list(cmd)
    for i, tok in enumerate(cmd):
        if tok == "--out":
            cmd[i + 1] = out
            return cmd
        if tok.startswith("--out="):
            cmd[i] = f"--out={out}"
            return cmd
    raise UsageError("recorded command has no --out")


def _replace_config(cmd: list[str], config_path: str) -> list[str]:
    """Drop recorded overrides and pin the fully resolved config file instead."""
    cmd = list(cmd)
    while cmd and cmd[0].startswith("--log-level"):
        cmd = cmd[1:] if "=" in cmd[0] else cmd[2:]
    sub = cmd[:2] if cmd and cmd[0] in ("train", "genset") else cmd[:1]
    keep: list[str] = []
    known = {"--out", "--init", "--inv-train", "--inv-test", "--label-file", "--data-dir", "--count", "--split",
             "--name", "--exclude", "--model"}
    rest = cmd[len(sub):]
    i = 0
    while i < len(rest):
        tok = rest[i]
        flag = tok.split("=", 1)[0]
        if flag in known:
            if "=" in tok:
                keep.append(tok)
                i += 1
            else:
                keep.extend(rest[i : i + 2])
                i += 2
        elif flag in ("--desk-scale",):
            i += 1
        else:
            # a config override or --config/--labels: superseded by the resolved file
            i += 1 if "=" in tok else 2
    return sub + keep + ["--config", config_path]


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="invrobust",
        description="Adversarial and invariance robustness experiments on MNIST.",
        epilog="Any ExperimentConfig key can be overridden with --key value (e.g. --i-max 500).",
    )
    p.add_argument("--log-level", default="INFO")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--desk-scale", action="store_true", help="apply the reduced desk-scale profile")
        sp.add_argument("--data-dir", default=None, help=f"MNIST IDX directory (default: ${DATA_DIR_ENV})")
        if out:
            sp.add_argument("--out", required=True, help="output directory")

    train = sub.add_parser("train", help="run a training pipeline")
    train.add_argument("pipeline", choices=["standard", "ptb", "retrain-inv", "simultaneous"])
    common(train)
    train.add_argument("--init", help="starting checkpoint (ptb, retrain-inv, simultaneous)")
    train.add_argument("--inv-train", help="invariance training set prefix")
    train.add_argument("--inv-test", help="invariance test set prefix used for inv-robustness")
    train.add_argument("--labels", choices=["algorithm", "oracle", "file"], help="invariance label mode")
    train.add_argument("--label-file", help="index,label CSV for --labels file")

    gen = sub.add_parser("genset", help="generate an adversarial example set")
    gen.add_argument("kind", choices=["ptb", "inv"])
    common(gen)
    gen.add_argument("--count", type=int, required=True)
    gen.add_argument("--split", choices=["train", "test"], default="train", help="where source images come from")
    gen.add_argument("--name", default="set", help="file prefix inside --out")
    gen.add_argument("--init", help="checkpoint to attack (ptb)")
    gen.add_argument("--exclude", help="set prefix whose source images must not be reused (inv)")

    ev = sub.add_parser("eval", help="evaluate checkpoints and write tradeoff reports")
    common(ev)
    ev.add_argument("--model", action="append", default=[], help="name=checkpoint (repeatable)")
    ev.add_argument("--inv-test", help="invariance test set prefix")

    lab = sub.add_parser("labels", help="label management")
    lab_sub = lab.add_subparsers(dest="labels_command", required=True)
    imp = lab_sub.add_parser("import", help="validate an index,label CSV against an invariance set")
    imp.add_argument("csv")
    imp.add_argument("--set", required=True, help="invariance set prefix")
    imp.add_argument("--dest", help="normalized output CSV (default <set>-labels.csv)")

    rr = sub.add_parser("rerun", help="re-execute a run from its manifest and compare its artifacts")
    rr.add_argument("manifest")
    rr.add_argument("--out", required=True)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    level = getattr(logging, str(args.log_level).upper(), logging.INFO)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(message)s")
    # set on the package logger too, so run.log is filled even when a host already configured logging
    logging.getLogger("invrobust").setLevel(level)
    try:
        if args.command == "rerun":
            return cmd_rerun(args, argv)
        if args.command == "labels":
            if extra:
                raise UsageError(f"unexpected arguments {extra}")
            return cmd_labels(args, ExperimentConfig(), argv)
        cfg = resolve_config(args, extra)
        handler = {"train": cmd_train, "genset": cmd_genset, "eval": cmd_eval}[args.command]
        return handler(args, cfg, argv)
    except (UsageError, ValueError) as err:
        parser.print_usage(sys.stderr)
        print(f"invrobust: error: {err}", file=sys.stderr)
        return 2
    except (FileNotFoundError, CheckpointError) as err:
        print(f"invrobust: error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Stage-oriented command line front end.

Every stage reads and appends ``manifest.json`` in the run directory.
The manifest records the config, seed and a sha256 per artifact, and later
stages refuse to start if an artifact is missing or its hash changed.

Exit codes: 0 ok, 2 invalid config, 3 training failure, 4 missing or
mismatched artifact.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import itertools
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from . import pipeline as P
from .config import ConfigError, ExperimentConfig, config_from_dict, load_config, paper_shapes
from .losses import FisherInfo
from .models import GeneratorModel, HeadModel, clone_student
from .stats import StatsSnapshot

log = logging.getLogger("featforge")

EXIT_OK, EXIT_CONFIG, EXIT_TRAINING, EXIT_ARTIFACT = 0, 2, 3, 4
MANIFEST = "manifest.json"

VARIANTS = {v.name: v for v in (P.PLAIN, P.REPLAY, P.FIXED, P.FULL, P.EWC)}


class ArtifactError(RuntimeError):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


# ---------------------------------------------------------------------------
# manifest


class RunManifest:
    """Config hash, seeds, per-stage artifact paths with content hashes, timestamps, version."""

    def __init__(self, root: Path, data: dict):
        self.root = Path(root)
        self.data = data

    @classmethod
    def create(cls, root, cfg: ExperimentConfig, seed: int, data_free: bool, scale: str) -> RunManifest:
        return cls(root, {
            "software_version": __version__,
            "config_digest": cfg.digest(),
            "config": cfg.to_dict(),
            "seeds": [seed],
            "data_free": data_free,
            "scale": scale,
            "created": _now(),
            "stages": {},
        })

    @classmethod
    def load(cls, root) -> RunManifest:
        path = Path(root) / MANIFEST
        if not path.is_file():
            raise ArtifactError(f"no {MANIFEST} in {root}; run base-train first")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ArtifactError(f"{path}: unreadable manifest ({exc})") from exc
        if data.get("software_version") != __version__:
            raise ArtifactError(f"{path}: written by version {data.get('software_version')}, "
                                f"this is {__version__}")
        return cls(root, data)

    @property
    def seed(self) -> int:
        return self.data["seeds"][0]

    def config(self) -> ExperimentConfig:
        cfg = config_from_dict(self.data["config"])
        if cfg.digest() != self.data["config_digest"]:
            raise ArtifactError("manifest config does not match its recorded digest")
        return cfg

    def record(self, stage: str, artifacts: dict[str, str], **extra) -> None:
        entry = {"finished": _now(), "artifacts": {}}
        for key, rel in artifacts.items():
            entry["artifacts"][key] = {"path": rel, "sha256": sha256_file(self.root / rel)}
        entry.update(extra)
        self.data["stages"][stage] = entry

    def artifact(self, stage: str, key: str) -> Path:
        """Path of a recorded artifact after checking existence and content hash."""
        try:
            rec = self.data["stages"][stage]["artifacts"][key]
        except KeyError:
            raise ArtifactError(f"manifest has no {stage}/{key} artifact; run that stage first") from None
        path = self.root / rec["path"]
        if not path.is_file():
            raise ArtifactError(f"{path} is missing")
        if sha256_file(path) != rec["sha256"]:
            raise ArtifactError(f"{path} does not match its recorded sha256")
        return path

    def verify(self) -> None:
        for stage, entry in self.data["stages"].items():
            for key in entry["artifacts"]:
                self.artifact(stage, key)

    def save(self) -> None:
        (self.root / MANIFEST).write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# helpers


def _load_cfg(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig().validate()
    if getattr(args, "scale", "desk") == "paper-shapes":
        cfg = paper_shapes(cfg)
    return cfg


def _seeded(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    return cfg.replace(task=dataclasses.replace(cfg.task, seed=seed))


def _open_run(args) -> tuple[RunManifest, ExperimentConfig]:
    man = RunManifest.load(args.out)
    cfg = man.config()
    if getattr(args, "config", None):
        given = _seeded(_load_cfg(args), man.seed)
        if given.digest() != cfg.digest():
            raise ArtifactError(f"--config {args.config} differs from the config recorded in the manifest")
    if getattr(args, "seed", None) is not None and args.seed != man.seed:
        raise ArtifactError(f"--seed {args.seed} differs from the manifest seed {man.seed}")
    return man, cfg


def _task(cfg: ExperimentConfig) -> P.SyntheticTaskSpec:
    return P.SyntheticTaskSpec.from_config(cfg.task)


def _load_teacher(man: RunManifest) -> HeadModel:
    return HeadModel.load(man.artifact("base_train", "teacher"), requires_grad=False)


# ---------------------------------------------------------------------------
# stage commands


def cmd_base_train(args) -> int:
    cfg = _seeded(_load_cfg(args), args.seed)
    out = Path(args.out)
    (out / "data").mkdir(parents=True, exist_ok=True)
    task = _task(cfg)
    base_path = out / "data" / "base_train.npz"
    if args.data_free:
        # base features only ever live in memory
        base_path.unlink(missing_ok=True)
        base_data = P.make_synthetic_data(task, "base", cfg.base.train_per_class, "train")
    else:
        P.save_batch(base_path, P.make_synthetic_data(task, "base", cfg.base.train_per_class, "train"))
        base_data = P.load_batch(base_path)
    P.save_batch(out / "data" / "novel_train.npz", P.make_synthetic_data(task, "novel", task.shots, "train"))

    teacher = P.teacher_from_config(cfg, P.rng_for(args.seed, "teacher"))
    teacher.calibrate_norm(P.make_synthetic_data(task, "base", 32, "calib").features)
    watchers = teacher.make_watchers(cfg.gen_train.sites, cfg.gen_train.class_agnostic)
    heldout = P.make_synthetic_data(task, "base", cfg.base.test_per_class, "test")
    res = P.base_train(teacher, base_data, watchers, cfg, P.rng_for(args.seed, "base"), heldout)
    del base_data
    teacher.freeze()
    teacher.save(out / "teacher.ckpt")
    res.snapshot.save(out / "stats.bin")
    res.fisher.save(out / "fisher.ckpt")

    man = RunManifest.create(out, cfg, args.seed, args.data_free, args.scale)
    arts = {"teacher": "teacher.ckpt", "stats": "stats.bin", "fisher": "fisher.ckpt",
            "novel_train": "data/novel_train.npz"}
    if not args.data_free:
        arts["base_train"] = "data/base_train.npz"
    man.record("base_train", arts, heldout_acc=res.heldout_acc)
    man.save()
    print(f"base-train: held-out accuracy {res.heldout_acc:.4f}; artifacts in {out}")
    return EXIT_OK


def cmd_train_generator(args) -> int:
    man, cfg = _open_run(args)
    teacher = _load_teacher(man)
    snap = StatsSnapshot.load(man.artifact("base_train", "stats"))
    res = P.train_generator(snap, teacher, cfg, P.rng_for(man.seed, "generator"))
    out = Path(args.out)
    res.generator.save(out / "generator.ckpt")
    P.EvalReport(0, 0, 0.0, 0.0, 0.0, {}, {}, res.curves).write_curves_csv(out / "generator_curves.csv")
    man.record("train_generator", {"generator": "generator.ckpt", "curves": "generator_curves.csv"},
               kl_first=res.curves["kl"][0], kl_last=res.curves["kl"][-1],
               mean_class_prob=res.mean_class_prob, min_class_prob=res.min_class_prob)
    man.save()
    print(f"train-generator: kl {res.curves['kl'][0]:.4g} -> {res.curves['kl'][-1]:.4g}, "
          f"mean class probability {res.mean_class_prob:.3f}")
    return EXIT_OK


def _finetune(man: RunManifest, cfg: ExperimentConfig, variant: P.Variant) -> P.FinetuneResult:
    teacher = _load_teacher(man)
    fc = variant.apply(cfg.finetune)
    g = GeneratorModel.load(man.artifact("train_generator", "generator")) if fc.use_generator else None
    fisher = FisherInfo.load(man.artifact("base_train", "fisher")) if fc.lambda_ewc > 0 else None
    novel = P.load_batch(man.artifact("base_train", "novel_train"))
    student = clone_student(teacher, cfg.task.num_novel, P.rng_for(man.seed, "student"))
    return P.novel_finetune(student, teacher, g, novel, fisher, fc, P.rng_for(man.seed, "finetune"),
                            cfg.task.shots)


def cmd_finetune(args) -> int:
    man, cfg = _open_run(args)
    variant = VARIANTS[args.variant]
    res = _finetune(man, cfg, variant)
    out = Path(args.out)
    ckpt = f"student_{variant.name}.ckpt"
    res.student.save(out / ckpt)
    curves = f"finetune_{variant.name}_curves.csv"
    P.EvalReport(0, 0, 0.0, 0.0, 0.0, {}, {}, res.curves()).write_curves_csv(out / curves)
    man.record(f"finetune:{variant.name}", {"student": ckpt, "curves": curves},
               forged_per_class=[int(c) for c in res.forged_counts])
    man.save()
    print(f"finetune[{variant.name}]: wrote {out / ckpt}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    man, cfg = _open_run(args)
    stage = f"finetune:{args.variant}"
    student = HeadModel.load(man.artifact(stage, "student"), requires_grad=False)
    task = _task(cfg)
    # test splits are regenerated in memory; no base feature file is read
    base_test = P.make_synthetic_data(task, "base", cfg.base.test_per_class, "test")
    novel_test = P.make_synthetic_data(task, "novel", cfg.base.test_per_class, "test")
    report = P.evaluate(student, base_test, novel_test)
    out = Path(args.out)
    name = f"report_{args.variant}.json"
    (out / name).write_text(report.to_json() + "\n")
    man.record(f"evaluate:{args.variant}", {"report": name})
    man.save()
    print(f"evaluate[{args.variant}]: base {report.base_acc:.4f} novel {report.novel_acc:.4f} "
          f"overall {report.overall:.4f}")
    return EXIT_OK


def cmd_run(args) -> int:
    """Base training, generator, then finetune + evaluate for each requested variant."""
    rc = cmd_base_train(args)
    if rc:
        return rc
    cmd_train_generator(args)
    for name in args.variants:
        ns = argparse.Namespace(**{**vars(args), "variant": name})
        cmd_finetune(ns)
        cmd_evaluate(ns)
    return EXIT_OK


ABLATION_FIELDS = ["conf", "feat_distill", "reg_l1", "base_acc", "novel_acc", "overall",
                   "reg_mae_base", "reg_mae_novel"]


def ablation_rows(cfg: ExperimentConfig, prep: P.Prepared, seed: int):
    for conf, feat, l1 in itertools.product((True, False), repeat=3):
        v = P.Variant(f"c{int(conf)}f{int(feat)}l{int(l1)}",
                      {"conf": conf, "feat_distill": feat, "reg_l1": l1})
        r = P.run_variant(cfg, prep, v, seed)
        yield {"conf": int(conf), "feat_distill": int(feat), "reg_l1": int(l1),
               "base_acc": r.base_acc, "novel_acc": r.novel_acc, "overall": r.overall,
               "reg_mae_base": r.reg_mae["base"], "reg_mae_novel": r.reg_mae["novel"]}


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prep = P.prepare(cfg, args.seed, train_gen=True)
    path = out / f"ablation_seed{args.seed}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_FIELDS)
        w.writeheader()
        for row in ablation_rows(_seeded(cfg, args.seed), prep, args.seed):
            w.writerow(row)
            fh.flush()
    print(f"ablate: wrote {path}")
    return EXIT_OK


def cmd_dump_features(args) -> int:
    man, cfg = _open_run(args)
    teacher = _load_teacher(man)
    g = GeneratorModel.load(man.artifact("train_generator", "generator"))
    rng = P.rng_for(man.seed, "dump")
    real = P.make_synthetic_data(_task(cfg), "base", args.per_class, "test")
    P.dump_features(Path(args.out) / "features.csv", teacher, real, P.forge_batch(g, args.per_class, rng))
    print(f"dump-features: wrote {Path(args.out) / 'features.csv'}")
    return EXIT_OK


def cmd_default_config(args) -> int:
    sys.stdout.write(ExperimentConfig().to_json() + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="featforge", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def stage(name, fn, help_, seed_default=None):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON config file (defaults when omitted)")
        p.add_argument("--out", required=True, help="run directory")
        p.add_argument("--seed", type=int, default=seed_default)
        p.add_argument("--scale", choices=["desk", "paper-shapes"], default="desk")
        p.set_defaults(fn=fn)
        return p

    p = stage("base-train", cmd_base_train, "train the teacher head and record statistics", 0)
    p.add_argument("--data-free", action="store_true", help="never persist base training features")
    stage("train-generator", cmd_train_generator, "fit the feature generator to recorded statistics")
    for name, fn in (("finetune", cmd_finetune), ("evaluate", cmd_evaluate)):
        p = stage(name, fn, f"{name} one variant")
        p.add_argument("--variant", choices=sorted(VARIANTS), default="full")
    p = stage("run", cmd_run, "all stages end to end", 0)
    p.add_argument("--data-free", action="store_true")
    p.add_argument("--variants", nargs="+", choices=sorted(VARIANTS), default=["plain", "full"])
    stage("ablate", cmd_ablate, "loss-switch sweep, one CSV row per configuration", 0)
    p = stage("dump-features", cmd_dump_features, "CSV of pooled real vs forged features")
    p.add_argument("--per-class", type=int, default=50)
    p = sub.add_parser("default-config", help="print the default config as JSON")
    p.set_defaults(fn=cmd_default_config)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (P.BaseTrainingError, P.GeneratorDivergedError) as exc:
        print(f"error: training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except ArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except (OSError, ValueError) as exc:
        if isinstance(exc, FileNotFoundError) and getattr(exc, "filename", None) == getattr(args, "config", None):
            print(f"error: invalid config: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"error: bad artifact: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT


if __name__ == "__main__":
    sys.exit(main())

"""Synthetic data, base training, generator training, novel finetuning and evaluation."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from . import tensor as T
from .config import ExperimentConfig, FinetuneConfig, GenTrainConfig, TaskConfig
from .losses import (
    FisherInfo,
    LossSwitches,
    ewc_penalty,
    fisher_from_squared_grads,
    generator_loss,
    novel_loss,
    task_loss,
)
from .models import (
    GeneratorModel,
    GeneratorSpec,
    HeadModel,
    HeadSpec,
    build_generator,
    build_teacher,
    clone_student,
)
from .stats import DataWatcher, StatsSnapshot, pool_batch, snapshot
from .tensor import ContractError, SgdConfig, Tensor

log = logging.getLogger(__name__)

_SPLITS = {"base": 1, "novel": 2}
_STREAMS = {"train": 11, "test": 12, "calib": 13}


class BaseTrainingError(RuntimeError):
    pass


class GeneratorDivergedError(RuntimeError):
    def __init__(self, iteration: int, last_good: int):
        super().__init__(f"generator loss became non-finite at iteration {iteration} "
                         f"(last finite iteration: {last_good})")
        self.iteration = iteration
        self.last_good = last_good


class LabeledBatch(NamedTuple):
    features: np.ndarray  # N x C x H x W
    labels: np.ndarray  # N
    targets: np.ndarray  # N x 4

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> LabeledBatch:
        return LabeledBatch(self.features[idx], self.labels[idx], self.targets[idx])


def sgd_config(s) -> SgdConfig:
    return SgdConfig(s.learning_rate, s.momentum, s.weight_decay)


# ---------------------------------------------------------------------------
# synthetic task


@dataclass
class ClassMixture:
    means: np.ndarray  # M x C x H x W
    scales: np.ndarray  # M
    weights: np.ndarray  # M
    targets: np.ndarray  # M x 4


@dataclass
class SyntheticTaskSpec:
    """Class-conditional Gaussian mixtures over instance feature maps.

    Each class has a channel signature shared by its components plus a
    fixed spatial pattern; components shift the signature slightly. Box
    targets are a fixed linear map of the component's channel means.
    """

    num_base: int
    num_novel: int
    feature_shape: tuple[int, int, int]
    mixtures: list[ClassMixture]
    reg_noise: float
    shots: int
    seed: int

    def __post_init__(self):
        if self.shots < 1:
            raise ValueError("shots must be >= 1")

    @property
    def num_classes(self) -> int:
        return self.num_base + self.num_novel

    def class_range(self, split: str) -> range:
        if split == "base":
            return range(0, self.num_base)
        if split == "novel":
            return range(self.num_base, self.num_classes)
        raise ValueError(f"unknown split {split!r}")

    def min_class_distance(self) -> float:
        centers = np.stack([m.means.mean(axis=0).ravel() for m in self.mixtures])
        d = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
        return float(d[~np.eye(len(d), dtype=bool)].min())

    @classmethod
    def from_config(cls, tc: TaskConfig) -> SyntheticTaskSpec:
        rng = np.random.default_rng([tc.seed, 0])
        c, (h, w) = tc.channels, tc.spatial
        n_cls = tc.num_base + tc.num_novel
        reg_map = rng.standard_normal((4, c)) / math.sqrt(c) * 2.0
        mixtures = []
        for _ in range(n_cls):
            signature = tc.separation * rng.standard_normal(c)
            pattern = tc.spatial_pattern * rng.standard_normal((c, h, w))
            base = signature[:, None, None] + pattern
            offsets = tc.component_spread * rng.standard_normal((tc.components, c))
            means = base[None] + offsets[:, :, None, None]
            scales = tc.noise_scale * rng.uniform(0.8, 1.2, size=tc.components)
            weights = rng.dirichlet(2.0 * np.ones(tc.components))
            targets = means.mean(axis=(2, 3)) @ reg_map.T
            mixtures.append(ClassMixture(means, scales, weights, targets))
        return cls(tc.num_base, tc.num_novel, (c, h, w), mixtures, tc.reg_noise, tc.shots, tc.seed)


def make_synthetic_data(spec: SyntheticTaskSpec, split: str, n_per_class: int,
                        stream: str = "train") -> LabeledBatch:
    """Draw ``n_per_class`` instances of every class of ``split``; seeded by (task seed, split, stream)."""
    rng = np.random.default_rng([spec.seed, _SPLITS[split], _STREAMS[stream]])
    feats, labels, targets = [], [], []
    for k in spec.class_range(split):
        mix = spec.mixtures[k]
        comp = rng.choice(len(mix.weights), size=n_per_class, p=mix.weights)
        noise = rng.standard_normal((n_per_class, *spec.feature_shape))
        feats.append(mix.means[comp] + mix.scales[comp][:, None, None, None] * noise)
        targets.append(mix.targets[comp] + spec.reg_noise * rng.standard_normal((n_per_class, 4)))
        labels.append(np.full(n_per_class, k, dtype=np.int64))
    return LabeledBatch(np.concatenate(feats), np.concatenate(labels), np.concatenate(targets))


# data files: every read goes through load_batch so reads can be audited
READ_LOG: list[str] = []


def save_batch(path, batch: LabeledBatch) -> None:
    with open(path, "wb") as fh:
        np.savez(fh, features=batch.features, labels=batch.labels, targets=batch.targets)


def load_batch(path) -> LabeledBatch:
    READ_LOG.append(str(path))
    with np.load(path) as z:
        return LabeledBatch(z["features"], z["labels"], z["targets"])


# ---------------------------------------------------------------------------
# evaluation


def weighted_overall(num_base: int, num_novel: int, base_score: float, novel_score: float) -> float:
    """Class-count-weighted average of base and novel scores."""
    return (num_base * base_score + num_novel * novel_score) / (num_base + num_novel)


@dataclass
class EvalReport:
    num_base: int
    num_novel: int
    base_acc: float
    novel_acc: float
    overall: float
    per_class_acc: dict[int, float]
    reg_mae: dict[str, float]
    loss_curves: dict[str, list[float]] = field(default_factory=dict)

    def check_overall(self) -> bool:
        return self.overall == weighted_overall(self.num_base, self.num_novel,
                                                self.base_acc, self.novel_acc)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class_acc"] = {str(k): v for k, v in self.per_class_acc.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> EvalReport:
        d = dict(d)
        d["per_class_acc"] = {int(k): v for k, v in d["per_class_acc"].items()}
        return cls(**d)

    def write_curves_csv(self, path) -> None:
        names = sorted(self.loss_curves)
        n = max((len(self.loss_curves[k]) for k in names), default=0)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", *names])
            for i in range(n):
                w.writerow([i, *(repr(self.loss_curves[k][i]) if i < len(self.loss_curves[k]) else ""
                                 for k in names)])


def predict(model: HeadModel, x: np.ndarray, batch_size: int = 512):
    logits, reg = [], []
    with T.no_grad():
        for i in range(0, len(x), batch_size):
            out = model.forward(Tensor(x[i:i + batch_size]))
            logits.append(out.logits.data)
            reg.append(out.reg.data)
    return np.concatenate(logits), np.concatenate(reg)


def accuracy(model: HeadModel, batch: LabeledBatch) -> float:
    logits, _ = predict(model, batch.features)
    return float((logits.argmax(axis=1) == batch.labels).mean())


def _split_metrics(model: HeadModel, batch: LabeledBatch):
    if len(batch) == 0:
        raise ContractError("cannot evaluate an empty split")
    logits, reg = predict(model, batch.features)
    pred = logits.argmax(axis=1)
    correct = pred == batch.labels
    per_class = {int(c): float(correct[batch.labels == c].mean()) for c in np.unique(batch.labels)}
    cols = 4 * batch.labels[:, None] + np.arange(4)[None, :]
    own = reg[np.arange(len(batch))[:, None], cols]
    return float(correct.mean()), per_class, float(np.abs(own - batch.targets).mean())


def evaluate(model: HeadModel, base_test: LabeledBatch, novel_test: LabeledBatch,
             loss_curves: dict | None = None) -> EvalReport:
    if set(np.unique(base_test.labels)) & set(np.unique(novel_test.labels)):
        raise ContractError("base and novel test splits share labels")
    b_acc, b_pc, b_mae = _split_metrics(model, base_test)
    n_acc, n_pc, n_mae = _split_metrics(model, novel_test)
    nb = model.num_base_classes
    nn_ = model.num_classes - nb
    return EvalReport(nb, nn_, b_acc, n_acc, weighted_overall(nb, nn_, b_acc, n_acc),
                      {**b_pc, **n_pc}, {"base": b_mae, "novel": n_mae}, dict(loss_curves or {}))


# ---------------------------------------------------------------------------
# stage 0: base training


def teacher_from_config(cfg: ExperimentConfig, rng: np.random.Generator) -> HeadModel:
    tc = cfg.task
    spec = HeadSpec(tc.channels, tuple(tc.spatial), tuple(cfg.head.hidden), cfg.head.kernel, tc.num_base)
    return build_teacher(spec, rng)


@dataclass
class BaseResult:
    teacher: HeadModel
    snapshot: StatsSnapshot
    fisher: FisherInfo
    heldout_acc: float
    loss_curve: list[float]


def base_train(teacher: HeadModel, base_data: LabeledBatch, watchers: list[DataWatcher],
               cfg: ExperimentConfig, rng: np.random.Generator,
               heldout: LabeledBatch | None = None) -> BaseResult:
    """Train the teacher; watchers and Fisher accumulate over the final epoch only."""
    bc = cfg.base
    opt = sgd_config(bc.sgd)
    final_opt = SgdConfig(opt.learning_rate * bc.final_lr_scale, opt.momentum, opt.weight_decay)
    params = teacher.parameters()
    state: dict = {}
    sq_sum = {k: np.zeros_like(p.data) for k, p in teacher.params.items()}
    n_batches = 0
    curve = []
    n = len(base_data)
    for epoch in range(bc.epochs):
        last = epoch == bc.epochs - 1
        order = rng.permutation(n)
        for start in range(0, n, bc.batch_size):
            batch = base_data.subset(order[start:start + bc.batch_size])
            T.zero_grad(params)
            if last:
                out = teacher.forward(Tensor(batch.features), collect_sites=True)
                for w in watchers:
                    w.observe_batch(out.sites[w.site_id].data, batch.labels)
                loss = _task_loss_from_output(out, batch, cfg.finetune.reg_beta)
            else:
                loss = task_loss(teacher, batch, cfg.finetune.reg_beta)
            T.backward(loss)
            if last:
                for k, p in teacher.params.items():
                    sq_sum[k] += p.grad * p.grad
                n_batches += 1
            T.sgd_step(params, state, final_opt if last else opt)
            curve.append(loss.item())
    T.zero_grad(params)
    heldout_acc = accuracy(teacher, heldout) if heldout is not None else float("nan")
    if heldout is not None and heldout_acc < bc.accuracy_bar:
        raise BaseTrainingError(
            f"teacher reached {heldout_acc:.3f} held-out accuracy, below the {bc.accuracy_bar} bar; "
            "increase task.separation / base.epochs or adjust base.sgd.learning_rate"
        )
    fisher = fisher_from_squared_grads(teacher, sq_sum, n_batches, "full")
    return BaseResult(teacher, snapshot(watchers), fisher, heldout_acc, curve)


def _task_loss_from_output(out, batch: LabeledBatch, reg_beta: float) -> Tensor:
    y = batch.labels
    ce = T.cross_entropy(out.logits, y)
    cols = 4 * y[:, None] + np.arange(4)[None, :]
    own = T.index(out.reg, (np.arange(len(y))[:, None], cols))
    reg = T.mul_scalar(T.sum(T.smooth_l1(own - Tensor(batch.targets), reg_beta)), 1.0 / len(y))
    return ce + reg


# ---------------------------------------------------------------------------
# stage I: generator


def generator_from_config(cfg: ExperimentConfig, teacher: HeadModel,
                          rng: np.random.Generator) -> GeneratorModel:
    gc = cfg.generator
    spec = GeneratorSpec(gc.z_dim, gc.trunk_channels, gc.num_layers, gc.kernel,
                         teacher.spec.in_channels, tuple(teacher.spec.spatial), teacher.num_classes)
    return build_generator(spec, rng)


def forged_class_probs(g: GeneratorModel, teacher: HeadModel, n_per_class: int,
                       rng: np.random.Generator) -> np.ndarray:
    """Teacher probability of the intended class, averaged per class over fresh forged features."""
    x, y = forge_batch(g, n_per_class, rng)
    logits, _ = predict(teacher, x)
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    own = p[np.arange(len(y)), y]
    return np.array([own[y == c].mean() for c in range(g.num_classes)])


@dataclass
class GeneratorResult:
    generator: GeneratorModel
    curves: dict[str, list[float]]
    mean_class_prob: float
    min_class_prob: float


def train_generator(snapshot_: StatsSnapshot, teacher: HeadModel, cfg: ExperimentConfig,
                    rng: np.random.Generator, g: GeneratorModel | None = None) -> GeneratorResult:
    """Fit the generator so the frozen teacher's class-wise statistics on forged features match the snapshot."""
    gc: GenTrainConfig = cfg.gen_train
    if not teacher.frozen:
        raise ContractError("teacher must be frozen before generator training")
    if g is None:
        g = generator_from_config(cfg, teacher, rng)
    opt = sgd_config(gc.sgd)
    params = g.parameters()
    state: dict = {}
    curves = {"kl": [], "ce": [], "total": [], "mean_class_prob": []}
    last_good = -1
    for it in range(gc.iterations):
        T.zero_grad(params)
        br = generator_loss(snapshot_, teacher, g, gc.features_per_class, gc.lambda_kl, rng,
                            include_probs=gc.include_probs_in_kl)
        finite = math.isfinite(br.total) and all(np.all(np.isfinite(p.grad)) for p in params)
        if not finite:
            raise GeneratorDivergedError(it, last_good)
        last_good = it
        if gc.grad_clip > 0:
            T.clip_grad_norm(params, gc.grad_clip)
        T.sgd_step(params, state, opt)
        curves["kl"].append(br.kl_term)
        curves["ce"].append(br.ce_term)
        curves["total"].append(br.total)
        curves["mean_class_prob"].append(br.mean_class_prob)
        if it % 100 == 0:
            log.info("generator it %d: kl %.4f ce %.4f p %.3f", it, br.kl_term, br.ce_term,
                     br.mean_class_prob)
    T.zero_grad(params)
    probs = forged_class_probs(g, teacher, gc.features_per_class, rng)
    return GeneratorResult(g, curves, float(probs.mean()), float(probs.min()))


def forge_batch(g: GeneratorModel, k: int, rng: np.random.Generator):
    """Exactly ``k`` forged features for every class, from fresh noise."""
    if k < 1:
        raise ContractError("need at least one forged feature per class")
    feats = []
    with T.no_grad():
        for c in range(g.num_classes):
            feats.append(g.forward(c, Tensor(rng.standard_normal((k, g.z_dim)))).data)
    labels = np.repeat(np.arange(g.num_classes), k)
    return np.concatenate(feats), labels


# ---------------------------------------------------------------------------
# stage II: novel finetuning

GradCombiner = Callable[[dict, dict], dict]


def sum_combiner(base_grads: dict, novel_grads: dict) -> dict:
    """Default gradient combiner: plain sum of base-loss and novel-loss gradients."""
    keys = set(base_grads) | set(novel_grads)
    out = {}
    for k in keys:
        a, b = base_grads.get(k), novel_grads.get(k)
        out[k] = a if b is None else (b if a is None else a + b)
    return out


def _collect_grads(params: dict[str, Tensor], loss: Tensor) -> dict[str, np.ndarray]:
    T.zero_grad(params.values())
    T.backward(loss)
    return {k: p.grad for k, p in params.items() if p.grad is not None}


def lr_scales_for(student: HeadModel, head_lr_scale: float) -> dict[int, np.ndarray | float]:
    """Inherited parameters (and base rows) get ``head_lr_scale``; appended novel rows get 1."""
    nb = student.num_base_classes
    scales: dict[int, np.ndarray | float] = {}
    for name, p in student.params.items():
        if name in ("cls.weight", "cls.bias", "reg.weight", "reg.bias"):
            rows = nb if name.startswith("cls") else 4 * nb
            s = np.ones(p.shape[0])
            s[:rows] = head_lr_scale
            scales[id(p)] = s.reshape((-1,) + (1,) * (p.ndim - 1))
        else:
            scales[id(p)] = head_lr_scale
    return scales


@dataclass
class FinetuneResult:
    student: HeadModel
    history: list[dict[str, float]]
    forged_counts: np.ndarray

    def curves(self) -> dict[str, list[float]]:
        keys = self.history[0].keys() if self.history else []
        return {k: [h[k] for h in self.history] for k in keys}


def novel_finetune(student: HeadModel, teacher: HeadModel, g: GeneratorModel | None,
                   novel_data: LabeledBatch, fisher: FisherInfo | None, fc: FinetuneConfig,
                   rng: np.random.Generator, shots: int,
                   combiner: GradCombiner = sum_combiner) -> FinetuneResult:
    """Finetune the student on the fixed few-shot novel set, replaying forged base features."""
    if not teacher.frozen:
        raise ContractError("teacher must be frozen")
    switches = LossSwitches(fc.conf, fc.feat_distill, fc.reg_l1)
    use_gen = g is not None and fc.use_generator
    k = fc.forged_per_class or shots
    opt = sgd_config(fc.sgd)
    params = student.params
    scales = lr_scales_for(student, fc.head_lr_scale)
    state: dict = {}
    counts = np.zeros(student.num_base_classes, dtype=np.int64)
    fixed = forge_batch(g, k, rng) if use_gen and fc.fixed_forged else None
    novel = (novel_data.features, novel_data.labels, novel_data.targets)
    history = []
    if fisher is not None and fc.fisher_mode == "mean":
        fisher = fisher.to_mean()
    for _ in range(fc.iterations):
        forged = None
        if use_gen:
            forged = fixed if fixed is not None else forge_batch(g, k, rng)
            counts += np.bincount(forged[1], minlength=student.num_base_classes)
        br = novel_loss(student, teacher, novel, forged, fc.lambda_f, switches, fc.reg_beta)
        base_grads = _collect_grads(params, br.base_part) if forged is not None else {}
        novel_grads = _collect_grads(params, br.novel_part)
        grads = combiner(base_grads, novel_grads)
        ewc_val = 0.0
        if fisher is not None and fc.lambda_ewc > 0:
            pen = ewc_penalty(student, fisher, fc.lambda_ewc)
            ewc_val = pen.item()
            for name, gr in _collect_grads(params, pen).items():
                grads[name] = grads[name] + gr if name in grads else gr
        for name, p in params.items():
            p.grad = grads.get(name, np.zeros_like(p.data))
        T.sgd_step(list(params.values()), state, opt, scales)
        T.zero_grad(params.values())
        rec = br.as_floats()
        rec["ewc"] = ewc_val
        rec["total"] += ewc_val
        history.append(rec)
    return FinetuneResult(student, history, counts)


# ---------------------------------------------------------------------------
# feature dumps


def dump_features(path, teacher: HeadModel, real: LabeledBatch, forged: tuple[np.ndarray, np.ndarray]) -> None:
    """CSV of pooled teacher features for real and forged instances (for external embedding plots)."""
    with T.no_grad():
        real_pooled = teacher.forward(Tensor(real.features)).pooled.data
        fake_pooled = teacher.forward(Tensor(forged[0])).pooled.data
    d = real_pooled.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source", "label", *(f"f{i}" for i in range(d))])
        for src, feats, labels in (("real", real_pooled, real.labels), ("forged", fake_pooled, forged[1])):
            for row, lab in zip(feats, labels):
                w.writerow([src, int(lab), *(repr(float(v)) for v in row)])


# ---------------------------------------------------------------------------
# whole-experiment drivers


@dataclass
class Variant:
    """Overrides applied to the finetune config for one run of an experiment."""

    name: str
    overrides: dict = field(default_factory=dict)

    def apply(self, fc: FinetuneConfig) -> FinetuneConfig:
        from dataclasses import replace

        return replace(fc, **self.overrides)


PLAIN = Variant("plain", {"use_generator": False, "conf": False, "feat_distill": False,
                          "reg_l1": False, "lambda_ewc": 0.0})
REPLAY = Variant("replay", {"lambda_ewc": 0.0})
FIXED = Variant("fixed", {"fixed_forged": True})
EWC = Variant("ewc", {"fisher_mode": "full"})
FULL = Variant("full", {})


def rng_for(seed: int, stage: str) -> np.random.Generator:
    tag = {"teacher": 1, "base": 2, "generator": 3, "student": 4, "finetune": 5, "dump": 6}[stage]
    return np.random.default_rng([seed, tag])


@dataclass
class Prepared:
    """Everything produced before novel finetuning for one seed."""

    task: SyntheticTaskSpec
    base: BaseResult
    gen: GeneratorResult | None
    novel_train: LabeledBatch
    base_test: LabeledBatch
    novel_test: LabeledBatch


def prepare(cfg: ExperimentConfig, seed: int, train_gen: bool = True) -> Prepared:
    from dataclasses import replace

    cfg = cfg.replace(task=replace(cfg.task, seed=seed))
    task = SyntheticTaskSpec.from_config(cfg.task)
    base_train_data = make_synthetic_data(task, "base", cfg.base.train_per_class, "train")
    base_test = make_synthetic_data(task, "base", cfg.base.test_per_class, "test")
    novel_train = make_synthetic_data(task, "novel", task.shots, "train")
    novel_test = make_synthetic_data(task, "novel", cfg.base.test_per_class, "test")
    teacher = teacher_from_config(cfg, rng_for(seed, "teacher"))
    teacher.calibrate_norm(make_synthetic_data(task, "base", 32, "calib").features)
    watchers = teacher.make_watchers(cfg.gen_train.sites, cfg.gen_train.class_agnostic)
    base = base_train(teacher, base_train_data, watchers, cfg, rng_for(seed, "base"), base_test)
    teacher.freeze()
    gen = train_generator(base.snapshot, teacher, cfg, rng_for(seed, "generator")) if train_gen else None
    return Prepared(task, base, gen, novel_train, base_test, novel_test)


def run_variant(cfg: ExperimentConfig, prep: Prepared, variant: Variant, seed: int) -> EvalReport:
    fc = variant.apply(cfg.finetune)
    student = clone_student(prep.base.teacher, cfg.task.num_novel, rng_for(seed, "student"))
    g = prep.gen.generator if prep.gen is not None else None
    res = novel_finetune(student, prep.base.teacher, g, prep.novel_train, prep.base.fisher, fc,
                         rng_for(seed, "finetune"), cfg.task.shots)
    return evaluate(res.student, prep.base_test, prep.novel_test, res.curves())


def run_seed(cfg: ExperimentConfig, seed: int, variants: list[Variant]) -> dict[str, EvalReport]:
    needs_gen = any(v.apply(cfg.finetune).use_generator for v in variants)
    prep = prepare(cfg, seed, train_gen=needs_gen)
    return {v.name: run_variant(cfg, prep, v, seed) for v in variants}


def _run_seed_star(args):
    return run_seed(*args)


def run_seeds(cfg: ExperimentConfig, seeds, variants: list[Variant], workers: int = 1):
    """Independent experiments per seed; ``workers > 1`` runs them in separate processes."""
    jobs = [(cfg, s, variants) for s in seeds]
    if workers <= 1:
        return [run_seed(*j) for j in jobs]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(_run_seed_star, jobs))

"""Training objectives: statistics alignment, distillation, confidence and EWC penalties."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .models import HeadModel
from .stats import StatsSnapshot
from .tensor import ContractError, Tensor

KL_EPS = 1e-8
VAR_FLOOR = 1e-8


class InsufficientBatchError(ValueError):
    pass


def _const(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def kl_gaussian_diag(mu, var, mu_fake, var_fake, eps: float = KL_EPS) -> Tensor:
    """Mean over dimensions of KL(N(mu, var) || N(mu_fake, var_fake)), diagonal Gaussians.

    ``(mu, var)`` are the recorded statistics, ``(mu_fake, var_fake)`` the
    statistics of the generated batch. Both variances are floored at ``eps``
    before entering the logs and denominators, so the value stays an exact
    Gaussian KL (hence nonnegative) and is untouched when variances exceed eps.
    """
    mu, var, mu_fake, var_fake = (_const(a) for a in (mu, var, mu_fake, var_fake))
    if np.any(var.data < 0) or np.any(var_fake.data < 0):
        raise ContractError("variances must be nonnegative")
    if eps <= 0:
        raise ContractError("eps must be positive")
    v = T.clamp_min(var, eps)
    vf = T.clamp_min(var_fake, eps)
    diff = mu_fake - mu
    log_ratio = T.mul_scalar(T.log(T.div(vf, v)), 0.5)
    quad = T.div(v + T.square(diff), vf)
    per_dim = log_ratio - T.mul_scalar(1.0 - quad, 0.5)
    return T.mean(per_dim)


# ---------------------------------------------------------------------------
# generator objective


@dataclass
class GenLossBreakdown:
    kl_term: float
    ce_term: float
    total: float
    mean_class_prob: float = float("nan")


def generator_loss(
    snapshot: StatsSnapshot,
    head: HeadModel,
    g,
    n_per_class: int,
    lambda_kl: float,
    rng: np.random.Generator | None = None,
    *,
    noise: dict[int, np.ndarray] | None = None,
    include_probs: bool = True,
    backward: bool = True,
) -> GenLossBreakdown:
    """Forge ``n_per_class`` features per class, align head statistics, accumulate gradients.

    Classes are processed one after another and ``backward`` is called per
    class, so gradients add up in the generator parameters exactly as one
    backward on the full loss would. With a class-agnostic snapshot all
    classes are forged together and compared against the single bucket.
    """
    if n_per_class < 2:
        raise InsufficientBatchError("batch variance needs at least 2 features per class")
    num_classes = g.num_classes
    sites = [s for s in snapshot.site_ids if include_probs or s != "probs"]
    if not sites:
        raise ContractError("no statistics sites to align")

    def forge(c: int) -> Tensor:
        z = noise[c] if noise is not None else rng.standard_normal((n_per_class, g.z_dim))
        return g.forward(c, Tensor(z))

    kl_total = 0.0
    ce_total = 0.0
    prob_total = 0.0
    if snapshot.class_agnostic:
        feats = [forge(c) for c in range(num_classes)]
        labels = np.repeat(np.arange(num_classes), [f.shape[0] for f in feats])
        out = head.forward(T.concat(feats, 0), collect_sites=True)
        kl = _site_kl(out.sites, snapshot, sites, 0)
        ce = T.cross_entropy(out.logits, labels)
        loss = T.mul_scalar(kl, lambda_kl) + ce
        if backward:
            T.backward(loss)
        kl_total = lambda_kl * kl.item()
        ce_total = ce.item()
        prob_total = out.sites["probs"].data[np.arange(len(labels)), labels].mean()
        return GenLossBreakdown(kl_total, ce_total, kl_total + ce_total, float(prob_total))

    if snapshot.num_classes != num_classes:
        raise ContractError("snapshot and generator disagree on the number of classes")
    for c in range(num_classes):
        f = forge(c)
        out = head.forward(f, collect_sites=True)
        labels = np.full(f.shape[0], c)
        kl = _site_kl(out.sites, snapshot, sites, c)
        ce = T.cross_entropy(out.logits, labels)
        loss_c = T.mul_scalar(T.mul_scalar(kl, lambda_kl) + ce, 1.0 / num_classes)
        if backward:
            T.backward(loss_c)
        kl_total += lambda_kl * kl.item() / num_classes
        ce_total += ce.item() / num_classes
        prob_total += out.sites["probs"].data[:, c].mean() / num_classes
    return GenLossBreakdown(kl_total, ce_total, kl_total + ce_total, float(prob_total))


def _site_kl(site_values: dict[str, Tensor], snapshot: StatsSnapshot, sites, bucket: int) -> Tensor:
    terms = []
    for sid in sites:
        rec = snapshot.site(sid)
        x = site_values[sid]
        mu_fake = T.mean(x, axis=0)
        var_fake = T.var(x, axis=0, ddof=1) + VAR_FLOOR
        terms.append(kl_gaussian_diag(rec.mean[bucket], rec.var[bucket], mu_fake, var_fake))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return T.mul_scalar(total, 1.0 / len(terms))


# ---------------------------------------------------------------------------
# novel-stage objectives


@dataclass(frozen=True)
class LossSwitches:
    conf: bool = True
    feat_distill: bool = True
    reg_l1: bool = True

    @classmethod
    def off(cls) -> LossSwitches:
        return cls(False, False, False)


@dataclass
class KdLossBreakdown:
    cls_feat_term: Tensor
    reg_feat_term: Tensor
    reg_l1_term: Tensor
    conf_term: Tensor
    cls_novel_term: Tensor
    reg_novel_term: Tensor
    total: Tensor

    def as_floats(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name).item() for f in fields(self)}

    @property
    def base_part(self) -> Tensor:
        return self.cls_feat_term + self.reg_feat_term + self.reg_l1_term + self.conf_term

    @property
    def novel_part(self) -> Tensor:
        return self.cls_novel_term + self.reg_novel_term


def _zero() -> Tensor:
    return Tensor(0.0)


def _check_base_labels(labels: np.ndarray, num_base: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_base):
        raise ContractError("forged batch may only carry base-class labels")
    return labels


def _class_rows(reg: Tensor, labels: np.ndarray) -> Tensor:
    """Select the 4 regression outputs of each instance's own class."""
    n = len(labels)
    cols = 4 * labels[:, None] + np.arange(4)[None, :]
    return T.index(reg, (np.arange(n)[:, None], cols))


def distill_weights_of(student: HeadModel) -> tuple[np.ndarray, np.ndarray]:
    """Snapshot of the student's classifier and regressor weights used as distillation rows."""
    return student.params["cls.weight"].data.copy(), student.params["reg.weight"].data.copy()


def _distill_terms(t_out, s_out, student: HeadModel, labels: np.ndarray, lambda_f: float,
                   weights: tuple[np.ndarray, np.ndarray] | None = None):
    n = len(labels)
    diff = t_out.pooled - s_out.pooled
    # weight rows are constants in the graph
    w_cls_all, w_reg = weights if weights is not None else (
        student.params["cls.weight"].data, student.params["reg.weight"].data)
    w_cls = Tensor(w_cls_all[labels])
    cls_feat = T.mul_scalar(T.sum(T.square(diff * w_cls)), lambda_f / n)
    reg_sq = None
    for j in range(4):
        w_j = Tensor(w_reg[4 * labels + j])
        term = T.sum(T.square(diff * w_j))
        reg_sq = term if reg_sq is None else reg_sq + term
    reg_feat = T.mul_scalar(reg_sq, lambda_f / (4 * n))
    reg_t = _class_rows(t_out.reg, labels)
    reg_s = _class_rows(s_out.reg, labels)
    l1 = T.mul_scalar(T.sum(T.abs_(reg_t - reg_s)), 1.0 / n)
    return cls_feat, reg_feat, l1


def kd_loss(teacher: HeadModel, student: HeadModel, forged, labels, lambda_f: float,
            switches: LossSwitches = LossSwitches(), *,
            distill_weights: tuple[np.ndarray, np.ndarray] | None = None) -> KdLossBreakdown:
    """Weighted feature distillation plus L1 on the class's regression outputs.

    The weighting rows come from the student's current classifier/regressor
    and are treated as constants; ``distill_weights`` pins them explicitly.
    """
    labels = _check_base_labels(labels, teacher.num_classes)
    forged = T.as_tensor(forged)
    t_out = teacher.forward(forged)
    s_out = student.forward(forged)
    cls_feat, reg_feat, l1 = _distill_terms(t_out, s_out, student, labels, lambda_f, distill_weights)
    terms = dict(
        cls_feat_term=cls_feat if switches.feat_distill else _zero(),
        reg_feat_term=reg_feat if switches.feat_distill else _zero(),
        reg_l1_term=l1 if switches.reg_l1 else _zero(),
    )
    total = terms["cls_feat_term"] + terms["reg_feat_term"] + terms["reg_l1_term"]
    return KdLossBreakdown(conf_term=_zero(), cls_novel_term=_zero(), reg_novel_term=_zero(),
                           total=total, **terms)


def conf_loss(student: HeadModel, forged, labels) -> Tensor:
    """Cross-entropy of the student's full softmax against the forged features' base labels."""
    labels = np.asarray(labels, dtype=np.int64)
    return T.cross_entropy(student.forward(T.as_tensor(forged)).logits, labels)


def novel_loss(student: HeadModel, teacher: HeadModel, novel_batch, forged_batch, lambda_f: float,
               switches: LossSwitches = LossSwitches(), reg_beta: float = 1.0, *,
               distill_weights: tuple[np.ndarray, np.ndarray] | None = None) -> KdLossBreakdown:
    """Supervised loss on the novel shots plus distillation/confidence on forged base features.

    ``novel_batch`` is ``(features, labels, reg_targets)`` with labels in the
    full class range; ``forged_batch`` is ``(features, labels)`` or ``None``.
    """
    x_n, y_n, t_n = novel_batch
    y_n = np.asarray(y_n, dtype=np.int64)
    if len(y_n):
        s_nov = student.forward(T.as_tensor(x_n))
        cls_novel = T.cross_entropy(s_nov.logits, y_n)
        reg_pred = _class_rows(s_nov.reg, y_n)
        reg_novel = T.mul_scalar(T.sum(T.smooth_l1(reg_pred - Tensor(t_n), reg_beta)), 1.0 / len(y_n))
    else:
        cls_novel, reg_novel = _zero(), _zero()

    cls_feat = reg_feat = l1 = conf = _zero()
    if forged_batch is not None and len(forged_batch[1]):
        x_f, y_f = forged_batch
        y_f = _check_base_labels(y_f, student.num_base_classes)
        x_f = T.as_tensor(x_f)
        s_out = student.forward(x_f)
        if switches.feat_distill or switches.reg_l1:
            t_out = teacher.forward(x_f)
            cf, rf, l1_ = _distill_terms(t_out, s_out, student, y_f, lambda_f, distill_weights)
            if switches.feat_distill:
                cls_feat, reg_feat = cf, rf
            if switches.reg_l1:
                l1 = l1_
        if switches.conf:
            conf = T.cross_entropy(s_out.logits, y_f)
    total = cls_novel + reg_novel + cls_feat + reg_feat + l1 + conf
    return KdLossBreakdown(cls_feat, reg_feat, l1, conf, cls_novel, reg_novel, total)


# ---------------------------------------------------------------------------
# Fisher information / EWC


@dataclass
class FisherInfo:
    """Diagonal Fisher (``mode='full'``) or one mean value per parameter tensor (``'mean'``)."""

    mode: str
    values: dict[str, np.ndarray | float]
    anchor: dict[str, np.ndarray]

    def __post_init__(self):
        if self.mode not in ("full", "mean"):
            raise ValueError(f"unknown Fisher mode {self.mode!r}")

    @property
    def storage_size(self) -> int:
        """Number of stored importance values (excluding the anchor)."""
        if self.mode == "mean":
            return len(self.values)
        return int(sum(np.size(v) for v in self.values.values()))

    def to_mean(self) -> FisherInfo:
        if self.mode == "mean":
            return self
        return FisherInfo("mean", {k: _layer_mean(v) for k, v in self.values.items()}, self.anchor)

    def save(self, path) -> None:
        from .models import write_arrays

        arrays = {f"anchor/{k}": v for k, v in self.anchor.items()}
        arrays.update({f"fisher/{k}": np.asarray(v, dtype=np.float64) for k, v in self.values.items()})
        write_arrays(path, "fisher", {"mode": self.mode}, arrays)

    @classmethod
    def load(cls, path) -> FisherInfo:
        from .models import read_arrays

        meta, arrays = read_arrays(path, "fisher")
        anchor = {k[7:]: v for k, v in arrays.items() if k.startswith("anchor/")}
        values = {k[7:]: v for k, v in arrays.items() if k.startswith("fisher/")}
        if meta["mode"] == "mean":
            values = {k: float(v) for k, v in values.items()}
        return cls(meta["mode"], values, anchor)


def _layer_mean(v) -> float:
    # shifting by the minimum first makes a constant layer come back exactly
    v = np.asarray(v, dtype=np.float64)
    lo = v.min()
    return float(lo + np.mean(v - lo))


def task_loss(model: HeadModel, batch, reg_beta: float = 1.0) -> Tensor:
    """Base-training objective: classification CE + smooth-L1 on the true class's box outputs."""
    x, y, t = batch
    y = np.asarray(y, dtype=np.int64)
    out = model.forward(T.as_tensor(x))
    ce = T.cross_entropy(out.logits, y)
    reg = T.mul_scalar(T.sum(T.smooth_l1(_class_rows(out.reg, y) - Tensor(t), reg_beta)), 1.0 / len(y))
    return ce + reg


def compute_fisher(model: HeadModel, data_stream: Iterable, mode: str = "full",
                   loss_fn: Callable | None = None, grads: Iterable | None = None) -> FisherInfo:
    """Average of squared loss gradients over the items of ``data_stream``.

    Each stream item is one batch; its gradient is squared elementwise. For
    ``mode='mean'`` each parameter tensor collapses to the mean of its entries.
    """
    loss_fn = loss_fn or task_loss
    params = model.params
    acc = {k: np.zeros_like(p.data) for k, p in params.items()}
    n = 0
    saved = {k: p.grad for k, p in params.items()}
    for batch in data_stream:
        T.zero_grad(params.values())
        T.backward(loss_fn(model, batch))
        for k, p in params.items():
            if p.grad is not None:
                acc[k] += p.grad * p.grad
        n += 1
    for k, p in params.items():
        p.grad = saved[k]
    if n == 0:
        raise ContractError("Fisher information needs a non-empty data stream")
    full = FisherInfo("full", {k: v / n for k, v in acc.items()},
                      {k: p.data.copy() for k, p in params.items()})
    return full.to_mean() if mode == "mean" else full


def fisher_from_squared_grads(model: HeadModel, sq_sum: dict[str, np.ndarray], n: int,
                              mode: str = "full") -> FisherInfo:
    """Build a FisherInfo from gradients squared and summed during training."""
    if n == 0:
        raise ContractError("Fisher information needs a non-empty data stream")
    full = FisherInfo("full", {k: v / n for k, v in sq_sum.items()},
                      {k: p.data.copy() for k, p in model.params.items()})
    return full.to_mean() if mode == "mean" else full


def ewc_penalty(model: HeadModel, fisher: FisherInfo, lambda_ewc: float) -> Tensor:
    """``lambda * sum_i F_i (theta_i - theta*_i)^2`` over anchored (base) parameter entries.

    Rows appended after the anchor (novel classes) carry no anchor and are skipped.
    """
    total = _zero()
    if lambda_ewc == 0:
        return total
    for name, anchor in fisher.anchor.items():
        if name not in model.params:
            raise ContractError(f"model lacks anchored parameter {name!r}")
        p = model.params[name]
        if p.shape == anchor.shape:
            theta = p
        elif p.ndim == anchor.ndim and p.shape[1:] == anchor.shape[1:] and p.shape[0] >= anchor.shape[0]:
            theta = T.index(p, slice(0, anchor.shape[0]))
        else:
            raise ContractError(f"{name}: parameter {p.shape} incompatible with anchor {anchor.shape}")
        sq = T.square(theta - Tensor(anchor))
        f = fisher.values[name]
        if fisher.mode == "mean":
            # scale before summing, so a constant layer rounds exactly like full mode
            term = T.sum(T.mul_scalar(sq, float(f)))
        else:
            term = T.sum(T.mul(sq, Tensor(f)))
        total = total + term
    return T.mul_scalar(total, lambda_ewc)

"""Teacher/student head and the class-conditional feature generator."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .stats import DataWatcher
from .tensor import ContractError, DimensionError, Tensor

CKPT_MAGIC = b"FFCKPT\x00\x00"
CKPT_VERSION = 1
NORM_EPS = 1e-5

SITE_KINDS = ("pre_norm", "post_act", "logits", "probs")


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# checkpoint container


def write_arrays(path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Versioned header + named table of little-endian f64 arrays."""
    table = [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()]
    header = json.dumps({"kind": kind, "meta": meta, "table": table}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(header)) + header)
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def read_arrays(path, kind: str | None = None):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", buf, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(buf[16:16 + hlen])
    if kind is not None and header["kind"] != kind:
        raise ValueError(f"{path}: expected a {kind!r} checkpoint, found {header['kind']!r}")
    off = 16 + hlen
    arrays = {}
    for entry in header["table"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arrays[entry["name"]] = np.frombuffer(buf, "<f8", count, off).reshape(shape).astype(np.float64)
        off += 8 * count
    if off != len(buf):
        raise ValueError(f"{path}: trailing bytes")
    return header["meta"], arrays


# ---------------------------------------------------------------------------
# head


@dataclass(frozen=True)
class HeadSpec:
    in_channels: int = 32
    spatial: tuple[int, int] = (5, 5)
    hidden: tuple[int, ...] = (64, 64)
    kernel: int = 1
    num_classes: int = 8

    @property
    def pooled_dim(self) -> int:
        return self.hidden[-1]


class HeadOutput(NamedTuple):
    logits: Tensor
    reg: Tensor
    pooled: Tensor
    sites: dict[str, Tensor]


class HeadModel:
    """Conv blocks (conv -> frozen norm -> relu), global pool, classifier and box regressor.

    ``num_base_classes`` is the number of leading classifier/regressor rows
    inherited from the teacher; a teacher has ``num_base_classes == num_classes``.
    """

    def __init__(self, spec: HeadSpec, params: dict[str, Tensor], norms: dict[str, np.ndarray],
                 num_base_classes: int | None = None):
        self.spec = spec
        self.params = params
        self.norms = norms
        self.num_base_classes = spec.num_classes if num_base_classes is None else num_base_classes

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    @property
    def num_blocks(self) -> int:
        return len(self.spec.hidden)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return self.params.items()

    def freeze(self) -> HeadModel:
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.params.values())

    def site_ids(self, kinds=SITE_KINDS) -> list[str]:
        ids = []
        for i in range(self.num_blocks):
            for kind in ("pre_norm", "post_act"):
                if kind in kinds:
                    ids.append(f"block{i}.{kind}")
        ids += [k for k in ("logits", "probs") if k in kinds]
        return ids

    def site_dim(self, site_id: str) -> int:
        if site_id in ("logits", "probs"):
            return self.num_classes
        block = int(site_id.split(".")[0][len("block"):])
        return self.spec.hidden[block]

    def make_watchers(self, kinds=SITE_KINDS, class_agnostic: bool = False) -> list[DataWatcher]:
        return [DataWatcher(s, self.site_dim(s), self.num_classes, class_agnostic)
                for s in self.site_ids(kinds)]

    def _norm_coeffs(self, i: int):
        rm = self.norms[f"block{i}.norm.running_mean"]
        rv = self.norms[f"block{i}.norm.running_var"]
        scale = self.norms[f"block{i}.norm.scale"]
        shift = self.norms[f"block{i}.norm.shift"]
        a = scale / np.sqrt(rv + NORM_EPS)
        return a, shift - rm * a

    def forward(self, x: Tensor, collect_sites: bool = False) -> HeadOutput:
        x = T.as_tensor(x)
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise DimensionError(
                f"head expects N x {self.spec.in_channels} x H x W input, got {x.shape}"
            )
        sites: dict[str, Tensor] = {}
        h = x
        pad = (self.spec.kernel - 1) // 2
        for i in range(self.num_blocks):
            h = T.conv2d(h, self.params[f"block{i}.conv.weight"], self.params[f"block{i}.conv.bias"], pad)
            if collect_sites:
                sites[f"block{i}.pre_norm"] = T.avg_pool2d(h)
            a, b = self._norm_coeffs(i)
            h = T.relu(T.channel_affine(h, a, b))
            if collect_sites:
                sites[f"block{i}.post_act"] = T.avg_pool2d(h)
        pooled = sites[f"block{self.num_blocks - 1}.post_act"] if collect_sites else T.avg_pool2d(h)
        logits = T.linear(pooled, self.params["cls.weight"], self.params["cls.bias"])
        reg = T.linear(pooled, self.params["reg.weight"], self.params["reg.bias"])
        if collect_sites:
            sites["logits"] = logits
            sites["probs"] = T.softmax(logits)
        return HeadOutput(logits, reg, pooled, sites)

    __call__ = forward

    def calibrate_norm(self, x: np.ndarray) -> None:
        """Set the frozen-norm running statistics from one batch (stand-in for pretraining)."""
        h = Tensor(x)
        pad = (self.spec.kernel - 1) // 2
        for i in range(self.num_blocks):
            h = T.conv2d(h, self.params[f"block{i}.conv.weight"].detach(),
                         self.params[f"block{i}.conv.bias"].detach(), pad)
            self.norms[f"block{i}.norm.running_mean"] = h.data.mean(axis=(0, 2, 3))
            self.norms[f"block{i}.norm.running_var"] = h.data.var(axis=(0, 2, 3))
            a, b = self._norm_coeffs(i)
            h = T.relu(T.channel_affine(h, a, b))

    # persistence ------------------------------------------------------------

    def descriptor(self) -> dict:
        d = asdict(self.spec)
        d["num_base_classes"] = self.num_base_classes
        return d

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": v.data for k, v in self.params.items()}
        out.update({f"norm/{k}": v for k, v in self.norms.items()})
        return out

    def save(self, path) -> None:
        write_arrays(path, "head", self.descriptor(), self.arrays())

    @classmethod
    def load(cls, path, requires_grad: bool = True) -> HeadModel:
        meta, arrays = read_arrays(path, "head")
        return cls.from_arrays(meta, arrays, requires_grad)

    @classmethod
    def from_arrays(cls, meta: dict, arrays: dict, requires_grad: bool = True) -> HeadModel:
        meta = dict(meta)
        nb = meta.pop("num_base_classes")
        meta["spatial"] = tuple(meta["spatial"])
        meta["hidden"] = tuple(meta["hidden"])
        spec = HeadSpec(**meta)
        params = {k[6:]: Tensor(v, requires_grad=requires_grad, name=k[6:])
                  for k, v in arrays.items() if k.startswith("param/")}
        norms = {k[5:]: v for k, v in arrays.items() if k.startswith("norm/")}
        return cls(spec, params, norms, nb)


def head_forward(m: HeadModel, f: Tensor, taps: list[DataWatcher] | None = None,
                 labels: np.ndarray | None = None):
    """Forward pass returning ``(logits, reg, pooled)``; watchers in ``taps`` observe their sites."""
    out = m.forward(f, collect_sites=bool(taps))
    if taps:
        if labels is None:
            raise ContractError("watchers need class labels")
        for w in taps:
            w.observe_batch(out.sites[w.site_id].data, labels)
    return out.logits, out.reg, out.pooled


def build_teacher(spec: HeadSpec, rng: np.random.Generator) -> HeadModel:
    params: dict[str, Tensor] = {}
    norms: dict[str, np.ndarray] = {}
    c_in, k = spec.in_channels, spec.kernel
    if k % 2 != 1:
        raise ValueError("kernel size must be odd")
    for i, c_out in enumerate(spec.hidden):
        params[f"block{i}.conv.weight"] = Tensor(kaiming_uniform(rng, (c_out, c_in, k, k), c_in * k * k))
        params[f"block{i}.conv.bias"] = Tensor(np.zeros(c_out))
        norms[f"block{i}.norm.running_mean"] = np.zeros(c_out)
        norms[f"block{i}.norm.running_var"] = np.ones(c_out)
        norms[f"block{i}.norm.scale"] = np.ones(c_out)
        norms[f"block{i}.norm.shift"] = np.zeros(c_out)
        c_in = c_out
    d, nc = spec.pooled_dim, spec.num_classes
    params["cls.weight"] = Tensor(kaiming_uniform(rng, (nc, d), d))
    params["cls.bias"] = Tensor(np.zeros(nc))
    params["reg.weight"] = Tensor(kaiming_uniform(rng, (4 * nc, d), d))
    params["reg.bias"] = Tensor(np.zeros(4 * nc))
    for name, p in params.items():
        p.requires_grad = True
        p.name = name
    return HeadModel(spec, params, norms)


def clone_student(teacher: HeadModel, num_novel: int, rng: np.random.Generator) -> HeadModel:
    """Copy every teacher parameter and append rows for ``num_novel`` new classes.

    New classifier rows start at zero so base predictions are untouched;
    new regressor rows are Kaiming-initialised.
    """
    nb = teacher.num_classes
    d = teacher.spec.pooled_dim
    spec = HeadSpec(teacher.spec.in_channels, teacher.spec.spatial, teacher.spec.hidden,
                    teacher.spec.kernel, nb + num_novel)
    params = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in teacher.params.items()}
    ext = {
        "cls.weight": np.zeros((num_novel, d)),
        "cls.bias": np.zeros(num_novel),
        "reg.weight": kaiming_uniform(rng, (4 * num_novel, d), d),
        "reg.bias": np.zeros(4 * num_novel),
    }
    for name, rows in ext.items():
        params[name] = Tensor(np.concatenate([params[name].data, rows]), requires_grad=True, name=name)
    norms = {k: v.copy() for k, v in teacher.norms.items()}
    return HeadModel(spec, params, norms, num_base_classes=nb)


# ---------------------------------------------------------------------------
# generator


@dataclass(frozen=True)
class GeneratorSpec:
    z_dim: int = 100
    trunk_channels: int = 8
    num_layers: int = 5
    kernel: int = 3
    out_channels: int = 32
    spatial: tuple[int, int] = (5, 5)
    num_classes: int = 8
    leak: float = 0.2


class GeneratorModel:
    """Noise -> linear -> reshape -> shared conv trunk -> per-class 1x1 conv head."""

    def __init__(self, spec: GeneratorSpec, params: dict[str, Tensor]):
        self.spec = spec
        self.params = params

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    @property
    def z_dim(self) -> int:
        return self.spec.z_dim

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def head_parameters(self, class_id: int) -> list[Tensor]:
        return [self.params[f"head{class_id}.weight"], self.params[f"head{class_id}.bias"]]

    def forward(self, class_id: int, z) -> Tensor:
        if not 0 <= class_id < self.num_classes:
            raise ContractError(f"class {class_id} outside [0, {self.num_classes})")
        z = T.as_tensor(z)
        single = z.ndim == 1
        if single:
            z = T.reshape(z, (1, -1))
        if z.ndim != 2 or z.shape[1] != self.z_dim:
            raise DimensionError(f"noise must have {self.z_dim} columns, got {z.shape}")
        s = self.spec
        h = T.linear(z, self.params["fc.weight"], self.params["fc.bias"])
        h = T.reshape(h, (z.shape[0], s.trunk_channels, *s.spatial))
        pad = (s.kernel - 1) // 2
        for i in range(s.num_layers):
            h = T.conv2d(h, self.params[f"trunk{i}.weight"], self.params[f"trunk{i}.bias"], pad)
            h = T.leaky_relu(h, s.leak)
        out = T.conv2d(h, self.params[f"head{class_id}.weight"], self.params[f"head{class_id}.bias"], 0)
        if single:
            out = T.reshape(out, out.shape[1:])
        return out

    __call__ = forward

    def save(self, path) -> None:
        write_arrays(path, "generator", asdict(self.spec), {k: v.data for k, v in self.params.items()})

    @classmethod
    def load(cls, path) -> GeneratorModel:
        meta, arrays = read_arrays(path, "generator")
        meta["spatial"] = tuple(meta["spatial"])
        return cls(GeneratorSpec(**meta),
                   {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()})


def generator_forward(g: GeneratorModel, class_id: int, z) -> Tensor:
    return g.forward(class_id, z)


def build_generator(spec: GeneratorSpec, rng: np.random.Generator) -> GeneratorModel:
    c, k = spec.trunk_channels, spec.kernel
    if k % 2 != 1:
        raise ValueError("kernel size must be odd")
    h, w = spec.spatial
    params = {
        "fc.weight": kaiming_uniform(rng, (c * h * w, spec.z_dim), spec.z_dim),
        "fc.bias": np.zeros(c * h * w),
    }
    for i in range(spec.num_layers):
        params[f"trunk{i}.weight"] = kaiming_uniform(rng, (c, c, k, k), c * k * k)
        params[f"trunk{i}.bias"] = np.zeros(c)
    for cls in range(spec.num_classes):
        params[f"head{cls}.weight"] = kaiming_uniform(rng, (spec.out_channels, c, 1, 1), c)
        params[f"head{cls}.bias"] = np.zeros(spec.out_channels)
    return GeneratorModel(spec, {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()})


def sample_noise(rng: np.random.Generator, n: int, z_dim: int) -> Tensor:
    if n < 1:
        raise ContractError("need at least one noise vector")
    return Tensor(rng.standard_normal((n, z_dim)))


FULL_SCALE_GENERATOR = GeneratorSpec(z_dim=100, trunk_channels=8, num_layers=5, kernel=3,
                                out_channels=1024, spatial=(7, 7), num_classes=60)

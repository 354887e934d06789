"""DiffusionNet: linear in, N x (diffusion, gradient features, MLP, residual), linear out."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .spectral import HKS_TIMES, compute_hks

CHECKPOINT_VERSION = 1
_MAGIC = b"DNETCKPT"

INPUT_CHANNELS = {"xyz": 3, "hks": len(HKS_TIMES)}


class ConfigurationError(ValueError):
    pass


@dataclass
class NetworkConfig:
    width: int = 128
    n_blocks: int = 4
    input_mode: str = "xyz"            # xyz | hks
    head: str = "vertex_softmax"       # vertex_softmax | global_mean_softmax | raw
    n_out: int = 2
    dropout: float = 0.0
    gradient_mode: str = "complex"     # complex | real
    mlp_hidden_layers: int = 2
    k: int = 128
    output_at: str = "vertices"        # vertices | faces | edges
    # ablation switches
    diffusion: str = "learned"         # learned | fixed | none
    fixed_time: float = 0.1
    gradient_features: bool = True
    learn_gradient_matrix: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.width < 1 or self.n_blocks < 1 or self.n_out < 1:
            raise ConfigurationError("width, n_blocks and n_out must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must be in [0, 1), got {self.dropout}")
        choices = {
            "input_mode": ("xyz", "hks"),
            "head": ("vertex_softmax", "global_mean_softmax", "raw"),
            "gradient_mode": ("complex", "real"),
            "output_at": ("vertices", "faces", "edges"),
            "diffusion": ("learned", "fixed", "none"),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigurationError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if self.mlp_hidden_layers < 0:
            raise ConfigurationError("mlp_hidden_layers must be >= 0")

    @property
    def in_channels(self):
        return INPUT_CHANNELS[self.input_mode]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown network config field(s): {sorted(unknown)}")
        return cls(**d)


@dataclass
class DiffusionNetParams:
    config: NetworkConfig
    tensors: dict

    def __getitem__(self, name):
        return self.tensors[name]

    def named(self):
        return list(self.tensors.items())

    def trainable(self):
        return [(n, t) for n, t in self.tensors.items() if t.requires_grad]

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def n_parameters(self):
        return int(sum(t.data.size for t in self.tensors.values()))

    def copy(self):
        return DiffusionNetParams(
            self.config,
            {n: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=n)
             for n, t in self.tensors.items()})


def _glorot(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def mlp_widths(config):
    D = config.width
    d_in = 2 * D if config.gradient_features else D
    return [d_in] + [D] * config.mlp_hidden_layers + [D]


def init_params(config, seed=0):
    """Glorot-uniform weights, zero biases, diffusion times 1e-4, A = 0.

    When the gradient matrix is not learned it is frozen at a random
    Glorot-uniform draw instead of zero.
    """
    rng = np.random.default_rng(seed)
    D = config.width
    T = {}

    def param(name, data, trainable=True):
        T[name] = Tensor(data, requires_grad=trainable, name=name)

    param("linear_in.weight", _glorot(rng, config.in_channels, D))
    param("linear_in.bias", np.zeros(D))
    for b in range(config.n_blocks):
        pre = f"blocks.{b}"
        if config.diffusion == "learned":
            param(f"{pre}.time", np.full(D, 1e-4))
        elif config.diffusion == "fixed":
            param(f"{pre}.time", np.full(D, config.fixed_time), trainable=False)
        if config.gradient_features:
            shape = (2, D, D) if config.gradient_mode == "complex" else (D, D)
            if config.learn_gradient_matrix:
                param(f"{pre}.A", np.zeros(shape))
            else:
                bound = np.sqrt(6.0 / (2 * D))
                param(f"{pre}.A", rng.uniform(-bound, bound, size=shape), trainable=False)
        widths = mlp_widths(config)
        for i, (a, c) in enumerate(zip(widths[:-1], widths[1:])):
            param(f"{pre}.mlp.{i}.weight", _glorot(rng, a, c))
            param(f"{pre}.mlp.{i}.bias", np.zeros(c))
    param("linear_out.weight", _glorot(rng, D, config.n_out))
    param("linear_out.bias", np.zeros(config.n_out))
    return DiffusionNetParams(config, T)


def featurize(shape, ops, config, positions=None):
    """Input features: normalized xyz (optionally overridden, e.g. rotated) or
    HKS at the 16 default times."""
    if config.input_mode == "xyz":
        pos = shape.positions if positions is None else positions
        return Tensor(np.asarray(pos, dtype=np.float64))
    return Tensor(compute_hks(ops.basis, HKS_TIMES).values)


def _linear(x, params, name):
    return ad.add(ad.matmul(x, params[f"{name}.weight"]), params[f"{name}.bias"])


def block_forward(x, params, b, ops, train=False, rng=None):
    config = params.config
    pre = f"blocks.{b}"
    if config.diffusion == "none":
        u = x
    else:
        u = ad.spectral_diffusion(x, params[f"{pre}.time"], ops.evals, ops.evecs, ops.mass)
    if config.gradient_features:
        if config.gradient_mode == "complex" and not ops.oriented:
            raise ConfigurationError("complex gradient features need an oriented shape; "
                                     "use gradient_mode='real'")
        w = ad.sparse_apply(ops.G_split, u)
        g = ad.gradient_features(w, params[f"{pre}.A"], config.gradient_mode)
        h = ad.concat([u, g])
    else:
        h = u
    n_layers = len(mlp_widths(config)) - 1
    for i in range(n_layers):
        h = _linear(h, params, f"{pre}.mlp.{i}")
        if i < n_layers - 1:
            h = ad.relu(h)
            h = ad.dropout(h, config.dropout, train, rng)
    return ad.add(x, h)


def _average_to_elements(y, faces, edges, output_at):
    if output_at == "faces":
        idx = faces
    elif output_at == "edges":
        idx = edges
    else:
        return y
    if idx is None:
        raise ConfigurationError(f"output_at={output_at!r} needs mesh connectivity")
    parts = [ad.gather_rows(y, idx[:, c]) for c in range(idx.shape[1])]
    acc = parts[0]
    for p in parts[1:]:
        acc = ad.add(acc, p)
    return ad.scale(acc, 1.0 / idx.shape[1])


def network_forward(features, ops, params, train=False, rng=None, return_logits=False,
                    faces=None, edges=None):
    """Run the network on precomputed input features.

    Returns the head output (row softmax, global mean + softmax, or raw);
    with ``return_logits`` the pre-softmax values are returned instead.
    """
    config = params.config
    x = features if isinstance(features, Tensor) else Tensor(features)
    if x.ndim != 2 or x.shape[1] != config.in_channels or x.shape[0] != ops.n_vertices:
        raise ConfigurationError(f"features {x.shape} do not match V={ops.n_vertices}, "
                                 f"in_channels={config.in_channels}")
    if config.diffusion != "none" and ops.k != config.k:
        raise ConfigurationError(f"operators have k={ops.k}, network expects k={config.k}")
    x = _linear(x, params, "linear_in")
    for b in range(config.n_blocks):
        x = block_forward(x, params, b, ops, train=train, rng=rng)
    y = _linear(x, params, "linear_out")
    if config.head == "global_mean_softmax":
        y = ad.mean_over_vertices(y, ops.mass)
    else:
        y = _average_to_elements(y, faces, edges, config.output_at)
    if return_logits or config.head == "raw":
        return y
    return ad.row_softmax(y)


# --------------------------------------------------------------------------
# Checkpoints: 8-byte magic, u64 header length, JSON header, float64 blobs

def save_checkpoint(params, path, extra=None):
    names = list(params.tensors)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": params.config.to_dict(),
        "parameters": [{"name": n, "shape": list(params[n].shape),
                        "trainable": bool(params[n].requires_grad)} for n in names],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(params[n].data, dtype="<f8").tobytes())


def read_checkpoint_header(path):
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise ValueError(f"{path}: not a DiffusionNet checkpoint")
        (n,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(n).decode("utf-8")), 16 + n


def load_checkpoint(path):
    header, offset = read_checkpoint_header(path)
    if header["format_version"] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {header['format_version']} unsupported")
    raw = Path(path).read_bytes()
    config = NetworkConfig.from_dict(header["config"])
    T = {}
    for p in header["parameters"]:
        size = int(np.prod(p["shape"])) if p["shape"] else 1
        data = np.frombuffer(raw, "<f8", size, offset).astype(np.float64).reshape(p["shape"])
        offset += 8 * size
        T[p["name"]] = Tensor(data, requires_grad=p["trainable"], name=p["name"])
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    return DiffusionNetParams(config, T), header.get("extra", {})

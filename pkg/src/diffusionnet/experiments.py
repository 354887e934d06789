"""Verification suites and desk-scale experiments, each producing an
:class:`ExperimentReport` with thresholds attached to every measured value."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import (BumpySphereConfig, MirroredPairConfig, Shape, SurfaceMesh, _reflect_x,
                       bumpy_sphere, flat_grid, icosphere, midpoint_refine, mirrored_pair,
                       normalized, sample_point_cloud)
from .network import NetworkConfig, featurize, init_params, network_forward
from .operators import (TangentFrames, build_cotan_laplacian,
                        build_gradient_matrix, build_mass_matrix, compute_operators)
from .spectral import diffuse_spectral, solve_eigenbasis
from .training import Sample, TrainConfig, evaluate, fit, label_smoothed_cross_entropy

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
SUITES = ("heat_kernel", "gradients", "eigen", "invariance")
EXPERIMENTS = ("orientation", "ablation", "eig_sweep", "robustness")
STAMP_DIR_ENV = "DIFFUSIONNET_STAMP_DIR"


# --------------------------------------------------------------------------
# Reports

@dataclass
class Quantity:
    name: str
    value: float
    threshold: object          # float, or (lo, hi) for "between"
    comparator: str            # ">=" | "<=" | ">" | "between"
    unit: str = ""
    basis: str = ""            # what the threshold is checked against

    @property
    def passed(self):
        v = self.value
        if not np.isfinite(v):
            return False
        if self.comparator == ">=":
            return v >= self.threshold
        if self.comparator == ">":
            return v > self.threshold
        if self.comparator == "<=":
            return v <= self.threshold
        if self.comparator == "between":
            lo, hi = self.threshold
            return lo <= v <= hi
        raise ValueError(f"unknown comparator {self.comparator!r}")

    def describe(self):
        thr = (f"[{self.threshold[0]:g}, {self.threshold[1]:g}]"
               if self.comparator == "between" else f"{self.threshold:g}")
        op = "in" if self.comparator == "between" else self.comparator
        return f"{self.name} = {self.value:.6g}{self.unit and ' ' + self.unit} ({op} {thr})"

    def to_dict(self):
        d = asdict(self)
        d["value"] = float(self.value)
        d["threshold"] = list(self.threshold) if self.comparator == "between" else self.threshold
        d["passed"] = bool(self.passed)
        return d


@dataclass
class ExperimentReport:
    experiment: str
    config: dict
    quantities: list = field(default_factory=list)
    rows: list = field(default_factory=list)   # per-run details
    wall_time: float = 0.0

    def add(self, name, value, threshold, comparator, unit="", basis=""):
        q = Quantity(name, float(value), threshold, comparator, unit, basis)
        self.quantities.append(q)
        return q

    def get(self, name):
        for q in self.quantities:
            if q.name == name:
                return q
        raise KeyError(name)

    @property
    def passed(self):
        return all(q.passed for q in self.quantities)

    def to_dict(self):
        return {"schema_version": REPORT_SCHEMA_VERSION, "experiment": self.experiment,
                "config": self.config, "passed": self.passed,
                "wall_time_seconds": self.wall_time,
                "quantities": [q.to_dict() for q in self.quantities], "rows": self.rows}

    def summary(self):
        lines = [f"{self.experiment}: {'PASS' if self.passed else 'FAIL'} ({self.wall_time:.1f} s)"]
        for q in self.quantities:
            lines.append(f"  [{'ok' if q.passed else 'FAIL'}] {q.describe()}")
        return "\n".join(lines)

    def write(self, out_dir):
        """Write ``<experiment>.json``, ``<experiment>.csv`` (quantities) and,
        when present, ``<experiment>_runs.csv``. Returns the JSON path."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"{self.experiment}.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_jsonable))
        cols = ["name", "value", "unit", "comparator", "threshold", "passed", "basis"]
        with open(out / f"{self.experiment}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for q in self.quantities:
                d = q.to_dict()
                w.writerow([json.dumps(d[c]) if c == "threshold" else d[c] for c in cols])
        if self.rows:
            keys = list(dict.fromkeys(k for r in self.rows for k in r))
            with open(out / f"{self.experiment}_runs.csv", "w", newline="") as fh:
                w = csv.DictWriter(fh, keys)
                w.writeheader()
                w.writerows(self.rows)
        return path


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _config_from_dict(cls, d):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} field(s): {sorted(unknown)}")
    kw = {}
    for f in fields(cls):
        if f.name in d:
            v = d[f.name]
            kw[f.name] = tuple(tuple(x) if isinstance(x, list) else x for x in v) \
                if isinstance(v, list) else v
    return cls(**kw)


def _timed(fn):
    def run(*args, **kwargs):
        t0 = time.perf_counter()
        report = fn(*args, **kwargs)
        report.wall_time = time.perf_counter() - t0
        return report
    run.__name__ = fn.__name__
    run.__doc__ = fn.__doc__
    return run


# --------------------------------------------------------------------------
# Verification suites

@dataclass(frozen=True)
class HeatKernelConfig:
    grid: int = 101
    t: float = 0.005
    k: int = 256
    radius_factor: float = 3.0   # compare on r <= radius_factor * sqrt(2 t)
    tolerance: float = 0.05


@_timed
def verify_heat_kernel(config=HeatKernelConfig()):
    """Diffuse a unit-mass delta at the grid center and compare with the
    planar Gaussian heat kernel in a disc of a few standard deviations."""
    mesh = flat_grid(config.grid)
    L, m = build_cotan_laplacian(mesh), build_mass_matrix(mesh)
    basis = solve_eigenbasis(L, m, config.k)
    n = config.grid
    c = (n // 2) * n + n // 2
    u = np.zeros(mesh.n_vertices)
    u[c] = 1.0 / m[c]
    h = diffuse_spectral(u, config.t, basis, m)
    r2 = np.sum((mesh.positions - mesh.positions[c]) ** 2, axis=1)
    exact = np.exp(-r2 / (4 * config.t)) / (4 * np.pi * config.t)
    disc = r2 <= (config.radius_factor ** 2) * 2 * config.t
    w = m[disc]
    err = np.sqrt(np.sum(w * (h[disc] - exact[disc]) ** 2) / np.sum(w * exact[disc] ** 2))
    rep = ExperimentReport("heat_kernel", asdict(config))
    rep.add("relative_l2_error", err, config.tolerance, "<=",
            basis="closed-form planar heat kernel (4 pi t)^-1 exp(-r^2 / 4t)")
    rep.add("total_heat", float(m @ h), (0.999, 1.001), "between",
            basis="mass conservation of a unit delta")
    rep.rows.append({"n_vertices": mesh.n_vertices, "n_compared": int(disc.sum()),
                     "lambda_max": float(basis.evals[-1])})
    return rep


@_timed
def verify_eigen(tol_residual=1e-7, tol_orth=1e-6, tol_sphere=0.05):
    """Residuals, M-orthonormality, the unit-sphere spectrum l(l+1) and the
    null space of a two-component mesh."""
    rep = ExperimentReport("eigen", {"tol_residual": tol_residual, "tol_orth": tol_orth,
                                     "tol_sphere": tol_sphere})
    for subdiv, k in ((3, 16), (4, 16)):  # dense and Lanczos paths
        mesh = icosphere(subdiv)
        L, m = build_cotan_laplacian(mesh), build_mass_matrix(mesh)
        B = solve_eigenbasis(L, m, k)
        R = L @ B.evecs - B.evals * (m[:, None] * B.evecs)
        res = np.linalg.norm(R, axis=0) / np.linalg.norm(m[:, None] * B.evecs, axis=0)
        orth = np.abs(B.evecs.T @ (m[:, None] * B.evecs) - np.eye(k)).max()
        tag = f"icosphere{subdiv}"
        rep.add(f"{tag}.max_residual", res.max(), tol_residual, "<=",
                basis="|L phi - lam M phi| / |M phi|")
        rep.add(f"{tag}.orthonormality_error", orth, tol_orth, "<=", basis="Phi^T M Phi = I")
        for l, idx in ((1, range(1, 4)), (2, range(4, 9))):
            rel = np.abs(B.evals[list(idx)] / (l * (l + 1)) - 1).max()
            rep.add(f"{tag}.l{l}_relative_error", rel, tol_sphere, "<=",
                    basis=f"unit sphere eigenvalue l(l+1) = {l * (l + 1)}")
        rep.rows.append({"mesh": tag, "evals": B.evals[:9].round(6).tolist()})
    a = icosphere(2)
    two = SurfaceMesh(np.vstack([a.positions, a.positions + [3.0, 0, 0]]),
                      np.vstack([a.faces, a.faces + a.n_vertices]))
    L, m = build_cotan_laplacian(two), build_mass_matrix(two)
    B = solve_eigenbasis(L, m, 4)
    rep.add("two_components.lambda_1", abs(B.evals[1]), 1e-8, "<=",
            basis="one zero eigenvalue per connected component")
    rep.add("two_components.lambda_2", B.evals[2], 1.0, ">=",
            basis="first nonzero sphere eigenvalue ~2")
    return rep


def _small_network_case(seed=0, gradient_mode="complex", width=16, n_blocks=2, subdiv=2, k=32,
                        input_mode="hks", head="vertex_softmax"):
    shape = normalized(bumpy_sphere(BumpySphereConfig(subdiv=subdiv), seed=seed))
    ops = compute_operators(shape, k=k)
    cfg = NetworkConfig(width=width, n_blocks=n_blocks, input_mode=input_mode, k=k,
                        gradient_mode=gradient_mode, head=head, n_out=3)
    params = init_params(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1)
    for name, t in params.named():
        # move off the zero / tiny initialization so every path is exercised
        if name.endswith(".time"):
            t.data = rng.uniform(0.01, 0.3, size=t.shape)
        elif name.endswith(".A"):
            t.data = rng.normal(scale=0.5, size=t.shape)
        elif name.endswith(".bias"):
            t.data = rng.normal(scale=0.1, size=t.shape)
    return shape, ops, params


@_timed
def verify_gradients(tolerance=1e-4, eps=1e-6, seed=0):
    """Central finite differences against tape gradients for every op and
    for all parameters of a 2-block, width-16 network."""
    rng = np.random.default_rng(seed)
    rep = ExperimentReport("gradients", {"tolerance": tolerance, "eps": eps, "seed": seed})

    def leaf(*shape, low=None, high=None, name=None):
        data = rng.normal(size=shape) if low is None else rng.uniform(low, high, size=shape)
        return Tensor(data, requires_grad=True, name=name)

    def weighted(y, Wt):
        return ad.total(ad.mul(y, Tensor(Wt)))

    V, C = 12, 4
    shape, ops, _ = _small_network_case(seed, width=4, k=20)
    Vs = ops.n_vertices
    x, y = leaf(V, C), leaf(V, C)
    R = rng.normal(size=(V, C))
    R3, R2 = rng.normal(size=(V, 3)), rng.normal(size=(V, 2 * C))
    cases = {
        "matmul": ([x, w := leaf(C, 3)], lambda: weighted(ad.matmul(x, w), R3)),
        "add_bias": ([x, b := leaf(C)], lambda: weighted(ad.add(x, b), R)),
        "mul": ([x, y], lambda: weighted(ad.mul(x, y), R)),
        "scale": ([x], lambda: weighted(ad.scale(x, -1.7), R)),
        "concat": ([x, y], lambda: weighted(ad.concat([x, y]), R2)),
        "relu": ([x], lambda: weighted(ad.relu(x), R)),
        "tanh": ([x], lambda: weighted(ad.tanh(x), R)),
        "log": ([p := leaf(V, C, low=0.5, high=2.0)], lambda: weighted(ad.log(p), R)),
        "dropout": ([x], lambda: weighted(ad.dropout(x, 0.3, True, np.random.default_rng(7)), R)),
        "row_softmax": ([x], lambda: weighted(ad.row_softmax(x), R)),
        "log_softmax": ([x], lambda: weighted(ad.log_softmax(x), R)),
        "mean_over_vertices": ([x], lambda: weighted(
            ad.mean_over_vertices(x, np.linspace(1, 2, V)), R[:1])),
        "gather_rows": ([x], lambda: weighted(ad.gather_rows(x, [0, 3, 3, 7]), R[:4])),
        "cross_entropy": ([x], lambda: label_smoothed_cross_entropy(x, np.arange(V) % C, 0.2)),
    }
    xs = leaf(Vs, C)
    Rs = rng.normal(size=(Vs, 2 * C))
    times = leaf(C, low=0.01, high=0.5, name="times")
    w2 = leaf(Vs, 2 * C)
    A_c, A_r = leaf(2, C, C), leaf(C, C)
    cases.update({
        "sparse_apply": ([xs], lambda: weighted(ad.sparse_apply(ops.G, xs), Rs)),
        "spectral_diffusion": ([xs, times], lambda: weighted(
            ad.spectral_diffusion(xs, times, ops.evals, ops.evecs, ops.mass), Rs[:, :C])),
        "gradient_features_complex": ([w2, A_c], lambda: weighted(
            ad.gradient_features(w2, A_c, "complex"), Rs[:, :C])),
        "gradient_features_real": ([w2, A_r], lambda: weighted(
            ad.gradient_features(w2, A_r, "real"), Rs[:, :C])),
    })
    for name, (inputs, fn) in cases.items():
        errs = ad.gradient_check(fn, inputs, eps=eps)
        rep.add(f"op.{name}", max(errs.values()), tolerance, "<=",
                basis="central finite differences")

    for mode in ("complex", "real"):
        shape, ops, params = _small_network_case(seed, gradient_mode=mode)
        feats = featurize(shape, ops, params.config)
        targets = shape.labels % params.config.n_out
        tensors = [t for _, t in params.trainable()]

        def loss():
            logits = network_forward(feats, ops, params, return_logits=True)
            return label_smoothed_cross_entropy(logits, targets, 0.1)

        errs = ad.gradient_check(loss, tensors, eps=eps)
        worst = max(errs, key=errs.get)
        rep.add(f"network_{mode}.max_relative_error", errs[worst], tolerance, "<=",
                basis="central finite differences over all parameters")
        for kind in ("time", "A"):
            sub = [e for n, e in errs.items() if n.endswith("." + kind)]
            rep.add(f"network_{mode}.{kind}_max_relative_error", max(sub), tolerance, "<=",
                    basis="central finite differences")
        rep.rows.append({"network": mode, "n_parameters": params.n_parameters(),
                         "worst_parameter": worst})
    return rep


def rotate_frames(frames, angles):
    """Rotate each tangent frame by its own angle about the normal."""
    c, s = np.cos(angles)[:, None], np.sin(angles)[:, None]
    return TangentFrames(frames.normals, c * frames.e1 + s * frames.e2,
                         -s * frames.e1 + c * frames.e2)


def with_frames(shape, ops, frames):
    """Operators with the gradient matrix rebuilt in different tangent frames."""
    G = build_gradient_matrix(shape, frames)
    return replace(ops, frames=frames, G=G, stats=dict(ops.stats))


def _forward_np(shape, ops, params):
    with ad.no_grad():
        return network_forward(featurize(shape, ops, params.config), ops, params).data


def random_rigid_motion(rng):
    from .training import random_rotation_matrix
    return random_rotation_matrix("rot_full", rng), rng.normal(size=3)


@_timed
def verify_invariance(seed=0, tol_perm=1e-10, tol_frame=1e-8, tol_rigid=1e-3, tol_mirror=1e-8):
    """Permutation, tangent-frame, rigid-motion and mirror checks on a small
    randomly initialized network with hks input."""
    rng = np.random.default_rng(seed)
    rep = ExperimentReport("invariance", {"seed": seed})
    shape, ops, params = _small_network_case(seed)
    y = _forward_np(shape, ops, params)

    perm = rng.permutation(shape.n_vertices)
    shape_p = permute_shape(shape, perm)
    y_p = _forward_np(shape_p, ops.permuted(perm), params)
    rep.add("permutation_max_abs", np.abs(y_p - y[perm]).max(), tol_perm, "<=",
            basis="outputs permute with the vertices")

    frames = rotate_frames(ops.frames, rng.uniform(0, 2 * np.pi, shape.n_vertices))
    y_f = _forward_np(shape, with_frames(shape, ops, frames), params)
    rep.add("frame_max_abs", np.abs(y_f - y).max(), tol_frame, "<=",
            basis="outputs independent of the tangent basis")

    Rm, tr = random_rigid_motion(rng)
    moved = shape.with_positions(shape.positions @ Rm.T + tr)
    y_r = _forward_np(moved, compute_operators(moved, k=ops.k), params)
    rep.add("rigid_max_abs", np.abs(y_r - y).max(), tol_rigid, "<=",
            basis="hks input is intrinsic; full pipeline recomputed")

    mirror = Shape(_reflect_x(shape), labels=shape.labels)
    ops_m = compute_operators(mirror, k=ops.k)
    _, _, params_r = _small_network_case(seed, gradient_mode="real")
    y_real = _forward_np(shape, ops, params_r)
    y_real_m = _forward_np(mirror, ops_m, params_r)
    rep.add("mirror_real_A_max_abs", np.abs(y_real_m - y_real).max(), tol_mirror, "<=",
            basis="real A cannot see the conjugation caused by reflection")
    y_m = _forward_np(mirror, ops_m, params)
    rep.add("mirror_complex_A_max_abs", np.abs(y_m - y).max(), 1e-3, ">",
            basis="complex A is orientation-aware")
    return rep


def permute_shape(shape, perm):
    """Reorder vertices so that new vertex ``i`` is old vertex ``perm[i]``."""
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    g = shape.geometry
    labels = None if shape.labels is None else shape.labels[perm]
    if shape.is_mesh:
        geom = SurfaceMesh(g.positions[perm], inv[g.faces], oriented=g.oriented)
    else:
        from .geometry import PointCloud
        geom = PointCloud(g.positions[perm], None if g.normals is None else g.normals[perm],
                          k_neighbors=g.k_neighbors)
    return Shape(geom, labels=labels, class_label=shape.class_label, name=shape.name)


VERIFY_SUITES = {
    "heat_kernel": verify_heat_kernel,
    "gradients": verify_gradients,
    "eigen": verify_eigen,
    "invariance": verify_invariance,
}


def run_verify(suite):
    if suite not in VERIFY_SUITES:
        raise ValueError(f"unknown verify suite {suite!r}; choose from {SUITES}")
    return VERIFY_SUITES[suite]()


# --------------------------------------------------------------------------
# Verification stamp

class VerificationRequired(RuntimeError):
    pass


def code_fingerprint():
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def stamp_path():
    root = os.environ.get(STAMP_DIR_ENV) or Path.home() / ".cache" / "diffusionnet"
    return Path(root) / "verify_stamp.json"


def record_verification(report):
    path = stamp_path()
    fp = code_fingerprint()
    data = {}
    if path.exists():
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError:
            data = {}
    if data.get("code") != fp:
        data = {"code": fp, "suites": {}}
    data["suites"][report.experiment] = {"passed": report.passed, "time": time.time()}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True))
    return path


def require_verification():
    """Raise unless every verify suite passed against the current code."""
    path = stamp_path()
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError):
        data = {}
    missing = [s for s in SUITES
               if data.get("code") != code_fingerprint()
               or not data.get("suites", {}).get(s, {}).get("passed")]
    if missing:
        raise VerificationRequired(
            f"verification stamp missing or stale for suite(s) {missing}; "
            f"run `diffusionnet verify --suite all` first")


# --------------------------------------------------------------------------
# Toy segmentation task

@dataclass(frozen=True)
class ToyTaskConfig:
    """Bumpy spheres whose vertices are labeled by the nearest bump.

    Bumps differ in width and height, so telling which bump is nearest
    needs context from across the surface.
    """

    subdiv: int = 4
    n_train: int = 8
    n_test: int = 4
    heights: tuple = (0.30, 0.40, 0.50)
    widths: tuple = (0.45, 0.38, 0.30)
    label_radius: float = 10.0
    min_separation: float = 1.75

    def shape(self, seed):
        cfg = BumpySphereConfig(subdiv=self.subdiv, n_bumps=len(self.heights),
                                widths=self.widths, heights=self.heights,
                                label_radius=self.label_radius,
                                min_separation=self.min_separation)
        return normalized(bumpy_sphere(cfg, seed=seed))

    @property
    def n_classes(self):
        return len(self.heights) + 1


def _samples(shapes, k):
    return [Sample.from_shape(s, compute_operators(s, k=k)) for s in shapes]


@lru_cache(maxsize=8)
def toy_dataset(task, seed, k=128):
    """``(train, test)`` samples; shapes are drawn from seeds disjoint per split."""
    base = 1000 * seed
    train = _samples([task.shape(base + i) for i in range(task.n_train)], k)
    test = _samples([task.shape(base + 500 + i) for i in range(task.n_test)], k)
    return train, test


def truncate_operators(ops, k):
    """Keep the first ``k`` eigenpairs."""
    if k > ops.k:
        raise ValueError(f"cannot truncate a k={ops.k} basis to k={k}")
    return replace(ops, evals=ops.evals[:k], evecs=ops.evecs[:, :k], stats=dict(ops.stats))


def _truncated(samples, k):
    return [replace(s, ops=truncate_operators(s.ops, k)) for s in samples]


def _train_and_eval(train, test, net_config, train_config):
    t0 = time.perf_counter()
    params, history = fit(train, net_config, train_config)
    return {"train_acc": history[-1]["train_acc"], "train_loss": history[-1]["train_loss"],
            "test_acc": evaluate(test, params)["accuracy"],
            "seconds": time.perf_counter() - t0}, params


ABLATION_VARIANTS = {
    "full": {},
    "no_diffusion": {"diffusion": "none"},
    "fixed_t0.1": {"diffusion": "fixed", "fixed_time": 0.1},
    "fixed_t0.5": {"diffusion": "fixed", "fixed_time": 0.5},
    "no_gradient_features": {"gradient_features": False},
    "unlearned_A": {"learn_gradient_matrix": False},
}


@dataclass
class AblationConfig:
    task: ToyTaskConfig = ToyTaskConfig()
    width: int = 32
    n_blocks: int = 4
    input_mode: str = "hks"
    epochs: int = 50
    seeds: tuple = (0, 1, 2)
    variants: tuple = tuple(ABLATION_VARIANTS)
    min_gap_diffusion: float = 10.0
    min_gap_gradient: float = 2.0

    def network(self, **overrides):
        return NetworkConfig(width=self.width, n_blocks=self.n_blocks,
                             input_mode=self.input_mode, n_out=self.task.n_classes,
                             **overrides)


def _experiment_config(cls, d):
    d = dict(d or {})
    task = d.pop("task", None)
    cfg = _config_from_dict(cls, d)
    if task is not None:
        cfg = replace(cfg, task=_config_from_dict(ToyTaskConfig, task))
    return cfg


@_timed
def run_ablation(config=None):
    """Train every variant on the toy task for each seed; compare test
    accuracies (in points) against the full model."""
    cfg = config or AblationConfig()
    rep = ExperimentReport("ablation", _config_dict(cfg))
    acc = {v: [] for v in cfg.variants}
    for seed in cfg.seeds:
        train, test = toy_dataset(cfg.task, seed, 128)
        for v in cfg.variants:
            net = cfg.network(**ABLATION_VARIANTS[v])
            row, _ = _train_and_eval(train, test, net, TrainConfig(epochs=cfg.epochs, seed=seed))
            rep.rows.append({"variant": v, "seed": seed, **row})
            acc[v].append(100.0 * row["test_acc"])
            log.info("ablation %s seed %d: test %.2f%%", v, seed, acc[v][-1])
    mean = {v: float(np.mean(a)) for v, a in acc.items()}
    for v in cfg.variants:
        rep.add(f"test_acc.{v}", mean[v], 0.0, ">=", unit="%", basis="reported, no threshold")
    if "no_diffusion" in mean:
        rep.add("gap.full_minus_no_diffusion", mean["full"] - mean["no_diffusion"],
                cfg.min_gap_diffusion, ">=", unit="points",
                basis="trend: removing diffusion must cost accuracy")
    if "no_gradient_features" in mean:
        rep.add("gap.full_minus_no_gradient_features",
                mean["full"] - mean["no_gradient_features"], cfg.min_gap_gradient, ">=",
                unit="points", basis="trend: removing gradient features must cost accuracy")
    return rep


@dataclass
class EigSweepConfig:
    task: ToyTaskConfig = ToyTaskConfig()
    width: int = 32
    n_blocks: int = 4
    input_mode: str = "hks"
    epochs: int = 50
    seeds: tuple = (0, 1, 2)
    ks: tuple = (8, 32, 128)


@_timed
def run_eig_sweep(config=None):
    """Train the full model with truncated eigenbases of several sizes.

    Every basis is a prefix of one k = max(ks) solve. HKS input features are
    computed from the truncated basis too.
    """
    cfg = config or EigSweepConfig()
    rep = ExperimentReport("eig_sweep", _config_dict(cfg))
    kmax = max(cfg.ks)
    acc = {k: [] for k in cfg.ks}
    for seed in cfg.seeds:
        train, test = toy_dataset(cfg.task, seed, kmax)
        for k in cfg.ks:
            net = NetworkConfig(width=cfg.width, n_blocks=cfg.n_blocks,
                                input_mode=cfg.input_mode, n_out=cfg.task.n_classes, k=k)
            row, _ = _train_and_eval(_truncated(train, k), _truncated(test, k), net,
                                     TrainConfig(epochs=cfg.epochs, seed=seed))
            rep.rows.append({"k": k, "seed": seed, **row})
            acc[k].append(100.0 * row["test_acc"])
            log.info("eig_sweep k=%d seed %d: test %.2f%%", k, seed, acc[k][-1])
    mean = {k: float(np.mean(a)) for k, a in acc.items()}
    for k in cfg.ks:
        rep.add(f"test_acc.k{k}", mean[k], 0.0, ">=", unit="%", basis="reported, no threshold")
    lo, hi = min(cfg.ks), max(cfg.ks)
    rep.add(f"gap.k{hi}_minus_k{lo}", mean[hi] - mean[lo], 0.0, ">=", unit="points",
            basis="trend: a larger basis must not hurt")
    return rep


# --------------------------------------------------------------------------
# Orientation

@dataclass
class OrientationConfig:
    pair: MirroredPairConfig = MirroredPairConfig()
    n_train_pairs: int = 6
    n_test_pairs: int = 4
    width: int = 32
    n_blocks: int = 4
    epochs: int = 30
    seed: int = 0
    min_complex_acc: float = 95.0
    real_acc_range: tuple = (40.0, 60.0)


def mirrored_dataset(cfg, seeds, k=128):
    shapes = []
    for s in seeds:
        shapes += [normalized(x) for x in mirrored_pair(cfg.pair, seed=s)]
    return _samples(shapes, k)


@_timed
def run_orientation(config=None):
    """Left/right labeling of chiral shapes and their mirror images with
    hks input: complex A can resolve the side, real A cannot."""
    cfg = config or OrientationConfig()
    rep = ExperimentReport("orientation", _config_dict(cfg))
    base = 1000 * cfg.seed
    train = mirrored_dataset(cfg, range(base, base + cfg.n_train_pairs))
    test = mirrored_dataset(cfg, range(base + 500, base + 500 + cfg.n_test_pairs))
    outputs = {}
    for mode in ("complex", "real"):
        net = NetworkConfig(width=cfg.width, n_blocks=cfg.n_blocks, input_mode="hks", n_out=2,
                            gradient_mode=mode)
        row, params = _train_and_eval(train, test, net, TrainConfig(epochs=cfg.epochs,
                                                                    seed=cfg.seed))
        rep.rows.append({"gradient_mode": mode, **row})
        a, b = test[0], test[1]
        outputs[mode] = np.abs(_forward_np(a.shape, a.ops, params)
                               - _forward_np(b.shape, b.ops, params)).max()
        log.info("orientation %s: test %.2f%%", mode, 100 * row["test_acc"])
    accs = {r["gradient_mode"]: 100.0 * r["test_acc"] for r in rep.rows}
    rep.add("test_acc.complex_A", accs["complex"], cfg.min_complex_acc, ">=", unit="%",
            basis="orientation-aware features resolve the mirror ambiguity")
    rep.add("test_acc.real_A", accs["real"], tuple(cfg.real_acc_range), "between", unit="%",
            basis="mirror images get identical outputs, so chance level")
    rep.add("mirror_output_diff.real_A", outputs["real"], 1e-8, "<=",
            basis="trained real-A network is mirror invariant")
    rep.add("mirror_output_diff.complex_A", outputs["complex"], 1e-3, ">",
            basis="trained complex-A network distinguishes mirror images")
    return rep


# --------------------------------------------------------------------------
# Discretization robustness

@dataclass
class RobustnessConfig:
    task: ToyTaskConfig = ToyTaskConfig(subdiv=3, label_radius=2.0)
    width: int = 32
    n_blocks: int = 4
    epochs: int = 100
    augmentation: str = "rot_full"
    cloud_points: int = 2000
    k_neighbors: int = 30
    seeds: tuple = (0, 1, 2)
    max_drop: float = 10.0


@_timed
def run_robustness(config=None):
    """Train on meshes with xyz input, evaluate on the test meshes, their
    midpoint refinements and point clouds sampled from them. Accuracies are
    averaged over seeds."""
    cfg = config or RobustnessConfig()
    rep = ExperimentReport("robustness", _config_dict(cfg))
    acc = {"mesh": [], "refined_mesh": [], "point_cloud": []}
    for seed in cfg.seeds:
        train, test = toy_dataset(cfg.task, seed, 128)
        net = NetworkConfig(width=cfg.width, n_blocks=cfg.n_blocks, input_mode="xyz",
                            n_out=cfg.task.n_classes)
        row, params = _train_and_eval(train, test, net, TrainConfig(
            epochs=cfg.epochs, seed=seed, augmentation=cfg.augmentation))
        rep.rows.append({"representation": "mesh", "seed": seed, **row})
        acc["mesh"].append(100.0 * row["test_acc"])
        variants = {
            "refined_mesh": [normalized(midpoint_refine(s.shape)) for s in test],
            "point_cloud": [normalized(sample_point_cloud(s.shape, cfg.cloud_points, seed=i,
                                                          k_neighbors=cfg.k_neighbors))
                            for i, s in enumerate(test)],
        }
        for name, shapes in variants.items():
            a = evaluate(_samples(shapes, 128), params)["accuracy"]
            rep.rows.append({"representation": name, "seed": seed, "test_acc": a})
            acc[name].append(100.0 * a)
            log.info("robustness seed %d %s: %.2f%% (mesh %.2f%%)", seed, name, 100 * a,
                     acc["mesh"][-1])
    mean = {k: float(np.mean(v)) for k, v in acc.items()}
    rep.add("test_acc.mesh", mean["mesh"], 0.0, ">=", unit="%", basis="reported, no threshold")
    for name in ("refined_mesh", "point_cloud"):
        rep.add(f"test_acc.{name}", mean[name], 0.0, ">=", unit="%",
                basis="reported, no threshold")
        rep.add(f"drop.{name}", mean["mesh"] - mean[name], cfg.max_drop, "<=", unit="points",
                basis="trend: predictions survive a change of discretization")
    return rep


def _config_dict(cfg):
    return json.loads(json.dumps(asdict(cfg), default=_jsonable))


EXPERIMENT_RUNNERS = {
    "orientation": (run_orientation, OrientationConfig),
    "ablation": (run_ablation, AblationConfig),
    "eig_sweep": (run_eig_sweep, EigSweepConfig),
    "robustness": (run_robustness, RobustnessConfig),
}


def experiment_config(name, d=None):
    """Build the config of experiment ``name`` from defaults plus overrides."""
    _, cls = EXPERIMENT_RUNNERS[name]
    d = dict(d or {})
    pair = d.pop("pair", None)
    cfg = _experiment_config(cls, d)
    if pair is not None:
        cfg = replace(cfg, pair=_config_from_dict(MirroredPairConfig, pair))
    return cfg


def run_experiment(name, config=None):
    if name not in EXPERIMENT_RUNNERS:
        raise ValueError(f"unknown experiment {name!r}; choose from {EXPERIMENTS}")
    runner, cls = EXPERIMENT_RUNNERS[name]
    if config is None or isinstance(config, dict):
        config = experiment_config(name, config)
    return runner(config)

"""Synthetic worlds: fixed differentiable generators, analytic attribute
rules, and (latent, data, label) dataset synthesis.

The generator stands in for a pre-trained network and is frozen at
construction. Attribute labels come from closed-form rules on x-space
(half-spaces, quadrants of linear functionals, a logistic squash), so
every conditional density is computable by quadrature in 2-D.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import CapabilityError, DataError
from .ndmath import MlpParams, _affine, _affine_input_grad, _leaky, mlp_forward, mlp_init, sigmoid
from .rng import standard_normal, stream

__all__ = [
    "Discrete",
    "Continuous",
    "AttributeSpec",
    "validate_code",
    "Generator",
    "make_generator",
    "generator_apply",
    "generator_vjp",
    "space_dim",
    "space_apply",
    "space_vjp",
    "HalfSpaceRule",
    "QuadrantRule",
    "LogisticRule",
    "TruthOracle",
    "Dataset",
    "synthesize_pairs",
    "filter_holdout",
    "export_dataset_csv",
    "benchmark_spec",
    "benchmark_truth",
    "benchmark_world",
]

SYNTH_CHUNK = 4096


# ==== attribute descriptors ====


@dataclass(frozen=True)
class Discrete:
    name: str
    num_categories: int


@dataclass(frozen=True)
class Continuous:
    """Continuous attribute, values normalized to [0, 1]."""

    name: str


@dataclass(frozen=True)
class AttributeSpec:
    attrs: tuple[Discrete | Continuous, ...]

    def __post_init__(self):
        if len(self.attrs) == 0:
            raise ValueError("attribute spec needs at least one attribute")
        names = [a.name for a in self.attrs]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate attribute names: {names}")
        for a in self.attrs:
            if isinstance(a, Discrete) and a.num_categories < 2:
                raise ValueError(f"{a.name}: discrete attribute needs >= 2 categories")

    def names(self) -> list[str]:
        return [a.name for a in self.attrs]

    def by_name(self, name: str) -> Discrete | Continuous:
        for a in self.attrs:
            if a.name == name:
                return a
        raise ValueError(f"unknown attribute {name!r}; have {self.names()}")


def validate_code(spec: AttributeSpec, code: dict[str, float | int]) -> None:
    """Check a (possibly partial) attribute code against its spec.

    Missing entries mean "unconditioned"; present ones must respect the
    descriptor's domain.
    """
    for name, value in code.items():
        a = spec.by_name(name)
        if isinstance(a, Discrete):
            if not float(value).is_integer() or not (0 <= int(value) < a.num_categories):
                raise DataError(
                    f"{name}: category {value!r} outside [0, {a.num_categories})"
                )
        else:
            v = float(value)
            if not (0.0 <= v <= 1.0):
                raise DataError(f"{name}: continuous value {v} outside [0, 1]")


# ==== generators ====


@dataclass(frozen=True)
class Generator:
    """Fixed differentiable map g: R^{d_z} -> R^{d_x}.

    kind is one of "identity", "linear" (x = A z + b), "small_mlp"
    (two-layer leaky-rectifier net, hidden width 16). The latent prior is
    always standard Gaussian.
    """

    kind: str
    d_z: int
    d_x: int
    A: np.ndarray | None = None  # (d_x, d_z)
    b: np.ndarray | None = None  # (d_x,)
    mlp: MlpParams | None = None


MLP_HIDDEN = 16


def make_generator(kind: str, dims: tuple[int, int] | int, seed: int = 0) -> Generator:
    """Construct a frozen generator. dims is (d_z, d_x), or just d_z for identity."""
    if isinstance(dims, int):
        dims = (dims, dims)
    d_z, d_x = int(dims[0]), int(dims[1])
    if d_z <= 0 or d_x <= 0:
        raise ValueError(f"dims must be positive, got {(d_z, d_x)}")
    if kind == "identity":
        if d_x != d_z:
            raise ValueError("identity generator requires d_x == d_z")
        return Generator("identity", d_z, d_x)
    if kind == "linear":
        # resample until the condition number is modest so labels stay
        # well-resolved under the pushforward
        for attempt in range(64):
            A = standard_normal(stream(seed, "linear", attempt), (d_x, d_z))
            if np.linalg.cond(A) < 10.0:
                return Generator("linear", d_z, d_x, A=A, b=np.zeros(d_x))
        raise ValueError(f"no well-conditioned {d_x}x{d_z} matrix after 64 draws (seed {seed})")
    if kind == "small_mlp":
        return Generator("small_mlp", d_z, d_x, mlp=mlp_init([d_z, MLP_HIDDEN, d_x], seed))
    raise ValueError(f"unknown generator kind {kind!r}")


def _check_z(g: Generator, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != g.d_z:
        raise ValueError(f"latent batch shape {z.shape} incompatible with d_z={g.d_z}")
    return z


def generator_apply(g: Generator, z: np.ndarray) -> np.ndarray:
    z = _check_z(g, z)
    if g.kind == "identity":
        return z.copy()
    if g.kind == "linear":
        return _affine(z, g.A.T, g.b, row_exact=True)
    return mlp_forward(g.mlp, z)


def generator_vjp(g: Generator, z: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
    """grad_z of <cotangent, g(z)>, per row."""
    z = _check_z(g, z)
    cot = np.asarray(cotangent, dtype=np.float64)
    if cot.shape != (z.shape[0], g.d_x):
        raise ValueError(f"cotangent shape {cot.shape} != ({z.shape[0]}, {g.d_x})")
    if g.kind == "identity":
        return cot.copy()
    if g.kind == "linear":
        return _affine_input_grad(cot, g.A.T, row_exact=True)
    from .ndmath import mlp_vjp

    _, gz = mlp_vjp(g.mlp, z, cot)
    return gz


# ==== classifier input spaces ====
# Classifiers may read the latent itself, the generator output, or (for
# the small MLP only) its first hidden activation.


def space_dim(g: Generator, space: str) -> int:
    if space == "latent":
        return g.d_z
    if space == "data":
        return g.d_x
    if space == "intermediate":
        if g.kind != "small_mlp":
            raise CapabilityError(
                f"intermediate features undefined for {g.kind!r} generator; "
                "use space 'latent' or 'data'"
            )
        return MLP_HIDDEN
    raise ValueError(f"unknown input space {space!r}")


def _hidden(g: Generator, z: np.ndarray) -> np.ndarray:
    p = g.mlp
    return _leaky(_affine(z, p.weights[0], p.biases[0], row_exact=True), p.negative_slope)


def space_apply(g: Generator, z: np.ndarray, space: str) -> np.ndarray:
    space_dim(g, space)  # validates
    z = _check_z(g, z)
    if space == "latent":
        return z.copy()
    if space == "data":
        return generator_apply(g, z)
    return _hidden(g, z)


def space_vjp(g: Generator, z: np.ndarray, cotangent: np.ndarray, space: str) -> np.ndarray:
    space_dim(g, space)
    z = _check_z(g, z)
    cot = np.asarray(cotangent, dtype=np.float64)
    if space == "latent":
        return cot.copy()
    if space == "data":
        return generator_vjp(g, z, cot)
    p = g.mlp
    pre = _affine(z, p.weights[0], p.biases[0], row_exact=True)
    delta = cot * np.where(pre > 0.0, 1.0, p.negative_slope)
    return _affine_input_grad(delta, p.weights[0], row_exact=True)


# ==== truth rules ====


@dataclass(frozen=True)
class HalfSpaceRule:
    """Binary label [w·x > 0]."""

    name: str
    w: tuple[float, ...]

    def labels(self, x: np.ndarray) -> np.ndarray:
        return (x @ np.asarray(self.w) > 0.0).astype(np.int64)


@dataclass(frozen=True)
class QuadrantRule:
    """4-category label [u·x > 0] + 2·[v·x > 0]."""

    name: str
    u: tuple[float, ...]
    v: tuple[float, ...]

    def labels(self, x: np.ndarray) -> np.ndarray:
        a = (x @ np.asarray(self.u) > 0.0).astype(np.int64)
        b = (x @ np.asarray(self.v) > 0.0).astype(np.int64)
        return a + 2 * b


@dataclass(frozen=True)
class LogisticRule:
    """Continuous label sigmoid(scale · w·x) in (0, 1)."""

    name: str
    w: tuple[float, ...]
    scale: float = 1.0

    def labels(self, x: np.ndarray) -> np.ndarray:
        return sigmoid(self.scale * (x @ np.asarray(self.w)))


Rule = HalfSpaceRule | QuadrantRule | LogisticRule


@dataclass(frozen=True)
class TruthOracle:
    rules: tuple[Rule, ...]

    def labels(self, x: np.ndarray) -> dict[str, np.ndarray]:
        x = np.asarray(x, dtype=np.float64)
        return {r.name: r.labels(x) for r in self.rules}


# ==== dataset synthesis ====


@dataclass(frozen=True)
class Dataset:
    z: np.ndarray  # (N, d_z)
    x: np.ndarray  # (N, d_x)
    labels: dict[str, np.ndarray]  # each (N,)

    def __len__(self) -> int:
        return self.z.shape[0]


def synthesize_pairs(
    g: Generator,
    oracle: TruthOracle,
    count: int,
    seed: int,
    *,
    spec: AttributeSpec | None = None,
    label_noise: float = 0.0,
) -> Dataset:
    """Draw z ~ N(0, I), push through g, label with the truth rules.

    Latents are drawn in fixed chunks, each from its own derived stream,
    so the dataset is identical no matter how synthesis is scheduled.
    ``label_noise`` (off by default) flips each discrete label to a
    uniformly random other category with that probability and adds
    clipped Gaussian jitter of the same scale to continuous labels;
    it requires ``spec`` to know attribute kinds.
    """
    if count <= 0:
        raise ValueError(f"count must be positive, got {count}")
    if label_noise and spec is None:
        raise ValueError("label_noise requires an AttributeSpec")
    parts = []
    for ci, start in enumerate(range(0, count, SYNTH_CHUNK)):
        rows = min(SYNTH_CHUNK, count - start)
        parts.append(standard_normal(stream(seed, "synth", ci), (rows, g.d_z)))
    z = np.concatenate(parts, axis=0)
    x = generator_apply(g, z)
    labels = {r.name: r.labels(x) for r in oracle.rules}
    if label_noise > 0.0:
        gen = stream(seed, "label-noise")
        for a in spec.attrs:
            y = labels[a.name]
            if isinstance(a, Discrete):
                flip = gen.random(count) < label_noise
                shift = gen.integers(1, a.num_categories, size=count)
                labels[a.name] = np.where(flip, (y + shift) % a.num_categories, y)
            else:
                jitter = standard_normal(gen, (count,)) * label_noise
                labels[a.name] = np.clip(y + jitter, 0.0, 1.0)
    return Dataset(z, x, labels)


def filter_holdout(ds: Dataset, holdout: dict[str, float | int]) -> Dataset:
    """Drop rows matching every entry of ``holdout`` (zero-shot split)."""
    if not holdout:
        return ds
    # a row is dropped only when it matches the full combination
    match = np.ones(len(ds), dtype=bool)
    for name, value in holdout.items():
        if name not in ds.labels:
            raise ValueError(f"holdout attribute {name!r} not in dataset")
        match &= ds.labels[name] == value
    keep = ~match
    return Dataset(ds.z[keep], ds.x[keep], {k: v[keep] for k, v in ds.labels.items()})


def export_dataset_csv(ds: Dataset, path: str) -> None:
    """CSV with columns z_0.., x_0.., then attribute names; repr floats."""
    names = sorted(ds.labels.keys())
    header = (
        [f"z_{i}" for i in range(ds.z.shape[1])]
        + [f"x_{i}" for i in range(ds.x.shape[1])]
        + names
    )
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(len(ds)):
            row = [repr(float(v)) for v in ds.z[i]] + [repr(float(v)) for v in ds.x[i]]
            for n in names:
                v = ds.labels[n][i]
                row.append(str(int(v)) if np.issubdtype(type(v), np.integer) else repr(float(v)))
            w.writerow(row)


# ==== benchmark world ====

INV_SQRT2 = float(1.0 / np.sqrt(2.0))


def benchmark_spec() -> AttributeSpec:
    return AttributeSpec(
        (
            Discrete("attr0", 2),
            Discrete("attr1", 4),
            Continuous("attr2"),
        )
    )


def benchmark_truth(d_x: int) -> TruthOracle:
    """Three analytic rules on the first two data coordinates.

    attr0: half-space [x_0 > 0]. attr1: quadrant of the 45-degree-rotated
    frame u = (e0+e1)/sqrt2, v = (-e0+e1)/sqrt2, so its category
    boundaries are diagonal to attr0's. attr2: sigmoid(1.5 x_1).

    Six of the eight (attr0, attr1) cells have positive prior mass. The
    other two are empty by construction, and this is forced: attr1's
    cells are four convex wedges in the (x_0, x_1) plane and only the
    two containing the rays x_0 = 0 can straddle attr0's boundary, so
    any quadrant rule over these coordinates leaves two joint cells
    empty. Here attr1=1 lies inside attr0=1 and attr1=2 inside attr0=0.
    Target protocols must draw from the feasible set (feasible_combos).
    """
    if d_x < 2:
        raise ValueError("benchmark rules need d_x >= 2")
    e0 = tuple(1.0 if i == 0 else 0.0 for i in range(d_x))
    e1 = tuple(1.0 if i == 1 else 0.0 for i in range(d_x))
    u = tuple(INV_SQRT2 * (a + b) for a, b in zip(e0, e1))
    v = tuple(INV_SQRT2 * (b - a) for a, b in zip(e0, e1))
    return TruthOracle(
        (
            HalfSpaceRule("attr0", e0),
            QuadrantRule("attr1", u, v),
            LogisticRule("attr2", e1, scale=1.5),
        )
    )


def benchmark_world(
    d_z: int = 2, generator_kind: str = "identity", seed: int = 0
) -> tuple[Generator, AttributeSpec, TruthOracle]:
    g = make_generator(generator_kind, (d_z, d_z), seed)
    return g, benchmark_spec(), benchmark_truth(g.d_x)

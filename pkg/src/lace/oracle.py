"""Ground-truth oracles the samplers are checked against.

Nothing here shares machinery with the samplers: rejection sampling
needs only the conditional energy and a structural envelope constant,
the grid oracle normalizes e^{-E} by brute quadrature, and gradients
are cross-checked with central differences. Slow and simple on purpose.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .classifier import ClassifierModel
from .energy import And, Leaf, Not, Or, eval_expr
from .errors import CapabilityError, NumericError
from .ndmath import logsumexp
from .rng import standard_normal, stream
from .worldgen import Generator

GRID_LO = -4.0
GRID_HI = 4.0
GRID_RES = 128

REJECTION_BATCH = 65536
MAX_PROPOSALS = 100_000_000
MIN_ACCEPT_RATE = 1e-6

# chunk for grid energy evaluation, keeps classifier activations small
GRID_CHUNK = 4096


@dataclass(frozen=True)
class GridDensity:
    """Cell probabilities of a 2-D density on a square grid.

    Cells are indexed [i, j] with i running over z_1 and j over z_2;
    cell (i, j) is centered at lo + (i + 1/2) * (hi - lo) / resolution.
    The [-4, 4]^2 default truncates about 1.3e-4 of standard-normal
    prior mass (1 - (1 - 2 Phi(-4))^2), a known bias bound on every
    number the grid oracle reports.
    """

    lo: float
    hi: float
    resolution: int
    probs: np.ndarray

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"bad grid bounds [{self.lo}, {self.hi}]")
        if self.resolution < 1:
            raise ValueError(f"resolution must be >= 1, got {self.resolution}")
        if self.probs.shape != (self.resolution, self.resolution):
            raise ValueError(
                f"probs shape {self.probs.shape} does not match resolution {self.resolution}"
            )
        if np.any(self.probs < 0):
            raise ValueError("negative cell probability")
        total = float(self.probs.sum())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"cell probabilities sum to {total!r}, not 1")

    def centers(self) -> np.ndarray:
        """Shared 1-D cell-center coordinates (both axes)."""
        step = (self.hi - self.lo) / self.resolution
        return self.lo + (np.arange(self.resolution) + 0.5) * step

    def same_grid(self, other: "GridDensity") -> bool:
        return (
            self.lo == other.lo
            and self.hi == other.hi
            and self.resolution == other.resolution
        )


@dataclass(frozen=True)
class RejectionResult:
    z: np.ndarray
    acceptance_rate: float
    proposals: int


def _envelope(expr) -> float:
    """Structural bound M with sup e^{-E_cond} <= M.

    Leaf energies are nonnegative (negative log-probabilities and scaled
    squares), so a leaf is bounded by 1 regardless of weight, temperature
    or sigma2. And multiplies, Or follows the same left fold as the
    energy: bound(acc, child) = e^beta * acc + bound(child). Not has no
    finite structural bound (the negated term enters with a minus sign).
    """
    if isinstance(expr, Leaf):
        return 1.0
    if isinstance(expr, And):
        out = 1.0
        for child in expr.children:
            out *= _envelope(child)
        return out
    if isinstance(expr, Or):
        acc = _envelope(expr.children[0])
        for child in expr.children[1:]:
            acc = math.exp(expr.beta) * acc + _envelope(child)
        return acc
    if isinstance(expr, Not):
        raise CapabilityError(
            "rejection sampling has no finite envelope for Not expressions; "
            "use the grid oracle"
        )
    raise ValueError(f"unsupported expression node {type(expr).__name__}")


def rejection_sample(
    expr,
    model: ClassifierModel | None,
    g: Generator,
    count: int,
    seed: int,
) -> RejectionResult:
    """Exact conditional samples: propose z ~ N(0, I), accept with
    probability e^{-E_cond(z)} / M.

    Returns exactly `count` accepted rows. Proposal batches draw from
    stream(seed, "rejection", batch_index), z block first, then the
    uniforms, so the result is independent of the batch size constant.
    Raises NumericError when the proposal budget is exhausted, which
    per the acceptance-rate floor means the expression is infeasible.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    envelope = 1.0 if expr is None else _envelope(expr)
    d = g.d_z
    accepted: list[np.ndarray] = []
    n_accepted = 0
    proposals = 0
    batch_index = 0
    while n_accepted < count:
        if proposals >= MAX_PROPOSALS:
            rate = n_accepted / proposals
            raise NumericError(
                f"rejection sampling infeasible: acceptance rate {rate:.3e} "
                f"after {proposals} proposals (floor {MIN_ACCEPT_RATE:.0e})"
            )
        gen = stream(seed, "rejection", batch_index)
        batch_index += 1
        z = standard_normal(gen, (REJECTION_BATCH * d,)).reshape(REJECTION_BATCH, d)
        u = gen.random(REJECTION_BATCH)
        if expr is None:
            keep = np.ones(REJECTION_BATCH, dtype=bool)
        else:
            e_cond = eval_expr(z, expr, model, g, include_prior=False)
            keep = u < np.exp(-e_cond) / envelope
        proposals += REJECTION_BATCH
        rows = z[keep]
        if rows.size:
            accepted.append(rows)
            n_accepted += rows.shape[0]
    out = np.concatenate(accepted, axis=0)[:count]
    return RejectionResult(out, n_accepted / proposals, proposals)


def grid_conditional_density(
    expr,
    model: ClassifierModel | None,
    g: Generator,
    *,
    lo: float = GRID_LO,
    hi: float = GRID_HI,
    resolution: int = GRID_RES,
) -> GridDensity:
    """Normalize e^{-E(z)} (prior included) over cell centers.

    Supports every expression kind including Not; requires d_z = 2.
    """
    if g.d_z != 2:
        raise CapabilityError(f"grid oracle requires a 2-D latent space, got d_z={g.d_z}")
    step = (hi - lo) / resolution
    centers = lo + (np.arange(resolution) + 0.5) * step
    c1, c2 = np.meshgrid(centers, centers, indexing="ij")
    points = np.stack([c1.ravel(), c2.ravel()], axis=1)
    neg_e = np.empty(points.shape[0])
    for start in range(0, points.shape[0], GRID_CHUNK):
        block = points[start : start + GRID_CHUNK]
        if expr is None:
            e = 0.5 * np.sum(block * block, axis=1)
        else:
            e = eval_expr(block, expr, model, g, include_prior=True)
        neg_e[start : start + block.shape[0]] = -e
    log_norm = logsumexp(neg_e)
    probs = np.exp(neg_e - log_norm).reshape(resolution, resolution)
    # squeeze quadrature round-off below the 1e-9 normalization invariant
    probs = probs / probs.sum()
    return GridDensity(lo, hi, resolution, probs)


def histogram(
    z: np.ndarray,
    *,
    lo: float = GRID_LO,
    hi: float = GRID_HI,
    resolution: int = GRID_RES,
) -> GridDensity:
    """Bin samples on the oracle grid; out-of-range rows clip into the
    edge cells so the histogram keeps total mass 1."""
    z = np.asarray(z, dtype=float)
    if z.ndim != 2 or z.shape[1] != 2 or z.shape[0] < 1:
        raise ValueError(f"expected samples of shape (n, 2), got {z.shape}")
    step = (hi - lo) / resolution
    idx = np.clip(((z - lo) / step).astype(np.int64), 0, resolution - 1)
    counts = np.zeros((resolution, resolution))
    np.add.at(counts, (idx[:, 0], idx[:, 1]), 1.0)
    return GridDensity(lo, hi, resolution, counts / z.shape[0])


def coarsen(gd: GridDensity, factor: int) -> GridDensity:
    """Block-sum cells into a (resolution/factor)^2 grid.

    Raw fine-grid TV between a histogram and a density is dominated by
    per-cell Monte-Carlo noise (about 0.5 * sqrt(2/(pi n)) * sum sqrt(p),
    which is 0.21 for 20k standard-normal draws on the default 128^2
    grid); block-summing first compares mass at a scale the sample size
    actually resolves.
    """
    if factor < 1 or gd.resolution % factor:
        raise ValueError(f"factor {factor} must divide resolution {gd.resolution}")
    r = gd.resolution // factor
    probs = gd.probs.reshape(r, factor, r, factor).sum(axis=(1, 3))
    return GridDensity(gd.lo, gd.hi, r, probs)


def tv_distance(h1, h2) -> float:
    """Total variation 1/2 sum |p - q| between two matching grids (or
    two plain probability arrays of equal shape)."""
    if isinstance(h1, GridDensity) and isinstance(h2, GridDensity):
        if not h1.same_grid(h2):
            raise ValueError(
                f"grid mismatch: [{h1.lo}, {h1.hi}]x{h1.resolution} vs "
                f"[{h2.lo}, {h2.hi}]x{h2.resolution}"
            )
        p, q = h1.probs, h2.probs
    else:
        p = h1.probs if isinstance(h1, GridDensity) else np.asarray(h1, dtype=float)
        q = h2.probs if isinstance(h2, GridDensity) else np.asarray(h2, dtype=float)
        if p.shape != q.shape:
            raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")
    return 0.5 * float(np.abs(p - q).sum())


def finite_diff_grad(f, z: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar field at one point (1-D z)."""
    if h <= 0:
        raise ValueError(f"h must be positive, got {h}")
    z = np.asarray(z, dtype=float)
    if z.ndim != 1:
        raise ValueError(f"expected a single 1-D point, got shape {z.shape}")
    out = np.empty_like(z)
    for i in range(z.size):
        zp = z.copy()
        zm = z.copy()
        zp[i] += h
        zm[i] -= h
        out[i] = (float(f(zp)) - float(f(zm))) / (2.0 * h)
    return out


def export_grid_csv(gd: GridDensity, path: str) -> None:
    """(z_1, z_2, prob) triples, row-major, repr floats."""
    centers = [float(c) for c in gd.centers()]
    lines = ["z_1,z_2,prob"]
    for i in range(gd.resolution):
        for j in range(gd.resolution):
            lines.append(f"{centers[i]!r},{centers[j]!r},{float(gd.probs[i, j])!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")

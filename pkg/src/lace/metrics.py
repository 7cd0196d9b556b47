"""Controllability and editing metrics on the synthetic worlds.

ACC compares generated samples against the TruthOracle (the stand-in
for a held-out attribute judge), DES scores one edit's on-target gain
against its worst off-target change, and id_drift measures data-space
movement across an edit relative to the population's own scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import stream
from .worldgen import AttributeSpec, Continuous, Discrete, Generator, TruthOracle, generator_apply

DEFAULT_EVAL_COUNT = 10_000


def uniform_targets(
    spec: AttributeSpec,
    count: int,
    seed: int,
    *,
    combos: list[dict[str, int]] | None = None,
) -> dict[str, np.ndarray]:
    """Per-row target codes drawn uniformly over valid values.

    Discrete attributes draw uniform categories, continuous attributes
    draw uniform [0, 1). One stream per attribute, keyed by position,
    so adding an attribute does not reshuffle the others.

    ``combos`` restricts the discrete attributes to joint combinations
    drawn uniformly from that list (see feasible_combos); continuous
    attributes are unaffected. Asking a sampler for a combination the
    world cannot realize measures nothing, so target protocols on
    worlds with an oracle should pass the feasible set.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    out: dict[str, np.ndarray] = {}
    for i, attr in enumerate(spec.attrs):
        gen = stream(seed, "targets", i)
        if isinstance(attr, Discrete):
            out[attr.name] = gen.integers(0, attr.num_categories, size=count)
        else:
            out[attr.name] = gen.random(count)
    if combos is not None:
        if not combos:
            raise ValueError("combos must be non-empty when given")
        rows = stream(seed, "targets", len(spec.attrs)).integers(0, len(combos), size=count)
        for name in combos[0]:
            values = np.array([c[name] for c in combos])
            out[name] = values[rows]
    return out


def feasible_combos(
    spec: AttributeSpec,
    truth: TruthOracle,
    g: Generator,
    *,
    count: int = 50_000,
    seed: int = 0,
) -> list[dict[str, int]]:
    """Joint discrete combinations with positive mass under the prior.

    Labels ``count`` prior draws pushed through the generator and keeps
    every discrete combination that occurs. Combinations whose mass is
    below about 10/count can be missed; the benchmark cells all carry
    mass >= 1/8 so the default count identifies them with margin.
    """
    z = stream(seed, "feasible").normal(size=(count, g.d_z))
    labels = truth.labels(generator_apply(g, z))
    names = [a.name for a in spec.attrs if isinstance(a, Discrete)]
    if not names:
        return []
    stacked = np.stack([labels[n] for n in names], axis=1)
    return [
        {n: int(v) for n, v in zip(names, row)}
        for row in np.unique(stacked, axis=0)
    ]


def acc_score(
    x: np.ndarray,
    targets: dict,
    truth: TruthOracle,
    spec: AttributeSpec,
) -> tuple[dict[str, float], float]:
    """Per-attribute and aggregate conditional accuracy of data-space
    samples x against target codes.

    Discrete: fraction of exact category matches. Continuous: mean of
    1 - |c_hat - c| with c_hat the oracle's value. Targets may be
    scalars or per-row arrays; attributes missing from `targets` are
    skipped and the aggregate is the mean over the ones present.
    """
    unknown = set(targets) - {a.name for a in spec.attrs}
    if unknown:
        raise ValueError(f"targets name unknown attributes: {sorted(unknown)}")
    names = [a.name for a in spec.attrs if a.name in targets]
    if not names:
        raise ValueError("targets cover no attribute of the spec")
    labels = truth.labels(x)
    by_name = {a.name: a for a in spec.attrs}
    per_attr: dict[str, float] = {}
    for name in names:
        got = labels[name]
        want = np.asarray(targets[name])
        if want.ndim not in (0, 1) or (want.ndim == 1 and want.shape[0] != x.shape[0]):
            raise ValueError(f"target for {name} must be a scalar or one value per row")
        if isinstance(by_name[name], Discrete):
            per_attr[name] = float(np.mean(got == want))
        else:
            per_attr[name] = float(np.mean(1.0 - np.abs(got - want)))
    aggregate = float(np.mean([per_attr[n] for n in names]))
    return per_attr, aggregate


def _delta(after: float, before: float) -> float:
    # degenerate-denominator rule: a perfect baseline leaves no headroom,
    # fall back to the raw difference so "no change" still scores 0
    if before >= 1.0:
        return after - before
    return (after - before) / (1.0 - before)


def des_score(acc_before: dict[str, float], acc_after: dict[str, float], edit_attr: str) -> float:
    """DES_i = Delta_i - max_{j != i} |Delta_j| with
    Delta = (ACC_after - ACC_before) / (1 - ACC_before)."""
    if edit_attr not in acc_before or edit_attr not in acc_after:
        raise ValueError(f"edit attribute {edit_attr!r} missing from the ACC tables")
    if set(acc_before) != set(acc_after):
        raise ValueError("ACC tables cover different attributes")
    for table in (acc_before, acc_after):
        for name, v in table.items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"ACC for {name!r} out of [0, 1]: {v}")
    deltas = {n: _delta(acc_after[n], acc_before[n]) for n in acc_before}
    off = [abs(v) for n, v in deltas.items() if n != edit_attr]
    return deltas[edit_attr] - (max(off) if off else 0.0)


def id_drift(z_before: np.ndarray, z_after: np.ndarray, g: Generator) -> float:
    """Mean data-space displacement across an edit, normalized by the
    mean pairwise distance within the pre-edit batch.

    The normalizer pairs row i with row (i + B//2) mod B, a fixed
    derangement, so fresh independent draws score about 1 and the
    measure is invariant to rescaling g's outputs.
    """
    z_before = np.asarray(z_before, dtype=float)
    z_after = np.asarray(z_after, dtype=float)
    if z_before.shape != z_after.shape:
        raise ValueError(f"shape mismatch: {z_before.shape} vs {z_after.shape}")
    B = z_before.shape[0]
    if B < 2:
        raise ValueError(f"need at least 2 rows to normalize, got {B}")
    xb = generator_apply(g, z_before)
    xa = generator_apply(g, z_after)
    moved = float(np.mean(np.linalg.norm(xa - xb, axis=1)))
    partner = (np.arange(B) + B // 2) % B
    scale = float(np.mean(np.linalg.norm(xb - xb[partner], axis=1)))
    if scale == 0.0:
        raise ValueError("degenerate pre-edit batch: zero pairwise spread")
    return moved / scale


@dataclass(frozen=True)
class EvalReport:
    """Aggregated metrics for one evaluation run."""

    sampler: str
    n_samples: int
    per_attr_acc: dict[str, float]
    aggregate_acc: float
    des_per_edit: dict[str, float] | None = None
    des_aggregate: float | None = None
    drift: float | None = None
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, v in self.per_attr_acc.items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"ACC for {name!r} out of [0, 1]: {v}")
        if not 0.0 <= self.aggregate_acc <= 1.0:
            raise ValueError(f"aggregate ACC out of [0, 1]: {self.aggregate_acc}")


def format_report(report: EvalReport) -> str:
    """Readable multi-line summary, stable ordering."""
    lines = [f"sampler: {report.sampler}", f"samples: {report.n_samples}"]
    for name in report.per_attr_acc:
        lines.append(f"ACC[{name}]: {report.per_attr_acc[name]:.4f}")
    lines.append(f"ACC aggregate: {report.aggregate_acc:.4f}")
    if report.des_per_edit is not None:
        for name, v in report.des_per_edit.items():
            lines.append(f"DES[{name}]: {v:.4f}")
    if report.des_aggregate is not None:
        lines.append(f"DES aggregate: {report.des_aggregate:.4f}")
    if report.drift is not None:
        lines.append(f"id_drift: {report.drift:.4f}")
    for key in sorted(report.config):
        lines.append(f"config.{key}: {report.config[key]}")
    return "\n".join(lines)


def report_csv(report: EvalReport) -> str:
    """Header plus one flat row (repr floats) for sweep tables."""
    cols: list[tuple[str, str]] = [
        ("sampler", report.sampler),
        ("n_samples", str(report.n_samples)),
    ]
    for name, v in report.per_attr_acc.items():
        cols.append((f"acc_{name}", repr(float(v))))
    cols.append(("acc_aggregate", repr(float(report.aggregate_acc))))
    if report.des_per_edit is not None:
        for name, v in report.des_per_edit.items():
            cols.append((f"des_{name}", repr(float(v))))
    if report.des_aggregate is not None:
        cols.append(("des_aggregate", repr(float(report.des_aggregate))))
    if report.drift is not None:
        cols.append(("id_drift", repr(float(report.drift))))
    for key in sorted(report.config):
        cols.append((f"config_{key}", str(report.config[key])))
    header = ",".join(c for c, _ in cols)
    row = ",".join(v for _, v in cols)
    return header + "\n" + row + "\n"

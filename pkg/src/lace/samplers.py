"""Latent samplers over an energy expression: Langevin dynamics, the
probability-flow ODE (adaptive Dormand-Prince 5(4) and fixed-step
Euler), and a predictor-corrector scheme.

Time convention for the flow samplers: the reference dynamics run t
from T down to 0, so everything here integrates s = T - t forward from
0 to T with the drift negated. The flow drift is (1/2) beta(t) times
the gradient of the conditional (classifier) energy only; the prior
gradient is absorbed by the derivation and never enters the drift.

Chain independence: every chain owns a derived PRNG stream keyed by its
global chain index, consumed in a fixed order (initial draw when no
init is given, then per-step noise). Together with row-exact network
kernels this makes each chain's result bitwise independent of how many
chains run alongside it.

NFE accounting: nfe counts per-chain evaluations of the energy field
driving the dynamics (gradient or ODE drift). Every batch also
evaluates the final diagnostic energy once, which keeps nfe >= 1 for
degenerate zero-step runs; fixed-step Euler reports exactly
T_end / step_size.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass

import numpy as np

from .classifier import ClassifierModel, predict_heads
from .energy import And, EnergyFn, Leaf, expr_energy_fn, format_expr
from .errors import NumericError
from .rng import standard_normal, stream
from .worldgen import Discrete, Generator, generator_apply, space_apply

__all__ = [
    "DiffusionSchedule",
    "LdConfig",
    "OdeConfig",
    "EulerConfig",
    "PcConfig",
    "SampleBatch",
    "beta_at",
    "sample_ld",
    "sample_ode",
    "sample_euler",
    "sample_pc",
    "integrate_adaptive",
    "write_samples_csv",
    "write_sample_sidecar",
]

# per-block noise pregeneration budget, bytes
NOISE_BUDGET = 96_000_000
MIN_STEP = 1e-10
MAX_ATTEMPTS = 100_000


# ==== schedule ====


@dataclass(frozen=True)
class DiffusionSchedule:
    beta_min: float = 0.1
    beta_max: float = 20.0
    t_end: float = 1.0

    def __post_init__(self):
        if not (0 < self.beta_min < self.beta_max) or self.t_end <= 0:
            raise ValueError(
                f"need 0 < beta_min < beta_max and t_end > 0, got {self}"
            )


def beta_at(schedule: DiffusionSchedule, t: float) -> float:
    """Linear schedule beta_min + (beta_max - beta_min) t / T_end."""
    if not (0.0 <= t <= schedule.t_end):
        raise ValueError(f"t={t} outside [0, {schedule.t_end}]")
    return schedule.beta_min + (schedule.beta_max - schedule.beta_min) * t / schedule.t_end


def _beta_rows(schedule: DiffusionSchedule, t: np.ndarray) -> np.ndarray:
    # unvalidated vector form; RK stages may poke microscopically past T
    return schedule.beta_min + (schedule.beta_max - schedule.beta_min) * t / schedule.t_end


# ==== configs ====


@dataclass(frozen=True)
class LdConfig:
    n_steps: int = 100
    step: float = 0.01
    noise: float = 0.01
    matched_noise: bool = False  # sets the noise scale to sqrt(step)
    chains: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.n_steps < 0 or self.step <= 0 or self.noise <= 0 or self.chains <= 0:
            raise ValueError(f"bad Langevin config {self}")

    @property
    def noise_scale(self) -> float:
        return float(np.sqrt(self.step)) if self.matched_noise else self.noise


@dataclass(frozen=True)
class OdeConfig:
    atol: float = 1e-3
    rtol: float = 1e-3
    chains: int = 100
    seed: int = 0
    # demonstration only: add the prior gradient into the drift (this is
    # NOT the derived flow and measurably distorts the distribution)
    include_prior_drift: bool = False

    def __post_init__(self):
        if self.atol <= 0 or self.rtol <= 0 or self.chains <= 0:
            raise ValueError(f"bad ODE config {self}")


@dataclass(frozen=True)
class EulerConfig:
    step_size: float = 1e-2
    chains: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.step_size <= 0 or self.chains <= 0:
            raise ValueError(f"bad Euler config {self}")


@dataclass(frozen=True)
class PcConfig:
    n_steps: int = 100
    m_corrector: int = 1
    snr: float = 0.05
    chains: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.n_steps < 1 or self.m_corrector < 0 or self.snr <= 0 or self.chains <= 0:
            raise ValueError(f"bad PC config {self}")


# ==== results ====


@dataclass(frozen=True)
class SampleBatch:
    """Final chain states plus per-chain diagnostics and provenance."""

    z: np.ndarray  # (B, d_z)
    final_energy: np.ndarray  # (B,)
    nfe: np.ndarray  # (B,) int
    accepted: np.ndarray  # (B,) int; adaptive solver only, else zeros
    rejected: np.ndarray  # (B,) int
    config: object
    seed: int
    expr_text: str

    def __post_init__(self):
        if not np.all(np.isfinite(self.z)):
            raise NumericError("non-finite samples in batch")


def _resolve_energy(expr, model, g) -> tuple[EnergyFn, str]:
    if isinstance(expr, EnergyFn):
        return expr, "<custom energy>"
    fn = expr_energy_fn(expr, model, g)
    if expr is None:
        return fn, ""
    try:
        return fn, format_expr(expr)
    except ValueError:
        return fn, "<programmatic expression>"


def _init_rows(init, chains: int, d: int, seed: int) -> tuple[np.ndarray, bool]:
    """Initial latent per chain: given warm start, or the chain stream's
    first draw. Returns (z0, used_stream_draw)."""
    if init is None:
        z0 = np.empty((chains, d))
        for c in range(chains):
            z0[c] = standard_normal(stream(seed, "chain", c), (d,))
        return z0, True
    z0 = np.asarray(init, dtype=np.float64)
    if z0.ndim == 1:
        z0 = np.tile(z0, (chains, 1))
    if z0.shape != (chains, d):
        raise ValueError(f"init shape {z0.shape} != ({chains}, {d})")
    return z0.copy(), False


def _noise_blocks(chains: int, draws: int, d: int):
    """Yield (start, stop) chain ranges sized to the pregeneration budget."""
    if draws == 0:
        yield 0, chains
        return
    rows = max(1, min(chains, NOISE_BUDGET // (8 * d * draws)))
    for start in range(0, chains, rows):
        yield start, min(start + rows, chains)


def _block_noise(seed: int, start: int, stop: int, draws: int, d: int, skip_first: bool) -> np.ndarray:
    """(stop-start, draws, d) step noise, chains [start, stop).

    Consumption order per chain stream: one (d,)-shaped draw first (the
    initial latent; replayed and discarded here when the sampler used
    it), then one flat block of step noise. This keeps the initial draw
    independent of the step count and every chain's noise independent
    of blocking.
    """
    out = np.empty((stop - start, draws, d))
    for i, c in enumerate(range(start, stop)):
        gen = stream(seed, "chain", c)
        if skip_first:
            standard_normal(gen, (d,))
        out[i] = standard_normal(gen, (draws * d,)).reshape(draws, d)
    return out


def _check_finite(z: np.ndarray, step: int, chain_offset: int, what: str) -> None:
    bad = ~np.all(np.isfinite(z), axis=1)
    if np.any(bad):
        idx = int(np.argmax(bad)) + chain_offset
        raise NumericError(f"non-finite latent in {what} at step {step} (chain {idx})")


# ==== Langevin dynamics ====


def sample_ld(
    expr,
    model: ClassifierModel | None,
    g: Generator,
    cfg: LdConfig,
    *,
    init: np.ndarray | None = None,
) -> SampleBatch:
    """z <- z - (step/2) grad E + noise_scale * xi, from z0 ~ N(0, I) or init.

    The default decoupled (step, noise) pair is deliberately biased;
    matched_noise=True sets the noise scale to sqrt(step), giving the
    exact stationary law for the full energy.
    """
    energy, text = _resolve_energy(expr, model, g)
    d = energy.d_z
    z0, used_first = _init_rows(init, cfg.chains, d, cfg.seed)
    z = z0
    sigma = cfg.noise_scale
    half = 0.5 * cfg.step
    for start, stop in _noise_blocks(cfg.chains, cfg.n_steps, d):
        zb = z[start:stop]
        noise = _block_noise(cfg.seed, start, stop, cfg.n_steps, d, skip_first=used_first)
        for k in range(cfg.n_steps):
            zb = zb - half * energy.grad(zb) + sigma * noise[:, k, :]
            _check_finite(zb, k, start, "Langevin chain")
        z[start:stop] = zb
    nfe = np.full(cfg.chains, max(cfg.n_steps, 1), dtype=np.int64)
    return SampleBatch(
        z, energy.value(z), nfe, np.zeros(cfg.chains, np.int64), np.zeros(cfg.chains, np.int64),
        cfg, cfg.seed, text,
    )


# ==== adaptive Dormand-Prince 5(4) ====

# classic tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
# y5 - y4 error weights
_E = np.array(
    [71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40]
)

# PI controller constants (classic Hairer dopri5 defaults)
_SAFETY = 0.9
_CTRL_BETA = 0.04
_EXPO1 = 0.2 - _CTRL_BETA * 0.75
_FAC_MIN = 0.2  # hnew/h clamp
_FAC_MAX = 10.0


def _rms_norm(err: np.ndarray, sc: np.ndarray) -> np.ndarray:
    return np.sqrt(np.mean((err / sc) ** 2, axis=1))


def integrate_adaptive(
    field,
    z0: np.ndarray,
    t_end: float,
    atol: float,
    rtol: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-row adaptive Dormand-Prince 5(4) from t=0 to t_end (forward).

    ``field(t_rows, z_rows, rows) -> drift rows`` is evaluated on the
    active rows as one batch; ``rows`` holds their original chain
    indices so a field with per-chain state (array targets, edit
    anchors) can stay aligned. Every row carries its own time, step
    size and controller memory, so results are invariant to which rows
    happen to be batched together. Returns (z, nfe, accepted, rejected)
    per row.

    Raises a numeric error when any row's step underflows 1e-10
    (stiffness) naming the time and chain.
    """
    if atol <= 0 or rtol <= 0:
        raise ValueError(f"tolerances must be positive, got atol={atol} rtol={rtol}")
    B, d = z0.shape
    z = z0.copy()
    t = np.zeros(B)
    nfe = np.zeros(B, dtype=np.int64)
    n_acc = np.zeros(B, dtype=np.int64)
    n_rej = np.zeros(B, dtype=np.int64)
    facold = np.full(B, 1e-4)

    # Hairer-Norsett-Wanner initial step heuristic, batched per row
    all_rows = np.arange(B)
    f0 = field(t, z, all_rows)
    sc = atol + rtol * np.abs(z)
    d0 = _rms_norm(z, sc)
    d1 = _rms_norm(f0, sc)
    h0 = np.where((d0 < 1e-5) | (d1 < 1e-5), 1e-6, 0.01 * d0 / np.maximum(d1, 1e-300))
    z1 = z + h0[:, None] * f0
    f1 = field(t + h0, z1, all_rows)
    d2 = _rms_norm(f1 - f0, sc) / np.maximum(h0, 1e-300)
    dm = np.maximum(d1, d2)
    h1 = np.where(dm <= 1e-15, np.maximum(1e-6, h0 * 1e-3), (0.01 / np.maximum(dm, 1e-300)) ** 0.2)
    h = np.minimum(np.minimum(100.0 * h0, h1), t_end)
    nfe += 2

    active = np.arange(B)
    attempts = 0
    while active.size:
        attempts += 1
        if attempts > MAX_ATTEMPTS:
            raise NumericError(
                f"adaptive solver exceeded {MAX_ATTEMPTS} step attempts at t={t[active[0]]}"
            )
        za = z[active]
        ta = t[active]
        # the controller step h is the stiffness signal; ha may be tiny
        # legitimately when a row is about to land exactly on t_end
        stiff = h[active] < MIN_STEP
        if np.any(stiff):
            row = active[int(np.argmax(stiff))]
            raise NumericError(
                f"step size underflow ({h[row]:.3e} < {MIN_STEP}) at t={t[row]:.6g} (chain {row})"
            )
        ha = np.minimum(h[active], t_end - ta)
        ks = []
        for j in range(7):
            zj = za
            if j:
                incr = sum(_A[j][m] * ks[m] for m in range(j))
                zj = za + ha[:, None] * incr
            ks.append(field(ta + _C[j] * ha, zj, active))
        nfe[active] += 7
        z_new = za + ha[:, None] * sum(_B5[j] * ks[j] for j in range(7))
        err_vec = ha[:, None] * sum(_E[j] * ks[j] for j in range(7))
        sc = atol + rtol * np.maximum(np.abs(za), np.abs(z_new))
        err = _rms_norm(err_vec, sc)

        fac11 = np.maximum(err, 1e-300) ** _EXPO1
        ok = err <= 1.0
        # accepted rows: PI growth with memory; rejected: plain shrink
        fac = fac11 / facold[active] ** _CTRL_BETA
        fac = np.clip(fac / _SAFETY, 1.0 / _FAC_MAX, 1.0 / _FAC_MIN)
        h_acc = ha / fac
        h_rej = ha / np.minimum(1.0 / _FAC_MIN, fac11 / _SAFETY)

        idx_ok = active[ok]
        z[idx_ok] = z_new[ok]
        t[idx_ok] = ta[ok] + ha[ok]
        facold[idx_ok] = np.maximum(err[ok], 1e-4)
        h[idx_ok] = h_acc[ok]
        n_acc[idx_ok] += 1
        idx_bad = active[~ok]
        h[idx_bad] = h_rej[~ok]
        n_rej[idx_bad] += 1
        active = active[t[active] < t_end * (1.0 - 1e-14)]
    return z, nfe, n_acc, n_rej


def _flow_field(energy: EnergyFn, schedule: DiffusionSchedule, include_prior_drift: bool):
    """Drift in forward time s = T - t: -(1/2) beta(T - s) grad E_cond(z).

    ``rows=None`` means the full chain batch in order; otherwise the
    energy is narrowed to those chains first (per-row targets, edit
    anchors).
    """
    T = schedule.t_end

    def field(s_rows: np.ndarray, z_rows: np.ndarray, rows=None) -> np.ndarray:
        en = energy if rows is None or energy.subset is None else energy.subset(rows)
        gc = en.grad_cond(z_rows)
        if include_prior_drift:
            gc = gc + z_rows
        return -0.5 * _beta_rows(schedule, T - s_rows)[:, None] * gc

    return field


def sample_ode(
    expr,
    model: ClassifierModel | None,
    g: Generator,
    cfg: OdeConfig,
    schedule: DiffusionSchedule = DiffusionSchedule(),
    *,
    init: np.ndarray | None = None,
) -> SampleBatch:
    """Integrate the conditional flow from z(T) ~ N(0, I) down to z(0)."""
    energy, text = _resolve_energy(expr, model, g)
    z0, _ = _init_rows(init, cfg.chains, energy.d_z, cfg.seed)
    field = _flow_field(energy, schedule, cfg.include_prior_drift)
    z, nfe, acc, rej = integrate_adaptive(field, z0, schedule.t_end, cfg.atol, cfg.rtol)
    _check_finite(z, -1, 0, "flow integration")
    return SampleBatch(z, energy.value(z), nfe, acc, rej, cfg, cfg.seed, text)


def sample_euler(
    expr,
    model: ClassifierModel | None,
    g: Generator,
    cfg: EulerConfig,
    schedule: DiffusionSchedule = DiffusionSchedule(),
    *,
    init: np.ndarray | None = None,
) -> SampleBatch:
    """Fixed-step explicit Euler on the same flow; nfe = T_end / step_size."""
    energy, text = _resolve_energy(expr, model, g)
    ratio = schedule.t_end / cfg.step_size
    n = round(ratio)
    if abs(ratio - n) > 1e-9 or n < 10:
        raise ValueError(
            f"step_size {cfg.step_size} must divide T_end {schedule.t_end} into >= 10 steps"
        )
    z, _ = _init_rows(init, cfg.chains, energy.d_z, cfg.seed)
    field = _flow_field(energy, schedule, include_prior_drift=False)
    h = cfg.step_size
    for k in range(n):
        s = np.full(cfg.chains, k * h)
        z = z + h * field(s, z)
        _check_finite(z, k, 0, "Euler flow")
    nfe = np.full(cfg.chains, n, dtype=np.int64)
    zero = np.zeros(cfg.chains, np.int64)
    return SampleBatch(z, energy.value(z), nfe, zero, zero.copy(), cfg, cfg.seed, text)


# ==== predictor-corrector ====


def sample_pc(
    expr,
    model: ClassifierModel | None,
    g: Generator,
    cfg: PcConfig,
    schedule: DiffusionSchedule = DiffusionSchedule(),
    *,
    init: np.ndarray | None = None,
) -> SampleBatch:
    """Euler-Maruyama predictor on the reverse VP-SDE plus SNR-scaled
    Langevin correctors.

    The latent score is -z - grad E_cond (the prior stays N(0, I) for
    all t with a time-invariant classifier), so one predictor step of
    size h = T/N at time t is
        z <- z - h (1/2) beta(t) (z + 2 grad E_cond) + sqrt(beta(t) h) xi.
    Corrector step size: the SNR rule eps = 2 (r ||xi|| / ||s||)^2 with
    the norm ratio fixed at its stationary expectation, eps = 2 r^2.
    Realized per-chain ratios are anti-restorative in low dimension (the
    1/||s||^2 tail ejects near-origin chains and the shared xi correlates
    step size with the injected noise; measured prior variance drifts to
    2-3 against a unit target over a 200-step sweep), and batch-mean
    norms as in the reference PC implementation would couple chains.
    Both norms are chi_d at stationarity, so the expected ratio is 1.
    """
    energy, text = _resolve_energy(expr, model, g)
    d = energy.d_z
    T = schedule.t_end
    N, M = cfg.n_steps, cfg.m_corrector
    h = T / N
    z0, used_first = _init_rows(init, cfg.chains, d, cfg.seed)
    z = z0
    draws = N * (1 + M)
    for start, stop in _noise_blocks(cfg.chains, draws, d):
        zb = z[start:stop]
        noise = _block_noise(cfg.seed, start, stop, draws, d, skip_first=used_first)
        col = 0
        for k in range(N):
            t_k = T * (1.0 - k / N)
            beta = beta_at(schedule, t_k)
            gc = energy.grad_cond(zb)
            zb = zb - h * 0.5 * beta * (zb + 2.0 * gc) + np.sqrt(beta * h) * noise[:, col, :]
            col += 1
            _check_finite(zb, k, start, "PC predictor")
            eps = 2.0 * cfg.snr**2
            for _ in range(M):
                score = -zb - energy.grad_cond(zb)
                xi = noise[:, col, :]
                col += 1
                zb = zb + eps * score + np.sqrt(2.0 * eps) * xi
                _check_finite(zb, k, start, "PC corrector")
        z[start:stop] = zb
    nfe = np.full(cfg.chains, N * (1 + M), dtype=np.int64)
    zero = np.zeros(cfg.chains, np.int64)
    return SampleBatch(z, energy.value(z), nfe, zero, zero.copy(), cfg, cfg.seed, text)


# ==== export ====


def _flat_targets(expr) -> dict[str, float]:
    """Leaf targets when the expression is a plain code (leaf / AND of
    leaves with scalar targets); empty otherwise."""
    if isinstance(expr, Leaf):
        return {} if np.ndim(expr.target) else {expr.attr: float(expr.target)}
    if isinstance(expr, And) and all(isinstance(c, Leaf) for c in expr.children):
        out = {}
        for c in expr.children:
            if np.ndim(c.target):
                return {}
            out[c.attr] = float(c.target)
        return out
    return {}


def write_samples_csv(
    batch: SampleBatch,
    model: ClassifierModel,
    g: Generator,
    path: str,
    *,
    expr=None,
) -> None:
    """chain_id, z_*, x_*, per-attribute target/prediction, final_energy, nfe.

    Floats are written with repr (shortest round-trip), so identical
    batches export byte-identically.
    """
    z = batch.z
    x = generator_apply(g, z)
    preds = predict_heads(model, space_apply(g, z, model.input_space))
    targets = _flat_targets(expr)
    names = [a.name for a in model.spec.attrs]
    header = (
        ["chain_id"]
        + [f"z_{i}" for i in range(z.shape[1])]
        + [f"x_{i}" for i in range(x.shape[1])]
        + [f"target_{n}" for n in names]
        + [f"pred_{n}" for n in names]
        + ["final_energy", "nfe"]
    )
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(z.shape[0]):
            row = [str(i)]
            row += [repr(float(v)) for v in z[i]]
            row += [repr(float(v)) for v in x[i]]
            for n in names:
                row.append("" if n not in targets else repr(targets[n]))
            for a in model.spec.attrs:
                if isinstance(a, Discrete):
                    row.append(str(int(np.argmax(preds[a.name][i]))))
                else:
                    row.append(repr(float(preds[a.name][i])))
            row.append(repr(float(batch.final_energy[i])))
            row.append(str(int(batch.nfe[i])))
            w.writerow(row)


def write_sample_sidecar(batch: SampleBatch, path: str, *, wall_time_s: float | None = None) -> None:
    """Run metadata next to a CSV: config, seed, PRNG, optional wall time.

    Wall time lives only here; the CSV itself stays byte-reproducible.
    """
    doc = {
        "sampler": type(batch.config).__name__,
        "config": asdict(batch.config),
        "seed": batch.seed,
        "expr": batch.expr_text,
        "prng": "pcg64-seedsequence-per-chain",
        "written_at": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
    }
    if wall_time_s is not None:
        doc["wall_time_s"] = wall_time_s
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=False)

"""Command-line surface: train the benchmark classifier, draw
conditioned/composed samples, run edit sequences, evaluate with the
uniform-target protocol, sweep sampler hyperparameters, and query the
ground-truth oracles. Everything is reproducible from the config plus
seeds; every table is CSV with repr-formatted floats.

Exit codes: 0 success, 2 config/usage error, 3 capability error,
4 numeric error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import __version__
from .classifier import TrainConfig, load_checkpoint, save_checkpoint, train_classifier
from .energy import EditState, Leaf, And, and_of_code, parse_expr, seq_edit_energy_fn
from .errors import CapabilityError, ConfigError, DataError, FormatError, NumericError
from .metrics import (
    EvalReport,
    acc_score,
    des_score,
    feasible_combos,
    format_report,
    id_drift,
    report_csv,
    uniform_targets,
)
from .oracle import (
    coarsen,
    export_grid_csv,
    grid_conditional_density,
    histogram,
    rejection_sample,
    tv_distance,
)
from .samplers import (
    EulerConfig,
    LdConfig,
    OdeConfig,
    PcConfig,
    _flat_targets,
    sample_euler,
    sample_ld,
    sample_ode,
    sample_pc,
    write_sample_sidecar,
    write_samples_csv,
)
from .worldgen import (
    Continuous,
    Discrete,
    benchmark_world,
    filter_holdout,
    generator_apply,
    space_dim,
    synthesize_pairs,
    validate_code,
)

# ==== configuration ====


@dataclass(frozen=True)
class WorldSection:
    d_z: int = 2
    generator: str = "identity"
    seed: int = 0
    train_count: int = 10_000
    label_noise: float = 0.0
    holdout: str = ""


@dataclass(frozen=True)
class ClassifierSection:
    epochs: int = 100
    batch_size: int = 128
    lr: float = 1e-3
    decay_factor: float = 0.1
    milestones: tuple = (60, 90)
    seed: int = 0
    mode: str = "separate"
    input_space: str = "latent"


@dataclass(frozen=True)
class SamplerSection:
    kind: str = "ld"
    n_steps: int = 100
    step: float = 0.01
    noise: float = 0.01
    matched_noise: bool = False
    atol: float = 1e-3
    rtol: float = 1e-3
    step_size: float = 1e-2
    m_corrector: int = 1
    snr: float = 0.05
    chains: int = 1000
    seed: int = 0
    include_prior_drift: bool = False


@dataclass(frozen=True)
class ExperimentSection:
    out_dir: str = "runs"
    checkpoint: str = ""
    expr: str = ""
    count: int = 10_000
    oracle: str = "grid"
    resolution: int = 128
    coarsen: int = 4
    edits: str = ""
    mu: float = 0.04
    gamma: float = 0.01
    alpha0: float = 0.2
    alpha1: float = -1.0  # < 0 picks the per-kind default
    sweep: str = "ode"
    workers: int = 8


@dataclass(frozen=True)
class RunConfig:
    world: WorldSection = field(default_factory=WorldSection)
    classifier: ClassifierSection = field(default_factory=ClassifierSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)


_SECTIONS = {
    "world": WorldSection,
    "classifier": ClassifierSection,
    "sampler": SamplerSection,
    "experiment": ExperimentSection,
}


def _build_section(cls, data: dict, path: str):
    known = {f.name: f.type for f in fields(cls)}
    out = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown config key {path}.{key}")
        if key == "milestones":
            value = tuple(value)
        out[key] = value
    try:
        return cls(**out)
    except TypeError as exc:
        raise ConfigError(f"bad section {path}: {exc}") from exc


def load_config(path: str | None) -> RunConfig:
    """RunConfig from a JSON file of sections; unknown keys rejected
    before any work runs."""
    if path is None:
        return RunConfig()
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: line {exc.lineno} column {exc.colno}")
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must be a JSON object of sections")
    sections = {}
    for key, value in doc.items():
        if key not in _SECTIONS:
            raise ConfigError(f"unknown config section {key!r}")
        if not isinstance(value, dict):
            raise ConfigError(f"config section {key!r} must be an object")
        sections[key] = _build_section(_SECTIONS[key], value, key)
    return RunConfig(**sections)


def config_dict(cfg: RunConfig) -> dict:
    out = {name: asdict(getattr(cfg, name)) for name in _SECTIONS}
    out["classifier"]["milestones"] = list(out["classifier"]["milestones"])
    return out


# (flag dest, section, key); flags default to None and override only when given
_OVERRIDES = [
    ("out_dir", "experiment", "out_dir"),
    ("checkpoint", "experiment", "checkpoint"),
    ("expr", "experiment", "expr"),
    ("count", "experiment", "count"),
    ("oracle", "experiment", "oracle"),
    ("resolution", "experiment", "resolution"),
    ("edits", "experiment", "edits"),
    ("mu", "experiment", "mu"),
    ("gamma", "experiment", "gamma"),
    ("alpha0", "experiment", "alpha0"),
    ("alpha1", "experiment", "alpha1"),
    ("grid", "experiment", "sweep"),
    ("workers", "experiment", "workers"),
    ("coarsen", "experiment", "coarsen"),
    ("sampler", "sampler", "kind"),
    ("steps", "sampler", "n_steps"),
    ("step", "sampler", "step"),
    ("noise", "sampler", "noise"),
    ("matched_noise", "sampler", "matched_noise"),
    ("atol", "sampler", "atol"),
    ("rtol", "sampler", "rtol"),
    ("step_size", "sampler", "step_size"),
    ("correctors", "sampler", "m_corrector"),
    ("snr", "sampler", "snr"),
    ("chains", "sampler", "chains"),
    ("prior_drift", "sampler", "include_prior_drift"),
    ("generator", "world", "generator"),
    ("d_z", "world", "d_z"),
    ("train_count", "world", "train_count"),
    ("label_noise", "world", "label_noise"),
    ("holdout", "world", "holdout"),
    ("epochs", "classifier", "epochs"),
    ("mode", "classifier", "mode"),
    ("input_space", "classifier", "input_space"),
]


def _apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    for dest, section, key in _OVERRIDES:
        value = getattr(args, dest, None)
        if value is None:
            continue
        cfg = replace(cfg, **{section: replace(getattr(cfg, section), **{key: value})})
    seed = getattr(args, "seed", None)
    if seed is not None:
        if args.command == "train":
            cfg = replace(
                cfg,
                world=replace(cfg.world, seed=seed),
                classifier=replace(cfg.classifier, seed=seed),
            )
        else:
            cfg = replace(cfg, sampler=replace(cfg.sampler, seed=seed))
    # resolve paths up front
    exp = cfg.experiment
    exp = replace(exp, out_dir=os.path.abspath(exp.out_dir))
    if exp.checkpoint:
        exp = replace(exp, checkpoint=os.path.abspath(exp.checkpoint))
    return replace(cfg, experiment=exp)


# ==== shared plumbing ====


def _atomic_write(path: str, writer) -> None:
    tmp = path + ".tmp"
    writer(tmp)
    os.replace(tmp, path)


def _write_text(path: str, text: str) -> None:
    _atomic_write(path, lambda p: open(p, "w").write(text))


def _write_meta(cfg: RunConfig, command: str, path: str, started: float) -> None:
    doc = {
        "command": command,
        "config": config_dict(cfg),
        "versions": {
            "lace": __version__,
            "numpy": np.__version__,
            "python": ".".join(map(str, sys.version_info[:3])),
        },
        "prng": "pcg64-seedsequence-per-chain",
        "wall_time_s": round(time.time() - started, 3),
    }
    _write_text(path, json.dumps(doc, indent=2) + "\n")


def _world(cfg: RunConfig):
    return benchmark_world(cfg.world.d_z, cfg.world.generator, cfg.world.seed)


def _load_model(cfg: RunConfig, g, spec):
    path = cfg.experiment.checkpoint
    if not path:
        raise ConfigError("this command needs --checkpoint (from `lace train`)")
    if not os.path.exists(path):
        raise ConfigError(f"checkpoint not found: {path}")
    model = load_checkpoint(path)
    if model.spec != spec:
        raise ConfigError("checkpoint attribute spec does not match the benchmark world")
    want = space_dim(g, model.input_space)
    if model.input_dim != want:
        raise ConfigError(
            f"checkpoint expects {model.input_dim}-D {model.input_space} inputs, "
            f"world provides {want}-D"
        )
    return model


def _parse_assignments(text: str, spec) -> list[tuple[str, float | int]]:
    """Comma-separated `attr=value` pairs in order, values coerced by
    attribute kind."""
    by_name = {a.name: a for a in spec.attrs}
    out: list[tuple[str, float | int]] = []
    if not text.strip():
        return out
    for part in text.split(","):
        if "=" not in part:
            raise ConfigError(f"bad assignment {part.strip()!r}, expected attr=value")
        name, raw = part.split("=", 1)
        name, raw = name.strip(), raw.strip()
        if name not in by_name:
            raise ConfigError(f"unknown attribute {name!r}")
        attr = by_name[name]
        try:
            value: float | int = int(raw) if isinstance(attr, Discrete) else float(raw)
        except ValueError:
            raise ConfigError(f"bad value {raw!r} for attribute {name!r}")
        validate_code(spec, {name: value})
        out.append((name, value))
    return out


def _make_expr(cfg: RunConfig):
    text = cfg.experiment.expr.strip()
    return parse_expr(text) if text else None


def _run_sampler(section: SamplerSection, expr, model, g, *, init=None):
    if section.kind == "ld":
        cfg = LdConfig(
            n_steps=section.n_steps,
            step=section.step,
            noise=section.noise,
            matched_noise=section.matched_noise,
            chains=section.chains,
            seed=section.seed,
        )
        return sample_ld(expr, model, g, cfg, init=init)
    if section.kind == "ode":
        cfg = OdeConfig(
            atol=section.atol,
            rtol=section.rtol,
            chains=section.chains,
            seed=section.seed,
            include_prior_drift=section.include_prior_drift,
        )
        return sample_ode(expr, model, g, cfg, init=init)
    if section.kind == "euler":
        cfg = EulerConfig(step_size=section.step_size, chains=section.chains, seed=section.seed)
        return sample_euler(expr, model, g, cfg, init=init)
    if section.kind == "pc":
        cfg = PcConfig(
            n_steps=section.n_steps,
            m_corrector=section.m_corrector,
            snr=section.snr,
            chains=section.chains,
            seed=section.seed,
        )
        return sample_pc(expr, model, g, cfg, init=init)
    raise ConfigError(f"unknown sampler kind {section.kind!r} (ld, ode, euler, pc)")


def _print_acc(x, expr, truth, spec) -> None:
    targets = _flat_targets(expr) if expr is not None else {}
    if not targets:
        print("ACC: n/a (expression is not a flat code)")
        return
    per_attr, agg = acc_score(x, targets, truth, spec)
    for name, v in per_attr.items():
        print(f"ACC[{name}]: {v:.4f}")
    print(f"ACC aggregate: {agg:.4f}")


# ==== commands ====


def cmd_train(cfg: RunConfig) -> None:
    started = time.time()
    c = cfg.classifier
    milestones = c.milestones
    if milestones == ClassifierSection().milestones and any(m > c.epochs for m in milestones):
        # default schedule rescaled to a shortened run; explicit milestones stay strict
        milestones = tuple(sorted({max(1, round(c.epochs * f)) for f in (0.6, 0.9)}))
    tcfg = TrainConfig(
        epochs=c.epochs, batch_size=c.batch_size, lr=c.lr,
        decay_factor=c.decay_factor, milestones=milestones, seed=c.seed,
    )
    g, spec, truth = _world(cfg)
    ds = synthesize_pairs(
        g, truth, cfg.world.train_count, cfg.world.seed, spec=spec,
        label_noise=cfg.world.label_noise,
    )
    if cfg.world.holdout:
        held = dict(_parse_assignments(cfg.world.holdout, spec))
        before = len(ds)
        ds = filter_holdout(ds, held)
        print(f"holdout {cfg.world.holdout}: dropped {before - len(ds)} of {before} rows")
    result = train_classifier(ds, spec, tcfg, mode=c.mode, input_space=c.input_space, generator=g)

    out = cfg.experiment.out_dir
    os.makedirs(out, exist_ok=True)
    ck = os.path.join(out, "checkpoint.json")
    _atomic_write(ck, lambda p: save_checkpoint(result.model, p))
    losses = "epoch,loss\n" + "".join(
        f"{i},{loss!r}\n" for i, loss in enumerate(result.losses)
    )
    _write_text(os.path.join(out, "losses.csv"), losses)
    for name, v in result.train_acc.items():
        print(f"ACC[{name}]: {v:.4f}")
    print(f"checkpoint: {ck}")
    _write_meta(cfg, "train", os.path.join(out, "train_meta.json"), started)


def cmd_sample(cfg: RunConfig) -> None:
    started = time.time()
    g, spec, truth = _world(cfg)
    model = _load_model(cfg, g, spec)
    expr = _make_expr(cfg)
    batch = _run_sampler(cfg.sampler, expr, model, g)

    out = cfg.experiment.out_dir
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "samples.csv")
    _atomic_write(path, lambda p: write_samples_csv(batch, model, g, p, expr=expr))
    write_sample_sidecar(
        batch, os.path.join(out, "sample_meta.json"), wall_time_s=round(time.time() - started, 3)
    )
    _print_acc(generator_apply(g, batch.z), expr, truth, spec)
    print(
        f"NFE mean {batch.nfe.mean():.1f} min {batch.nfe.min()} max {batch.nfe.max()}"
    )
    print(f"samples: {path}")
    _write_meta(cfg, "sample", os.path.join(out, "run_meta.json"), started)


def cmd_eval(cfg: RunConfig) -> None:
    started = time.time()
    g, spec, truth = _world(cfg)
    model = _load_model(cfg, g, spec)
    count = cfg.experiment.count
    combos = feasible_combos(spec, truth, g)
    targets = uniform_targets(spec, count, cfg.sampler.seed, combos=combos)
    expr = And(tuple(Leaf(a.name, targets[a.name]) for a in spec.attrs))
    batch = _run_sampler(replace(cfg.sampler, chains=count), expr, model, g)
    per_attr, agg = acc_score(generator_apply(g, batch.z), targets, truth, spec)
    report = EvalReport(
        sampler=cfg.sampler.kind,
        n_samples=count,
        per_attr_acc=per_attr,
        aggregate_acc=agg,
        config={"seed": cfg.sampler.seed, "nfe_mean": float(batch.nfe.mean())},
    )
    out = cfg.experiment.out_dir
    os.makedirs(out, exist_ok=True)
    print(format_report(report))
    _write_text(os.path.join(out, "eval_report.txt"), format_report(report) + "\n")
    _write_text(os.path.join(out, "eval_report.csv"), report_csv(report))
    _write_meta(cfg, "eval", os.path.join(out, "run_meta.json"), started)


def cmd_edit(cfg: RunConfig) -> None:
    started = time.time()
    g, spec, truth = _world(cfg)
    model = _load_model(cfg, g, spec)
    edits = _parse_assignments(cfg.experiment.edits, spec)
    if not edits:
        raise ConfigError("edit command needs --edits \"attr=value,attr=value,...\"")
    exp = cfg.experiment
    alpha1 = None if exp.alpha1 < 0 else exp.alpha1
    out = exp.out_dir
    os.makedirs(out, exist_ok=True)

    base = sample_ld(
        None, model, g, LdConfig(n_steps=0, chains=cfg.sampler.chains, seed=cfg.sampler.seed)
    )
    z_prev = base.z
    x_prev = generator_apply(g, z_prev)
    applied: list[tuple[str, float | int]] = []
    des_per_edit: dict[str, float] = {}
    final_acc: dict[str, float] = {}
    for i, (name, value) in enumerate(edits, start=1):
        # the new edit supersedes any earlier target for the same attribute
        codes = {k: v for k, v in applied if k != name}
        codes[name] = value
        state = EditState(
            z_prev=z_prev, mu=exp.mu, gamma=exp.gamma, alpha0=exp.alpha0, alpha1=alpha1
        )
        fn = seq_edit_energy_fn(state, codes, model, g)
        batch = _run_sampler(cfg.sampler, fn, model, g, init=z_prev)
        x_after = generator_apply(g, batch.z)

        # targets: edited values where set, the pre-edit labels elsewhere,
        # so untouched attributes score their preservation rate
        labels_prev = truth.labels(x_prev)
        targets = {a.name: codes.get(a.name, labels_prev[a.name]) for a in spec.attrs}
        acc_before, _ = acc_score(x_prev, targets, truth, spec)
        acc_after, _ = acc_score(x_after, targets, truth, spec)
        des_i = des_score(acc_before, acc_after, name)
        drift_i = id_drift(z_prev, batch.z, g)
        des_per_edit[f"{i}_{name}"] = des_i
        final_acc = acc_after

        stage_path = os.path.join(out, f"edit_{i}.csv")
        stage_expr = and_of_code(codes, spec)
        _atomic_write(stage_path, lambda p: write_samples_csv(batch, model, g, p, expr=stage_expr))
        print(
            f"edit {i} {name}={value}: ACC[{name}] {acc_after[name]:.4f} "
            f"DES {des_i:.4f} drift {drift_i:.4f}"
        )
        applied = [(k, v) for k, v in applied if k != name] + [(name, value)]
        z_prev = batch.z
        x_prev = x_after

    total_drift = id_drift(base.z, z_prev, g)
    report = EvalReport(
        sampler=cfg.sampler.kind,
        n_samples=cfg.sampler.chains,
        per_attr_acc=final_acc,
        aggregate_acc=float(np.mean(list(final_acc.values()))),
        des_per_edit=des_per_edit,
        des_aggregate=float(np.mean(list(des_per_edit.values()))),
        drift=total_drift,
        config={"mu": exp.mu, "gamma": exp.gamma, "alpha0": exp.alpha0, "seed": cfg.sampler.seed},
    )
    print(f"DES aggregate: {report.des_aggregate:.4f}")
    print(f"id_drift total: {total_drift:.4f}")
    _write_text(os.path.join(out, "edit_report.txt"), format_report(report) + "\n")
    _write_text(os.path.join(out, "edit_report.csv"), report_csv(report))
    _write_meta(cfg, "edit", os.path.join(out, "run_meta.json"), started)


def cmd_oracle(cfg: RunConfig) -> None:
    started = time.time()
    g, spec, truth = _world(cfg)
    expr = _make_expr(cfg)
    model = _load_model(cfg, g, spec) if expr is not None else None
    out = cfg.experiment.out_dir
    os.makedirs(out, exist_ok=True)
    kind = cfg.experiment.oracle
    if kind == "rejection":
        res = rejection_sample(expr, model, g, cfg.experiment.count, cfg.sampler.seed)
        path = os.path.join(out, "oracle_samples.csv")
        header = ",".join(f"z_{i}" for i in range(g.d_z))
        body = "".join(",".join(repr(float(v)) for v in row) + "\n" for row in res.z)
        _write_text(path, header + "\n" + body)
        print(f"acceptance rate: {res.acceptance_rate:.4f} over {res.proposals} proposals")
        print(f"samples: {path}")
    elif kind == "grid":
        gd = grid_conditional_density(expr, model, g, resolution=cfg.experiment.resolution)
        path = os.path.join(out, "oracle_grid.csv")
        _atomic_write(path, lambda p: export_grid_csv(gd, p))
        print(f"grid: {gd.resolution}x{gd.resolution}, max cell mass {gd.probs.max():.6f}")
        print(f"density: {path}")
    else:
        raise ConfigError(f"unknown oracle {kind!r} (rejection, grid)")
    _write_meta(cfg, "oracle", os.path.join(out, "run_meta.json"), started)


# ==== sweep ====


def ode_grid() -> list[dict]:
    # atol x rtol over the same 9-value ladder: 81 settings
    tols = [1e-1, 5e-2, 1e-2, 5e-3, 1e-3, 5e-4, 1e-4, 5e-5, 1e-5]
    return [{"kind": "ode", "atol": a, "rtol": r} for a in tols for r in tols]


def ld_grid() -> list[dict]:
    # N x eta x sigma with sigma in {0.1, 0.05, eta}; the sigma list
    # collides with eta at 0.1 and 0.05, deduplication leaves 13
    # (eta, sigma) pairs and 104 settings total
    ns = [50, 100, 200, 300, 400, 500, 600, 1000]
    etas = [0.1, 0.05, 0.01, 0.005, 0.001]
    rows = []
    for n in ns:
        for eta in etas:
            seen = []
            for sigma in (0.1, 0.05, eta):
                if sigma in seen:
                    continue
                seen.append(sigma)
                rows.append({"kind": "ld", "n_steps": n, "step": eta, "noise": sigma})
    return rows


_SWEEP_STATE: dict = {}


def _sweep_init(cfg_json: str) -> None:
    cfg = load_config_from_dict(json.loads(cfg_json))
    g, spec, truth = _world(cfg)
    model = _load_model(cfg, g, spec)
    expr = _make_expr(cfg)
    targets = _flat_targets(expr) if expr is not None else {}
    if not targets:
        raise ConfigError("sweep needs --expr set to a flat code (leaf or AND of leaves)")
    reference = None
    if g.d_z == 2:
        gd = grid_conditional_density(expr, model, g)
        reference = coarsen(gd, cfg.experiment.coarsen)
    _SWEEP_STATE.update(
        cfg=cfg, g=g, spec=spec, truth=truth, model=model, expr=expr,
        targets=targets, reference=reference,
    )


def _sweep_row(item: tuple[int, dict]) -> tuple[int, dict]:
    idx, params = item
    cfg = _SWEEP_STATE["cfg"]
    section = replace(cfg.sampler, **params)
    row = {
        "row": str(idx),
        "sampler": section.kind,
        "n_steps": str(section.n_steps) if section.kind in ("ld", "pc") else "",
        "step": repr(section.step) if section.kind == "ld" else "",
        "noise": repr(section.noise) if section.kind == "ld" else "",
        "atol": repr(section.atol) if section.kind == "ode" else "",
        "rtol": repr(section.rtol) if section.kind == "ode" else "",
        "chains": str(section.chains),
        "seed": str(section.seed),
        "acc": "",
        "tv": "",
        "nfe_mean": "",
        "error": "",
    }
    try:
        batch = _run_sampler(
            section, _SWEEP_STATE["expr"], _SWEEP_STATE["model"], _SWEEP_STATE["g"]
        )
        x = generator_apply(_SWEEP_STATE["g"], batch.z)
        _, agg = acc_score(
            x, _SWEEP_STATE["targets"], _SWEEP_STATE["truth"], _SWEEP_STATE["spec"]
        )
        row["acc"] = repr(float(agg))
        ref = _SWEEP_STATE["reference"]
        if ref is not None:
            h = coarsen(histogram(batch.z), _SWEEP_STATE["cfg"].experiment.coarsen)
            row["tv"] = repr(tv_distance(ref, h))
        row["nfe_mean"] = repr(float(batch.nfe.mean()))
    except Exception as exc:  # partial failures recorded per row
        text = f"{type(exc).__name__}: {exc}"
        row["error"] = text.replace(",", ";").replace("\n", " ")
    return idx, row


SWEEP_COLUMNS = [
    "row", "sampler", "n_steps", "step", "noise", "atol", "rtol",
    "chains", "seed", "acc", "tv", "nfe_mean", "error",
]


def cmd_sweep(cfg: RunConfig) -> None:
    started = time.time()
    grid = {"ode": ode_grid, "ld": ld_grid}.get(cfg.experiment.sweep)
    if grid is None:
        raise ConfigError(f"unknown sweep grid {cfg.experiment.sweep!r} (ode, ld)")
    items = list(enumerate(grid()))
    out = cfg.experiment.out_dir
    os.makedirs(out, exist_ok=True)
    cfg_json = json.dumps(config_dict(cfg))

    partial_path = os.path.join(out, "sweep_partial.csv")
    rows: dict[int, dict] = {}
    with open(partial_path, "w") as partial:
        partial.write(",".join(SWEEP_COLUMNS) + "\n")
        if cfg.experiment.workers <= 1:
            _sweep_init(cfg_json)
            results = map(_sweep_row, items)
        else:
            pool = ProcessPoolExecutor(
                max_workers=cfg.experiment.workers,
                initializer=_sweep_init,
                initargs=(cfg_json,),
            )
            results = pool.map(_sweep_row, items)
        for idx, row in results:
            rows[idx] = row
            partial.write(",".join(row[c] for c in SWEEP_COLUMNS) + "\n")
            partial.flush()
        if cfg.experiment.workers > 1:
            pool.shutdown()

    lines = [",".join(SWEEP_COLUMNS)]
    for idx in sorted(rows):
        lines.append(",".join(rows[idx][c] for c in SWEEP_COLUMNS))
    path = os.path.join(out, "sweep.csv")
    _write_text(path, "\n".join(lines) + "\n")
    os.remove(partial_path)
    failures = sum(1 for r in rows.values() if r["error"])
    print(f"sweep: {len(rows)} rows ({failures} failed), {path}")
    _write_meta(cfg, "sweep", os.path.join(out, "run_meta.json"), started)


def load_config_from_dict(doc: dict) -> RunConfig:
    sections = {}
    for key, value in doc.items():
        if key not in _SECTIONS:
            raise ConfigError(f"unknown config section {key!r}")
        sections[key] = _build_section(_SECTIONS[key], value, key)
    return RunConfig(**sections)


# ==== entry point ====


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (sections: world, classifier, sampler, experiment)")
    p.add_argument("--out-dir", dest="out_dir", help="output directory")
    p.add_argument("--seed", type=int, help="train: world+classifier seed; otherwise sampler seed")


def _add_sampler_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--sampler", choices=["ld", "ode", "euler", "pc"], help="sampler kind")
    p.add_argument("--chains", type=int, help="number of chains")
    p.add_argument("--steps", type=int, dest="steps", help="LD/PC step count")
    p.add_argument("--step", type=float, help="LD step size")
    p.add_argument("--noise", type=float, help="LD noise scale")
    p.add_argument("--matched-noise", dest="matched_noise", action="store_const", const=True,
                   help="couple LD noise to the step size")
    p.add_argument("--atol", type=float, help="ODE absolute tolerance")
    p.add_argument("--rtol", type=float, help="ODE relative tolerance")
    p.add_argument("--step-size", dest="step_size", type=float, help="Euler step size")
    p.add_argument("--correctors", type=int, help="PC corrector steps per predictor step")
    p.add_argument("--snr", type=float, help="PC corrector signal-to-noise ratio")
    p.add_argument("--prior-drift", dest="prior_drift", action="store_const", const=True,
                   help="add the prior gradient to the ODE drift (diagnostic)")


def _add_world_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--generator", choices=["identity", "linear", "small_mlp"])
    p.add_argument("--d-z", dest="d_z", type=int, help="latent dimension")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lace",
        description="latent-space energy-guided generation on synthetic worlds",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="synthesize data and train the attribute classifier")
    _add_common(p)
    _add_world_flags(p)
    p.add_argument("--train-count", dest="train_count", type=int)
    p.add_argument("--label-noise", dest="label_noise", type=float)
    p.add_argument("--holdout", help='withhold a combination, e.g. "attr0=1,attr1=3"')
    p.add_argument("--epochs", type=int)
    p.add_argument("--mode", choices=["separate", "single_trunk"])
    p.add_argument("--input-space", dest="input_space", choices=["latent", "data", "intermediate"])

    p = sub.add_parser("sample", help="draw samples conditioned on an expression")
    _add_common(p)
    _add_world_flags(p)
    _add_sampler_flags(p)
    p.add_argument("--checkpoint", help="classifier checkpoint from `lace train`")
    p.add_argument("--expr", help='energy expression, e.g. "attr0=1" or "OR(attr0=1, attr1=2)"')

    p = sub.add_parser("edit", help="apply a sequence of attribute edits")
    _add_common(p)
    _add_world_flags(p)
    _add_sampler_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--edits", help='ordered assignments, e.g. "attr0=1,attr1=3,attr2=0.9"')
    p.add_argument("--mu", type=float, help="proximity weight")
    p.add_argument("--gamma", type=float, help="untouched-head drift weight")
    p.add_argument("--alpha0", type=float, help="earlier-edit context weight")
    p.add_argument("--alpha1", type=float, help="edited-attribute weight (default by kind)")

    p = sub.add_parser("eval", help="uniform-target conditional accuracy protocol")
    _add_common(p)
    _add_world_flags(p)
    _add_sampler_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--count", type=int, help="number of targets/samples")

    p = sub.add_parser("sweep", help="run a sampler hyperparameter grid")
    _add_common(p)
    _add_world_flags(p)
    _add_sampler_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--expr")
    p.add_argument("--grid", choices=["ode", "ld"], help="which grid to run")
    p.add_argument("--workers", type=int, help="process pool size")
    p.add_argument("--coarsen", type=int, help="histogram block size for the TV column")

    p = sub.add_parser("oracle", help="rejection or grid ground-truth machinery")
    _add_common(p)
    _add_world_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--expr")
    p.add_argument("--oracle", choices=["rejection", "grid"], help="which oracle to run")
    p.add_argument("--count", type=int, help="rejection: accepted sample count")
    p.add_argument("--resolution", type=int, help="grid resolution")

    return parser


_COMMANDS = {
    "train": cmd_train,
    "sample": cmd_sample,
    "edit": cmd_edit,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "oracle": cmd_oracle,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        cfg = _apply_overrides(cfg, args)
        _COMMANDS[args.command](cfg)
        return 0
    except CapabilityError as exc:
        print(f"capability error: {exc}", file=sys.stderr)
        return 3
    except (NumericError, ArithmeticError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4
    except (ConfigError, FormatError, DataError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Attribute classifier heads trained on a chosen input space.

A model is either a set of fully separate MLPs (one per attribute) or a
shared trunk with per-attribute linear heads. Discrete attributes get a
logit head of width m_i trained with cross-entropy; continuous ones get
a scalar head trained with mean squared error. Checkpoints are
canonical JSON with shortest-round-trip floats, so save -> load -> save
is byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .errors import DataError, FormatError, NumericError
from .ndmath import (
    LEAKY_SLOPE,
    MlpParams,
    _affine,
    _affine_input_grad,
    _leaky,
    adam_init,
    adam_step,
    logsumexp_rows,
    mlp_forward,
    mlp_init,
    mlp_vjp,
)
from .rng import stream
from .worldgen import AttributeSpec, Continuous, Dataset, Discrete, space_apply

__all__ = [
    "ClassifierModel",
    "TrainConfig",
    "TrainResult",
    "hidden_widths",
    "head_width",
    "build_model",
    "train_classifier",
    "predict_heads",
    "classifier_vjp",
    "save_checkpoint",
    "load_checkpoint",
]

FORMAT_VERSION = 1
FULL_WIDTHS = (384, 256, 128)


def hidden_widths(input_dim: int) -> tuple[int, ...]:
    """Reference 4-layer widths, shrunk proportionally for narrow inputs."""
    if input_dim >= 16:
        return FULL_WIDTHS
    return tuple(max(8, round(w * input_dim / 512)) for w in FULL_WIDTHS)


def head_width(attr: Discrete | Continuous) -> int:
    return attr.num_categories if isinstance(attr, Discrete) else 1


@dataclass(frozen=True)
class ClassifierModel:
    """Trained attribute heads over one input space.

    mode "separate": ``nets[name]`` is a full MLP per attribute.
    mode "single_trunk": shared ``trunk`` MLP whose output is passed
    through the activation once more, then per-attribute linear
    ``heads[name] = (W, b)``. At one attribute the two modes compute the
    same function given equal per-layer weights.
    """

    spec: AttributeSpec
    mode: str
    input_space: str
    input_dim: int
    nets: dict[str, MlpParams] | None = None
    trunk: MlpParams | None = None
    heads: dict[str, tuple[np.ndarray, np.ndarray]] | None = None


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    lr: float = 1e-3
    decay_factor: float = 0.1
    milestones: tuple[int, ...] = (60, 90)
    seed: int = 0

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0 or self.lr <= 0:
            raise ValueError("epochs, batch_size and lr must be positive")
        ms = self.milestones
        if any(m <= 0 or m > self.epochs for m in ms) or list(ms) != sorted(set(ms)):
            raise ValueError(
                f"milestones must be strictly increasing within (0, {self.epochs}], got {ms}"
            )

    def rate_at(self, epoch: int) -> float:
        """Staircase-decayed rate for a 0-based epoch index."""
        return self.lr * self.decay_factor ** sum(epoch >= m for m in self.milestones)


@dataclass(frozen=True)
class TrainResult:
    model: ClassifierModel
    losses: list[float]  # per-epoch summed loss over heads
    train_acc: dict[str, float]  # argmax accuracy / 1 - mean abs error


def build_model(
    spec: AttributeSpec,
    input_dim: int,
    *,
    mode: str = "separate",
    input_space: str = "latent",
    seed: int = 0,
) -> ClassifierModel:
    widths = hidden_widths(input_dim)
    if mode == "separate":
        nets = {
            a.name: mlp_init([input_dim, *widths, head_width(a)], seed=hash_seed(seed, i))
            for i, a in enumerate(spec.attrs)
        }
        return ClassifierModel(spec, mode, input_space, input_dim, nets=nets)
    if mode == "single_trunk":
        trunk = mlp_init([input_dim, *widths], seed=hash_seed(seed, 0))
        heads = {}
        for i, a in enumerate(spec.attrs):
            hp = mlp_init([widths[-1], head_width(a)], seed=hash_seed(seed, i + 1))
            heads[a.name] = (hp.weights[0], hp.biases[0])
        return ClassifierModel(spec, mode, input_space, input_dim, trunk=trunk, heads=heads)
    raise ValueError(f"unknown mode {mode!r}")


def hash_seed(seed: int, index: int) -> int:
    # distinct sub-seeds for per-attribute nets; stays within uint32
    return (seed * 1_000_003 + index * 7919 + 17) % (2**32)


# ==== forward / backward ====


def _check_h(model: ClassifierModel, h: np.ndarray) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != model.input_dim:
        raise ValueError(f"input shape {h.shape} incompatible with input_dim {model.input_dim}")
    return h


def predict_heads(
    model: ClassifierModel, h: np.ndarray, *, row_exact: bool = True
) -> dict[str, np.ndarray]:
    """Raw head outputs on a batch already mapped to the model's input space.

    Discrete attributes give (B, m_i) logits (no softmax); continuous
    give a (B,) scalar.
    """
    h = _check_h(model, h)
    out: dict[str, np.ndarray] = {}
    if model.mode == "separate":
        for a in model.spec.attrs:
            y = mlp_forward(model.nets[a.name], h, row_exact=row_exact)
            out[a.name] = y[:, 0] if isinstance(a, Continuous) else y
        return out
    t = _leaky(mlp_forward(model.trunk, h, row_exact=row_exact), LEAKY_SLOPE)
    for a in model.spec.attrs:
        w, b = model.heads[a.name]
        y = _affine(t, w, b, row_exact)
        out[a.name] = y[:, 0] if isinstance(a, Continuous) else y
    return out


def classifier_vjp(
    model: ClassifierModel,
    h: np.ndarray,
    cotangents: dict[str, np.ndarray],
    *,
    row_exact: bool = True,
) -> np.ndarray:
    """grad_h of sum_i <cotangents[i], head_i(h)>, per row.

    Cotangent shapes mirror predict_heads outputs; attributes absent
    from the dict contribute nothing.
    """
    h = _check_h(model, h)
    B = h.shape[0]
    grad = np.zeros_like(h)
    if model.mode == "separate":
        for a in model.spec.attrs:
            if a.name not in cotangents:
                continue
            cot = np.asarray(cotangents[a.name], dtype=np.float64)
            if isinstance(a, Continuous):
                cot = cot.reshape(B, 1)
            _, gh = mlp_vjp(model.nets[a.name], h, cot, row_exact=row_exact)
            grad += gh
        return grad
    pre = mlp_forward(model.trunk, h, row_exact=row_exact)
    t = _leaky(pre, LEAKY_SLOPE)
    delta_t = np.zeros_like(t)
    for a in model.spec.attrs:
        if a.name not in cotangents:
            continue
        cot = np.asarray(cotangents[a.name], dtype=np.float64)
        if isinstance(a, Continuous):
            cot = cot.reshape(B, 1)
        w, _ = model.heads[a.name]
        delta_t += _affine_input_grad(cot, w, row_exact)
    delta_pre = delta_t * np.where(pre > 0.0, 1.0, LEAKY_SLOPE)
    _, gh = mlp_vjp(model.trunk, h, delta_pre, row_exact=row_exact)
    return grad + gh


# ==== training ====


def _softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - np.max(logits, axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _head_loss_grad(
    attr: Discrete | Continuous, out: np.ndarray, y: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean loss over the batch and its gradient w.r.t. the raw head output."""
    B = out.shape[0]
    if isinstance(attr, Discrete):
        yi = y.astype(np.int64)
        loss = float(np.mean(logsumexp_rows(out) - out[np.arange(B), yi]))
        g = _softmax(out)
        g[np.arange(B), yi] -= 1.0
        return loss, g / B
    resid = out[:, 0] - y
    return float(np.mean(resid**2)), (2.0 * resid / B).reshape(B, 1)


def _validate_labels(spec: AttributeSpec, labels: dict[str, np.ndarray]) -> None:
    for a in spec.attrs:
        if a.name not in labels:
            raise DataError(f"dataset missing labels for attribute {a.name!r}")
        y = labels[a.name]
        if isinstance(a, Discrete):
            if np.any((y < 0) | (y >= a.num_categories)) or not np.all(y == np.floor(y)):
                raise DataError(f"{a.name}: labels outside [0, {a.num_categories})")
        elif np.any((y < 0.0) | (y > 1.0)):
            raise DataError(f"{a.name}: continuous labels outside [0, 1]")


def _flatten(p: MlpParams) -> list[np.ndarray]:
    return list(p.weights) + list(p.biases)


def _rebuild(p: MlpParams, flat: tuple[np.ndarray, ...]) -> MlpParams:
    n = len(p.weights)
    return replace(p, weights=tuple(flat[:n]), biases=tuple(flat[n:]))


def train_classifier(
    dataset: Dataset,
    spec: AttributeSpec,
    cfg: TrainConfig,
    *,
    mode: str = "separate",
    input_space: str = "latent",
    generator=None,
) -> TrainResult:
    """Minimize summed cross-entropy + MSE with Adam and a staircase schedule.

    ``input_space`` picks what the heads read: the latent itself, the
    generator output, or the generator's hidden features (needs
    ``generator`` for the latter two... "data" can also fall back to the
    dataset's stored x).
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    _validate_labels(spec, dataset.labels)
    if input_space == "latent":
        H = dataset.z
    elif input_space == "data":
        H = dataset.x
    elif input_space == "intermediate":
        if generator is None:
            raise ValueError("input_space 'intermediate' needs the generator")
        H = space_apply(generator, dataset.z, "intermediate")
    else:
        raise ValueError(f"unknown input space {input_space!r}")
    H = np.ascontiguousarray(H, dtype=np.float64)
    N, input_dim = H.shape
    model = build_model(spec, input_dim, mode=mode, input_space=input_space, seed=cfg.seed)

    if mode == "separate":
        params = {a.name: _flatten(model.nets[a.name]) for a in spec.attrs}
        opt = {k: adam_init(v, cfg.lr) for k, v in params.items()}
    else:
        params = {"__trunk__": _flatten(model.trunk)}
        params.update({a.name: list(model.heads[a.name]) for a in spec.attrs})
        opt = {k: adam_init(v, cfg.lr) for k, v in params.items()}

    losses: list[float] = []
    for epoch in range(cfg.epochs):
        rate = cfg.rate_at(epoch)
        perm = stream(cfg.seed, "shuffle", epoch).permutation(N)
        epoch_loss = 0.0
        for start in range(0, N, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            hb = H[idx]
            batch_loss = 0.0
            if mode == "separate":
                for a in spec.attrs:
                    p = _rebuild(model.nets[a.name], tuple(params[a.name]))
                    out = mlp_forward(p, hb, row_exact=False)
                    loss, gout = _head_loss_grad(a, out, dataset.labels[a.name][idx])
                    grads, _ = mlp_vjp(p, hb, gout, row_exact=False)
                    flat_g = list(grads.weights) + list(grads.biases)
                    new, opt[a.name] = adam_step(opt[a.name], params[a.name], flat_g, lr=rate)
                    params[a.name] = list(new)
                    batch_loss += loss
            else:
                trunk = _rebuild(model.trunk, tuple(params["__trunk__"]))
                pre = mlp_forward(trunk, hb, row_exact=False)
                t = _leaky(pre, LEAKY_SLOPE)
                delta_t = np.zeros_like(t)
                head_grads = {}
                for a in spec.attrs:
                    w, b = params[a.name]
                    out = t @ w + b
                    loss, gout = _head_loss_grad(a, out, dataset.labels[a.name][idx])
                    head_grads[a.name] = [t.T @ gout, gout.sum(axis=0)]
                    delta_t += gout @ w.T
                    batch_loss += loss
                delta_pre = delta_t * np.where(pre > 0.0, 1.0, LEAKY_SLOPE)
                tg, _ = mlp_vjp(trunk, hb, delta_pre, row_exact=False)
                new, opt["__trunk__"] = adam_step(
                    opt["__trunk__"],
                    params["__trunk__"],
                    list(tg.weights) + list(tg.biases),
                    lr=rate,
                )
                params["__trunk__"] = list(new)
                for a in spec.attrs:
                    new, opt[a.name] = adam_step(
                        opt[a.name], params[a.name], head_grads[a.name], lr=rate
                    )
                    params[a.name] = list(new)
            epoch_loss += batch_loss * len(idx)
        epoch_loss /= N
        if not np.isfinite(epoch_loss):
            raise NumericError(f"loss diverged at epoch {epoch}: {epoch_loss}")
        losses.append(epoch_loss)

    if mode == "separate":
        model = replace(
            model,
            nets={a.name: _rebuild(model.nets[a.name], tuple(params[a.name])) for a in spec.attrs},
        )
    else:
        model = replace(
            model,
            trunk=_rebuild(model.trunk, tuple(params["__trunk__"])),
            heads={a.name: (params[a.name][0], params[a.name][1]) for a in spec.attrs},
        )

    preds = predict_heads(model, H, row_exact=False)
    acc: dict[str, float] = {}
    for a in spec.attrs:
        y = dataset.labels[a.name]
        if isinstance(a, Discrete):
            acc[a.name] = float(np.mean(np.argmax(preds[a.name], axis=1) == y))
        else:
            acc[a.name] = float(1.0 - np.mean(np.abs(preds[a.name] - y)))
    return TrainResult(model, losses, acc)


# ==== checkpoints ====


def _mlp_to_json(p: MlpParams) -> dict:
    return {
        "weights": [w.tolist() for w in p.weights],
        "biases": [b.tolist() for b in p.biases],
    }


def _mlp_from_json(obj: dict, dims: list[int], where: str) -> MlpParams:
    try:
        ws = [np.asarray(w, dtype=np.float64) for w in obj["weights"]]
        bs = [np.asarray(b, dtype=np.float64) for b in obj["biases"]]
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{where}: malformed weight arrays ({e})") from e
    if len(ws) != len(dims) - 1 or len(bs) != len(dims) - 1:
        raise FormatError(f"{where}: {len(ws)} weight arrays for {len(dims)} layer dims")
    for i, (w, b) in enumerate(zip(ws, bs)):
        want = (dims[i], dims[i + 1])
        if w.shape != want:
            raise FormatError(f"{where} layer {i}: weight shape {w.shape} != {want}")
        if b.shape != (dims[i + 1],):
            raise FormatError(f"{where} layer {i}: bias shape {b.shape} != ({dims[i + 1]},)")
    return MlpParams(tuple(dims), tuple(ws), tuple(bs))


def _spec_to_json(spec: AttributeSpec) -> list[dict]:
    out = []
    for a in spec.attrs:
        if isinstance(a, Discrete):
            out.append({"name": a.name, "kind": "discrete", "num_categories": a.num_categories})
        else:
            out.append({"name": a.name, "kind": "continuous"})
    return out


def _spec_from_json(obj, where: str) -> AttributeSpec:
    attrs = []
    try:
        for entry in obj:
            if entry["kind"] == "discrete":
                attrs.append(Discrete(entry["name"], int(entry["num_categories"])))
            elif entry["kind"] == "continuous":
                attrs.append(Continuous(entry["name"]))
            else:
                raise FormatError(f"{where}: unknown attribute kind {entry['kind']!r}")
        return AttributeSpec(tuple(attrs))
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, FormatError):
            raise
        raise FormatError(f"{where}: malformed attribute spec ({e})") from e


def save_checkpoint(model: ClassifierModel, path: str) -> None:
    """Canonical JSON, fixed key order, shortest-round-trip float encoding."""
    if model.mode == "separate":
        layer_dims = {a.name: list(model.nets[a.name].layer_dims) for a in model.spec.attrs}
        weights = {a.name: _mlp_to_json(model.nets[a.name]) for a in model.spec.attrs}
    else:
        layer_dims = {
            "trunk": list(model.trunk.layer_dims),
            "heads": {
                a.name: [model.trunk.layer_dims[-1], head_width(a)] for a in model.spec.attrs
            },
        }
        weights = {
            "trunk": _mlp_to_json(model.trunk),
            "heads": {
                a.name: {
                    "w": model.heads[a.name][0].tolist(),
                    "b": model.heads[a.name][1].tolist(),
                }
                for a in model.spec.attrs
            },
        }
    doc = {
        "format_version": FORMAT_VERSION,
        "spec": _spec_to_json(model.spec),
        "mode": model.mode,
        "input_space": model.input_space,
        "layer_dims": layer_dims,
        "activation": {"kind": "leaky_relu", "negative_slope": LEAKY_SLOPE},
        "weights": weights,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, separators=(",", ":"))


def load_checkpoint(path: str) -> ClassifierModel:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid checkpoint JSON at line {e.lineno} col {e.colno}") from e
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: checkpoint root must be an object")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: format_version {version!r} unsupported (want {FORMAT_VERSION})")
    for key in ("spec", "mode", "input_space", "layer_dims", "activation", "weights"):
        if key not in doc:
            raise FormatError(f"{path}: missing field {key!r}")
    spec = _spec_from_json(doc["spec"], path)
    mode = doc["mode"]
    dims = doc["layer_dims"]
    weights = doc["weights"]
    if mode == "separate":
        nets = {}
        input_dims = set()
        for a in spec.attrs:
            if a.name not in dims or a.name not in weights:
                raise FormatError(f"{path}: missing layer_dims/weights for {a.name!r}")
            d = [int(v) for v in dims[a.name]]
            if d[-1] != head_width(a):
                raise FormatError(f"{path}: {a.name} head width {d[-1]} != {head_width(a)}")
            nets[a.name] = _mlp_from_json(weights[a.name], d, f"{path}: {a.name}")
            input_dims.add(d[0])
        if len(input_dims) != 1:
            raise FormatError(f"{path}: inconsistent input dims across heads: {sorted(input_dims)}")
        return ClassifierModel(spec, mode, doc["input_space"], input_dims.pop(), nets=nets)
    if mode == "single_trunk":
        try:
            tdims = [int(v) for v in dims["trunk"]]
            trunk = _mlp_from_json(weights["trunk"], tdims, f"{path}: trunk")
            heads = {}
            for a in spec.attrs:
                hd = [int(v) for v in dims["heads"][a.name]]
                if hd != [tdims[-1], head_width(a)]:
                    raise FormatError(
                        f"{path}: {a.name} head dims {hd} != [{tdims[-1]}, {head_width(a)}]"
                    )
                w = np.asarray(weights["heads"][a.name]["w"], dtype=np.float64)
                b = np.asarray(weights["heads"][a.name]["b"], dtype=np.float64)
                if w.shape != (hd[0], hd[1]) or b.shape != (hd[1],):
                    raise FormatError(f"{path}: {a.name} head arrays do not match dims {hd}")
                heads[a.name] = (w, b)
        except (KeyError, TypeError) as e:
            raise FormatError(f"{path}: malformed single_trunk checkpoint ({e})") from e
        return ClassifierModel(spec, mode, doc["input_space"], tdims[0], trunk=trunk, heads=heads)
    raise FormatError(f"{path}: unknown mode {mode!r}")

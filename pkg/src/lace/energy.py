"""Energy functions over the latent space, their gradients, and the
expression language for composing them.

The joint energy of a latent z under an attribute code c is
Sum_i E(c_i | heads(z)) + 0.5 ||z||^2, where a discrete conditional is
-f[c]/T + logsumexp(f/T) and a continuous one is (c - f)^2 / (2 sigma^2).
Compositions: AND sums child energies, OR is the -log of the
beta-weighted sum of child Boltzmann factors (folded left pairwise),
and NOT(a, b) is E_a - alpha E_b. Gradients w.r.t. z are exact chain
rule through the classifier heads and the generator; the adaptive-alpha
NOT treats alpha as a constant at the current z, so its drift field is
not the gradient of a fixed scalar energy.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .classifier import ClassifierModel, classifier_vjp, predict_heads
from .errors import ConfigError, DataError
from .ndmath import logsumexp, logsumexp_rows, sigmoid
from .worldgen import Continuous, Discrete, Generator, generator_apply, generator_vjp, space_apply, space_vjp

__all__ = [
    "SIGMA2_DEFAULT",
    "BETA_DEFAULT",
    "Leaf",
    "And",
    "Or",
    "Not",
    "EditState",
    "cond_energy_discrete",
    "cond_energy_continuous",
    "validate_expr",
    "and_of_code",
    "joint_energy",
    "eval_expr",
    "energy_grad_z",
    "seq_edit_energy",
    "seq_edit_grad_z",
    "EnergyFn",
    "expr_energy_fn",
    "seq_edit_energy_fn",
    "parse_expr",
    "format_expr",
]

SIGMA2_DEFAULT = 0.01
BETA_DEFAULT = float(np.log(20.0))
# below this magnitude the adaptive-alpha denominator is treated as zero
ADAPTIVE_ALPHA_FLOOR = 1e-12


# ==== expression tree ====


@dataclass(frozen=True)
class Leaf:
    """One attribute condition. ``target`` may be a scalar or a per-row
    array; ``temperature`` softens discrete logits; ``weight`` scales the
    leaf energy (reweighting)."""

    attr: str
    target: float | int | np.ndarray
    temperature: float = 1.0
    weight: float = 1.0
    sigma2: float = SIGMA2_DEFAULT


@dataclass(frozen=True)
class And:
    children: tuple

    def __post_init__(self):
        if len(self.children) < 1:
            raise ValueError("AND needs at least one child")


@dataclass(frozen=True)
class Or:
    children: tuple
    beta: float = BETA_DEFAULT

    def __post_init__(self):
        if len(self.children) < 2:
            raise ValueError("OR needs at least two children")


@dataclass(frozen=True)
class Not:
    """Condition ``pos`` and not condition ``neg``: E_pos - alpha E_neg.

    alpha is a non-negative float or the string "adaptive"
    (min(0.1/|E_neg|, 1) per row, clamped to 1 near zero).
    """

    pos: object
    neg: object
    alpha: float | str = "adaptive"

    def __post_init__(self):
        if isinstance(self.alpha, str):
            if self.alpha != "adaptive":
                raise ValueError(f"alpha must be a number or 'adaptive', got {self.alpha!r}")
        elif self.alpha < 0:
            raise ValueError(f"fixed alpha must be >= 0, got {self.alpha}")


Expr = Leaf | And | Or | Not


@dataclass(frozen=True)
class EditState:
    """Anchor and penalty weights for one sequential-editing stage.

    ``alpha1 = None`` picks the default for the edited attribute's kind
    (10 for continuous, 5 for discrete).
    """

    z_prev: np.ndarray
    mu: float = 0.04
    gamma: float = 0.01
    alpha0: float = 0.2
    alpha1: float | None = None

    def __post_init__(self):
        if self.mu < 0 or self.gamma < 0:
            raise ValueError(f"mu and gamma must be >= 0, got {self.mu}, {self.gamma}")


# ==== scalar conditional energies ====


def cond_energy_discrete(logits: np.ndarray, category: int, temperature: float = 1.0) -> float:
    """-f[c]/T + logsumexp(f/T); the negative log of softmax(f/T)[c]."""
    f = np.asarray(logits, dtype=np.float64)
    if f.ndim != 1:
        raise ValueError(f"logits must be rank-1, got shape {f.shape}")
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    c = int(category)
    if not (0 <= c < f.shape[0]):
        raise ValueError(f"category {category} outside [0, {f.shape[0]})")
    return -float(f[c]) / temperature + logsumexp(f / temperature)


def cond_energy_continuous(prediction: float, target: float, sigma2: float = SIGMA2_DEFAULT) -> float:
    """(c - f)^2 / (2 sigma^2)."""
    if sigma2 <= 0:
        raise ValueError(f"sigma2 must be positive, got {sigma2}")
    return float((float(target) - float(prediction)) ** 2 / (2.0 * sigma2))


# batched forms used by the tree evaluator


def _cond_discrete_rows(logits: np.ndarray, cat: np.ndarray, T: float) -> np.ndarray:
    B = logits.shape[0]
    return -logits[np.arange(B), cat] / T + logsumexp_rows(logits / T)


def _cond_discrete_rows_grad(logits: np.ndarray, cat: np.ndarray, T: float) -> np.ndarray:
    """dE/dlogits: (softmax(f/T) - onehot(c)) / T."""
    B = logits.shape[0]
    s = logits / T
    e = np.exp(s - np.max(s, axis=1, keepdims=True))
    g = e / e.sum(axis=1, keepdims=True)
    g[np.arange(B), cat] -= 1.0
    return g / T


# ==== validation ====


def _leaf_target_rows(leaf: Leaf, attr, B: int) -> np.ndarray:
    t = np.asarray(leaf.target, dtype=np.float64)
    if t.ndim == 0:
        t = np.full(B, float(t))
    elif t.shape != (B,):
        raise ValueError(f"{leaf.attr}: per-row target shape {t.shape} != ({B},)")
    if isinstance(attr, Discrete):
        if np.any(t != np.floor(t)) or np.any((t < 0) | (t >= attr.num_categories)):
            raise DataError(f"{leaf.attr}: target outside categories [0, {attr.num_categories})")
    else:
        if np.any((t < 0.0) | (t > 1.0)):
            raise DataError(f"{leaf.attr}: continuous target outside [0, 1]")
    return t


def validate_expr(expr: Expr, spec) -> None:
    """Static checks against the attribute spec (domains, node params)."""
    if isinstance(expr, Leaf):
        a = spec.by_name(expr.attr)
        _leaf_target_rows(expr, a, 1 if np.ndim(expr.target) == 0 else np.shape(expr.target)[0])
        if expr.temperature <= 0:
            raise ValueError(f"{expr.attr}: temperature must be positive")
        if expr.sigma2 <= 0:
            raise ValueError(f"{expr.attr}: sigma2 must be positive")
    elif isinstance(expr, And):
        for c in expr.children:
            validate_expr(c, spec)
    elif isinstance(expr, Or):
        if not np.isfinite(expr.beta):
            raise ValueError(f"OR beta must be finite, got {expr.beta}")
        for c in expr.children:
            validate_expr(c, spec)
    elif isinstance(expr, Not):
        validate_expr(expr.pos, spec)
        validate_expr(expr.neg, spec)
    else:
        raise ValueError(f"not an energy expression: {expr!r}")


def and_of_code(code: dict[str, float | int | np.ndarray], spec) -> And | None:
    """AND of one leaf per code entry, in spec attribute order. None if empty."""
    leaves = [Leaf(a.name, code[a.name]) for a in spec.attrs if a.name in code]
    unknown = set(code) - {a.name for a in spec.attrs}
    if unknown:
        raise ValueError(f"unknown attributes in code: {sorted(unknown)}")
    return And(tuple(leaves)) if leaves else None


# ==== tree evaluation ====


class _Ctx:
    """One forward pass shared by every leaf of an expression."""

    def __init__(self, model: ClassifierModel, g: Generator, z: np.ndarray):
        self.model = model
        self.g = g
        self.z = z
        self.h = space_apply(g, z, model.input_space)
        self.preds = predict_heads(model, self.h)
        # accumulated dE/d(head output) per attribute
        self.cotangents: dict[str, np.ndarray] = {}

    def add_cotangent(self, name: str, cot: np.ndarray) -> None:
        if name in self.cotangents:
            self.cotangents[name] = self.cotangents[name] + cot
        else:
            self.cotangents[name] = cot

    def grad_z(self) -> np.ndarray:
        if not self.cotangents:
            return np.zeros_like(self.z)
        gh = classifier_vjp(self.model, self.h, self.cotangents)
        return space_vjp(self.g, self.z, gh, self.model.input_space)


def _leaf_value(ctx: _Ctx, leaf: Leaf) -> np.ndarray:
    a = ctx.model.spec.by_name(leaf.attr)
    B = ctx.z.shape[0]
    t = _leaf_target_rows(leaf, a, B)
    out = ctx.preds[leaf.attr]
    if isinstance(a, Discrete):
        return leaf.weight * _cond_discrete_rows(out, t.astype(np.int64), leaf.temperature)
    return leaf.weight * (t - out) ** 2 / (2.0 * leaf.sigma2)


def _leaf_backward(ctx: _Ctx, leaf: Leaf, coeff: np.ndarray) -> None:
    """Push coeff * dE_leaf/d(head output) into the context cotangents."""
    a = ctx.model.spec.by_name(leaf.attr)
    B = ctx.z.shape[0]
    t = _leaf_target_rows(leaf, a, B)
    out = ctx.preds[leaf.attr]
    if isinstance(a, Discrete):
        g = _cond_discrete_rows_grad(out, t.astype(np.int64), leaf.temperature)
        ctx.add_cotangent(leaf.attr, (leaf.weight * coeff)[:, None] * g)
    else:
        ctx.add_cotangent(leaf.attr, leaf.weight * coeff * (out - t) / leaf.sigma2)


def _node_value(ctx: _Ctx, node: Expr) -> np.ndarray:
    if isinstance(node, Leaf):
        return _leaf_value(ctx, node)
    if isinstance(node, And):
        return sum(_node_value(ctx, c) for c in node.children)
    if isinstance(node, Or):
        e = _node_value(ctx, node.children[0])
        for c in node.children[1:]:
            e = -np.logaddexp(node.beta - e, -_node_value(ctx, c))
        return e
    if isinstance(node, Not):
        ep = _node_value(ctx, node.pos)
        en = _node_value(ctx, node.neg)
        return ep - _alpha_rows(node, en) * en
    raise ValueError(f"not an energy expression: {node!r}")


def _alpha_rows(node: Not, en: np.ndarray) -> np.ndarray:
    if node.alpha != "adaptive":
        return np.full_like(en, float(node.alpha))
    mag = np.abs(en)
    return np.where(mag < ADAPTIVE_ALPHA_FLOOR, 1.0, np.minimum(0.1 / np.maximum(mag, ADAPTIVE_ALPHA_FLOOR), 1.0))


def _node_backward(ctx: _Ctx, node: Expr, coeff: np.ndarray) -> np.ndarray:
    """Accumulate leaf cotangents for coeff * E_node; returns E_node rows.

    coeff is dE_total/dE_node, per row; alpha of an adaptive NOT is held
    fixed at its current value (no gradient through alpha).
    """
    if isinstance(node, Leaf):
        _leaf_backward(ctx, node, coeff)
        return _leaf_value(ctx, node)
    if isinstance(node, And):
        return sum(_node_backward(ctx, c, coeff) for c in node.children)
    if isinstance(node, Or):
        # left fold; the derivative through each fold is the softmax pair
        # w1 = sigma(beta - E_left + E_right), applied to the running coeff
        values = []
        e = _node_value(ctx, node.children[0])
        values.append(e)
        folds = []
        for c in node.children[1:]:
            ec = _node_value(ctx, c)
            w1 = sigmoid(node.beta - e + ec)
            folds.append((w1, ec))
            e = -np.logaddexp(node.beta - e, -ec)
            values.append(e)
        # walk back through the folds, splitting coeff between the running
        # left value and each right child
        coeffs_right = []
        run = coeff
        for w1, _ in reversed(folds):
            coeffs_right.append(run * (1.0 - w1))
            run = run * w1
        coeffs_right.reverse()
        _node_backward(ctx, node.children[0], run)
        for c, cr in zip(node.children[1:], coeffs_right):
            _node_backward(ctx, c, cr)
        return values[-1]
    if isinstance(node, Not):
        en = _node_value(ctx, node.neg)
        alpha = _alpha_rows(node, en)
        ep = _node_backward(ctx, node.pos, coeff)
        _node_backward(ctx, node.neg, -coeff * alpha)
        return ep - alpha * en
    raise ValueError(f"not an energy expression: {node!r}")


# ==== public evaluation API ====


def _as_batch(z: np.ndarray, d: int) -> tuple[np.ndarray, bool]:
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    if single:
        z = z[None, :]
    if z.ndim != 2 or z.shape[1] != d:
        raise ValueError(f"latent shape {z.shape} incompatible with d_z={d}")
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite latent")
    return z, single


def _prior_rows(z: np.ndarray) -> np.ndarray:
    return 0.5 * np.sum(z * z, axis=1)


def eval_expr(
    z: np.ndarray,
    expr: Expr | None,
    model: ClassifierModel,
    g: Generator,
    *,
    include_prior: bool = True,
):
    """Energy of the expression at z; prior added once at the root.

    z may be a single latent (returns a float) or a (B, d_z) batch
    (returns (B,)). ``expr=None`` means unconditioned.
    """
    zb, single = _as_batch(z, g.d_z)
    e = _prior_rows(zb) if include_prior else np.zeros(zb.shape[0])
    if expr is not None:
        validate_expr(expr, model.spec)
        ctx = _Ctx(model, g, zb)
        e = e + _node_value(ctx, expr)
    return float(e[0]) if single else e


def energy_grad_z(
    z: np.ndarray,
    expr: Expr | None,
    model: ClassifierModel,
    g: Generator,
    *,
    include_prior: bool = True,
):
    """Exact gradient of eval_expr w.r.t. z (adaptive alpha held constant)."""
    zb, single = _as_batch(z, g.d_z)
    grad = zb.copy() if include_prior else np.zeros_like(zb)
    if expr is not None:
        validate_expr(expr, model.spec)
        ctx = _Ctx(model, g, zb)
        _node_backward(ctx, expr, np.ones(zb.shape[0]))
        grad = grad + ctx.grad_z()
    return grad[0] if single else grad


def joint_energy(z: np.ndarray, code: dict, model: ClassifierModel, g: Generator):
    """Sum of conditional energies over present code entries plus the prior."""
    return eval_expr(z, and_of_code(code, model.spec), model, g)


# ==== sequential editing ====


def _edit_terms(codes) -> list[tuple[str, object]]:
    items = list(codes.items()) if isinstance(codes, dict) else list(codes)
    if len(items) == 0:
        raise ValueError("sequential edit needs at least one attribute code")
    return items


def _edit_weights(state: EditState, attr) -> tuple[float, float]:
    a1 = state.alpha1
    if a1 is None:
        a1 = 10.0 if isinstance(attr, Continuous) else 5.0
    return state.alpha0, float(a1)


def _edit_expr_and_drift(
    state: EditState, codes, model: ClassifierModel, spec
) -> tuple[And, list[str]]:
    items = _edit_terms(codes)
    names = [n for n, _ in items]
    for n in names:
        spec.by_name(n)
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate attributes in edit sequence: {names}")
    cur_name, cur_target = items[-1]
    a0, a1 = _edit_weights(state, spec.by_name(cur_name))
    leaves = [Leaf(n, t, weight=a0) for n, t in items[:-1]]
    leaves.append(Leaf(cur_name, cur_target, weight=a1))
    untouched = [a.name for a in spec.attrs if a.name not in set(names)]
    return And(tuple(leaves)), untouched


def _prev_batch(state: EditState, B: int, d: int) -> np.ndarray:
    zp = np.asarray(state.z_prev, dtype=np.float64)
    if zp.ndim == 1:
        zp = np.tile(zp, (B, 1))
    if zp.shape != (B, d):
        raise ValueError(f"z_prev shape {zp.shape} incompatible with batch ({B}, {d})")
    return zp


def seq_edit_energy(
    z: np.ndarray, state: EditState, codes, model: ClassifierModel, g: Generator
):
    """Energy for editing the last code entry while keeping earlier edits,
    staying near the anchor, and not drifting untouched attribute heads.

    E = a0 Sum_{j<i} E(c_j|.) + a1 E(c_i|.) + 0.5||z||^2
        + mu (||g(z) - g(z_prev)||^2 + ||z - z_prev||^2)
        + gamma Sum_{j>i} ||f_j(z) - f_j(z_prev)||^2

    Heads are evaluated on the model's input space; the mu term always
    uses the generator output.
    """
    zb, single = _as_batch(z, g.d_z)
    expr, untouched = _edit_expr_and_drift(state, codes, model, model.spec)
    validate_expr(expr, model.spec)
    B = zb.shape[0]
    zp = _prev_batch(state, B, g.d_z)

    ctx = _Ctx(model, g, zb)
    e = _node_value(ctx, expr) + _prior_rows(zb)
    if state.mu > 0:
        dx = generator_apply(g, zb) - generator_apply(g, zp)
        e = e + state.mu * (np.sum(dx * dx, axis=1) + np.sum((zb - zp) ** 2, axis=1))
    if state.gamma > 0 and untouched:
        prev = predict_heads(model, space_apply(g, zp, model.input_space))
        for name in untouched:
            diff = ctx.preds[name] - prev[name]
            if diff.ndim == 1:
                e = e + state.gamma * diff**2
            else:
                e = e + state.gamma * np.sum(diff * diff, axis=1)
    return float(e[0]) if single else e


def seq_edit_grad_z(
    z: np.ndarray, state: EditState, codes, model: ClassifierModel, g: Generator
):
    """Exact gradient of seq_edit_energy w.r.t. z."""
    zb, single = _as_batch(z, g.d_z)
    expr, untouched = _edit_expr_and_drift(state, codes, model, model.spec)
    validate_expr(expr, model.spec)
    B = zb.shape[0]
    zp = _prev_batch(state, B, g.d_z)

    ctx = _Ctx(model, g, zb)
    _node_backward(ctx, expr, np.ones(B))
    if state.gamma > 0 and untouched:
        prev = predict_heads(model, space_apply(g, zp, model.input_space))
        for name in untouched:
            diff = ctx.preds[name] - prev[name]
            ctx.add_cotangent(name, 2.0 * state.gamma * diff)
    grad = ctx.grad_z() + zb
    if state.mu > 0:
        dx = generator_apply(g, zb) - generator_apply(g, zp)
        grad = grad + state.mu * (2.0 * generator_vjp(g, zb, dx) + 2.0 * (zb - zp))
    return grad[0] if single else grad


# ==== callable bundles for samplers ====


@dataclass(frozen=True)
class EnergyFn:
    """Value/gradient callables over latent batches.

    ``value`` and ``grad`` are the full energy (prior included);
    ``grad_cond`` drops the prior gradient; that is the drift the
    flow-based samplers use, where the prior is absorbed by the
    derivation.

    ``subset`` is None for row-independent energies. Energies with
    per-row state (array targets, edit anchors) expose
    ``subset(rows) -> EnergyFn`` so samplers that advance row subsets
    can keep each chain paired with its own state.
    """

    value: object  # (B, d) -> (B,)
    grad: object  # (B, d) -> (B, d)
    grad_cond: object  # (B, d) -> (B, d)
    d_z: int
    subset: object = None  # (rows,) -> EnergyFn, or None


def _expr_has_row_state(expr) -> bool:
    if isinstance(expr, Leaf):
        return isinstance(expr.target, np.ndarray) and expr.target.ndim > 0
    if isinstance(expr, (And, Or)):
        return any(_expr_has_row_state(c) for c in expr.children)
    return _expr_has_row_state(expr.pos) or _expr_has_row_state(expr.neg)


def _expr_take_rows(expr, rows):
    if isinstance(expr, Leaf):
        t = expr.target
        if isinstance(t, np.ndarray) and t.ndim > 0:
            return replace(expr, target=t[rows])
        return expr
    if isinstance(expr, (And, Or)):
        return replace(expr, children=tuple(_expr_take_rows(c, rows) for c in expr.children))
    return replace(
        expr, pos=_expr_take_rows(expr.pos, rows), neg=_expr_take_rows(expr.neg, rows)
    )


def expr_energy_fn(expr: Expr | None, model: ClassifierModel, g: Generator) -> EnergyFn:
    if expr is not None:
        validate_expr(expr, model.spec)
    subset = None
    if expr is not None and _expr_has_row_state(expr):
        subset = lambda rows: expr_energy_fn(_expr_take_rows(expr, rows), model, g)
    return EnergyFn(
        value=lambda z: eval_expr(z, expr, model, g),
        grad=lambda z: energy_grad_z(z, expr, model, g),
        grad_cond=lambda z: energy_grad_z(z, expr, model, g, include_prior=False),
        d_z=g.d_z,
        subset=subset,
    )


def seq_edit_energy_fn(
    state: EditState, codes, model: ClassifierModel, g: Generator
) -> EnergyFn:
    zp = np.asarray(state.z_prev)
    code_items = dict(codes)
    has_rows = zp.ndim == 2 or any(
        isinstance(v, np.ndarray) and np.ndim(v) > 0 for v in code_items.values()
    )
    subset = None
    if has_rows:

        def subset(rows):
            st = state if zp.ndim != 2 else replace(state, z_prev=zp[rows])
            cd = {
                k: (v[rows] if isinstance(v, np.ndarray) and v.ndim > 0 else v)
                for k, v in code_items.items()
            }
            return seq_edit_energy_fn(st, cd, model, g)

    return EnergyFn(
        value=lambda z: seq_edit_energy(z, state, codes, model, g),
        grad=lambda z: seq_edit_grad_z(z, state, codes, model, g),
        grad_cond=lambda z: seq_edit_grad_z(z, state, codes, model, g) - np.asarray(z, dtype=np.float64),
        d_z=g.d_z,
        subset=subset,
    )


# ==== text syntax ====
#
#   expr  := leaf | func
#   func  := ("AND" | "OR" | "NOT") "(" expr ("," expr)* (";" opts)? ")"
#   leaf  := IDENT "=" value
#   opts  := IDENT "=" (value | "adaptive") ("," ...)*
#   value := NUMBER | "ln" NUMBER
#
# AND takes >= 1 child and no options; OR >= 2 children and option beta;
# NOT exactly 2 children (positive, negative) and option alpha.


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def error(self, msg: str):
        raise ConfigError(f"expression column {self.pos}: {msg}")

    def skip_ws(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def peek(self) -> str:
        self.skip_ws()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def expect(self, ch: str):
        self.skip_ws()
        if self.pos >= len(self.text) or self.text[self.pos] != ch:
            found = self.text[self.pos] if self.pos < len(self.text) else "end of input"
            self.error(f"expected {ch!r}, found {found!r}")
        self.pos += 1

    def ident(self) -> str:
        self.skip_ws()
        start = self.pos
        while self.pos < len(self.text) and (
            self.text[self.pos].isalnum() or self.text[self.pos] == "_"
        ):
            self.pos += 1
        if self.pos == start:
            self.error("expected a name")
        return self.text[start : self.pos]

    def value(self) -> float:
        self.skip_ws()
        start = self.pos
        if self.text[self.pos : self.pos + 2] == "ln" and not self.text[
            self.pos + 2 : self.pos + 3
        ].isalpha():
            self.pos += 2
            return float(np.log(self._number()))
        return self._number()

    def _number(self) -> float:
        self.skip_ws()
        start = self.pos
        allowed = set("0123456789.+-eE")
        while self.pos < len(self.text) and self.text[self.pos] in allowed:
            self.pos += 1
        token = self.text[start : self.pos]
        try:
            return float(token)
        except ValueError:
            self.pos = start
            self.error(f"expected a number, found {token!r}")

    def options(self) -> dict[str, float | str]:
        opts: dict[str, float | str] = {}
        while True:
            key = self.ident()
            self.expect("=")
            self.skip_ws()
            if self.text[self.pos : self.pos + 8] == "adaptive":
                self.pos += 8
                opts[key] = "adaptive"
            else:
                opts[key] = self.value()
            if self.peek() == ",":
                self.expect(",")
                continue
            return opts

    def expr(self) -> Expr:
        self.skip_ws()
        at = self.pos
        name = self.ident()
        if name in ("AND", "OR", "NOT"):
            self.expect("(")
            children = [self.expr()]
            while self.peek() == ",":
                self.expect(",")
                children.append(self.expr())
            opts: dict[str, float | str] = {}
            if self.peek() == ";":
                self.expect(";")
                opts = self.options()
            self.expect(")")
            return self._build(name, children, opts, at)
        # leaf
        self.expect("=")
        target = self.value()
        return Leaf(name, target)

    def _build(self, name: str, children: list, opts: dict, at: int) -> Expr:
        def err(msg: str):
            self.pos = at  # report at the node start
            self.error(msg)

        if name == "AND":
            if opts:
                err(f"AND takes no options, got {sorted(opts)}")
            return And(tuple(children))
        if name == "OR":
            unknown = set(opts) - {"beta"}
            if unknown:
                err(f"unknown OR option(s) {sorted(unknown)}")
            if len(children) < 2:
                err("OR needs at least two children")
            beta = opts.get("beta", BETA_DEFAULT)
            if isinstance(beta, str):
                err("OR beta must be a number")
            return Or(tuple(children), beta=float(beta))
        unknown = set(opts) - {"alpha"}
        if unknown:
            err(f"unknown NOT option(s) {sorted(unknown)}")
        if len(children) != 2:
            err(f"NOT needs exactly two children, got {len(children)}")
        return Not(children[0], children[1], alpha=opts.get("alpha", "adaptive"))


def parse_expr(text: str) -> Expr:
    """Parse the parenthesized syntax; errors carry the failing column."""
    p = _Parser(text)
    node = p.expr()
    p.skip_ws()
    if p.pos != len(text):
        p.error(f"trailing input {text[p.pos:]!r}")
    return node


def format_expr(expr: Expr) -> str:
    """Inverse of parse_expr for scalar-target trees."""
    if isinstance(expr, Leaf):
        t = expr.target
        if np.ndim(t) != 0:
            raise ValueError("cannot format per-row target arrays")
        tv = int(t) if float(t).is_integer() else float(t)
        return f"{expr.attr}={tv}"
    if isinstance(expr, And):
        return "AND(" + ", ".join(format_expr(c) for c in expr.children) + ")"
    if isinstance(expr, Or):
        inner = ", ".join(format_expr(c) for c in expr.children)
        return f"OR({inner}; beta={expr.beta!r})"
    inner = f"{format_expr(expr.pos)}, {format_expr(expr.neg)}"
    alpha = expr.alpha if isinstance(expr.alpha, str) else repr(float(expr.alpha))
    return f"NOT({inner}; alpha={alpha})"

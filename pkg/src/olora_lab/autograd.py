"""Tape-based reverse-mode differentiation over a closed set of primitives.

Ops are evaluated eagerly as they are recorded, so building the tape *is* the
forward pass. ``Tape.backward`` walks the record in reverse and writes
adjoints into the ``grad`` of every trainable :class:`Param` that appeared on
the tape. Frozen params and constants never get an adjoint.

Primitives: matmul, add, broadcast_add, act, softmax, gather,
cross_entropy, scale, dropout.
"""

import math

import numpy as np

from .errors import DivergenceError, ShapeError, StateError

_GELU_C = math.sqrt(2.0 / math.pi)


class Param:
    """A named tensor. Frozen params never hold a gradient."""

    def __init__(self, value, name, trainable=True):
        self.value = value
        self.name = name
        self.trainable = trainable
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = "trainable" if self.trainable else "frozen"
        return f"Param({self.name!r}, shape={self.value.shape}, {flag})"


class Node:
    __slots__ = ("op", "value", "parents", "ctx", "name", "param", "requires_grad")

    def __init__(self, op, value, parents=(), ctx=None, name=None, param=None):
        self.op = op
        self.value = value
        self.parents = parents
        self.ctx = ctx
        self.name = name or op
        self.param = param
        if param is not None:
            self.requires_grad = param.trainable
        else:
            self.requires_grad = any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.value.shape


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x ** 3)))


def _gelu_grad(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


ACTIVATIONS = {
    "relu": (lambda x: np.maximum(x, 0), lambda x: (x > 0).astype(x.dtype)),
    "gelu": (_gelu, _gelu_grad),
}


# Backward rules: rule(node, g) -> one adjoint (or None) per parent.

def _matmul_back(node, g):
    a, b = node.parents
    bt = node.ctx
    av, bv = a.value, b.value
    ga = gb = None
    if a.requires_grad:
        ga = g @ (bv if bt else np.swapaxes(bv, -1, -2))
    if b.requires_grad:
        if bv.ndim == 2 and av.ndim > 2:
            a2 = av.reshape(-1, av.shape[-1])
            g2 = g.reshape(-1, g.shape[-1])
            gb = g2.T @ a2 if bt else a2.T @ g2
        else:
            gb = np.swapaxes(g, -1, -2) @ av if bt else np.swapaxes(av, -1, -2) @ g
    return ga, gb


def _add_back(node, g):
    return g, g


def _broadcast_add_back(node, g):
    a, b = node.parents
    return g, (_unbroadcast(g, b.shape) if b.requires_grad else None)


def _act_back(node, g):
    (a,) = node.parents
    return (g * ACTIVATIONS[node.ctx][1](a.value),)


def _softmax_back(node, g):
    y = node.value
    return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)


def _gather_back(node, g):
    table, = node.parents
    ids = node.ctx
    gt = np.zeros_like(table.value)
    np.add.at(gt, ids.reshape(-1), g.reshape(-1, gt.shape[1]))
    return (gt,)


def _cross_entropy_back(node, g):
    probs, targets, weights = node.ctx
    d = probs.copy()
    flat = d.reshape(-1, d.shape[-1])
    flat[np.arange(flat.shape[0]), targets.reshape(-1)] -= 1.0
    d *= (weights / weights.sum())[..., None]
    return (g * d,)


def _scale_back(node, g):
    return (g * node.ctx,)


def _dropout_back(node, g):
    return (g * node.ctx,)


BACKWARD = {
    "matmul": _matmul_back,
    "add": _add_back,
    "broadcast_add": _broadcast_add_back,
    "act": _act_back,
    "softmax": _softmax_back,
    "gather": _gather_back,
    "cross_entropy": _cross_entropy_back,
    "scale": _scale_back,
    "dropout": _dropout_back,
}


class Tape:
    """Ordered record of primitive ops; inputs always precede their users."""

    def __init__(self):
        self.nodes = []
        self.loss = None

    def _push(self, node):
        self.nodes.append(node)
        return node

    # leaves

    def param(self, p):
        return self._push(Node("param", p.value, name=p.name, param=p))

    def const(self, value, name="const"):
        return self._push(Node("const", np.asarray(value), name=name))

    # primitives

    def matmul(self, a, b, transpose_b=False, name=None):
        av, bv = a.value, b.value
        inner_b = bv.shape[-1] if transpose_b else bv.shape[-2]
        ok = av.shape[-1] == inner_b and (bv.ndim == 2 or av.shape[:-2] == bv.shape[:-2])
        if not ok:
            raise ShapeError(f"{name or 'matmul'}: cannot multiply {av.shape} by "
                             f"{bv.shape}{'^T' if transpose_b else ''}")
        out = av @ (np.swapaxes(bv, -1, -2) if transpose_b else bv)
        return self._push(Node("matmul", out, (a, b), transpose_b, name))

    def add(self, a, b, name=None):
        if a.shape != b.shape:
            raise ShapeError(f"{name or 'add'}: shapes {a.shape} and {b.shape} differ")
        return self._push(Node("add", a.value + b.value, (a, b), name=name))

    def broadcast_add(self, a, b, name=None):
        try:
            out = a.value + b.value
        except ValueError:
            raise ShapeError(f"{name or 'broadcast_add'}: {b.shape} does not broadcast "
                             f"onto {a.shape}") from None
        if out.shape != a.shape:
            raise ShapeError(f"{name or 'broadcast_add'}: {b.shape} does not broadcast "
                             f"onto {a.shape}")
        return self._push(Node("broadcast_add", out, (a, b), name=name))

    def act(self, a, kind, name=None):
        fn = ACTIVATIONS[kind][0]
        return self._push(Node("act", fn(a.value), (a,), kind, name))

    def softmax(self, a, name=None):
        z = a.value - a.value.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return self._push(Node("softmax", e / e.sum(axis=-1, keepdims=True), (a,), name=name))

    def gather(self, table, ids, name=None):
        ids = np.asarray(ids)
        if table.value.ndim != 2:
            raise ShapeError(f"{name or 'gather'}: table must be 2-D, got {table.shape}")
        return self._push(Node("gather", table.value[ids], (table,), ids, name))

    def cross_entropy(self, logits, targets, weights=None, name=None):
        """Weighted mean of -log softmax(logits)[target] over leading axes."""
        targets = np.asarray(targets)
        lv = logits.value
        if lv.shape[:-1] != targets.shape:
            raise ShapeError(f"{name or 'cross_entropy'}: logits {lv.shape} vs "
                             f"targets {targets.shape}")
        if weights is None:
            weights = np.ones(targets.shape, dtype=lv.dtype)
        weights = np.asarray(weights, dtype=lv.dtype)
        with np.errstate(invalid="ignore", over="ignore"):
            z = lv - lv.max(axis=-1, keepdims=True)
            logz = np.log(np.exp(z).sum(axis=-1, keepdims=True))
            logp = z - logz
            picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
            loss = -np.sum(weights * picked) / np.sum(weights)
        if not np.isfinite(loss):
            raise DivergenceError(f"{name or 'cross_entropy'}: non-finite loss {loss}")
        node = self._push(Node("cross_entropy", np.asarray(loss, dtype=lv.dtype), (logits,),
                               (np.exp(logp), targets, weights), name))
        self.loss = node
        return node

    def scale(self, a, c, name=None):
        node = self._push(Node("scale", a.value * c, (a,), c, name))
        if a is self.loss:
            self.loss = node
        return node

    def dropout(self, a, mask, name=None):
        if mask.shape != a.shape:
            raise ShapeError(f"{name or 'dropout'}: mask {mask.shape} vs input {a.shape}")
        return self._push(Node("dropout", a.value * mask, (a,), mask, name))

    # reverse sweep

    def backward(self, root=None):
        """Propagate d(root)/d(.) and store it in every trainable Param's grad."""
        root = root if root is not None else self.loss
        if root is None or root.value.size != 1:
            raise StateError("backward called before a scalar loss was recorded")
        index = {id(n): i for i, n in enumerate(self.nodes)}
        if id(root) not in index:
            raise StateError("root node is not on this tape")
        adj = {id(root): np.ones_like(root.value)}
        for node in reversed(self.nodes[: index[id(root)] + 1]):
            g = adj.pop(id(node), None)
            if node.param is not None:
                p = node.param
                if p.trainable:
                    contrib = g if g is not None else np.zeros_like(p.value)
                    p.grad = contrib.copy() if p.grad is None else p.grad + contrib
                continue
            if g is None or not node.requires_grad:
                continue
            grads = BACKWARD[node.op](node, g)
            for parent, gp in zip(node.parents, grads):
                if gp is None or not parent.requires_grad:
                    continue
                if gp.shape != parent.shape:
                    raise ShapeError(f"{node.name}: adjoint shape {gp.shape} does not match "
                                     f"input {parent.name} {parent.shape}")
                key = id(parent)
                adj[key] = adj[key] + gp if key in adj else gp


def grad_check(model, batch, step=1e-4, tol=1e-4, coords=32, seed=0):
    """Compare analytic adjoints with central differences, per trainable param.

    ``model`` must provide ``trainable()`` and ``loss(batch, train_mode, rng)``
    returning ``(tape, loss_node)``. The loss is evaluated in train mode with a
    freshly seeded rng every time, so dropout masks are identical across all
    evaluations. Up to ``coords`` coordinates per param are sampled; the
    report maps param name to ``{"coords", "max_rel_err", "passed"}`` where the
    error is ``|a - f| / max(|a|, |f|, 1e-8)``.
    """
    params = model.trainable()
    low = [p.name for p in params if p.value.dtype != np.float64]
    if low:
        raise StateError(f"grad_check needs 64-bit params, got lower precision for {low}")

    def loss_value():
        return float(np.asarray(model.loss(batch, True, np.random.default_rng(seed))[1].value).sum())

    for p in params:
        p.zero_grad()
    tape, loss = model.loss(batch, True, np.random.default_rng(seed))
    tape.backward(loss)
    pick = np.random.default_rng(seed + 1)
    report = {}
    for p in params:
        analytic = p.grad.copy()
        n = p.value.size
        idx = np.arange(n) if n <= coords else np.sort(pick.choice(n, size=coords, replace=False))
        worst = 0.0
        flat = p.value.reshape(-1)
        for i in idx:
            old = flat[i]
            flat[i] = old + step
            up = loss_value()
            flat[i] = old - step
            down = loss_value()
            flat[i] = old
            fd = (up - down) / (2.0 * step)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-8))
        report[p.name] = {"coords": int(len(idx)), "max_rel_err": float(worst),
                          "passed": bool(worst <= tol)}
    return report

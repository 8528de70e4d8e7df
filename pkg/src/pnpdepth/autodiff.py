"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

The operator set is exactly what the depth networks and the sparse-point
loss need: conv2d, bias_add, relu, add, concat, upsample2x, downsample2x,
scale, and a fused masked loss (l1 / l2 / berhu).  Image tensors are laid
out channels-first, (C, H, W).  Everything runs in float64 and every
completed forward or backward pass is checked for non-finite values.

Backward supports two modes:

* ``backward(loss)`` populates ``.grad`` on every leaf tensor created with
  ``requires_grad=True`` (used by the trainer).
* ``backward_to(loss, stop_at)`` returns d(loss)/d(stop_at output) and
  propagates nothing past ``stop_at``: ancestors of the stop node and all
  parameter leaves receive no gradient (used by the refinement loop).
"""

from __future__ import annotations

import itertools

import numpy as np

from .errors import ConfigError, ContractError, GraphError, NumericError

Array = np.ndarray

LOSS_KINDS = ("l1", "l2", "berhu")


class Tensor:
    """A dense float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


_node_ids = itertools.count()


class Node:
    """One operation in the computation graph.

    ``parents`` are the input nodes in a fixed order; ``out`` is the cached
    forward result.  ``_backward(grad_out, needs)`` returns one gradient
    array (or None) per parent; entries whose ``needs`` flag is False may be
    skipped by the implementation.
    """

    __slots__ = ("kind", "parents", "out", "requires_grad", "tensor",
                 "_backward", "node_id", "no_observation")

    def __init__(self, kind, parents, out, backward=None, tensor=None):
        self.kind = kind
        self.parents = tuple(parents)
        self.out = out
        self.tensor = tensor
        self._backward = backward
        self.node_id = next(_node_ids)
        self.no_observation = False
        if tensor is not None:
            self.requires_grad = tensor.requires_grad
        else:
            self.requires_grad = any(p.requires_grad for p in self.parents)
        _check_finite(out, self)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Node({self.kind}#{self.node_id}, shape={np.shape(self.out)})"


def _check_finite(arr: Array, node: "Node | str") -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in output of {node!r}")


def leaf(tensor: Tensor | Array, requires_grad: bool | None = None) -> Node:
    """Wrap a Tensor (or raw array) as a graph leaf."""
    if not isinstance(tensor, Tensor):
        tensor = Tensor(tensor, requires_grad=bool(requires_grad))
    elif requires_grad is not None:
        tensor.requires_grad = bool(requires_grad)
    return Node("leaf", (), tensor.data, tensor=tensor)


def conv2d(x: Node, w: Node, stride: int = 1, pad: int = 1) -> Node:
    """2-d convolution of a (C,H,W) input with an (O,C,k,k) kernel.

    Zero padding, square kernel, no bias (see ``bias_add``).  Output height
    is floor((H + 2*pad - k) / stride) + 1, likewise for width.
    """
    xv, wv = x.out, w.out
    if xv.ndim != 3 or wv.ndim != 4 or wv.shape[2] != wv.shape[3]:
        raise ConfigError(
            f"conv2d expects (C,H,W) input and (O,C,k,k) kernel, "
            f"got {xv.shape} and {wv.shape}")
    c_in, h, wdt = xv.shape
    c_out, c_k, k, _ = wv.shape
    if c_k != c_in:
        raise ConfigError(
            f"conv2d channel mismatch: input {xv.shape} vs kernel {wv.shape}")
    if h + 2 * pad < k or wdt + 2 * pad < k:
        raise ConfigError(
            f"conv2d kernel {k}x{k} larger than padded input {xv.shape} (pad={pad})")
    h_out = (h + 2 * pad - k) // stride + 1
    w_out = (wdt + 2 * pad - k) // stride + 1

    xp = np.pad(xv, ((0, 0), (pad, pad), (pad, pad))) if pad else xv
    cols = np.empty((c_in, k, k, h_out, w_out), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, i:i + stride * h_out:stride,
                               j:j + stride * w_out:stride]
    cols2 = cols.reshape(c_in * k * k, h_out * w_out)
    w2 = wv.reshape(c_out, c_in * k * k)
    out = (w2 @ cols2).reshape(c_out, h_out, w_out)

    def backward(g: Array, needs):
        g2 = g.reshape(c_out, h_out * w_out)
        dw = (g2 @ cols2.T).reshape(wv.shape) if needs[1] else None
        dx = None
        if needs[0]:
            dcols = (w2.T @ g2).reshape(c_in, k, k, h_out, w_out)
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[:, i:i + stride * h_out:stride,
                        j:j + stride * w_out:stride] += dcols[:, i, j]
            dx = dxp[:, pad:pad + h, pad:pad + wdt] if pad else dxp
        return dx, dw

    return Node("conv2d", (x, w), out, backward)


def bias_add(x: Node, b: Node) -> Node:
    """Add a per-channel bias vector (C,) to a (C,H,W) feature map."""
    xv, bv = x.out, b.out
    if bv.shape != (xv.shape[0],):
        raise ConfigError(f"bias shape {bv.shape} does not match input {xv.shape}")
    out = xv + bv[:, None, None]

    def backward(g: Array, needs):
        dx = g if needs[0] else None
        db = g.sum(axis=(1, 2)) if needs[1] else None
        return dx, db

    return Node("bias", (x, b), out, backward)


def relu(x: Node) -> Node:
    out = np.maximum(x.out, 0.0)
    mask = x.out > 0.0

    def backward(g: Array, needs):
        return (g * mask if needs[0] else None,)

    return Node("relu", (x,), out, backward)


def add(a: Node, b: Node) -> Node:
    if a.out.shape != b.out.shape:
        raise ConfigError(f"add shape mismatch: {a.out.shape} vs {b.out.shape}")
    out = a.out + b.out

    def backward(g: Array, needs):
        return (g if needs[0] else None, g if needs[1] else None)

    return Node("add", (a, b), out, backward)


def concat(nodes: list[Node] | tuple[Node, ...]) -> Node:
    """Concatenate (C,H,W) maps along the channel axis."""
    nodes = tuple(nodes)
    spatial = {n.out.shape[1:] for n in nodes}
    if len(spatial) != 1:
        raise ConfigError(
            f"concat spatial mismatch: {[n.out.shape for n in nodes]}")
    out = np.concatenate([n.out for n in nodes], axis=0)
    sizes = [n.out.shape[0] for n in nodes]
    offsets = np.cumsum([0] + sizes)

    def backward(g: Array, needs):
        return tuple(
            g[offsets[i]:offsets[i + 1]] if needs[i] else None
            for i in range(len(nodes)))

    return Node("concat", nodes, out, backward)


def upsample2x(x: Node) -> Node:
    """Nearest-neighbor 2x upsampling; backward is its exact transpose."""
    out = x.out.repeat(2, axis=1).repeat(2, axis=2)

    def backward(g: Array, needs):
        if not needs[0]:
            return (None,)
        c, h2, w2 = g.shape
        return (g.reshape(c, h2 // 2, 2, w2 // 2, 2).sum(axis=(2, 4)),)

    return Node("upsample2x", (x,), out, backward)


def downsample2x(x: Node) -> Node:
    """2x2 mean pooling with stride 2; requires even spatial extents."""
    c, h, w = x.out.shape
    if h % 2 or w % 2:
        raise ConfigError(f"downsample2x needs even H and W, got {x.out.shape}")
    out = x.out.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    def backward(g: Array, needs):
        if not needs[0]:
            return (None,)
        return (g.repeat(2, axis=1).repeat(2, axis=2) * 0.25,)

    return Node("downsample2x", (x,), out, backward)


def scale(x: Node, c: float) -> Node:
    c = float(c)
    out = x.out * c

    def backward(g: Array, needs):
        return (g * c if needs[0] else None,)

    return Node("scale", (x,), out, backward)


def sparse_loss(pred: Node, target, kind: str = "l1",
                reduction: str = "mean") -> Node:
    """Masked depth loss against sparse observations.

    ``target`` is anything with ``.values`` / ``.mask`` (Tensor or array)
    or a plain (values, mask) pair.  The loss is

        sum_ij M_ij * l(pred_ij, D_ij) / denom

    with denom = max(1, sum(M)) for ``reduction="mean"`` and 1 for
    ``reduction="sum"``.  l1 subgradient at zero residual is 0.  The berhu
    threshold c = 0.2 * max |residual| over valid pixels is treated as a
    constant in backward.  An all-zero mask yields exact zero loss and sets
    ``no_observation`` on the returned node.
    """
    if kind not in LOSS_KINDS:
        raise ConfigError(f"unknown loss kind {kind!r}, expected one of {LOSS_KINDS}")
    if reduction not in ("mean", "sum"):
        raise ConfigError(f"unknown reduction {reduction!r}")
    if hasattr(target, "values"):
        values, mask = target.values, target.mask
    else:
        values, mask = target
    values = values.data if isinstance(values, Tensor) else np.asarray(values, dtype=np.float64)
    mask = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
    if values.shape != pred.out.shape or mask.shape != pred.out.shape:
        raise ConfigError(
            f"loss shape mismatch: pred {pred.out.shape}, values {values.shape}, "
            f"mask {mask.shape}")

    n_valid = mask.sum()
    denom = max(1.0, n_valid) if reduction == "mean" else 1.0
    r = pred.out - values

    if n_valid == 0:
        per = np.zeros_like(r)
        dper = np.zeros_like(r)
    elif kind == "l1":
        per = np.abs(r)
        dper = np.sign(r)
    elif kind == "l2":
        per = r * r
        dper = 2.0 * r
    else:  # berhu
        abs_r = np.abs(r)
        c = 0.2 * (abs_r * mask).max()
        if c == 0.0:
            per = abs_r
            dper = np.sign(r)
        else:
            big = abs_r > c
            per = np.where(big, (r * r + c * c) / (2.0 * c), abs_r)
            dper = np.where(big, r / c, np.sign(r))

    out = np.asarray((per * mask).sum() / denom)

    def backward(g: Array, needs):
        if not needs[0]:
            return (None,)
        return (mask * dper * (float(g) / denom),)

    node = Node(f"loss_{kind}", (pred,), out, backward)
    node.no_observation = n_valid == 0
    return node


def _toposort(root: Node) -> list[Node]:
    """Deterministic post-order (parents before children) from ``root``."""
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, int]] = [(root, 0)]
    while stack:
        node, idx = stack.pop()
        if idx == 0:
            if id(node) in seen:
                continue
            seen.add(id(node))
        if idx < len(node.parents):
            stack.append((node, idx + 1))
            parent = node.parents[idx]
            if id(parent) not in seen:
                stack.append((parent, 0))
        else:
            order.append(node)
    return order


def _check_scalar(loss_node: Node) -> None:
    if np.size(loss_node.out) != 1:
        raise ContractError(
            f"backward requires a scalar loss, got shape {np.shape(loss_node.out)}")


def backward(loss_node: Node) -> None:
    """Full backward pass: accumulate gradients into requires_grad leaves.

    Grad buffers of all reachable leaves are zeroed first; accumulation
    within the pass is additive.
    """
    _check_scalar(loss_node)
    order = _toposort(loss_node)

    needs: dict[int, bool] = {}
    for node in order:
        if node.kind == "leaf":
            needs[id(node)] = node.requires_grad
            if node.tensor.requires_grad:
                node.tensor.grad = np.zeros_like(node.tensor.data)
        else:
            needs[id(node)] = any(needs[id(p)] for p in node.parents)

    grads: dict[int, Array] = {id(loss_node): np.ones_like(loss_node.out)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None or not needs[id(node)]:
            continue
        if node.kind == "leaf":
            node.tensor.grad += g
            continue
        parent_needs = tuple(needs[id(p)] for p in node.parents)
        for p, dg in zip(node.parents, node._backward(g, parent_needs)):
            if dg is None or not needs[id(p)]:
                continue
            acc = grads.get(id(p))
            grads[id(p)] = dg.copy() if acc is None else acc + dg

    for node in order:
        if node.kind == "leaf" and node.tensor.requires_grad:
            _check_finite(node.tensor.grad, node)


def backward_to(loss_node: Node, stop_at: Node) -> Tensor:
    """Truncated backward: return d(loss)/d(stop_at output).

    Gradient flows only along paths from the loss down to ``stop_at``;
    ancestors of ``stop_at`` and parameter leaves receive nothing.
    """
    _check_scalar(loss_node)
    order = _toposort(loss_node)

    reach: dict[int, bool] = {}
    for node in order:
        if node is stop_at:
            reach[id(node)] = True
        else:
            reach[id(node)] = any(reach[id(p)] for p in node.parents)
    if not reach.get(id(loss_node), False):
        raise GraphError("stop_at node is not an ancestor of the loss node")

    grads: dict[int, Array] = {id(loss_node): np.ones_like(loss_node.out)}
    result: Array | None = None
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node is stop_at:
            result = g if result is None else result + g
            continue
        parent_needs = tuple(reach[id(p)] for p in node.parents)
        for p, dg in zip(node.parents, node._backward(g, parent_needs)):
            if dg is None or not reach[id(p)]:
                continue
            acc = grads.get(id(p))
            grads[id(p)] = dg.copy() if acc is None else acc + dg

    grad = np.zeros_like(stop_at.out) if result is None else result
    _check_finite(grad, stop_at)
    return Tensor(grad)

"""Reverse-mode automatic differentiation over dense numpy arrays.

A ``Tensor`` wraps an ndarray; operations on tensors (see ``ops``) record
their backward rules on the innermost active ``Tape``.  ``backward(loss)``
replays the tape in reverse and accumulates gradients into the ``grad``
field of every reachable leaf.

Tapes are confined to a single thread: the active-tape stack is
thread-local, so independent workers can record and differentiate
concurrently without shared mutable state.
"""

import threading

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class NonFiniteError(FloatingPointError):
    """An operation produced a non-finite forward value."""


class NonDeterministicError(RuntimeError):
    """Two forward evaluations of a supposedly pure function disagreed."""


class config:
    """Module-level switches.

    check_finite: validate every op's forward output and report the op
    name plus the first offending flat index.  Costs one vectorized
    isfinite pass per op; leave on unless profiling says otherwise.
    """

    check_finite = True


_LOCAL = threading.local()


def _stack():
    stack = getattr(_LOCAL, "tape_stack", None)
    if stack is None:
        stack = _LOCAL.tape_stack = []
    return stack


def active_tape():
    """Innermost recording tape, or None when not recording."""
    stack = _stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of operations; execution order is topological.

    Leaving the ``with`` block releases the recorded graph (the node
    references form cycles that would otherwise pile up for the garbage
    collector), so ``backward`` must run inside the block.
    """

    def __init__(self):
        self.ops = []
        self.released = False

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _stack().pop()
        assert popped is self, "tape stack corrupted"
        self.release()
        return False

    def release(self):
        for node in self.ops:
            node.inputs = ()
            node.output = None
            node.backward_fn = None
        self.ops.clear()
        self.released = True


class no_grad:
    """Context manager that suspends recording on the current thread."""

    def __enter__(self):
        _stack().append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        _stack().pop()
        return False


class Node:
    """One recorded operation: inputs, output, and its backward rule."""

    __slots__ = ("op", "inputs", "output", "backward_fn", "tape", "index")

    def __init__(self, op, inputs, output, backward_fn, tape, index):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.tape = tape
        self.index = index


class Tensor:
    """N-dimensional numeric value in a differentiable computation graph.

    data: dense ndarray (float64 for oracle tests, float32 for training).
    grad: same-shape ndarray once a backward pass has reached this leaf.
    node: producing operation on the tape, None for leaves and constants.
    """

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return self.data.item()

    def detach(self):
        """Constant view of this tensor's value, cut off from the graph."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def grad_or_zeros(self):
        return self.grad if self.grad is not None else np.zeros_like(self.data)

    def __repr__(self):
        flags = []
        if self.requires_grad:
            flags.append("requires_grad")
        if self.node is not None:
            flags.append(f"op={self.node.op}")
        suffix = (", " + ", ".join(flags)) if flags else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{suffix})"

    # Arithmetic operators are attached by triplane_diffusion.autodiff.ops
    # at import time so the op definitions live in one place.


def parameter(data, dtype=None):
    """Leaf tensor that collects gradients; no upstream graph node."""
    return Tensor(data, requires_grad=True, dtype=dtype)


def backward(loss, grad_store=None):
    """Populate ``grad`` of every leaf reachable from a scalar loss.

    Gradients accumulate additively, both across multiple uses of a value
    within the graph and across repeated backward calls (callers zero
    grads between optimization steps).

    With ``grad_store`` (a dict), leaf gradients are accumulated there,
    keyed by the leaf tensor, instead of into ``.grad`` — this lets
    concurrent workers differentiate against shared parameters and have
    the caller merge the stores in a fixed order afterwards.
    """
    if not isinstance(loss, Tensor):
        raise TypeError(f"backward expects a Tensor, got {type(loss).__name__}")
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")

    def accumulate_leaf(leaf, g):
        if grad_store is None:
            leaf.accumulate_grad(g)
        elif leaf in grad_store:
            grad_store[leaf] += g
        else:
            grad_store[leaf] = np.array(g, dtype=leaf.data.dtype)

    seed = np.ones_like(loss.data)
    if loss.node is None:
        if loss.requires_grad:
            accumulate_leaf(loss, seed)
        return
    tape = loss.node.tape
    if tape.released:
        raise RuntimeError(
            "the tape recording this loss was already released; "
            "call backward inside the Tape context")
    # Gradients of intermediates live in this dict; leaves go to .grad.
    # Buffers enter unowned (they may alias an op's forward/backward
    # arrays) and are copied only if a second contribution arrives.
    grads = {id(loss): seed}
    owned = {id(loss)}
    for node in reversed(tape.ops[: loss.node.index + 1]):
        key_out = id(node.output)
        g_out = grads.pop(key_out, None)
        if g_out is None:
            continue  # not on the path from loss
        owned.discard(key_out)
        input_grads = node.backward_fn(g_out)
        for inp, g in zip(node.inputs, input_grads):
            if g is None or not isinstance(inp, Tensor):
                continue
            if inp.node is not None:
                key = id(inp.node.output)
                if key not in grads:
                    grads[key] = g
                elif key in owned:
                    grads[key] += g
                else:
                    grads[key] = grads[key] + g
                    owned.add(key)
            elif inp.requires_grad:
                accumulate_leaf(inp, g)

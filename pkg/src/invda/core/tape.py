"""Reverse-mode differentiation tape.

The tape records primitive operations (forward value + a vector-Jacobian
closure) in execution order.  A single reverse sweep accumulates gradient
contributions from every consumer of a node; after the sweep the tape is
consumed and cannot record or sweep again.

Values on the tape are float64 ndarrays.  Complex arrays are allowed as
intermediates (spectral states); their cotangents follow the convention
``g = dJ/dRe + 1j * dJ/dIm``, which keeps linear-operator adjoints in the
familiar conjugate-symbol form.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class TapeError(RuntimeError):
    """Tape contract violation (reuse after sweep, non-scalar output, ...)."""


class Var:
    """A value tracked on a tape."""

    __slots__ = ("value", "tape", "index")

    def __init__(self, value, tape, index):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self):
        return np.shape(self.value)

    # Operator sugar is wired up by invda.core.ops at import time.

    def __repr__(self):
        return f"Var(shape={np.shape(self.value)}, index={self.index})"


class _Node:
    __slots__ = ("out_index", "parent_indices", "vjp")

    def __init__(self, out_index, parent_indices, vjp):
        self.out_index = out_index
        self.parent_indices = parent_indices
        self.vjp = vjp


class GradientTape:
    """Append-only record of primitive operations.

    Single-owner, single-sweep: one ``backward`` call consumes the tape.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._leaves: list[int] = []
        self._leaf_values: list = []
        self._n_vars = 0
        self._consumed = False

    def _new_var(self, value) -> Var:
        v = Var(value, self, self._n_vars)
        self._n_vars += 1
        return v

    def leaf(self, value) -> Var:
        """Register a differentiable input."""
        if self._consumed:
            raise TapeError("tape already consumed")
        if isinstance(value, Tensor):
            value = value.data
        value = np.asarray(value, dtype=np.float64)
        v = self._new_var(value)
        self._leaves.append(v.index)
        self._leaf_values.append(value)
        return v

    def record(self, value, parents, vjp) -> Var:
        """Record a primitive: forward ``value``, ``parents`` Vars, and a
        ``vjp(g) -> tuple`` returning one cotangent per parent (or None)."""
        if self._consumed:
            raise TapeError("tape already consumed")
        out = self._new_var(value)
        self._nodes.append(_Node(out.index, tuple(p.index for p in parents), vjp))
        return out

    @property
    def num_nodes(self) -> int:
        return len(self._nodes)

    def backward(self, output: Var):
        """Reverse sweep from a scalar output.

        Returns the gradient for every registered leaf, in registration
        order.  Contributions from every consumer of a node are summed.
        """
        if self._consumed:
            raise TapeError("tape already consumed")
        if output.tape is not self:
            raise TapeError("output does not belong to this tape")
        if np.size(output.value) != 1:
            raise TapeError("backward requires a scalar output")
        self._consumed = True

        grads: list = [None] * self._n_vars
        grads[output.index] = np.ones_like(np.asarray(output.value))
        for node in reversed(self._nodes):
            g = grads[node.out_index]
            if g is None:
                continue
            contribs = node.vjp(g)
            for pi, contrib in zip(node.parent_indices, contribs):
                if contrib is None:
                    continue
                if grads[pi] is None:
                    grads[pi] = contrib
                else:
                    grads[pi] = grads[pi] + contrib
            grads[node.out_index] = None  # free as we go
        out = []
        for li, lv in zip(self._leaves, self._leaf_values):
            g = grads[li]
            out.append(np.zeros_like(lv) if g is None else g)
        return out


def backward(tape: GradientTape, output: Var):
    """Gradients of a scalar output w.r.t. every leaf of ``tape``."""
    return tape.backward(output)

"""Reverse-mode differentiation tape over float64 numpy arrays.

A :class:`Tape` records primitive operations in execution order; because
every operation's inputs are recorded before its output, the record list is
topologically sorted by construction and the backward pass is a single
reverse sweep that visits each op exactly once.  A tape is single-use:
``backward`` consumes it and a second call raises :class:`TapeError`.

Trainable state lives in :class:`Parameter` objects that persist across
steps; ``Tape.watch`` binds a parameter to a leaf node for one recording.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import G2SLocError, TapeError


class Parameter:
    """Named persistent float64 array updated by the training loop."""

    __slots__ = ("name", "data")

    def __init__(self, name: str, data: np.ndarray):
        self.name = name
        self.data = np.asarray(data, dtype=np.float64)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


class Tensor:
    """Value produced during one tape recording."""

    __slots__ = ("tape", "idx", "data")

    def __init__(self, tape: "Tape", idx: int, data: np.ndarray):
        self.tape = tape
        self.idx = idx
        self.data = data

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(idx={self.idx}, shape={self.data.shape})"

    # Convenience arithmetic; heavy lifting lives in tensorcore.ops.
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops

        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops

        return ops.mul(self, other)

    def __neg__(self):
        from . import ops

        return ops.neg(self)


class Gradients:
    """Result of a backward pass: per-node buffers plus a parameter map."""

    def __init__(self, buffers, param_map):
        self._buffers = buffers
        self._param_map = param_map

    def of(self, node) -> np.ndarray:
        """Gradient of the loss w.r.t. a Tensor or Parameter (zeros if unused)."""
        if isinstance(node, Parameter):
            idx = self._param_map.get(id(node))
            if idx is None:
                return np.zeros_like(node.data)
            grad = self._buffers[idx]
            return np.zeros_like(node.data) if grad is None else grad
        grad = self._buffers[node.idx]
        return np.zeros_like(node.data) if grad is None else grad


class Tape:
    """Ordered record of primitive ops; one forward recording, one backward."""

    def __init__(self):
        self._records: list[tuple[tuple[int, ...], int, Callable]] = []
        self._nodes: list[np.ndarray] = []
        self._watched: dict[int, Tensor] = {}
        self._params: list[Parameter] = []
        self._consumed = False

    def _new_node(self, data: np.ndarray) -> Tensor:
        tensor = Tensor(self, len(self._nodes), np.asarray(data, dtype=np.float64))
        self._nodes.append(tensor.data)
        return tensor

    def leaf(self, value) -> Tensor:
        """Register an input value as a differentiable leaf."""
        return self._new_node(value)

    def constant(self, value) -> Tensor:
        """Register a value that participates in ops but gets no gradient."""
        return self._new_node(value)

    def watch(self, param: Parameter) -> Tensor:
        """Leaf bound to a parameter; repeated calls return the same node."""
        node = self._watched.get(id(param))
        if node is None:
            node = self._new_node(param.data)
            self._watched[id(param)] = node
            self._params.append(param)
        return node

    def record(self, out_data, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
        """Append a primitive op.

        ``backward(grad_out, accumulate)`` must push gradients to each input
        through ``accumulate(tensor, grad_array)``.  Inputs must precede the
        output node; the tape is append-only so this is checked, not fixed.
        """
        out = self._new_node(out_data)
        ids = tuple(t.idx for t in inputs)
        for t in inputs:
            if t.tape is not self:
                raise TapeError("op mixes tensors from different tapes")
            if t.idx >= out.idx:
                raise G2SLocError("internal error: op input does not precede output")
        self._records.append((ids, out.idx, backward))
        return out

    def backward(self, loss: Tensor) -> Gradients:
        """Reverse sweep from a scalar loss; single use per recording."""
        if self._consumed:
            raise TapeError("backward already ran on this tape; re-record the forward pass")
        if loss.tape is not self:
            raise TapeError("loss tensor belongs to a different tape")
        if loss.data.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.data.shape}")
        self._consumed = True

        buffers: list = [None] * len(self._nodes)
        buffers[loss.idx] = np.ones_like(loss.data)
        # Tensor handles are not retained by records; rebuild light views on demand.
        node_cache: dict[int, Tensor] = {}

        def handle(idx: int) -> Tensor:
            t = node_cache.get(idx)
            if t is None:
                t = Tensor(self, idx, self._nodes[idx])
                node_cache[t.idx] = t
            return t

        # Buffers are copy-on-write: the first contribution is adopted by
        # reference (ops may hand over grad_out itself or a view); a second
        # contribution allocates a fresh sum instead of mutating in place,
        # so aliased buffers are never written through.
        borrowed = [True] * len(self._nodes)

        def accumulate(tensor: Tensor, grad):
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self._nodes[tensor.idx].shape:
                raise G2SLocError(
                    f"internal error: gradient shape {grad.shape} != "
                    f"node shape {self._nodes[tensor.idx].shape}"
                )
            current = buffers[tensor.idx]
            if current is None:
                buffers[tensor.idx] = grad
            elif borrowed[tensor.idx]:
                buffers[tensor.idx] = current + grad
                borrowed[tensor.idx] = False
            else:
                buffers[tensor.idx] += grad

        for ids, out_idx, backward_fn in reversed(self._records):
            grad_out = buffers[out_idx]
            if grad_out is None:
                continue
            backward_fn(grad_out, accumulate)
            del ids  # inputs are rebound inside each op's closure

        param_map = {pid: node.idx for pid, node in self._watched.items()}
        return Gradients(buffers, param_map)

    @property
    def watched_params(self) -> list[Parameter]:
        return list(self._params)

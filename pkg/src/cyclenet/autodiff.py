"""A minimal reverse-mode tape.

Every differentiable op appends one node to the tape holding its output value,
its parent nodes and a closure mapping the output gradient to parent gradients.
Nodes are appended in evaluation order, so the tape is topologically sorted and
the reverse sweep is a single backwards walk.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class TapeStateError(RuntimeError):
    """Backward requested for a node the tape never recorded."""


class Var:
    __slots__ = ("value", "name", "tape", "index")

    def __init__(self, value: np.ndarray, tape: "Tape", index: int, name: str | None = None):
        self.value = value
        self.tape = tape
        self.index = index
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Var#{self.index}{label}{tuple(self.value.shape)}"


BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Gradients:
    """Gradients of one backward sweep; unused leaves report zeros."""

    def __init__(self, tape: "Tape", grads: dict[int, np.ndarray]):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, var: Var) -> np.ndarray:
        g = self._grads.get(var.index)
        if g is None:
            return np.zeros_like(var.value)
        return g

    def by_name(self) -> dict[str, np.ndarray]:
        return {v.name: self[v] for v in self._tape.leaves if v.name is not None}


class Tape:
    def __init__(self, grad: bool = True):
        self.grad_enabled = grad
        self.nodes: list[Var] = []
        self._parents: list[tuple[Var, ...]] = []
        self._backward: list[BackwardFn | None] = []
        self.leaves: list[Var] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, name: str | None = None) -> Var:
        var = Var(np.asarray(value), self, len(self.nodes), name)
        self.nodes.append(var)
        self._parents.append(())
        self._backward.append(None)
        self.leaves.append(var)
        return var

    def record(self, value: np.ndarray, parents: Sequence[Var], backward: BackwardFn) -> Var:
        var = Var(value, self, len(self.nodes))
        self.nodes.append(var)
        if self.grad_enabled:
            self._parents.append(tuple(parents))
            self._backward.append(backward)
        else:
            self._parents.append(())
            self._backward.append(None)
        return var

    def release(self) -> None:
        """Drop recorded closures and intermediate values.

        Closures and nodes reference each other, so without this the memory of a
        forward pass waits for the cyclic garbage collector.
        """
        keep = {id(v) for v in self.leaves}
        for v in self.nodes:
            if id(v) not in keep:
                v.value = None
        self.nodes.clear()
        self._parents.clear()
        self._backward.clear()

    def backward(self, out: Var, seed: np.ndarray | None = None) -> Gradients:
        """Propagate ``seed`` (default: ones, i.e. d(sum out)) back from ``out``.

        The tape is left intact, so several sweeps from different outputs or
        seeds may be run over one forward pass.
        """
        if out.tape is not self or out.index >= len(self.nodes) or self.nodes[out.index] is not out:
            raise TapeStateError("backward on a node that was not recorded by this tape")
        if not self.grad_enabled:
            raise TapeStateError("tape was recorded with grad disabled")
        if seed is None:
            seed = np.ones_like(out.value)
        seed = np.asarray(seed, dtype=out.value.dtype)
        if seed.shape != out.value.shape:
            raise ValueError(f"seed shape {seed.shape} != output shape {out.value.shape}")
        grads: dict[int, np.ndarray] = {out.index: seed}
        for i in range(out.index, -1, -1):
            g = grads.get(i)
            fn = self._backward[i]
            if g is None or fn is None:
                continue
            parents = self._parents[i]
            for parent, pg in zip(parents, fn(g)):
                if pg is None:
                    continue
                j = parent.index
                if j in grads:
                    grads[j] = grads[j] + pg
                else:
                    grads[j] = pg
            if i != out.index and self._backward[i] is not None:
                # intermediate gradients are not needed after being propagated
                del grads[i]
        return Gradients(self, grads)

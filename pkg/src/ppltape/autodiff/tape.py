"""Define-by-run tape, tape values and mutable parameters.

A :class:`Tape` records every differentiable operation executed while it is
active. Values are thin handles into the tape holding the cached forward
result; gradients are obtained by a single reverse sweep.
"""

from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np

from ppltape.errors import ShapeError, TapeError

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "ppltape_active_tape", default=None
)

CONSTANT = "constant"
PARAMETER = "parameter-ref"
RESULT = "op-result"


def as_tensor(x) -> np.ndarray:
    """Return ``x`` as a float64 ndarray (the library's Tensor type)."""
    return np.asarray(x, dtype=np.float64)


def active_tape() -> "Tape":
    tape = _ACTIVE_TAPE.get()
    if tape is None:
        raise TapeError("no active tape; wrap the computation in `with Tape():`")
    return tape


def current_tape() -> Optional["Tape"]:
    return _ACTIVE_TAPE.get()


class Arithmetic:
    """Operator overloads shared by everything that can be lifted onto a tape."""

    __array_ufunc__ = None  # make ``ndarray op Value`` dispatch to the reflected method

    def __add__(self, other):
        from ppltape.autodiff import ops

        return ops.add(self, other)

    def __radd__(self, other):
        from ppltape.autodiff import ops

        return ops.add(other, self)

    def __sub__(self, other):
        from ppltape.autodiff import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from ppltape.autodiff import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from ppltape.autodiff import ops

        return ops.mul(self, other)

    def __rmul__(self, other):
        from ppltape.autodiff import ops

        return ops.mul(other, self)

    def __truediv__(self, other):
        from ppltape.autodiff import ops

        return ops.div(self, other)

    def __rtruediv__(self, other):
        from ppltape.autodiff import ops

        return ops.div(other, self)

    def __neg__(self):
        from ppltape.autodiff import ops

        return ops.neg(self)

    def __pow__(self, exponent):
        from ppltape.autodiff import ops

        return ops.pow(self, exponent)

    def __matmul__(self, other):
        from ppltape.autodiff import ops

        return ops.matmul(self, other)

    def __rmatmul__(self, other):
        from ppltape.autodiff import ops

        return ops.matmul(other, self)

    def __getitem__(self, key):
        from ppltape.autodiff import ops

        return ops.index(self, key)

    def sum(self, axis=None, keepdims=False):
        from ppltape.autodiff import ops

        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from ppltape.autodiff import ops

        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from ppltape.autodiff import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    @property
    def T(self):
        from ppltape.autodiff import ops

        return ops.transpose(self)


class Parameter(Arithmetic):
    """A named, mutable tensor living outside any tape.

    Parameters are the only mutable state in the library. Optimizers and
    samplers write to them between tapes through :meth:`assign`; the shape is
    fixed at creation.
    """

    def __init__(self, name: str, value, trainable: bool = True):
        self.name = name
        self._value = np.array(value, dtype=np.float64)
        self._value.setflags(write=False)
        self.trainable = trainable

    @property
    def value(self) -> np.ndarray:
        return self._value

    @property
    def shape(self) -> tuple:
        return self._value.shape

    def assign(self, value) -> None:
        new = np.array(value, dtype=np.float64)
        if new.shape != self._value.shape:
            raise ShapeError(
                f"parameter {self.name!r} has shape {self._value.shape}, "
                f"cannot assign shape {new.shape}"
            )
        new.setflags(write=False)
        self._value = new

    def _as_value(self, tape: "Tape") -> "Value":
        return tape.param(self)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


class ParamStore:
    """Registry guaranteeing unique parameter names."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def create(self, name: str, value, trainable: bool = True) -> Parameter:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already exists")
        p = Parameter(name, value, trainable)
        self._params[name] = p
        return p

    def add(self, param: Parameter) -> Parameter:
        if param.name in self._params and self._params[param.name] is not param:
            raise KeyError(f"parameter {param.name!r} already exists")
        self._params[param.name] = param
        return param

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.value for name, p in self._params.items()}

    def restore(self, snapshot: dict[str, np.ndarray]) -> None:
        for name, value in snapshot.items():
            self._params[name].assign(value)


class Value(Arithmetic):
    """Handle to one node of a tape, carrying the node's cached output."""

    __slots__ = ("tape", "index", "data", "requires_grad")

    def __init__(self, tape: "Tape", index: int, data: np.ndarray, requires_grad: bool):
        self.tape = tape
        self.index = index
        self.data = data
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def kind(self) -> str:
        return self.tape._kinds[self.index]

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __float__(self):
        return float(self.data)

    def __repr__(self):
        return f"Value(shape={self.shape}, kind={self.kind})"


class Tape:
    """Ordered record of operations for one evaluation.

    Used as a context manager, the tape becomes the active tape so that
    parameters, feed slots and plain arrays are lifted onto it implicitly.
    """

    def __init__(self):
        self._values: list[Value] = []
        self._inputs: list[tuple] = []
        self._vjps: list[Optional[Callable]] = []
        self._kinds: list[str] = []
        self._ops: list[str] = []
        self._param_nodes: dict[int, Value] = {}
        self._params: dict[int, Parameter] = {}
        self._param_scopes: list[set] = []
        self._frozen: set = set()
        self._tokens: list = []

    def __enter__(self) -> "Tape":
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._tokens.pop())
        return False

    def __len__(self):
        return len(self._values)

    @property
    def is_open(self) -> bool:
        """True while the tape is active (or entered and shadowed by a nested tape)."""
        return bool(self._tokens)

    @property
    def ops(self) -> list[str]:
        return list(self._ops)

    def _push(self, op: str, kind: str, data: np.ndarray, inputs: tuple,
              vjp: Optional[Callable], requires_grad: bool) -> Value:
        v = Value(self, len(self._values), data, requires_grad)
        self._values.append(v)
        self._inputs.append(inputs)
        self._vjps.append(vjp)
        self._kinds.append(kind)
        self._ops.append(op)
        return v

    def constant(self, x) -> Value:
        return self._push("constant", CONSTANT, as_tensor(x), (), None, False)

    def watch(self, x) -> Value:
        """Leaf constant whose gradient may be requested via :meth:`gradients`."""
        return self._push("constant", CONSTANT, as_tensor(x), (), None, True)

    def param(self, p: Parameter) -> Value:
        v = self._param_nodes.get(id(p))
        if v is None:
            v = self._push("parameter", PARAMETER, p.value, (), None,
                           p.trainable and id(p) not in self._frozen)
            self._param_nodes[id(p)] = v
            self._params[id(p)] = p
        for scope in self._param_scopes:
            scope.add(p)
        return v

    def freeze(self, params: Iterable[Parameter]) -> None:
        """Treat ``params`` as constants on this tape (no gradients flow to them).

        Must be called before the parameters are first read on the tape.
        """
        for p in params:
            if id(p) in self._param_nodes:
                raise TapeError(f"parameter {p.name!r} was already read on this tape")
            self._frozen.add(id(p))

    @contextlib.contextmanager
    def watching_params(self) -> Iterator[set]:
        """Collect every parameter read on this tape inside the block."""
        scope: set = set()
        self._param_scopes.append(scope)
        try:
            yield scope
        finally:
            self._param_scopes.remove(scope)

    def descendants(self, source: Value) -> np.ndarray:
        """Boolean mask over nodes: True where the node depends on ``source``."""
        if source.tape is not self:
            raise TapeError("value belongs to a different tape")
        mask = np.zeros(len(self._values), dtype=bool)
        mask[source.index] = True
        inputs = self._inputs
        for i in range(source.index + 1, len(inputs)):
            for inp in inputs[i]:
                if mask[inp.index]:
                    mask[i] = True
                    break
        return mask

    def parameters(self) -> list[Parameter]:
        return list(self._params.values())

    def record(self, op: str, inputs: Sequence[Value], data: np.ndarray,
               vjp: Callable) -> Value:
        """Append an op-result node; ``vjp(g)`` returns one cotangent per input."""
        requires_grad = any(v.requires_grad for v in inputs)
        return self._push(op, RESULT, data, tuple(inputs), vjp if requires_grad else None,
                          requires_grad)

    def _adjoints(self, root: Value) -> list:
        if root.tape is not self:
            raise TapeError("root belongs to a different tape")
        if root.data.size != 1 or root.data.ndim != 0:
            raise ShapeError(f"backward requires a scalar root, got shape {root.shape}")
        adj: list = [None] * (root.index + 1)
        adj[root.index] = np.ones((), dtype=np.float64)
        vjps = self._vjps
        inputs = self._inputs
        for i in range(root.index, -1, -1):
            g = adj[i]
            if g is None:
                continue
            vjp = vjps[i]
            if vjp is None:
                continue
            grads = vjp(g)
            for inp, gi in zip(inputs[i], grads):
                if gi is None or not inp.requires_grad:
                    continue
                j = inp.index
                prev = adj[j]
                adj[j] = gi if prev is None else prev + gi
        return adj

    def gradients(self, root: Value, wrt: Iterable[Value]) -> list[np.ndarray]:
        """Gradients of scalar ``root`` with respect to arbitrary values on this tape."""
        adj = self._adjoints(root)
        out = []
        for v in wrt:
            if v.tape is not self:
                raise TapeError("gradient requested for a value of another tape")
            g = adj[v.index] if v.index < len(adj) else None
            out.append(np.zeros(v.shape) if g is None else np.asarray(g, dtype=np.float64))
        return out

    def backward(self, root: Value) -> dict[Parameter, np.ndarray]:
        """Gradient of scalar ``root`` with respect to every trainable parameter it uses."""
        adj = self._adjoints(root)
        grads: dict[Parameter, np.ndarray] = {}
        for key, v in self._param_nodes.items():
            p = self._params[key]
            if not p.trainable or v.index >= len(adj) or adj[v.index] is None:
                continue
            grads[p] = np.asarray(adj[v.index], dtype=np.float64).reshape(p.shape)
        return grads


def backward(root: Value) -> dict[Parameter, np.ndarray]:
    return root.tape.backward(root)

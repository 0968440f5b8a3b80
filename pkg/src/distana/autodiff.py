"""Minimal reverse-mode autodiff over float64 numpy arrays.

Just enough machinery for the prediction-kernel network: dense linear
maps without bias, elementwise nonlinearities, Hadamard products,
concatenation/slicing along the feature axis, a column gather for
lattice message passing, and a mean-squared-error scalar loss.

Values are float64 throughout; the networks are tiny, so precision wins
over speed and keeps finite-difference checks sharp.  There is no
broadcasting beyond scalar*tensor: all shapes are explicit, and any
mismatch raises ``ShapeError`` instead of silently bending.

A :class:`Tape` records one forward unroll and is thrown away after
``backward``; tensors without a tape handle are plain immutable values,
so inference runs through the exact same op functions with zero
recording overhead.  Vector ops accept an optional trailing batch axis
(``(n,)`` or ``(n, k)``, columns are batch items), which is how a whole
lattice of weight-shared cells is pushed through one op.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeError",
    "NumericError",
    "Tensor",
    "Tape",
    "GradientMap",
    "constant",
    "linear",
    "add",
    "scale",
    "sigmoid",
    "tanh",
    "hadamard",
    "concat",
    "slice_rows",
    "gather_columns",
    "mse",
    "grad_check",
]


class AutodiffError(Exception):
    """Base class for autodiff contract violations."""


class ShapeError(AutodiffError):
    """Operand shapes do not satisfy an op's contract."""


class NumericError(AutodiffError):
    """A forward op produced a non-finite value.

    The modelled dynamics are bounded by tanh/sigmoid, so NaN/Inf in a
    forward pass indicates a bug (or a diverged optimizer), never a
    legitimate state.
    """


class Tensor:
    """Dense float64 array plus an optional tape handle.

    Tensors are value-semantics: ops never mutate ``data``.  A tensor
    with ``tape is None`` is a constant and receives no gradient.
    """

    __slots__ = ("data", "tape", "node")

    def __init__(self, data: np.ndarray, tape: "Tape | None" = None, node: int = -1):
        self.data = data
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        kind = "leaf" if self.tape is not None else "const"
        return f"Tensor({kind}, shape={self.data.shape})"


def constant(data) -> Tensor:
    """Wrap an array as an untaped constant tensor."""
    return Tensor(np.ascontiguousarray(data, dtype=np.float64))


class GradientMap:
    """Per-leaf gradients from one backward pass.

    ``get(t)`` returns an array of the same shape as ``t``; leaves that
    the loss does not reach get exact zeros.
    """

    def __init__(self, grads: list[np.ndarray | None], tape: "Tape"):
        self._grads = grads
        self._tape = tape

    def get(self, t: Tensor) -> np.ndarray:
        if t.tape is not self._tape:
            raise AutodiffError("tensor does not belong to this tape")
        g = self._grads[t.node]
        if g is None:
            return np.zeros_like(t.data)
        return g


class Tape:
    """Ordered record of one forward computation.

    Nodes are recorded in topological order by construction (an op can
    only consume tensors that already exist), so ``backward`` is a
    single reverse sweep visiting each node exactly once.  Single
    ownership: one tape per thread of computation; independent tapes may
    run in parallel.
    """

    def __init__(self):
        self._parents: list[tuple[int, ...]] = []
        self._vjps: list[Callable[[np.ndarray], tuple[np.ndarray, ...]] | None] = []
        self._is_leaf: list[bool] = []

    def __len__(self) -> int:
        return len(self._vjps)

    def leaf(self, data) -> Tensor:
        """Register a differentiable leaf (parameter or tunable input)."""
        arr = np.ascontiguousarray(data, dtype=np.float64)
        self._parents.append(())
        self._vjps.append(None)
        self._is_leaf.append(True)
        return Tensor(arr, self, len(self._vjps) - 1)

    def _record(self, data: np.ndarray, parents: tuple[int, ...], vjp) -> Tensor:
        self._parents.append(parents)
        self._vjps.append(vjp)
        self._is_leaf.append(False)
        return Tensor(data, self, len(self._vjps) - 1)

    def backward(self, loss: Tensor) -> GradientMap:
        """Exact reverse-mode gradients of a scalar loss for every leaf.

        Deterministic: accumulation order is fixed by node order, so
        replaying the same tape gives bit-identical gradients.
        """
        if loss.tape is not self:
            raise AutodiffError("loss was not recorded on this tape")
        if loss.data.shape != ():
            raise AutodiffError(
                f"backward requires a scalar loss, got shape {loss.data.shape}"
            )
        grads: list[np.ndarray | None] = [None] * len(self._vjps)
        grads[loss.node] = np.ones((), dtype=np.float64)
        for nid in range(loss.node, -1, -1):
            g = grads[nid]
            if g is None:
                continue
            vjp = self._vjps[nid]
            if vjp is None:  # leaf: keep its gradient
                continue
            for pid, pg in zip(self._parents[nid], vjp(g)):
                acc = grads[pid]
                # Never accumulate in place: a vjp may alias its output
                # gradient (e.g. `add` passes g through untouched).
                grads[pid] = pg if acc is None else acc + pg
            grads[nid] = None  # free interior gradients eagerly
        return GradientMap(grads, self)


# ---------------------------------------------------------------------------
# op plumbing


def _check_finite(out: np.ndarray, op: str) -> None:
    if not np.isfinite(out).all():
        raise NumericError(f"{op} produced non-finite values")


def _common_tape(*ts: Tensor) -> Tape | None:
    tape = None
    for t in ts:
        tp = t.tape
        if tp is not None:
            if tape is None:
                tape = tp
            elif tape is not tp:
                raise AutodiffError("operands recorded on different tapes")
    return tape


# ---------------------------------------------------------------------------
# ops


def linear(w: Tensor, x: Tensor) -> Tensor:
    """y = W @ x, with no bias term anywhere in this artifact.

    ``w`` is (m, n); ``x`` is (n,) or (n, k) with columns as batch items.
    """
    wd, xd = w.data, x.data
    if wd.ndim != 2 or xd.ndim not in (1, 2) or wd.shape[1] != xd.shape[0]:
        raise ShapeError(f"linear: incompatible shapes W{wd.shape} x{xd.shape}")
    out = wd @ xd
    _check_finite(out, "linear")
    tape = _common_tape(w, x)
    if tape is None:
        return Tensor(out)
    want_w = w.tape is not None
    want_x = x.tape is not None
    if want_w and want_x:

        def vjp(g):
            gw = g @ xd.T if xd.ndim == 2 else np.outer(g, xd)
            return gw, wd.T @ g

        return tape._record(out, (w.node, x.node), vjp)
    if want_w:

        def vjp(g):
            return ((g @ xd.T if xd.ndim == 2 else np.outer(g, xd)),)

        return tape._record(out, (w.node,), vjp)

    def vjp(g):
        return (wd.T @ g,)

    return tape._record(out, (x.node,), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.shape != bd.shape:
        raise ShapeError(f"add: shape mismatch {ad.shape} vs {bd.shape}")
    out = ad + bd
    _check_finite(out, "add")
    tape = _common_tape(a, b)
    if tape is None:
        return Tensor(out)
    if a.tape is not None and b.tape is not None:
        return tape._record(out, (a.node, b.node), lambda g: (g, g))
    src = a if a.tape is not None else b
    return tape._record(out, (src.node,), lambda g: (g,))


def scale(x: Tensor, k: float) -> Tensor:
    """Scalar * tensor; the only broadcasting this module permits."""
    k = float(k)
    out = x.data * k
    _check_finite(out, "scale")
    if x.tape is None:
        return Tensor(out)
    return x.tape._record(out, (x.node,), lambda g: (g * k,))


def sigmoid(x: Tensor) -> Tensor:
    # tanh form is overflow-free for float64 at any input magnitude
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    _check_finite(out, "sigmoid")
    if x.tape is None:
        return Tensor(out)
    return x.tape._record(out, (x.node,), lambda g: (g * (out * (1.0 - out)),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    _check_finite(out, "tanh")
    if x.tape is None:
        return Tensor(out)
    return x.tape._record(out, (x.node,), lambda g: (g * (1.0 - out * out),))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.shape != bd.shape:
        raise ShapeError(f"hadamard: shape mismatch {ad.shape} vs {bd.shape}")
    out = ad * bd
    _check_finite(out, "hadamard")
    tape = _common_tape(a, b)
    if tape is None:
        return Tensor(out)
    if a.tape is not None and b.tape is not None:
        return tape._record(out, (a.node, b.node), lambda g: (g * bd, g * ad))
    if a.tape is not None:
        return tape._record(out, (a.node,), lambda g: (g * bd,))
    return tape._record(out, (b.node,), lambda g: (g * ad,))


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the feature (first) axis."""
    ad, bd = a.data, b.data
    if ad.ndim != bd.ndim or ad.shape[1:] != bd.shape[1:]:
        raise ShapeError(f"concat: incompatible shapes {ad.shape} vs {bd.shape}")
    out = np.concatenate((ad, bd), axis=0)
    na = ad.shape[0]
    tape = _common_tape(a, b)
    if tape is None:
        return Tensor(out)
    if a.tape is not None and b.tape is not None:
        return tape._record(out, (a.node, b.node), lambda g: (g[:na], g[na:]))
    if a.tape is not None:
        return tape._record(out, (a.node,), lambda g: (g[:na],))
    return tape._record(out, (b.node,), lambda g: (g[na:],))


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Rows [start, stop) along the feature axis."""
    if not (0 <= start <= stop <= x.data.shape[0]):
        raise ShapeError(
            f"slice_rows: [{start}, {stop}) out of range for shape {x.data.shape}"
        )
    out = x.data[start:stop]
    if x.tape is None:
        return Tensor(out)
    xshape = x.data.shape

    def vjp(g):
        gx = np.zeros(xshape, dtype=np.float64)
        gx[start:stop] = g
        return (gx,)

    return x.tape._record(out, (x.node,), vjp)


def gather_columns(x: Tensor, index: np.ndarray) -> Tensor:
    """Stacked column gather with a zero slot for absent sources.

    ``x`` is (f, n); ``index`` is an int array (d, k) with entries in
    [0, n], where index ``n`` selects an all-zero column (absent lattice
    neighbor).  Output is (d*f, k): the d gathered blocks stacked along
    the feature axis in index-row order.
    """
    xd = x.data
    if xd.ndim != 2:
        raise ShapeError(f"gather_columns: expected 2-d source, got {xd.shape}")
    f, n = xd.shape
    d, k = index.shape
    padded = np.concatenate((xd, np.zeros((f, 1), dtype=np.float64)), axis=1)
    out = padded[:, index].transpose(1, 0, 2).reshape(d * f, k)
    if x.tape is None:
        return Tensor(out)
    flat_index = index.reshape(d * k)

    def vjp(g):
        gt = np.zeros((n + 1, f), dtype=np.float64)
        # rows of gt indexed by source column; duplicates accumulate
        np.add.at(gt, flat_index, g.reshape(d, f, k).transpose(0, 2, 1).reshape(d * k, f))
        return (np.ascontiguousarray(gt[:n].T),)

    return x.tape._record(out, (x.node,), vjp)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over all elements of squared differences; scalar output."""
    pd, td = pred.data, target.data
    if pd.shape != td.shape:
        raise ShapeError(f"mse: shape mismatch {pd.shape} vs {td.shape}")
    diff = pd - td
    out = np.mean(diff * diff)
    _check_finite(out, "mse")
    tape = _common_tape(pred, target)
    if tape is None:
        return Tensor(out)
    coeff = 2.0 / diff.size
    if pred.tape is not None and target.tape is not None:
        return tape._record(
            out, (pred.node, target.node), lambda g: (g * coeff * diff, -g * coeff * diff)
        )
    if pred.tape is not None:
        return tape._record(out, (pred.node,), lambda g: (g * coeff * diff,))
    return tape._record(out, (target.node,), lambda g: (-g * coeff * diff,))


# ---------------------------------------------------------------------------
# finite-difference validation oracle


def grad_check(
    f: Callable[[dict[str, Tensor]], Tensor],
    params: dict[str, np.ndarray],
    eps: float = 1e-5,
    floor: float = 1e-4,
) -> float:
    """Max relative error between reverse-mode and central differences.

    ``f`` must be a deterministic function from named tensors to a
    scalar tensor; it is evaluated once on tape leaves for the analytic
    gradients and 2*n_coordinates times on constants for the numeric
    ones.  The relative error per coordinate is
    |a - n| / max(|a|, |n|, floor), zero when both vanish.

    The ``floor`` exists because the numeric oracle itself is only good
    to ~|f|*2^-52/eps in absolute terms; a coordinate whose true
    gradient sits below that noise cannot pass a pure relative test no
    matter how correct the backward pass is, so sub-floor coordinates
    are effectively checked in absolute units of ``floor``.  Pass
    floor=0 for the pure relative form on O(1)-scale problems.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    values = {k: np.ascontiguousarray(v, dtype=np.float64) for k, v in params.items()}

    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in values.items()}
    loss = f(leaves)
    if loss.data.shape != ():
        raise AutodiffError("grad_check requires a scalar-valued function")
    grads = tape.backward(loss)
    analytic = {k: grads.get(leaves[k]) for k in values}

    def eval_at(perturbed: dict[str, np.ndarray]) -> float:
        out = f({k: constant(v) for k, v in perturbed.items()})
        return float(out.data)

    max_rel = 0.0
    for name, base in values.items():
        work = base.copy()
        flat = work.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = eval_at({**values, name: work})
            flat[i] = orig - eps
            f_minus = eval_at({**values, name: work})
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            denom = max(abs(ga[i]), abs(numeric), floor)
            if denom > 0.0:
                max_rel = max(max_rel, abs(ga[i] - numeric) / denom)
    return max_rel

"""DISTANA: a lattice of weight-shared prediction kernels.

One small recurrent network (the prediction kernel, PK) is applied at
every cell of an H x W lattice.  Each PK receives the local dynamic
input, the lateral outputs its 8 neighbors produced at the previous
step, and optionally a per-cell static context value.  The recurrent
core is an LSTM without bias terms where the static code feeds the
input, forget and output gates but not the candidate:

    i = sigmoid(W_xi x + W_hi h + W_si s)      f, o alike
    u = tanh(W_xu x + W_hu h)
    c = i*u + f*c_prev
    h = o*tanh(c)

Full PK forward:

    dl_pre  = tanh(W_dl_pre [d|lat])       lat = 8 neighbor vectors
    s_code  = tanh(W_s_pre s)              static path only
    h, c    = lstm(dl_pre, s_code, h, c)
    dl_post = tanh(W_dl_post h)            -> [d_out | lateral_out]

The lateral output is broadcast identically to all 8 neighbors; the
receiving cell treats each direction differently through its own block
of W_dl_pre columns.  Absent neighbors at lattice edges contribute
zeros.

All cells are evaluated together: per-cell vectors become columns of
one matrix, so a lattice step costs a fixed number of tape operations
regardless of grid size.

Checkpoint format (.dstw): little-endian flat binary,
  magic "DSTW" | version u32 | d,l,s,pre,m,s_pre,H,W u32 |
  weight matrices as float64 row-major in the order of WEIGHT_ORDER
Round-trips bit-exactly.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor

__all__ = [
    "NetworkConfig",
    "PKWeights",
    "PKState",
    "LatticeTopology",
    "NEIGHBOR_OFFSETS",
    "param_count",
    "lstm_forward",
    "pk_forward",
    "lattice_step",
    "rollout",
    "RolloutResult",
    "DistanaModel",
    "full_model_gradcheck",
    "save_weights",
    "load_weights",
]

# Neighbor directions in fixed order; (dy, dx) with row 0 at the top.
NEIGHBOR_OFFSETS = (
    (-1, -1),  # NW
    (-1, 0),  # N
    (-1, 1),  # NE
    (0, -1),  # W
    (0, 1),  # E
    (1, -1),  # SW
    (1, 0),  # S
    (1, 1),  # SE
)

_MAGIC = b"DSTW"
_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    """Dimensions of the shared prediction kernel and the lattice."""

    d: int = 1  # dynamic input/output size per cell
    l: int = 1  # lateral vector size per neighbor
    s: int = 0  # static context size per cell (0 disables the path)
    pre: int = 8  # dynamic/lateral preprocessing width
    m: int = 12  # LSTM cell count
    s_pre: int = 5  # static preprocessing width
    height: int = 16
    width: int = 16

    def __post_init__(self):
        for name in ("d", "l", "pre", "m", "height", "width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.s < 0 or self.s_pre < 0:
            raise ValueError("s and s_pre must be >= 0")
        if self.s > 0 and self.s_pre == 0:
            raise ValueError("s > 0 requires s_pre >= 1")

    @property
    def static_path(self) -> bool:
        return self.s > 0

    @property
    def n_cells(self) -> int:
        return self.height * self.width

    def weight_shapes(self) -> list[tuple[str, tuple[int, int]]]:
        """Canonical (name, shape) list; also the checkpoint layout."""
        d, l, s, pre, m, s_pre = self.d, self.l, self.s, self.pre, self.m, self.s_pre
        shapes = [("dl_pre", (pre, d + 8 * l))]
        if self.static_path:
            shapes.append(("s_pre", (s_pre, s)))
        for gate in ("i", "f", "o", "u"):
            shapes.append((f"x{gate}", (m, pre)))
        for gate in ("i", "f", "o", "u"):
            shapes.append((f"h{gate}", (m, m)))
        if self.static_path:
            for gate in ("i", "f", "o"):
                shapes.append((f"s{gate}", (m, s_pre)))
        shapes.append(("dl_post", (d + l, m)))
        return shapes


def param_count(cfg: NetworkConfig) -> int:
    """Total weight count; no bias terms exist anywhere."""
    d, l, s, pre, m, s_pre = cfg.d, cfg.l, cfg.s, cfg.pre, cfg.m, cfg.s_pre
    n = (d + 8 * l) * pre + 4 * pre * m + 4 * m * m + m * (d + l)
    if cfg.static_path:
        n += s * s_pre + 3 * s_pre * m
    return n


class PKWeights:
    """The single weight set shared by every cell of the lattice."""

    def __init__(self, cfg: NetworkConfig, arrays: dict[str, np.ndarray]):
        self.cfg = cfg
        expected = dict(cfg.weight_shapes())
        if set(arrays) != set(expected):
            raise ValueError(
                f"weight names {sorted(arrays)} != expected {sorted(expected)}"
            )
        self.arrays: dict[str, np.ndarray] = {}
        for name, shape in cfg.weight_shapes():
            a = np.ascontiguousarray(arrays[name], dtype=np.float64)
            if a.shape != shape:
                raise ValueError(f"{name}: shape {a.shape}, expected {shape}")
            self.arrays[name] = a

    @classmethod
    def init_random(cls, cfg: NetworkConfig, rng: np.random.Generator) -> PKWeights:
        """Uniform in +-1/sqrt(fan_in) per matrix (fan_in = column count)."""
        arrays = {}
        for name, shape in cfg.weight_shapes():
            bound = 1.0 / np.sqrt(shape[1])
            arrays[name] = rng.uniform(-bound, bound, size=shape)
        return cls(cfg, arrays)

    @classmethod
    def zeros(cls, cfg: NetworkConfig) -> PKWeights:
        return cls(cfg, {n: np.zeros(s) for n, s in cfg.weight_shapes()})

    def copy(self) -> PKWeights:
        return PKWeights(self.cfg, {n: a.copy() for n, a in self.arrays.items()})

    def names(self) -> list[str]:
        return [n for n, _ in self.cfg.weight_shapes()]

    def as_tensors(self, tape: Tape | None) -> dict[str, Tensor]:
        """Tape leaves when training, constants when only predicting."""
        if tape is None:
            return {n: ad.constant(a) for n, a in self.arrays.items()}
        return {n: tape.leaf(a) for n, a in self.arrays.items()}

    def __eq__(self, other) -> bool:
        if not isinstance(other, PKWeights):
            return NotImplemented
        return self.cfg == other.cfg and all(
            np.array_equal(self.arrays[n], other.arrays[n]) for n in self.arrays
        )


@dataclass
class PKState:
    """Per-cell recurrent state, cells as columns; resets to zeros."""

    h: Tensor  # (m, K)
    c: Tensor  # (m, K)
    lateral: Tensor  # (l, K), outputs of the previous step

    @classmethod
    def initial(cls, cfg: NetworkConfig) -> PKState:
        k = cfg.n_cells
        return cls(
            ad.constant(np.zeros((cfg.m, k))),
            ad.constant(np.zeros((cfg.m, k))),
            ad.constant(np.zeros((cfg.l, k))),
        )


class LatticeTopology:
    """8-neighborhood of a rectangular grid, cells row-major.

    ``neighbor_index[r, k]`` is the cell index of neighbor r (order
    NW, N, NE, W, E, SW, S, SE) of cell k, or ``n_cells`` when that
    neighbor falls outside the grid.  The sentinel value selects the
    zero column in gather_columns, so edge cells see zero lateral input.
    """

    def __init__(self, height: int, width: int):
        if height < 1 or width < 1:
            raise ValueError("grid extents must be >= 1")
        self.height = height
        self.width = width
        k = height * width
        idx = np.full((8, k), k, dtype=np.int64)
        ys, xs = np.divmod(np.arange(k), width)
        for r, (dy, dx) in enumerate(NEIGHBOR_OFFSETS):
            ny, nx = ys + dy, xs + dx
            ok = (0 <= ny) & (ny < height) & (0 <= nx) & (nx < width)
            idx[r, ok] = ny[ok] * width + nx[ok]
        self.neighbor_index = idx

    def neighbors(self, cell: int) -> list[int | None]:
        """Per-cell view, ``None`` for absent slots (edges)."""
        return [int(i) if i < self.height * self.width else None
                for i in self.neighbor_index[:, cell]]


def _add_many(terms: list[Tensor]) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return out


def lstm_forward(
    x: Tensor,
    s_code: Tensor | None,
    h_prev: Tensor,
    c_prev: Tensor,
    w: dict[str, Tensor],
) -> tuple[Tensor, Tensor]:
    """Gate-modified LSTM; the static code skips the candidate u."""

    def gate(name: str) -> list[Tensor]:
        terms = [ad.linear(w[f"x{name}"], x), ad.linear(w[f"h{name}"], h_prev)]
        if s_code is not None:
            terms.append(ad.linear(w[f"s{name}"], s_code))
        return terms

    i = ad.sigmoid(_add_many(gate("i")))
    f = ad.sigmoid(_add_many(gate("f")))
    o = ad.sigmoid(_add_many(gate("o")))
    u = ad.tanh(ad.add(ad.linear(w["xu"], x), ad.linear(w["hu"], h_prev)))
    c = ad.add(ad.hadamard(i, u), ad.hadamard(f, c_prev))
    h = ad.hadamard(o, ad.tanh(c))
    return h, c


def pk_forward(
    d_in: Tensor,
    lat_in: Tensor,
    s_in: Tensor | None,
    state: PKState,
    w: dict[str, Tensor],
    cfg: NetworkConfig,
) -> tuple[Tensor, Tensor, PKState]:
    """One PK step on column-batched cells.

    d_in: (d, K); lat_in: (8l, K) neighbor outputs already gathered and
    zero-filled; s_in: (s, K) or None.  Returns the dynamic prediction
    (d, K), the lateral output (l, K) and the new state.
    """
    dl_pre = ad.tanh(ad.linear(w["dl_pre"], ad.concat(d_in, lat_in)))
    s_code = None
    if s_in is not None:
        if not cfg.static_path:
            raise ValueError("static input given but the static path is disabled")
        s_code = ad.tanh(ad.linear(w["s_pre"], s_in))
    elif cfg.static_path:
        raise ValueError("static path enabled but no static input given")
    h, c = lstm_forward(dl_pre, s_code, state.h, state.c, w)
    dl_post = ad.tanh(ad.linear(w["dl_post"], h))
    d_out = ad.slice_rows(dl_post, 0, cfg.d)
    lat_out = ad.slice_rows(dl_post, cfg.d, cfg.d + cfg.l)
    return d_out, lat_out, PKState(h, c, lat_out)


def lattice_step(
    field_in: Tensor,
    context: Tensor | None,
    state: PKState,
    w: dict[str, Tensor],
    cfg: NetworkConfig,
    topo: LatticeTopology,
) -> tuple[Tensor, PKState]:
    """Shared PK applied to every cell; laterals are one step delayed."""
    lat_in = ad.gather_columns(state.lateral, topo.neighbor_index)
    d_out, _, new_state = pk_forward(field_in, lat_in, context, state, w, cfg)
    return d_out, new_state


@dataclass
class RolloutResult:
    predictions: np.ndarray  # (cl_steps, H, W), estimates of u[tf .. tf+cl-1]
    mse_closed_loop: float


class DistanaModel:
    """Weights + topology, with sequence-level forward passes."""

    def __init__(self, weights: PKWeights):
        self.weights = weights
        self.cfg = weights.cfg
        self.topo = LatticeTopology(self.cfg.height, self.cfg.width)

    @classmethod
    def init_random(cls, cfg: NetworkConfig, rng: np.random.Generator) -> DistanaModel:
        return cls(PKWeights.init_random(cfg, rng))

    def _check_fields(self, fields: np.ndarray) -> None:
        if fields.ndim != 3 or fields.shape[1:] != (self.cfg.height, self.cfg.width):
            raise ValueError(
                f"fields shape {fields.shape} does not match "
                f"{self.cfg.height}x{self.cfg.width} grid"
            )

    def context_tensor(self, context: np.ndarray | None) -> Tensor | None:
        """Flatten an (H, W) or (s, H*W) context to a (s, K) constant."""
        if context is None:
            if self.cfg.static_path:
                raise ValueError("model expects a static context map")
            return None
        arr = np.asarray(context, dtype=np.float64)
        if arr.shape == (self.cfg.height, self.cfg.width):
            arr = arr.reshape(1, -1)
        if arr.shape != (self.cfg.s, self.cfg.n_cells):
            raise ValueError(f"context shape {arr.shape} invalid for config")
        return ad.constant(arr)

    def step_inputs(self, field: np.ndarray) -> Tensor:
        """(H, W) dynamic field to a (d, K) constant tensor."""
        return ad.constant(field.reshape(1, -1))

    def sequence_loss(
        self,
        fields: np.ndarray,
        context: Tensor | None,
        w: dict[str, Tensor],
        tf_steps: int | None = None,
    ) -> Tensor:
        """Sum over t of per-step MSE(pred_t, u[t+1]).

        The first ``tf_steps`` predictions are teacher forced; from
        there the model feeds its own prediction back in (BPTT runs
        through the self-fed chain), which is what keeps long rollouts
        stable.  ``None`` teacher-forces the whole sequence.
        """
        self._check_fields(fields)
        if tf_steps is not None and tf_steps < 1:
            raise ValueError("tf_steps must be >= 1")
        state = PKState.initial(self.cfg)
        losses = []
        pred: Tensor | None = None
        for t in range(fields.shape[0] - 1):
            if tf_steps is None or t < tf_steps:
                x = self.step_inputs(fields[t])
            else:
                x = pred
            pred, state = lattice_step(x, context, state, w, self.cfg, self.topo)
            target = ad.constant(fields[t + 1].reshape(1, -1))
            losses.append(ad.mse(pred, target))
        return _add_many(losses)

    def teacher_forced_loss(
        self,
        fields: np.ndarray,
        context: Tensor | None,
        w: dict[str, Tensor],
    ) -> Tensor:
        """Sum over t of per-step MSE(pred_t, u[t+1]) under teacher forcing."""
        return self.sequence_loss(fields, context, w, tf_steps=None)

    def rollout(
        self,
        fields: np.ndarray,
        context: np.ndarray | None,
        tf_steps: int,
        cl_steps: int,
        start_state: PKState | None = None,
        start_input: np.ndarray | None = None,
    ) -> RolloutResult:
        """tf_steps of teacher forcing, then cl_steps of closed loop.

        Inputs u[0..tf-1] are ground truth; from there the model feeds
        itself.  The cl_steps predictions estimate u[tf..tf+cl-1] and
        the MSE is taken against those targets, averaged over steps and
        cells.  ``start_state``/``start_input`` replace the zero state
        and u[tf-1] (used after an AT wash-in); tf_steps may be 0 then.
        """
        self._check_fields(fields)
        t_total = fields.shape[0]
        if tf_steps + cl_steps > t_total:
            raise ValueError(
                f"window {tf_steps}+{cl_steps} exceeds sequence length {t_total}"
            )
        if cl_steps < 1:
            raise ValueError("cl_steps must be >= 1")
        if tf_steps < 1 and start_state is None:
            raise ValueError("tf_steps must be >= 1 when starting from rest")
        ctx = self.context_tensor(context)
        w = self.weights.as_tensors(None)
        state = start_state if start_state is not None else PKState.initial(self.cfg)
        pred: Tensor | None = None
        for t in range(tf_steps):
            pred, state = lattice_step(
                self.step_inputs(fields[t]), ctx, state, w, self.cfg, self.topo
            )
        if pred is None:
            if start_input is None:
                raise ValueError("start_input is required when tf_steps == 0")
            pred = ad.constant(start_input.reshape(1, -1))
        shape = (self.cfg.height, self.cfg.width)
        preds = np.empty((cl_steps, *shape), dtype=np.float64)
        preds[0] = pred.data.reshape(shape)
        for j in range(1, cl_steps):
            pred, state = lattice_step(pred, ctx, state, w, self.cfg, self.topo)
            preds[j] = pred.data.reshape(shape)
        targets = fields[tf_steps : tf_steps + cl_steps]
        mse = float(np.mean((preds - targets) ** 2))
        return RolloutResult(preds, mse)


def rollout(
    fields: np.ndarray,
    context: np.ndarray | None,
    weights: PKWeights,
    tf_steps: int,
    cl_steps: int,
) -> RolloutResult:
    return DistanaModel(weights).rollout(fields, context, tf_steps, cl_steps)


def full_model_gradcheck(
    seed: int = 0,
    height: int = 3,
    width: int = 3,
    m: int = 4,
    steps: int = 3,
    eps: float = 1e-5,
) -> float:
    """Finite-difference check of the whole network, context included.

    Unrolls ``steps`` lattice steps on random fields (the last one
    self-fed, so the closed-loop gradient route is covered too) and
    compares reverse-mode gradients of the summed per-step MSE against
    central differences for every weight matrix and for the per-cell
    static context.  Returns the max relative error over all coordinates.
    """
    from .rng import substream

    cfg = NetworkConfig(
        d=1, l=1, s=1, pre=4, m=m, s_pre=3, height=height, width=width
    )
    rng = substream(seed, "gradcheck")
    weights = PKWeights.init_random(cfg, rng)
    fields = rng.uniform(-0.8, 0.8, size=(steps + 1, height, width))
    context = rng.uniform(-1.0, 1.0, size=(1, cfg.n_cells))
    model = DistanaModel(weights)

    def f(params: dict[str, Tensor]) -> Tensor:
        w = {n: params[n] for n in weights.names()}
        return model.sequence_loss(
            fields, params["context"], w, tf_steps=max(steps - 1, 1)
        )

    values = dict(weights.arrays)
    values["context"] = context
    return ad.grad_check(f, values, eps=eps)


# ---------------------------------------------------------------------------
# checkpoint I/O


def save_weights(weights: PKWeights, path: str | Path) -> None:
    cfg = weights.cfg
    with open(Path(path), "wb") as fh:
        fh.write(_MAGIC)
        fh.write(
            struct.pack(
                "<9I",
                _VERSION,
                cfg.d,
                cfg.l,
                cfg.s,
                cfg.pre,
                cfg.m,
                cfg.s_pre,
                cfg.height,
                cfg.width,
            )
        )
        for name, _ in cfg.weight_shapes():
            fh.write(np.ascontiguousarray(weights.arrays[name], dtype="<f8").tobytes())


def load_weights(path: str | Path) -> PKWeights:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a weight checkpoint")
        version, d, l, s, pre, m, s_pre, h, w = struct.unpack("<9I", fh.read(36))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        cfg = NetworkConfig(d=d, l=l, s=s, pre=pre, m=m, s_pre=s_pre, height=h, width=w)
        arrays = {}
        for name, shape in cfg.weight_shapes():
            count = shape[0] * shape[1]
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise ValueError(f"{path}: truncated checkpoint at {name}")
            arrays[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
        extra = fh.read(1)
        if extra:
            raise ValueError(f"{path}: trailing bytes after weight matrices")
    return PKWeights(cfg, arrays)

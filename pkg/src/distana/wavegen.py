"""2D circular-wave data generator.

Solves the two-dimensional wave equation with second-order central
differences (leapfrog in time), a locally varying propagation-speed
factor, Gaussian "stone drop" initialization and zero boundaries:

    u(x, y, t+dt) = (c0 * s(x, y))^2 * dt^2 * (u_xx + u_yy)
                    + 2 u(x, y, t) - u(x, y, t-dt)

with u_xx, u_yy the central second differences and any read outside the
grid returning zero.  Arrays are (H, W) indexed [y, x]; sequences are
(T, H, W) float64.

Dataset container (.dsta): little-endian flat binary,
  magic "DSTA" | version u32 | n_sequences u32 | T u32 | H u32 | W u32 |
  flags u32 | n_sequences * T*H*W f64 fields | H*W f64 velocity |
  metadata length u32 | metadata UTF-8 JSON
Flag bit 0 marks fields that already carry additive noise.  One
container holds a whole dataset: all sequences of an experiment share a
single velocity field and differ only in impulse origin.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import item_rng

__all__ = [
    "SimParams",
    "VelocityField",
    "ImpulseSpec",
    "WaveSequence",
    "WaveDataset",
    "init_gaussian",
    "step",
    "generate_sequence",
    "add_noise",
    "sample_velocity_field",
    "generate_dataset",
    "save_dataset",
    "load_dataset",
    "export_csv",
    "TRAIN_SPEED_VALUES",
    "TEST_SPEED_VALUES",
]

# Per-cell speed factors: training maps draw from the 6-value set, test
# maps from all decimal values in [0.2, 1.0] (0.4, 0.8 and 1.0 are never
# seen in training).
TRAIN_SPEED_VALUES = (0.2, 0.3, 0.5, 0.6, 0.7, 0.9)
TEST_SPEED_VALUES = (0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)

_MAGIC = b"DSTA"
_VERSION = 1
_FLAG_NOISY = 1


@dataclass(frozen=True)
class SimParams:
    """Wave-equation discretization constants."""

    c0: float = 3.0
    dt: float = 0.1
    dx: float = 1.0
    dy: float = 1.0


@dataclass(frozen=True)
class VelocityField:
    """Static per-cell propagation-speed factors s(x, y) in (0, 1]."""

    s: np.ndarray  # (H, W)

    def __post_init__(self):
        s = np.ascontiguousarray(self.s, dtype=np.float64)
        if s.ndim != 2:
            raise ValueError(f"velocity field must be 2-d, got shape {s.shape}")
        if not (s > 0).all():
            raise ValueError("all speed factors must be positive")
        object.__setattr__(self, "s", s)

    @property
    def height(self) -> int:
        return self.s.shape[0]

    @property
    def width(self) -> int:
        return self.s.shape[1]


@dataclass(frozen=True)
class ImpulseSpec:
    """Gaussian impulse: u(x, y, 0) = a * exp(-((x-sx)^2 + (y-sy)^2) / (2 sigma2)).

    ``origin`` is (x, y) in grid coordinates; ``None`` means "draw
    uniformly from interior cells" at generation time.
    """

    amplitude: float = 1.0
    sigma2: float = 0.5
    origin: tuple[float, float] | None = None

    def __post_init__(self):
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be positive")


@dataclass(frozen=True)
class WaveSequence:
    """One simulated sequence plus everything needed to regenerate it."""

    fields: np.ndarray  # (T, H, W)
    velocity: VelocityField
    params: SimParams
    impulse: ImpulseSpec
    seed: int | None = None
    noisy: bool = False

    @property
    def steps(self) -> int:
        return self.fields.shape[0]


@dataclass
class WaveDataset:
    """A set of sequences sharing one velocity field."""

    sequences: list[WaveSequence]
    velocity: VelocityField
    params: SimParams
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.sequences)


def init_gaussian(spec: ImpulseSpec, height: int, width: int) -> np.ndarray:
    """Initial field: 2D Gaussian bump around the impulse origin."""
    if spec.origin is None:
        raise ValueError("impulse origin is unset; resolve it before initialization")
    sx, sy = spec.origin
    if not (0 <= sx <= width - 1 and 0 <= sy <= height - 1):
        raise ValueError(f"impulse origin ({sx}, {sy}) outside {height}x{width} grid")
    x = np.arange(width, dtype=np.float64)
    y = np.arange(height, dtype=np.float64)
    gx = (x - sx) ** 2 / (2.0 * spec.sigma2)
    gy = (y - sy) ** 2 / (2.0 * spec.sigma2)
    return spec.amplitude * np.exp(-(gy[:, None] + gx[None, :]))


def step(
    u: np.ndarray, u_prev: np.ndarray, velocity: VelocityField, params: SimParams
) -> np.ndarray:
    """One leapfrog update; neighbor reads outside the grid are zero."""
    if u.shape != u_prev.shape or u.shape != velocity.s.shape:
        raise ValueError(
            f"field shapes disagree: {u.shape}, {u_prev.shape}, {velocity.s.shape}"
        )
    padded = np.zeros((u.shape[0] + 2, u.shape[1] + 2), dtype=np.float64)
    padded[1:-1, 1:-1] = u
    # neighbor pairs are summed before subtracting 2u so mirrored cells
    # round identically and center impulses stay symmetric bit-for-bit
    u_xx = (padded[1:-1, 2:] + padded[1:-1, :-2] - 2.0 * u) / (params.dx * params.dx)
    u_yy = (padded[2:, 1:-1] + padded[:-2, 1:-1] - 2.0 * u) / (params.dy * params.dy)
    c_eff = params.c0 * velocity.s
    factor = (c_eff * c_eff) * (params.dt * params.dt)
    return factor * (u_xx + u_yy) + 2.0 * u - u_prev


def generate_sequence(
    steps: int,
    velocity: VelocityField,
    spec: ImpulseSpec = ImpulseSpec(),
    seed: int | None = None,
    params: SimParams = SimParams(),
) -> WaveSequence:
    """Simulate ``steps`` fields from a Gaussian impulse at rest.

    The impulse starts with zero velocity (the t = -dt field equals the
    t = 0 field).  If the spec leaves the origin open, it is drawn
    uniformly from interior cells using ``seed``; same seed and
    parameters give a bit-identical sequence.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    h, w = velocity.s.shape
    if spec.origin is None:
        if seed is None:
            raise ValueError("a seed is required to draw a random impulse origin")
        rng = item_rng(seed, "impulse-origin", 0)
        ox = int(rng.integers(1, w - 1))
        oy = int(rng.integers(1, h - 1))
        spec = ImpulseSpec(spec.amplitude, spec.sigma2, (float(ox), float(oy)))
    fields = np.empty((steps, h, w), dtype=np.float64)
    fields[0] = init_gaussian(spec, h, w)
    if steps > 1:
        fields[1] = step(fields[0], fields[0], velocity, params)
    for t in range(2, steps):
        fields[t] = step(fields[t - 1], fields[t - 2], velocity, params)
    return WaveSequence(fields, velocity, params, spec, seed=seed)


def add_noise(
    seq: WaveSequence, snr: float, rng: np.random.Generator | int
) -> WaveSequence:
    """Additive i.i.d. Gaussian noise at a fixed signal-to-noise ratio.

    The per-sequence noise std is RMS(signal) / sqrt(snr), so
    power(signal) / power(noise) = snr.  snr = 0.25 therefore buries the
    signal under noise carrying four times its power.  ``rng`` is either
    a generator or a plain seed.
    """
    if snr <= 0:
        raise ValueError("snr must be positive")
    if isinstance(rng, (int, np.integer)):
        rng = item_rng(int(rng), "additive-noise", 0)
    rms = float(np.sqrt(np.mean(seq.fields**2)))
    sigma = rms / np.sqrt(snr)
    noisy = seq.fields + rng.normal(0.0, sigma, size=seq.fields.shape)
    return WaveSequence(
        noisy, seq.velocity, seq.params, seq.impulse, seed=seq.seed, noisy=True
    )


def sample_velocity_field(
    height: int, width: int, values, rng: np.random.Generator
) -> VelocityField:
    """Per-cell speed factors drawn i.i.d. from a discrete value set."""
    values = np.asarray(values, dtype=np.float64)
    return VelocityField(values[rng.integers(0, len(values), size=(height, width))])


def generate_dataset(
    n_sequences: int,
    steps: int,
    velocity: VelocityField,
    root_seed: int,
    stream: str,
    snr: float | None = None,
    spec: ImpulseSpec = ImpulseSpec(),
    params: SimParams = SimParams(),
    threads: int = 1,
) -> WaveDataset:
    """Generate sequences with per-item seeds from one named substream.

    Per-sequence seeds are derived by counter, so serial and parallel
    generation agree bit-exactly.
    """

    def make(i: int) -> WaveSequence:
        rng = item_rng(root_seed, stream, i)
        h, w = velocity.s.shape
        local = spec
        if local.origin is None:
            ox = int(rng.integers(1, w - 1))
            oy = int(rng.integers(1, h - 1))
            local = ImpulseSpec(spec.amplitude, spec.sigma2, (float(ox), float(oy)))
        seq = generate_sequence(steps, velocity, local, params=params)
        if snr is not None:
            noise = seq.fields.copy()
            rms = float(np.sqrt(np.mean(noise**2)))
            noise += rng.normal(0.0, rms / np.sqrt(snr), size=noise.shape)
            seq = WaveSequence(noise, velocity, params, local, noisy=True)
        return seq

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            sequences = list(pool.map(make, range(n_sequences)))
    else:
        sequences = [make(i) for i in range(n_sequences)]
    meta = {
        "root_seed": root_seed,
        "stream": stream,
        "snr": snr,
        "amplitude": spec.amplitude,
        "sigma2": spec.sigma2,
        "params": {"c0": params.c0, "dt": params.dt, "dx": params.dx, "dy": params.dy},
    }
    return WaveDataset(sequences, velocity, params, meta)


# ---------------------------------------------------------------------------
# container I/O


def save_dataset(dataset: WaveDataset, path: str | Path) -> None:
    path = Path(path)
    n = len(dataset.sequences)
    if n == 0:
        raise ValueError("refusing to write an empty dataset")
    t, h, w = dataset.sequences[0].fields.shape
    for seq in dataset.sequences:
        if seq.fields.shape != (t, h, w):
            raise ValueError("all sequences in a container must share one shape")
    flags = _FLAG_NOISY if dataset.sequences[0].noisy else 0
    meta = dict(dataset.meta)
    meta["origins"] = [list(s.impulse.origin) for s in dataset.sequences]
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIIII", _VERSION, n, t, h, w))
        fh.write(struct.pack("<I", flags))
        for seq in dataset.sequences:
            fh.write(np.ascontiguousarray(seq.fields, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(dataset.velocity.s, dtype="<f8").tobytes())
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)


def load_dataset(path: str | Path) -> WaveDataset:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a wave dataset container")
        version, n, t, h, w = struct.unpack("<IIIII", fh.read(20))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported container version {version}")
        (flags,) = struct.unpack("<I", fh.read(4))
        fields = np.frombuffer(fh.read(n * t * h * w * 8), dtype="<f8")
        fields = fields.reshape(n, t, h, w).astype(np.float64)
        vel = np.frombuffer(fh.read(h * w * 8), dtype="<f8").reshape(h, w)
        (mlen,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(mlen).decode("utf-8"))
    velocity = VelocityField(vel.astype(np.float64))
    params = SimParams(**meta.get("params", {}))
    noisy = bool(flags & _FLAG_NOISY)
    origins = meta.get("origins") or [None] * n
    amplitude = meta.get("amplitude", 1.0)
    sigma2 = meta.get("sigma2", 0.5)
    sequences = [
        WaveSequence(
            fields[i],
            velocity,
            params,
            ImpulseSpec(amplitude, sigma2, tuple(origins[i]) if origins[i] else None),
            noisy=noisy,
        )
        for i in range(n)
    ]
    return WaveDataset(sequences, velocity, params, meta)


def export_csv(dataset: WaveDataset, out_dir: str | Path) -> list[Path]:
    """One CSV per time step per sequence, for eyeballing the fields."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for i, seq in enumerate(dataset.sequences):
        for t in range(seq.steps):
            p = out_dir / f"seq{i:03d}_t{t:03d}.csv"
            np.savetxt(p, seq.fields[t], delimiter=",", fmt="%.17g")
            written.append(p)
    return written

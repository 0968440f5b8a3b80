"""Active Tuning: gradient inference of latent inputs on frozen weights.

Instead of feeding an observed quantity to the network, its value is
treated as a free variable: forward a window of recent steps, measure
the prediction error against the observed targets, backpropagate into
the latent only (weights stay untouched) and apply an optimizer update;
repeat for a number of cycles.  Two latent targets exist here:

* static-context: a per-cell constant (the local wave speed factor) fed
  through the static path.  The window forward is teacher forced on the
  observed fields; gradient flows only through the context.  Used both
  during training (context never supplied, inferred alongside the
  weights) and at test time from a zero initialization.
* dynamic-input: the per-step dynamic input fields of the window are
  the latents.  The forward consumes only these tuned inputs, never the
  observations, which enter purely through the loss; with noisy
  observations the fitted trajectory cannot follow the noise and lands
  near the underlying signal.  Used as a wash-in before closed-loop
  prediction.

During training the context map is post-processed after every update:
low-pass blend with the previous estimate, z-normalization over all
cells, and clipping to a band of +-clip_sigma moving-average standard
deviations around the moving-average mean (band mapped into the
normalized scale).  Test-time inference runs without this pipeline so
the estimate can drift freely from its zero start.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .core import DistanaModel, PKState, lattice_step
from .training import Adam, TrainConfig, TrainResult, EvalResult, _clip_grads
from .wavegen import WaveDataset

__all__ = [
    "TuningConfig",
    "ContextEstimate",
    "tune",
    "postprocess_context",
    "infer_context",
    "train_with_parametric_bias",
    "WashinResult",
    "at_washin",
    "evaluate_with_washin",
    "ordering_report",
    "export_context_pgm",
    "export_context_csv",
]

log = logging.getLogger("distana.tuning")

STATIC_CONTEXT = "static-context"
DYNAMIC_INPUT = "dynamic-input"


@dataclass(frozen=True)
class TuningConfig:
    """Window geometry and optimizer settings for Active Tuning."""

    history: int = 50  # H, steps of retrospection
    cycles: int = 1  # c, optimizer updates per window
    lr: float = 1e-2
    target: str = STATIC_CONTEXT
    alpha: float = 0.05  # low-pass coefficient on the context
    clip_sigma: float = 2.5
    stats_momentum: float = 0.9  # moving-average factor for mu/sigma
    postprocess: bool = True  # training-time pipeline; test inference runs raw

    def __post_init__(self):
        if self.history < 1 or self.cycles < 1:
            raise ValueError("history and cycles must be >= 1")
        if self.target not in (STATIC_CONTEXT, DYNAMIC_INPUT):
            raise ValueError(f"unknown tuning target {self.target!r}")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must be in (0, 1]")


class ContextEstimate:
    """Per-cell latent context with the post-processing state."""

    def __init__(self, values: np.ndarray):
        self.values = np.array(values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("context estimate must be 2-d (H, W)")
        self.smoothed_prev = self.values.copy()
        self.mu_ma = 0.0
        self.sigma_ma = 1.0
        self._stats_ready = False

    @classmethod
    def zeros(cls, height: int, width: int) -> ContextEstimate:
        return cls(np.zeros((height, width)))

    def flat(self) -> np.ndarray:
        """(1, K) view sharing memory with values; optimizers update it."""
        return self.values.reshape(1, -1)


def postprocess_context(
    est: ContextEstimate,
    alpha: float = 0.05,
    clip_sigma: float = 2.5,
    stats_momentum: float = 0.9,
) -> ContextEstimate:
    """Low-pass, z-normalize, clip; mutates and returns the estimate.

    The clip band [mu - k sigma, mu + k sigma] uses moving averages of
    the pre-normalization statistics and is mapped through the same
    shift/scale as the values, so at stationarity it reduces to a plain
    +-k clip in normalized units.  A constant map cannot be normalized;
    it is only centered and a diagnostic is logged.
    """
    blended = alpha * est.values + (1.0 - alpha) * est.smoothed_prev
    mu = float(np.mean(blended))
    sigma = float(np.std(blended))
    if not est._stats_ready:
        est.mu_ma, est.sigma_ma = mu, sigma
        est._stats_ready = True
    else:
        r = stats_momentum
        est.mu_ma = r * est.mu_ma + (1.0 - r) * mu
        est.sigma_ma = r * est.sigma_ma + (1.0 - r) * sigma
    if sigma == 0.0:
        log.warning("constant context map: skipping z-normalization")
        normed = blended - mu
        lo, hi = -clip_sigma * est.sigma_ma, clip_sigma * est.sigma_ma
    else:
        normed = (blended - mu) / sigma
        lo = (est.mu_ma - clip_sigma * est.sigma_ma - mu) / sigma
        hi = (est.mu_ma + clip_sigma * est.sigma_ma - mu) / sigma
    est.values = np.clip(normed, lo, hi)
    est.smoothed_prev = est.values.copy()
    return est


def tune(
    model: DistanaModel,
    window_fields: np.ndarray,
    est: ContextEstimate,
    cfg: TuningConfig,
    opt: Adam | None = None,
) -> float:
    """Static-context tuning on one window; returns the last cycle loss.

    ``window_fields`` holds H+1 consecutive observed fields: the first H
    are teacher-forced inputs, fields 1..H the targets.  Weights are
    never modified; only ``est.values`` moves.
    """
    if cfg.target != STATIC_CONTEXT:
        raise ValueError("tune() handles the static-context target")
    if window_fields.shape[0] < 2:
        raise ValueError("window must hold at least 2 fields")
    if opt is None:
        opt = Adam({"s": est.flat().shape}, lr=cfg.lr)
    w = model.weights.as_tensors(None)
    loss_value = 0.0
    for _ in range(cfg.cycles):
        tape = ad.Tape()
        s_leaf = tape.leaf(est.flat())
        loss = model.teacher_forced_loss(window_fields, s_leaf, w)
        grads = tape.backward(loss)
        opt.step({"s": est.flat()}, {"s": grads.get(s_leaf)})
        loss_value = float(loss.data)
    return loss_value


def infer_context(
    model: DistanaModel,
    dataset: WaveDataset,
    cfg: TuningConfig,
    iterations: int = 500,
    checkpoints: tuple[int, ...] = (5, 20, 80, 500),
) -> tuple[ContextEstimate, dict[int, np.ndarray]]:
    """Test-time context inference from zeros on sequence-start windows.

    Iteration i tunes the first H steps of sequence i mod n (cfg.cycles
    updates each).  Windows are anchored at t=0 because that is the only
    point where a cold recurrent state matches the training runs; a
    window cut mid-sequence makes the state transient, not the context,
    dominate the gradient.  No smoothing or normalization is applied
    here: those stabilize the slow co-adaptation during training, but a
    fresh estimate has to reorganize from zeros within a few hundred
    iterations and needs the raw optimizer rate (the low pass alone
    would shrink every update twentyfold).  Snapshots of the map are
    taken at the requested iteration counts.
    """
    h_grid, w_grid = model.cfg.height, model.cfg.width
    est = ContextEstimate.zeros(h_grid, w_grid)
    opt = Adam({"s": (1, model.cfg.n_cells)}, lr=cfg.lr)
    horizon = cfg.history
    if dataset.sequences[0].steps <= horizon:
        raise ValueError(
            f"history {horizon} exceeds sequence length {dataset.sequences[0].steps}"
        )
    snapshots: dict[int, np.ndarray] = {}
    for it in range(1, iterations + 1):
        seq = dataset.sequences[(it - 1) % len(dataset.sequences)]
        window = seq.fields[: horizon + 1]
        tune(model, window, est, cfg, opt)
        if it in checkpoints:
            snapshots[it] = est.values.copy()
    return est, snapshots


def train_with_parametric_bias(
    model: DistanaModel,
    dataset: WaveDataset,
    train_cfg: TrainConfig,
    tune_cfg: TuningConfig,
    progress=None,
) -> tuple[TrainResult, ContextEstimate]:
    """Joint training: weights and per-cell context inferred together.

    The ground-truth context map is never seen.  Each sequence gets one
    forward/backward pass; the weight optimizer and the context
    optimizer each apply their update from it, then the context is
    post-processed.  ``progress`` receives (epoch, mean_mse, estimate).
    """
    started = time.perf_counter()
    weights = model.weights
    opt_w = Adam(dict(model.cfg.weight_shapes()), lr=train_cfg.lr)
    opt_s = Adam({"s": (1, model.cfg.n_cells)}, lr=tune_cfg.lr)
    est = ContextEstimate.zeros(model.cfg.height, model.cfg.width)
    curve: list[float] = []
    for epoch in range(train_cfg.epochs):
        epoch_losses = []
        for i, seq in enumerate(dataset.sequences):
            try:
                tape = ad.Tape()
                w = weights.as_tensors(tape)
                s_leaf = tape.leaf(est.flat())
                loss = model.sequence_loss(
                    seq.fields, s_leaf, w, train_cfg.train_split()
                )
                grads = tape.backward(loss)
                gdict = {n: grads.get(w[n]) for n in weights.names()}
                if train_cfg.grad_clip is not None:
                    _clip_grads(gdict, train_cfg.grad_clip)
                opt_w.step(weights.arrays, gdict)
                opt_s.step({"s": est.flat()}, {"s": grads.get(s_leaf)})
                if tune_cfg.postprocess:
                    postprocess_context(
                        est, tune_cfg.alpha, tune_cfg.clip_sigma,
                        tune_cfg.stats_momentum,
                    )
            except ad.NumericError as err:
                raise ad.NumericError(
                    f"epoch {epoch}, sequence {i}: {err}"
                ) from err
            epoch_losses.append(float(loss.data) / (seq.steps - 1))
        mean_mse = float(np.mean(epoch_losses))
        curve.append(mean_mse)
        if progress is not None:
            progress(epoch, mean_mse, est)
    result = TrainResult(weights, curve, time.perf_counter() - started)
    return result, est


@dataclass
class WashinResult:
    state: PKState
    first_prediction: np.ndarray  # (H, W), estimate of the step after the window
    tuned_inputs: np.ndarray  # (H-1, H_grid, W_grid)
    final_loss: float


def at_washin(
    model: DistanaModel,
    noisy_window: np.ndarray,
    cfg: TuningConfig,
) -> WashinResult:
    """Dynamic-input Active Tuning over a noisy wash-in window.

    The H-1 input fields the model would consume inside the window are
    free latents (zero initialized).  Each cycle forwards them through
    the frozen model from a zero state, scores the predictions against
    the noisy observations at steps 1..H-1, and updates the latents.
    Afterwards one extra closed-loop step is taken so the returned state
    and prediction line up with the first step after the window.
    """
    if cfg.target != DYNAMIC_INPUT:
        raise ValueError("at_washin() handles the dynamic-input target")
    horizon = noisy_window.shape[0]
    if horizon < 2:
        raise ValueError("wash-in window must hold at least 2 fields")
    model._check_fields(noisy_window)
    k = model.cfg.n_cells
    shape = (model.cfg.height, model.cfg.width)
    inputs = np.zeros((horizon - 1, 1, k))
    names = [f"x{t}" for t in range(horizon - 1)]
    opt = Adam({n: (1, k) for n in names}, lr=cfg.lr)
    w_const = model.weights.as_tensors(None)
    targets = [
        ad.constant(noisy_window[t].reshape(1, -1)) for t in range(1, horizon)
    ]
    loss_value = 0.0
    for _ in range(cfg.cycles):
        tape = ad.Tape()
        leaves = [tape.leaf(inputs[t]) for t in range(horizon - 1)]
        state = PKState.initial(model.cfg)
        losses = []
        for t, leaf in enumerate(leaves):
            pred, state = lattice_step(
                leaf, None, state, w_const, model.cfg, model.topo
            )
            losses.append(ad.mse(pred, targets[t]))
        loss = losses[0]
        for term in losses[1:]:
            loss = ad.add(loss, term)
        grads = tape.backward(loss)
        opt.step(
            {n: inputs[t] for t, n in enumerate(names)},
            {n: grads.get(leaves[t]) for t, n in enumerate(names)},
        )
        loss_value = float(loss.data)
    # replay the tuned window without a tape, plus one closed-loop step
    state = PKState.initial(model.cfg)
    pred: Tensor | None = None
    for t in range(horizon - 1):
        pred, state = lattice_step(
            ad.constant(inputs[t]), None, state, w_const, model.cfg, model.topo
        )
    pred, state = lattice_step(pred, None, state, w_const, model.cfg, model.topo)
    return WashinResult(
        state, pred.data.reshape(shape), inputs.reshape(horizon - 1, *shape),
        loss_value,
    )


def evaluate_with_washin(
    model: DistanaModel,
    noisy: WaveDataset,
    clean: WaveDataset,
    cfg: TuningConfig,
    tf_steps: int = 50,
    cl_steps: int = 90,
) -> EvalResult:
    """Closed-loop MSE vs clean targets after an AT wash-in per sequence."""
    if len(noisy) != len(clean):
        raise ValueError("noisy and clean sets must pair up one to one")
    per_seq = []
    for seq_noisy, seq_clean in zip(noisy.sequences, clean.sequences):
        wr = at_washin(model, seq_noisy.fields[:tf_steps], cfg)
        tail = seq_clean.fields[tf_steps : tf_steps + cl_steps]
        result = model.rollout(
            tail, None, tf_steps=0, cl_steps=cl_steps,
            start_state=wr.state, start_input=wr.first_prediction,
        )
        per_seq.append(float(np.mean((result.predictions - tail) ** 2)))
    arr = np.asarray(per_seq)
    return EvalResult(float(arr.mean()), float(arr.std()), per_seq)


def ordering_report(inferred: np.ndarray, truth: np.ndarray) -> dict:
    """Rank diagnostics of an inferred map against the true speed map.

    The mapping's sign and scale are unconstrained, so everything is
    rank-based: Spearman correlation over cells, plus whether the mean
    inferred value per true speed is strictly monotone in the speed
    (either direction), which implies unseen speeds slot in between
    their trained neighbors.
    """
    from .metrics import spearman

    inferred = np.asarray(inferred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    rho = spearman(inferred, truth).rho
    speeds = sorted(float(v) for v in np.unique(truth))
    means = [float(np.mean(inferred[truth == v])) for v in speeds]
    diffs = np.diff(means)
    monotone = bool(np.all(diffs > 0.0) or np.all(diffs < 0.0))
    return {
        "spearman": rho,
        "speeds": speeds,
        "mean_inferred_per_speed": means,
        "monotone": monotone,
    }


# ---------------------------------------------------------------------------
# context map export


def export_context_pgm(values: np.ndarray, path: str | Path) -> Path:
    """8-bit grayscale PGM (P5), min-max scaled, scale in a JSON sidecar."""
    path = Path(path)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError("context map must be 2-d")
    vmin, vmax = float(values.min()), float(values.max())
    if vmax > vmin:
        scaled = np.round((values - vmin) / (vmax - vmin) * 255.0)
    else:
        scaled = np.zeros_like(values)
    bytes_ = scaled.astype(np.uint8)
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(bytes_.tobytes())
    sidecar = path.with_suffix(path.suffix + ".json")
    with open(sidecar, "w") as fh:
        json.dump({"min": vmin, "max": vmax, "height": h, "width": w}, fh)
        fh.write("\n")
    return path


def export_context_csv(values: np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    np.savetxt(path, np.asarray(values, dtype=np.float64), delimiter=",", fmt="%.17g")
    return path

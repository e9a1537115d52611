"""Supervised training of the split-step equalizer: dataset generation,
phase-aligned loss, exact reverse-mode gradients through the layered FFT
structure with respect to every step length and filter coefficient, and an
Adam optimizer with separate learning rates for lengths and coefficients.

The receiver tail (matched filter, symbol sampling) is differentiated through
as a fixed linear map; the intensity path is differentiated exactly (the
rotation phase depends on the signal it rotates).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dsp import SampleBlock, fft, ifft, gather_block, iter_ols_blocks
from .equalizer import (LEssfmModel, _Precomputed, _forward_spec, BlockTape,
                        build_tied_model, required_overlap)
from .fiber import FiberSpec
from .system import SystemSpec, run_channel, _sps_num, _sps_den
from .txrx import SymbolFrame


# --- initialization --------------------------------------------------------

def link_segmentation(length_km: float, alpha_per_km: float, num_steps: int):
    """Split the span into segments of equal effective length.

    Returns (boundaries, midpoints, effective_lengths) in forward fiber
    coordinates: boundaries z_k solve 1 - exp(-a z_k) = (k/N) (1 - exp(-a L)),
    each midpoint halves its segment's effective length, and the effective
    lengths are all equal to the span total over num_steps.
    """
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    k = np.arange(num_steps + 1)
    if alpha_per_km > 0:
        total = 1.0 - math.exp(-alpha_per_km * length_km)
        boundaries = -np.log(1.0 - (k / num_steps) * total) / alpha_per_km
        decay = np.exp(-alpha_per_km * boundaries)
        midpoints = -np.log((decay[:-1] + decay[1:]) / 2.0) / alpha_per_km
        eff = (decay[:-1] - decay[1:]) / alpha_per_km
    else:
        boundaries = k * length_km / num_steps
        midpoints = (boundaries[:-1] + boundaries[1:]) / 2.0
        eff = np.diff(boundaries)
    return boundaries, midpoints, eff


def init_lengths(length_km: float, alpha_per_km: float, num_steps: int) -> np.ndarray:
    """Dispersion step lengths for backward processing: the first length runs
    from the receiver to the nonlinear point of the last segment, subsequent
    lengths connect consecutive nonlinear points, and the final one reaches
    the fiber input. The lengths are nonnegative and sum to the span length.
    """
    _, midpoints, _ = link_segmentation(length_km, alpha_per_km, num_steps)
    lengths = np.empty(num_steps + 1)
    lengths[0] = length_km - midpoints[-1]
    lengths[1:num_steps] = midpoints[:0:-1] - midpoints[-2::-1]
    lengths[num_steps] = midpoints[0]
    return lengths


def init_coeffs(filter_halflen: int, gamma_per_w_km: float, eff_lengths_km: np.ndarray,
                pol_factor: float = 1.0) -> tuple:
    """Instantaneous-nonlinearity filters: center tap gamma * L_eff per step
    (sign counteracting the channel's self-phase modulation), zero tails.
    eff_lengths_km must be in backward processing order."""
    coeffs = []
    for eff in eff_lengths_km:
        c = np.zeros(filter_halflen + 1)
        c[0] = -pol_factor * gamma_per_w_km * eff
        coeffs.append(c)
    return tuple(coeffs)


def init_model(kind: str, num_steps: int, filter_halflen: int, fiber: FiberSpec,
               geometry, sps: float, polarization: str = "scalar") -> LEssfmModel:
    """Physics-based starting point for any equalizer kind."""
    from .fiber import MANAKOV_FACTOR
    pol_factor = MANAKOV_FACTOR if polarization == "manakov" else 1.0
    alpha = fiber.alpha_per_km
    length = fiber.length_km
    if kind == "lessfm":
        lengths = init_lengths(length, alpha, num_steps)
        _, _, eff = link_segmentation(length, alpha, num_steps)
        coeffs = init_coeffs(filter_halflen, fiber.gamma_per_w_km, eff[::-1], pol_factor)
        return LEssfmModel(num_steps, lengths, coeffs, filter_halflen,
                           fiber.beta2_ps2_km, geometry, sps, polarization, kind="lessfm")
    if kind in ("essfm", "ossfm"):
        if kind == "ossfm":
            filter_halflen = 0
        interior = length / num_steps
        # split the last backward segment at its effective-length midpoint
        if alpha > 0:
            decay_a = math.exp(-alpha * (length - interior))
            decay_b = math.exp(-alpha * length)
            m_last = -math.log((decay_a + decay_b) / 2.0) / alpha
        else:
            m_last = length - interior / 2
        split = min(max(length - m_last, 0.0), interior)
        eff_total = (1.0 - math.exp(-alpha * length)) / alpha if alpha > 0 else length
        shared = np.zeros(filter_halflen + 1)
        shared[0] = -pol_factor * fiber.gamma_per_w_km * eff_total / num_steps
        return build_tied_model(kind, num_steps, filter_halflen, shared, length, split,
                                fiber.beta2_ps2_km, geometry, sps, polarization)
    raise ValueError(f"no initialization for kind {kind!r}")


# --- loss ------------------------------------------------------------------

def phase_aligned_mse(y: np.ndarray, x: np.ndarray, exclude_edge_symbols: int = 0) -> float:
    """mean|y|^2 + mean|x|^2 - 2|mean(conj(x) y)| over interior symbols,
    averaged across polarizations: the minimum of the MSE over a global phase."""
    loss, _ = _loss_and_symbol_grad(np.atleast_2d(y), np.atleast_2d(x),
                                    exclude_edge_symbols, need_grad=False)
    return loss


def _loss_and_symbol_grad(y: np.ndarray, x: np.ndarray, exclude: int,
                          need_grad: bool = True):
    npol, n = y.shape
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {x.shape}")
    sl = slice(exclude, n - exclude)
    m = n - 2 * exclude
    if m < 1:
        raise ValueError(f"edge exclusion {exclude} leaves no symbols")
    yi, xi = y[:, sl], x[:, sl]
    cross = np.sum(np.conj(xi) * yi, axis=-1) / m
    mag = np.abs(cross)
    loss_pol = (np.sum(np.abs(yi) ** 2, axis=-1) / m
                + np.sum(np.abs(xi) ** 2, axis=-1) / m - 2.0 * mag)
    loss = float(np.mean(loss_pol))
    if not need_grad:
        return loss, None
    # subgradient 0 for the |cross| term when the correlation vanishes
    phase = np.where(mag > 0, cross / np.where(mag > 0, mag, 1.0), 0.0)
    g = np.zeros_like(y)
    g[:, sl] = (2.0 / m) * (yi - phase[:, None] * xi) / npol
    return loss, g


# --- reverse-mode gradients ------------------------------------------------

@dataclass
class ParamGrads:
    """Gradients of the batch loss with respect to every model parameter."""

    d_lengths: np.ndarray       # (num_steps + 1,), per km
    d_coeffs: tuple             # num_steps arrays, per rad/W
    loss: float

    def __post_init__(self):
        if not (np.all(np.isfinite(self.d_lengths))
                and all(np.all(np.isfinite(c)) for c in self.d_coeffs)):
            raise FloatingPointError("non-finite gradient")


@dataclass(frozen=True, eq=False)
class DatasetItem:
    rx: SampleBlock
    tx: SymbolFrame
    rx_gain: complex            # unit symbols -> matched-filter output, linear chain
    rolloff: float = 0.05


@dataclass(frozen=True, eq=False)
class Dataset:
    items: tuple
    manifest: dict

    def __len__(self):
        return len(self.items)


def make_dataset(system: SystemSpec, num_blocks: int, power_dbm: float, seed: int,
                 source: str = "gaussian") -> Dataset:
    """Generate (received block, transmitted symbols) pairs through the full
    channel; the manifest holds everything needed to regenerate bit-identically."""
    if num_blocks < 1:
        raise ValueError("num_blocks must be >= 1")
    block_seeds = np.random.SeedSequence(seed).spawn(num_blocks)
    items = []
    for bs in block_seeds:
        rx, tx, gain = run_channel(system, power_dbm, bs, source)
        items.append(DatasetItem(rx, tx, gain, system.wdm.rolloff))
    manifest = {
        "system": system.to_dict(),
        "system_hash": system.hash(),
        "num_blocks": num_blocks,
        "power_dbm": power_dbm,
        "seed": seed,
        "source": source,
    }
    return Dataset(tuple(items), manifest)


def default_edge_exclude(model: LEssfmModel, guard_symbols: int = 32) -> int:
    """Symbols to drop per block edge: the overlap half corrupted by the
    zero-padded overlap-save edges plus a guard for the matched-filter tail."""
    return math.ceil(model.geometry.overlap / 2 / model.sps) + guard_symbols


def _equalize_with_tape(model: LEssfmModel, pre: _Precomputed, samples: np.ndarray):
    """Forward pass over one item, recording per-block intermediates."""
    geom = model.geometry
    half = geom.overlap // 2
    out = np.empty_like(samples)
    tapes = []
    for in_start, valid_start, valid_len in iter_ols_blocks(samples.shape[-1], geom):
        tape = BlockTape()
        blk = gather_block(samples, in_start, geom.fft_size)
        y = ifft(_forward_spec(model, fft(blk), pre, tape))
        out[..., valid_start:valid_start + valid_len] = y[..., half:half + valid_len]
        tapes.append(tape)
    return out, tapes


def _block_adjoint(model: LEssfmModel, pre: _Precomputed, tape: BlockTape,
                   g_y_time: np.ndarray, d_lengths: np.ndarray, d_coeffs: list):
    """Adjoint of one block forward pass; accumulates parameter gradients."""
    n = pre.n
    halflen = model.filter_halflen
    ph = pre.phase_km
    g_a = fft(g_y_time) / n                       # adjoint of the final inverse FFT
    for i in range(model.num_steps, 0, -1):
        a = tape.spec[i]
        d_lengths[i] -= float(np.sum(ph * np.sum((a * np.conj(g_a)).imag, axis=0)))
        g_w = ifft(np.conj(pre.hgvd[i]) * g_a) * n
        w, rot, v = tape.w[i - 1], tape.rot[i - 1], tape.v[i - 1]
        intensity = tape.intensity[i - 1]
        g_theta = np.sum((np.conj(w) * g_w).imag, axis=0)
        g_theta_spec = np.fft.rfft(g_theta)
        g_intensity = np.fft.irfft(g_theta_spec * pre.hnlpr[i - 1], n)
        gh = np.fft.irfft(g_theta_spec * np.conj(np.fft.rfft(intensity)), n)
        d_coeffs[i - 1][0] += gh[0]
        if halflen:
            k = np.arange(1, halflen + 1)
            d_coeffs[i - 1][1:] += gh[k] + gh[n - k]
        g_v = np.conj(rot) * g_w + 2.0 * g_intensity * v
        g_a = fft(g_v) / n                        # adjoint of v = ifft(spec)
    a0 = tape.spec[0]
    d_lengths[0] -= float(np.sum(ph * np.sum((a0 * np.conj(g_a)).imag, axis=0)))


def item_loss(model: LEssfmModel, item: DatasetItem, exclude: int,
              pre: _Precomputed | None = None) -> float:
    """Loss of one dataset item without gradients."""
    if pre is None:
        pre = _Precomputed(model, item.rx.sample_rate)
    geom = model.geometry
    half = geom.overlap // 2
    x = item.rx.samples
    eq = np.empty_like(x)
    for in_start, valid_start, valid_len in iter_ols_blocks(x.shape[-1], geom):
        blk = gather_block(x, in_start, geom.fft_size)
        y = ifft(_forward_spec(model, fft(blk), pre))
        eq[..., valid_start:valid_start + valid_len] = y[..., half:half + valid_len]
    y_sym = _fold_item(model, eq, item.rolloff) / item.rx_gain
    loss, _ = _loss_and_symbol_grad(y_sym, item.tx.symbols, exclude, need_grad=False)
    return loss


def _fold_item(model: LEssfmModel, samples: np.ndarray, rolloff: float) -> np.ndarray:
    from .txrx import matched_fold
    return matched_fold(samples, _sps_num(model.sps), _sps_den(model.sps), rolloff)


def backprop(model: LEssfmModel, items, exclude: int | None = None) -> ParamGrads:
    """Exact gradients of the mean phase-aligned symbol MSE over the items
    with respect to every step length and every filter coefficient."""
    from .txrx import matched_fold_adjoint
    items = list(items)
    if not items:
        raise ValueError("empty batch")
    if exclude is None:
        exclude = default_edge_exclude(model)
    need = required_overlap(model, items[0].rx.sample_rate)
    if model.geometry.overlap < need:
        raise ValueError(f"overlap {model.geometry.overlap} below required {need}")
    pre = _Precomputed(model, items[0].rx.sample_rate)
    num, den = _sps_num(model.sps), _sps_den(model.sps)
    d_lengths = np.zeros(model.num_steps + 1)
    d_coeffs = [np.zeros(model.filter_halflen + 1) for _ in range(model.num_steps)]
    total_loss = 0.0
    geom = model.geometry
    half = geom.overlap // 2
    for item in items:
        samples = item.rx.samples
        eq, tapes = _equalize_with_tape(model, pre, samples)
        kappa = 1.0 / item.rx_gain
        y = _fold_item(model, eq, item.rolloff) * kappa
        loss, g_y = _loss_and_symbol_grad(y, item.tx.symbols, exclude)
        total_loss += loss
        g_eq = matched_fold_adjoint(g_y * np.conj(kappa), samples.shape[-1],
                                    num, den, item.rolloff)
        for tape, (in_start, valid_start, valid_len) in zip(
                tapes, iter_ols_blocks(samples.shape[-1], geom)):
            g_block = np.zeros((samples.shape[0], geom.fft_size), dtype=np.complex128)
            g_block[:, half:half + valid_len] = g_eq[:, valid_start:valid_start + valid_len]
            _block_adjoint(model, pre, tape, g_block, d_lengths, d_coeffs)
    scale = 1.0 / len(items)
    return ParamGrads(d_lengths * scale, tuple(c * scale for c in d_coeffs),
                      total_loss * scale)


# --- optimizer -------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment accumulators per parameter group."""

    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: dict, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    return AdamState(m={k: np.zeros_like(p) for k, p in params.items()},
                     v={k: np.zeros_like(p) for k, p in params.items()},
                     beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params: dict, grads: dict, state: AdamState, lr: dict) -> dict:
    """One bias-corrected Adam update; lr maps group name to learning rate."""
    state.step += 1
    t = state.step
    out = {}
    for key, p in params.items():
        g = grads[key]
        state.m[key] = state.beta1 * state.m[key] + (1 - state.beta1) * g
        state.v[key] = state.beta2 * state.v[key] + (1 - state.beta2) * g ** 2
        m_hat = state.m[key] / (1 - state.beta1 ** t)
        v_hat = state.v[key] / (1 - state.beta2 ** t)
        out[key] = p - lr[key] * m_hat / (np.sqrt(v_hat) + state.eps)
    return out


# --- parameter views (free vs tied) ----------------------------------------

def model_params(model: LEssfmModel) -> dict:
    """Optimizer view of the trainable parameters."""
    if model.tied:
        return {"lengths": np.array([model.lengths_km[0]]),
                "coeffs": model.coeffs[0].copy()}
    return {"lengths": model.lengths_km.copy(),
            "coeffs": np.concatenate(model.coeffs) if model.num_steps else np.zeros(0)}


def apply_params(model: LEssfmModel, params: dict) -> LEssfmModel:
    if model.tied:
        interior = float(np.sum(model.lengths_km)) / model.num_steps
        split = float(np.clip(params["lengths"][0], 0.0, interior))
        lengths = np.full(model.num_steps + 1, interior)
        lengths[0] = split
        lengths[-1] = interior - split
        coeffs = tuple(params["coeffs"].copy() for _ in range(model.num_steps))
        return model.with_params(lengths, coeffs)
    width = model.filter_halflen + 1
    coeffs = tuple(params["coeffs"][i * width:(i + 1) * width].copy()
                   for i in range(model.num_steps))
    return model.with_params(params["lengths"].copy(), coeffs)


def reduce_grads(model: LEssfmModel, grads: ParamGrads) -> dict:
    if model.tied:
        # the final length is interior - split, so its gradient enters negated
        return {"lengths": np.array([grads.d_lengths[0] - grads.d_lengths[-1]]),
                "coeffs": np.sum(grads.d_coeffs, axis=0)}
    return {"lengths": grads.d_lengths.copy(),
            "coeffs": np.concatenate(grads.d_coeffs)}


# --- training loop ---------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 8
    lr_lengths_km: float = 0.5
    lr_coeffs: float = 0.05
    seed: int = 0
    val_fraction: float = 0.25
    patience: int = 50
    clip_norm: float | None = None
    edge_exclude_symbols: int | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr_lengths_km < 0 or self.lr_coeffs < 0:
            raise ValueError("learning rates must be nonnegative")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must be in [0, 1)")


class TrainingDiverged(RuntimeError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


@dataclass
class TrainResult:
    model: LEssfmModel
    history: list
    best_epoch: int
    best_val_loss: float


def train(model: LEssfmModel, dataset: Dataset, cfg: TrainConfig) -> TrainResult:
    """Adam training; returns the parameters with the best validation loss.
    Deterministic given the config seed."""
    if not len(dataset):
        raise ValueError("empty dataset")
    exclude = cfg.edge_exclude_symbols
    if exclude is None:
        exclude = default_edge_exclude(model)
    n_val = int(round(cfg.val_fraction * len(dataset)))
    n_val = min(n_val, len(dataset) - 1)
    train_items = list(dataset.items[:len(dataset) - n_val])
    val_items = list(dataset.items[len(dataset) - n_val:])
    rng = np.random.default_rng(cfg.seed)
    params = model_params(model)
    state = adam_init(params)
    lr = {"lengths": cfg.lr_lengths_km, "coeffs": cfg.lr_coeffs}
    current = model
    best = model
    best_val = math.inf
    best_epoch = 0
    history = []
    initial_loss = None
    diverged_streak = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_items))
        epoch_loss = 0.0
        nb = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_items[i] for i in order[start:start + cfg.batch_size]]
            grads = backprop(current, batch, exclude)
            g = reduce_grads(current, grads)
            if cfg.clip_norm is not None:
                norm = math.sqrt(sum(float(np.sum(v ** 2)) for v in g.values()))
                if norm > cfg.clip_norm:
                    g = {k: v * (cfg.clip_norm / norm) for k, v in g.items()}
            params = adam_step(params, g, state, lr)
            current = apply_params(current, params)
            epoch_loss += grads.loss
            nb += 1
        epoch_loss /= nb
        if val_items:
            pre = _Precomputed(current, val_items[0].rx.sample_rate)
            val_loss = float(np.mean([item_loss(current, it, exclude, pre)
                                      for it in val_items]))
        else:
            val_loss = epoch_loss
        history.append({"epoch": epoch, "train_loss": epoch_loss, "val_loss": val_loss})
        if val_loss < best_val:
            best_val = val_loss
            best = current
            best_epoch = epoch
        if initial_loss is None:
            initial_loss = epoch_loss
        diverged_streak = diverged_streak + 1 if epoch_loss > 10 * initial_loss else 0
        if diverged_streak >= 3:
            raise TrainingDiverged(
                f"loss {epoch_loss:.3e} above 10x the initial {initial_loss:.3e} "
                f"for 3 epochs", history)
        if epoch - best_epoch >= cfg.patience:
            break
    return TrainResult(best, history, best_epoch, best_val)

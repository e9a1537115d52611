"""End-to-end transmission chain shared by dataset generation and experiment
evaluation: symbols -> WDM waveform -> fiber -> EDFA -> demultiplexed
equalizer-rate block.

The EDFA gain restores the total launch power, so the equalizer input sits at
the fiber-input reference plane and intensity-filter coefficients initialized
from gamma and effective lengths apply without rescaling.
"""

from __future__ import annotations

import json
import hashlib
from dataclasses import dataclass

import numpy as np

from .dsp import SampleBlock
from .fiber import FiberSpec, PropagationConfig, propagate, set_launch_power, dbm_to_watts
from .txrx import (AmplifierSpec, SymbolFrame, WdmConfig, demux_channel,
                   draw_gaussian_symbols, draw_qam_symbols, modulate_wdm, matched_fold)


@dataclass(frozen=True)
class SystemSpec:
    """Everything needed to synthesize and receive one signal block."""

    wdm: WdmConfig
    fiber: FiberSpec
    noise_figure_db: float | None
    polarization: str                  # scalar | manakov
    sim_sps: int
    eq_sps: float
    symbols_per_block: int
    solver_max_phase_rad: float = 0.002
    solver_max_step_km: float | None = None

    def __post_init__(self):
        if self.polarization not in ("scalar", "manakov"):
            raise ValueError(f"polarization must be scalar or manakov, got {self.polarization!r}")
        m = self.symbols_per_block
        if m < 2 or m & (m - 1):
            raise ValueError(f"symbols_per_block must be a power of two, got {m}")
        if self.sim_sps not in (2, 4, 8, 16):
            raise ValueError(f"sim_sps must be one of 2, 4, 8, 16, got {self.sim_sps}")
        if (m * _sps_num(self.eq_sps)) % _sps_den(self.eq_sps):
            raise ValueError(f"eq_sps {self.eq_sps} does not give integer block lengths")

    @property
    def npol(self) -> int:
        return 2 if self.polarization == "manakov" else 1

    @property
    def solver(self) -> PropagationConfig:
        return PropagationConfig(self.solver_max_phase_rad, self.solver_max_step_km,
                                 self.polarization)

    def to_dict(self) -> dict:
        return {
            "wdm": {"num_channels": self.wdm.num_channels,
                    "symbol_rate": self.wdm.symbol_rate,
                    "channel_spacing": self.wdm.channel_spacing,
                    "rolloff": self.wdm.rolloff},
            "fiber": {"length_km": self.fiber.length_km,
                      "attenuation_db_km": self.fiber.attenuation_db_km,
                      "dispersion_ps_nm_km": self.fiber.dispersion_ps_nm_km,
                      "gamma_per_w_km": self.fiber.gamma_per_w_km,
                      "reference_wavelength_nm": self.fiber.reference_wavelength_nm},
            "noise_figure_db": self.noise_figure_db,
            "polarization": self.polarization,
            "sim_sps": self.sim_sps,
            "eq_sps": self.eq_sps,
            "symbols_per_block": self.symbols_per_block,
            "solver_max_phase_rad": self.solver_max_phase_rad,
            "solver_max_step_km": self.solver_max_step_km,
        }

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]


def system_from_dict(data: dict) -> SystemSpec:
    return SystemSpec(wdm=WdmConfig(**data["wdm"]), fiber=FiberSpec(**data["fiber"]),
                      noise_figure_db=data["noise_figure_db"],
                      polarization=data["polarization"], sim_sps=data["sim_sps"],
                      eq_sps=data["eq_sps"], symbols_per_block=data["symbols_per_block"],
                      solver_max_phase_rad=data["solver_max_phase_rad"],
                      solver_max_step_km=data["solver_max_step_km"])


def _sps_num(sps: float) -> int:
    from fractions import Fraction
    return Fraction(sps).limit_denominator(64).numerator


def _sps_den(sps: float) -> int:
    from fractions import Fraction
    return Fraction(sps).limit_denominator(64).denominator


def _seed_seq(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def draw_channel_frames(system: SystemSpec, seed, source: str = "gaussian") -> list[SymbolFrame]:
    """One symbol frame per WDM channel, independently seeded."""
    children = _seed_seq(seed).spawn(system.wdm.num_channels)
    frames = []
    for child in children:
        if source == "gaussian":
            frames.append(draw_gaussian_symbols(system.symbols_per_block, child,
                                                npol=system.npol))
        elif source.startswith("qam"):
            frames.append(draw_qam_symbols(int(source[3:]), system.symbols_per_block,
                                           child, npol=system.npol))
        else:
            raise ValueError(f"unknown symbol source {source!r}")
    return frames


def transmit(system: SystemSpec, frames: list[SymbolFrame], power_dbm: float) -> SampleBlock:
    return modulate_wdm(frames, system.wdm, system.sim_sps, power_dbm)


def clean_receiver_gain(system: SystemSpec, tx: SampleBlock,
                        center_frame: SymbolFrame) -> complex:
    """Complex gain from unit-energy symbols to matched-filter output through
    the noiseless, fiber-free chain; 1/gain normalizes equalized symbols."""
    rx = demux_channel(tx, system.wdm.center_channel_index, system.wdm, system.eq_sps)
    y = matched_fold(rx.samples, _sps_num(system.eq_sps), _sps_den(system.eq_sps),
                     system.wdm.rolloff)
    x = center_frame.symbols
    return complex(np.sum(np.conj(x) * y) / np.sum(np.abs(x) ** 2))


def receive(system: SystemSpec, fiber_out: SampleBlock, launch_power_dbm: float,
            noise_seed) -> SampleBlock:
    """EDFA (gain restores total launch power) followed by demultiplexing the
    central channel to the equalizer rate."""
    target = dbm_to_watts(launch_power_dbm) * system.wdm.num_channels
    gain_db = 10.0 * np.log10(target / fiber_out.mean_power())
    amp = AmplifierSpec(max(gain_db, 0.0), system.noise_figure_db,
                        system.fiber.reference_wavelength_nm)
    amplified = _edfa(fiber_out, amp, noise_seed)
    return demux_channel(amplified, system.wdm.center_channel_index, system.wdm,
                         system.eq_sps)


def _edfa(signal, amp, seed):
    from .txrx import edfa_add_noise
    return edfa_add_noise(signal, amp, seed)


def run_channel(system: SystemSpec, power_dbm: float, seed,
                source: str = "gaussian") -> tuple[SampleBlock, SymbolFrame, complex]:
    """Full chain for one block. Returns the demultiplexed equalizer-rate
    signal, the central channel's transmitted symbols, and the linear gain
    from those symbols to the matched-filter output."""
    sym_seed, noise_seed = _seed_seq(seed).spawn(2)
    frames = draw_channel_frames(system, sym_seed, source)
    tx = transmit(system, frames, power_dbm)
    center = frames[system.wdm.center_channel_index]
    gain = clean_receiver_gain(system, tx, center)
    out = propagate(tx, system.fiber, system.solver)
    rx = receive(system, out, power_dbm, noise_seed)
    return rx, center, gain

"""The digital-backpropagation equalizer family (EDC, OSSFM, ESSFM, L-ESSFM)
as one parameterized forward computation over overlap-and-save blocks, plus
the real-multiplications complexity model.

One equalizer step multiplies the block spectrum by a dispersion transfer
function and rotates the time-domain samples by a filtered version of the
signal intensity; the filter coefficients carry rad/W and absorb both the
Kerr coefficient and the backpropagation sign.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from .dsp import (OlsGeometry, SampleBlock, fft, ifft, make_freq_grid,
                  gather_block, iter_ols_blocks)

EQUALIZER_KINDS = ("edc", "ossfm", "essfm", "lessfm")
TIED_KINDS = ("ossfm", "essfm")


def gvd_transfer(length_km: float, freqs_hz: np.ndarray, beta2_ps2_km: float) -> np.ndarray:
    """Dispersion transfer function exp(-j*2*pi^2*beta2*f^2*L), unit modulus."""
    return np.exp(1j * gvd_phase_per_km(freqs_hz, beta2_ps2_km) * length_km)


def gvd_phase_per_km(freqs_hz: np.ndarray, beta2_ps2_km: float) -> np.ndarray:
    """d(arg H)/dL for the transfer above, rad/km."""
    beta2_si = beta2_ps2_km * 1e-27
    return -2.0 * np.pi ** 2 * beta2_si * np.asarray(freqs_hz) ** 2 * 1e3


def nlpr_transfer_half(coeffs: np.ndarray, n: int) -> np.ndarray:
    """RFFT of the symmetric filter built from its causal half, length n//2+1.

    coeffs[0] is the center tap, coeffs[k] sits at lags +-k. The transform of
    a circularly even real sequence is real; the imaginary residue is checked
    and discarded.
    """
    c = np.asarray(coeffs, dtype=np.float64)
    if c.ndim != 1 or c.size < 1:
        raise ValueError("coeffs must be a non-empty 1-D real vector")
    half = c.size - 1
    if 2 * half + 1 > n:
        raise ValueError(f"filter of {2 * half + 1} taps does not fit an FFT block of {n}")
    h = np.zeros(n)
    h[0] = c[0]
    if half:
        h[1:half + 1] = c[1:]
        h[n - half:] = c[1:][::-1]
    spec = np.fft.rfft(h)
    residue = float(np.max(np.abs(spec.imag))) if spec.size else 0.0
    if residue > 1e-12 * max(1.0, float(np.max(np.abs(spec.real)))):
        raise AssertionError(f"symmetric filter produced imaginary residue {residue}")
    return spec.real


def nlpr_transfer(coeffs: np.ndarray, n: int) -> np.ndarray:
    """Full-length (n) real transfer of the symmetric intensity filter."""
    half_spec = nlpr_transfer_half(coeffs, n)
    out = np.empty(n)
    out[:n // 2 + 1] = half_spec
    out[n // 2 + 1:] = half_spec[1:n // 2][::-1]
    return out


@dataclass(frozen=True, eq=False)
class LEssfmModel:
    """Trainable split-step equalizer: num_steps+1 dispersion lengths and
    num_steps causal half-responses for the intensity filters.

    beta2_ps2_km is the channel's dispersion; the forward pass applies the
    inverse (negated) dispersion. Lengths are km; coefficients rad/W.
    """

    num_steps: int
    lengths_km: np.ndarray               # (num_steps + 1,)
    coeffs: tuple                        # num_steps arrays of (filter_halflen + 1,)
    filter_halflen: int
    beta2_ps2_km: float
    geometry: OlsGeometry
    sps: float
    polarization: str = "scalar"
    kind: str = "lessfm"
    tied: bool = False

    def __post_init__(self):
        if self.num_steps < 1:
            raise ValueError(f"num_steps must be >= 1, got {self.num_steps}")
        if self.filter_halflen < 0:
            raise ValueError(f"filter_halflen must be >= 0, got {self.filter_halflen}")
        if 2 * self.filter_halflen + 1 > self.geometry.overlap:
            raise ValueError(f"filter span {2 * self.filter_halflen + 1} exceeds overlap "
                             f"{self.geometry.overlap}")
        lengths = np.asarray(self.lengths_km, dtype=np.float64)
        if lengths.shape != (self.num_steps + 1,):
            raise ValueError(f"need {self.num_steps + 1} lengths, got shape {lengths.shape}")
        coeffs = tuple(np.asarray(c, dtype=np.float64) for c in self.coeffs)
        if len(coeffs) != self.num_steps:
            raise ValueError(f"need {self.num_steps} coefficient vectors, got {len(coeffs)}")
        for c in coeffs:
            if c.shape != (self.filter_halflen + 1,):
                raise ValueError(f"coefficient vector shape {c.shape} does not match "
                                 f"filter_halflen {self.filter_halflen}")
        if not (np.all(np.isfinite(lengths)) and all(np.all(np.isfinite(c)) for c in coeffs)):
            raise ValueError("non-finite model parameters")
        if self.polarization not in ("scalar", "manakov"):
            raise ValueError(f"polarization must be scalar or manakov, got {self.polarization!r}")
        if self.kind not in EQUALIZER_KINDS:
            raise ValueError(f"kind must be one of {EQUALIZER_KINDS}, got {self.kind!r}")
        object.__setattr__(self, "lengths_km", lengths)
        object.__setattr__(self, "coeffs", coeffs)

    @property
    def npol(self) -> int:
        return 2 if self.polarization == "manakov" else 1

    def with_params(self, lengths_km: np.ndarray, coeffs) -> "LEssfmModel":
        return replace(self, lengths_km=np.asarray(lengths_km, dtype=np.float64),
                       coeffs=tuple(np.asarray(c, dtype=np.float64) for c in coeffs))


def build_tied_model(kind: str, num_steps: int, filter_halflen: int,
                     shared_coeffs: np.ndarray, length_km: float, split_km: float,
                     beta2_ps2_km: float, geometry: OlsGeometry, sps: float,
                     polarization: str = "scalar") -> LEssfmModel:
    """Tied equalizer: identical coefficients at every step, uniform interior
    lengths L/num_steps, free receiver-side split L0 and final length
    L/num_steps - L0 so the total is exactly length_km.

    OSSFM is the single-coefficient special case (filter_halflen forced to 0).
    """
    if kind not in TIED_KINDS:
        raise ValueError(f"tied kinds are {TIED_KINDS}, got {kind!r}")
    if kind == "ossfm":
        filter_halflen = 0
    shared = np.asarray(shared_coeffs, dtype=np.float64)[:filter_halflen + 1]
    if shared.size != filter_halflen + 1:
        raise ValueError(f"shared coefficients too short for filter_halflen {filter_halflen}")
    interior = length_km / num_steps
    if not 0 <= split_km <= interior:
        raise ValueError(f"split_km must lie in [0, {interior}], got {split_km}")
    lengths = np.full(num_steps + 1, interior)
    lengths[0] = split_km
    lengths[-1] = interior - split_km
    return LEssfmModel(num_steps, lengths, tuple(shared.copy() for _ in range(num_steps)),
                       filter_halflen, beta2_ps2_km, geometry, sps,
                       polarization, kind=kind, tied=True)


def dispersion_memory_samples(beta2_ps2_km: float, length_km: float, sample_rate: float) -> int:
    """Group-delay spread of the dispersion transfer across the full band, in samples."""
    beta2_si = abs(beta2_ps2_km) * 1e-27
    spread = 2 * np.pi * beta2_si * abs(length_km) * 1e3 * sample_rate ** 2
    return int(np.ceil(spread))


def required_overlap(model: LEssfmModel, sample_rate: float) -> int:
    """Minimum even overlap covering dispersion memory plus the filter chain."""
    disp = dispersion_memory_samples(model.beta2_ps2_km,
                                     float(np.sum(np.abs(model.lengths_km))), sample_rate)
    need = disp + 2 * model.num_steps * model.filter_halflen
    return need + (need % 2)


class _Precomputed:
    """Transfer functions for one model at one geometry/sample-rate."""

    def __init__(self, model: LEssfmModel, sample_rate: float):
        n = model.geometry.fft_size
        freqs = make_freq_grid(n, sample_rate)
        # inverse propagation: dispersion applied with the channel beta2 negated
        self.phase_km = gvd_phase_per_km(freqs, -model.beta2_ps2_km)
        self.hgvd = [np.exp(1j * self.phase_km * L) for L in model.lengths_km]
        self.hnlpr = [nlpr_transfer_half(c, n) for c in model.coeffs]
        self.n = n


class BlockTape:
    """Intermediates of one block forward pass, consumed by the adjoint."""

    __slots__ = ("spec", "v", "intensity", "rot", "w")

    def __init__(self):
        self.spec = []        # spectrum after each dispersion multiply
        self.v = []
        self.intensity = []
        self.rot = []
        self.w = []


def _forward_spec(model: LEssfmModel, x_spec: np.ndarray, pre: _Precomputed,
                  tape: BlockTape | None = None) -> np.ndarray:
    """One FFT block through the equalizer, spectrum in, spectrum out."""
    n = pre.n
    a = x_spec * pre.hgvd[0]
    if tape is not None:
        tape.spec.append(a)
    for i in range(model.num_steps):
        v = ifft(a)
        intensity = np.sum(v.real ** 2 + v.imag ** 2, axis=0)
        theta = np.fft.irfft(np.fft.rfft(intensity) * pre.hnlpr[i], n)
        rot = np.exp(1j * theta)
        w = v * rot
        a = fft(w) * pre.hgvd[i + 1]
        if tape is not None:
            tape.v.append(v)
            tape.intensity.append(intensity)
            tape.rot.append(rot)
            tape.w.append(w)
            tape.spec.append(a)
    return a


def lessfm_forward(model: LEssfmModel, rx: SampleBlock) -> SampleBlock:
    """Equalize a sample stream block-wise (overlap-and-save, zero-padded
    stream edges). Output length equals input length; the first and last
    overlap/2 samples are edge-corrupted."""
    if rx.npol != model.npol:
        raise ValueError(f"{model.polarization} model expects {model.npol} polarizations, "
                         f"got {rx.npol}")
    need = required_overlap(model, rx.sample_rate)
    if model.geometry.overlap < need:
        raise ValueError(f"overlap {model.geometry.overlap} is below the {need} samples "
                         f"required by the dispersion and filter memory")
    pre = _Precomputed(model, rx.sample_rate)
    x = rx.samples
    half = model.geometry.overlap // 2
    out = np.empty_like(x)
    for in_start, valid_start, valid_len in iter_ols_blocks(x.shape[-1], model.geometry):
        blk = gather_block(x, in_start, model.geometry.fft_size)
        y = ifft(_forward_spec(model, fft(blk), pre))
        out[..., valid_start:valid_start + valid_len] = y[..., half:half + valid_len]
    return rx.with_samples(out)


def edc(rx: SampleBlock, beta2_ps2_km: float, length_km: float,
        geometry: OlsGeometry) -> SampleBlock:
    """Electronic dispersion compensation: one inverse-dispersion filter
    applied by overlap-and-save."""
    need = dispersion_memory_samples(beta2_ps2_km, length_km, rx.sample_rate)
    if geometry.overlap < need:
        raise ValueError(f"overlap {geometry.overlap} is below the {need} samples of "
                         f"dispersion memory")
    freqs = make_freq_grid(geometry.fft_size, rx.sample_rate)
    h = gvd_transfer(length_km, freqs, -beta2_ps2_km)
    half = geometry.overlap // 2
    x = rx.samples
    out = np.empty_like(x)
    for in_start, valid_start, valid_len in iter_ols_blocks(x.shape[-1], geometry):
        blk = gather_block(x, in_start, geometry.fft_size)
        y = ifft(fft(blk) * h)
        out[..., valid_start:valid_start + valid_len] = y[..., half:half + valid_len]
    return rx.with_samples(out)


# --- complexity accounting -------------------------------------------------

FFT_FORMULAS = {
    # real multiplications for one complex FFT of size n
    "2nlog2n": lambda n: 2.0 * n * np.log2(n),
    "1.5nlog2n": lambda n: 1.5 * n * np.log2(n),
    "split_radix": lambda n: n * np.log2(n) - 3.0 * n + 4.0,
}


@dataclass(frozen=True)
class ComplexityModel:
    """Counting conventions for real multiplications per complex symbol.

    Trig evaluations for the phase rotation are treated as lookups; only the
    complex multiply is counted. The RFFT/IRFFT pair used for intensity
    filtering costs rfft_factor of a full FFT each, and in dual-polarization
    mode the filtering (not the rotation) may be shared across polarizations.
    """

    cmult_real_mults: int = 4
    fft_formula: str = "2nlog2n"
    rfft_factor: float = 0.5
    nlpr_shared_across_pol: bool = True

    def __post_init__(self):
        if self.cmult_real_mults not in (3, 4):
            raise ValueError("complex multiply costs 3 or 4 real multiplications")
        if self.fft_formula not in FFT_FORMULAS:
            raise ValueError(f"fft_formula must be one of {sorted(FFT_FORMULAS)}")

    def fft_real_mults(self, n: int) -> float:
        return FFT_FORMULAS[self.fft_formula](n)

    def hash(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:12]


def count_rm_per_2d(kind: str, num_steps: int, geometry: OlsGeometry, sps: float,
                    conventions: ComplexityModel, npol: int = 2) -> float:
    """Real multiplications per complex (2D) symbol for one equalizer.

    Counted per polarization over one overlap-save block of V = N - O valid
    samples (V/sps symbols): EDC is one FFT/IFFT pair plus N complex
    multiplies; every split step adds an FFT/IFFT pair, N complex multiplies
    for dispersion, the intensity (2 real mults/sample), the intensity filter
    (RFFT + N/2 complex multiplies + IRFFT, shareable across polarizations)
    and the phase rotation (one complex multiply per sample).
    """
    if kind not in EQUALIZER_KINDS:
        raise ValueError(f"kind must be one of {EQUALIZER_KINDS}, got {kind!r}")
    n = geometry.fft_size
    cm = conventions.cmult_real_mults
    fft_rm = conventions.fft_real_mults(n)
    rfft_rm = conventions.rfft_factor * fft_rm
    steps = 0 if kind == "edc" else num_steps
    pairs = steps + 1
    total = pairs * 2 * fft_rm + pairs * n * cm
    if steps:
        share = 0.5 if (conventions.nlpr_shared_across_pol and npol == 2) else 1.0
        per_step = (2.0 * n                                  # intensity
                    + share * (2 * rfft_rm + (n / 2) * cm)   # filter the intensity
                    + n * cm)                                # rotate
        total += steps * per_step
    symbols = geometry.valid / sps
    return total / symbols


def calibrate_conventions(target_rm: float = 172.0, num_steps: int = 4,
                          sps: float = 1.125) -> tuple[ComplexityModel, OlsGeometry, float]:
    """Pick the counting convention and geometry best matching the published
    complexity anchor for the dual-polarization system; deterministic search
    over the documented variants."""
    best = None
    for cm in (3, 4):
        for formula in sorted(FFT_FORMULAS):
            for n in (2048, 4096, 8192, 16384):
                for o in (512, 768, 1024, 1536):
                    if o >= n:
                        continue
                    conv = ComplexityModel(cmult_real_mults=cm, fft_formula=formula)
                    geom = OlsGeometry(n, o)
                    rm = count_rm_per_2d("lessfm", num_steps, geom, sps, conv, npol=2)
                    err = abs(rm - target_rm) / target_rm
                    if best is None or err < best[0]:
                        best = (err, conv, geom, rm)
    return best[1], best[2], best[3]


def equal_gain_steps(target_rm: float, geometry: OlsGeometry, sps: float,
                     conventions: ComplexityModel, npol: int = 2) -> int:
    """Smallest tied-equalizer step count whose counted complexity reaches
    target_rm under the given conventions."""
    steps = 1
    while count_rm_per_2d("essfm", steps, geometry, sps, conventions, npol) < target_rm:
        steps += 1
        if steps > 10000:
            raise RuntimeError("complexity target unreachable")
    return steps


# --- model persistence -----------------------------------------------------

MODEL_FORMAT = "lessfm-model"
MODEL_VERSION = 1


def model_to_dict(model: LEssfmModel, conventions_hash: str | None = None) -> dict:
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "kind": model.kind,
        "tied": model.tied,
        "num_steps": model.num_steps,
        "filter_halflen": model.filter_halflen,
        "beta2_ps2_km": model.beta2_ps2_km,
        "sps": model.sps,
        "polarization": model.polarization,
        "geometry": {"fft_size": model.geometry.fft_size, "overlap": model.geometry.overlap},
        "lengths_km": [float(v) for v in model.lengths_km],
        "coeffs": [[float(v) for v in c] for c in model.coeffs],
        "conventions_hash": conventions_hash,
    }


def model_from_dict(data: dict) -> LEssfmModel:
    if data.get("format") != MODEL_FORMAT:
        raise ValueError(f"not a {MODEL_FORMAT} file")
    if data.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model version {data.get('version')}")
    return LEssfmModel(
        num_steps=data["num_steps"],
        lengths_km=np.array(data["lengths_km"], dtype=np.float64),
        coeffs=tuple(np.array(c, dtype=np.float64) for c in data["coeffs"]),
        filter_halflen=data["filter_halflen"],
        beta2_ps2_km=data["beta2_ps2_km"],
        geometry=OlsGeometry(**data["geometry"]),
        sps=data["sps"],
        polarization=data["polarization"],
        kind=data["kind"],
        tied=data["tied"],
    )


def save_model(model: LEssfmModel, path, conventions_hash: str | None = None) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_dict(model, conventions_hash), fh, indent=1)


def load_model(path) -> LEssfmModel:
    with open(path) as fh:
        return model_from_dict(json.load(fh))

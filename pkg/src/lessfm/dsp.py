"""Block-based DSP primitives: FFT pair, frequency grids, overlap-and-save
filtering, root-raised-cosine pulse shaping and rational resampling.

All arithmetic is 64-bit. Signals are complex baseband sample arrays of shape
(npol, nsamples) carried inside a SampleBlock together with their sample rate;
|sample|^2 is instantaneous power in watts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import firwin, resample_poly


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True, eq=False)
class SampleBlock:
    """A finite block of complex baseband samples at a fixed sample rate.

    samples has shape (npol, n) with npol in {1, 2}; center_freq_offset is the
    block's center frequency relative to the transmission grid center, in Hz.
    """

    samples: np.ndarray
    sample_rate: float
    center_freq_offset: float = 0.0

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.samples, dtype=np.complex128))
        if s.ndim != 2 or s.shape[0] not in (1, 2):
            raise ValueError(f"samples must have shape (npol, n) with npol in {{1,2}}, got {s.shape}")
        if s.shape[1] == 0:
            raise ValueError("empty sample block")
        if not self.sample_rate > 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(s.view(np.float64))):
            raise ValueError("non-finite samples")
        object.__setattr__(self, "samples", s)

    @property
    def npol(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]

    def mean_power(self) -> float:
        """Mean |s|^2 summed over polarizations, in watts."""
        return float(np.sum(np.abs(self.samples) ** 2) / self.num_samples)

    def with_samples(self, samples: np.ndarray) -> "SampleBlock":
        return SampleBlock(samples, self.sample_rate, self.center_freq_offset)


@dataclass(frozen=True)
class OlsGeometry:
    """Overlap-and-save block geometry: FFT size, total overlap (split evenly
    into pre/post discard) and the resulting valid samples per block."""

    fft_size: int
    overlap: int

    def __post_init__(self):
        if not _is_pow2(self.fft_size):
            raise ValueError(f"fft_size must be a power of two, got {self.fft_size}")
        if not 0 < self.overlap < self.fft_size:
            raise ValueError(f"overlap must satisfy 0 < O < N, got O={self.overlap}, N={self.fft_size}")
        if self.overlap % 2:
            raise ValueError(f"overlap must be even, got {self.overlap}")

    @property
    def valid(self) -> int:
        return self.fft_size - self.overlap


def fft(x: np.ndarray) -> np.ndarray:
    """Forward DFT (unnormalized) over the last axis; length must be a power of two."""
    n = np.asarray(x).shape[-1]
    if not _is_pow2(n):
        raise ValueError(f"FFT length must be a power of two, got {n}")
    return np.fft.fft(x, axis=-1)


def ifft(x: np.ndarray) -> np.ndarray:
    """Inverse DFT (scaled by 1/N) over the last axis; length must be a power of two."""
    n = np.asarray(x).shape[-1]
    if not _is_pow2(n):
        raise ValueError(f"IFFT length must be a power of two, got {n}")
    return np.fft.ifft(x, axis=-1)


def make_freq_grid(n: int, sample_rate: float) -> np.ndarray:
    """FFT-ordered bin frequencies in Hz: k*fs/N below N/2, (k-N)*fs/N above."""
    if not _is_pow2(n):
        raise ValueError(f"grid length must be a power of two, got {n}")
    if not sample_rate > 0:
        raise ValueError(f"sample_rate must be positive, got {sample_rate}")
    return np.fft.fftfreq(n, d=1.0 / sample_rate)


def iter_ols_blocks(num_samples: int, geom: OlsGeometry):
    """Yield (input_start, valid_start, valid_len) for each overlap-save block.

    Block b gathers input samples [input_start, input_start + N) with zero
    padding outside the stream, and contributes output positions
    [valid_start, valid_start + valid_len) taken from FFT-block offsets
    [O/2, O/2 + valid_len).
    """
    half = geom.overlap // 2
    v = geom.valid
    nblocks = max(1, -(-num_samples // v))
    for b in range(nblocks):
        valid_start = b * v
        yield valid_start - half, valid_start, min(v, num_samples - valid_start)


def gather_block(x: np.ndarray, start: int, length: int) -> np.ndarray:
    """Copy x[..., start:start+length] with zero padding outside the stream."""
    n = x.shape[-1]
    out = np.zeros(x.shape[:-1] + (length,), dtype=x.dtype)
    lo = max(start, 0)
    hi = min(start + length, n)
    if hi > lo:
        out[..., lo - start:hi - start] = x[..., lo:hi]
    return out


def overlap_save_apply(signal: SampleBlock, chain, geom: OlsGeometry) -> SampleBlock:
    """Process a signal block-wise through a frequency-domain chain.

    chain maps one (npol, N) FFT-domain block to another of the same shape.
    Stream edges are zero-padded; the output has the same length as the input.
    The first and last O/2 output samples are edge-corrupted and should be
    excluded from metrics by the caller.
    """
    x = signal.samples
    half = geom.overlap // 2
    out = np.empty_like(x)
    for in_start, valid_start, valid_len in iter_ols_blocks(x.shape[-1], geom):
        blk = gather_block(x, in_start, geom.fft_size)
        spec = chain(fft(blk))
        if spec.shape != blk.shape:
            raise ValueError(f"chain changed block shape {blk.shape} -> {spec.shape}")
        y = ifft(spec)
        out[..., valid_start:valid_start + valid_len] = y[..., half:half + valid_len]
    return signal.with_samples(out)


def rrc_taps(rolloff: float, span: int, sps: int) -> np.ndarray:
    """Unit-energy root-raised-cosine FIR taps, odd length span*sps+1, peak at center.

    Singular time points (t = +-T/(4*rolloff) and t = 0) use the analytic limits.
    """
    if not 0 < rolloff <= 1:
        raise ValueError(f"rolloff must be in (0, 1], got {rolloff}")
    if span < 1 or sps < 1:
        raise ValueError("span and sps must be >= 1")
    n = span * sps + 1
    if n % 2 == 0:
        n += 1
    t = (np.arange(n) - (n - 1) / 2) / sps  # in symbol periods
    b = rolloff
    h = np.empty(n)
    for i, ti in enumerate(t):
        if abs(ti) < 1e-12:
            h[i] = 1.0 - b + 4 * b / np.pi
        elif abs(abs(ti) - 1.0 / (4 * b)) < 1e-9:
            h[i] = (b / np.sqrt(2)) * ((1 + 2 / np.pi) * np.sin(np.pi / (4 * b))
                                       + (1 - 2 / np.pi) * np.cos(np.pi / (4 * b)))
        else:
            num = np.sin(np.pi * ti * (1 - b)) + 4 * b * ti * np.cos(np.pi * ti * (1 + b))
            den = np.pi * ti * (1 - (4 * b * ti) ** 2)
            h[i] = num / den
    return h / np.sqrt(np.sum(h ** 2))


def rrc_transfer(freqs: np.ndarray, symbol_rate: float, rolloff: float) -> np.ndarray:
    """Square root of the unit raised-cosine spectrum evaluated at freqs (Hz).

    The squared response satisfies the Nyquist criterion exactly:
    sum over aliases spaced by symbol_rate equals 1 at every frequency.
    """
    f = np.abs(np.asarray(freqs, dtype=np.float64))
    b = rolloff
    r = symbol_rate
    lo = (1 - b) * r / 2
    hi = (1 + b) * r / 2
    h2 = np.zeros_like(f)
    h2[f <= lo] = 1.0
    mid = (f > lo) & (f < hi)
    h2[mid] = 0.5 * (1 + np.cos(np.pi / (b * r) * (f[mid] - lo)))
    return np.sqrt(h2)


def _resample_prototype(up: int, down: int, taps_per_phase: int = 24,
                        attenuation_db: float = 85.0) -> np.ndarray:
    """Windowed-sinc lowpass prototype for polyphase resampling at rate up*fs."""
    m = max(up, down)
    numtaps = 2 * taps_per_phase * m + 1
    beta = 0.1102 * (attenuation_db - 8.7)
    # cutoff slightly inside the narrower Nyquist band to keep aliases out
    h = firwin(numtaps, 0.98 / m, window=("kaiser", beta))
    return h * up


def resample_rational(signal: SampleBlock, up: int, down: int) -> SampleBlock:
    """Polyphase rational resampling to sample_rate * up / down.

    up and down must be coprime positive integers. Edge samples within the
    prototype filter memory are transients.
    """
    if up < 1 or down < 1:
        raise ValueError("up and down must be >= 1")
    if np.gcd(up, down) != 1:
        raise ValueError(f"up={up} and down={down} must be coprime")
    if up == down == 1:
        return signal
    h = _resample_prototype(up, down)
    y = resample_poly(signal.samples, up, down, axis=-1, window=h)
    return SampleBlock(y, signal.sample_rate * up / down, signal.center_freq_offset)

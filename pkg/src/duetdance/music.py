"""Audio loading and per-motion-frame music features.

Audio is resampled to 15,360 Hz so that a 512-sample hop yields exactly 30
feature rows per second, one per motion frame.  Features per row: 40 MFCCs
(FFT 1024, 80 mel bands), their centered-difference deltas, and a 12-bin
chroma from the same STFT.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.fft import dct, rfft
from scipy.io import wavfile
from scipy.signal import resample_poly

from .errors import DuetError

SAMPLE_RATE = 15_360
HOP = 512
N_FFT = 1024
N_MELS = 80
N_MFCC = 40
N_CHROMA = 12
MUSIC_DIM = N_MFCC * 2 + N_CHROMA  # 92
LOG_FLOOR = 1e-10


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise DuetError("bad-sample-rate")
        if not np.all(np.isfinite(self.samples)):
            raise DuetError("invalid-audio", "non-finite samples")

    @property
    def duration(self) -> float:
        return self.samples.shape[0] / self.sample_rate


@dataclass
class MusicFeatures:
    frames: np.ndarray  # (N, 92)
    fps: float = 30.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[1] != MUSIC_DIM:
            raise DuetError("shape-mismatch", f"music features must be (N, {MUSIC_DIM})")
        if not np.all(np.isfinite(self.frames)):
            raise DuetError("invalid-features", "non-finite music features")


def load_audio(path) -> AudioClip:
    """Load a PCM16/float32 WAV, average stereo to mono, resample to 15,360 Hz."""
    try:
        sr, data = wavfile.read(path)
    except DuetError:
        raise
    except Exception as exc:
        raise DuetError("unsupported-audio", f"cannot read {path}: {exc}") from exc
    if data.size == 0:
        raise DuetError("empty-audio")
    if data.ndim == 2:
        data = data.mean(axis=1)
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    else:
        raise DuetError("unsupported-audio", f"unsupported sample format {data.dtype}")
    if sr != SAMPLE_RATE:
        ratio = Fraction(SAMPLE_RATE, int(sr))
        samples = resample_poly(samples, ratio.numerator, ratio.denominator)
    samples = np.clip(samples, -1.0, 1.0)
    return AudioClip(samples=samples, sample_rate=SAMPLE_RATE)


def save_audio(path, audio: AudioClip) -> None:
    wavfile.write(path, audio.sample_rate, audio.samples.astype(np.float32))


def _mel_filterbank(sr: int, n_fft: int, n_mels: int) -> np.ndarray:
    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)

    freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    mel_pts = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sr / 2), n_mels + 2))
    fb = np.zeros((n_mels, freqs.shape[0]))
    for m in range(n_mels):
        lo, mid, hi = mel_pts[m], mel_pts[m + 1], mel_pts[m + 2]
        rising = (freqs - lo) / max(mid - lo, 1e-12)
        falling = (hi - freqs) / max(hi - mid, 1e-12)
        fb[m] = np.maximum(0.0, np.minimum(rising, falling))
    return fb


def _frame_signal(samples: np.ndarray, n_frames: int) -> np.ndarray:
    """Windows of N_FFT samples centered at multiples of HOP (reflect-padded)."""
    half = N_FFT // 2
    padded = np.pad(samples, (half, half + HOP), mode="reflect")
    idx = np.arange(n_frames)[:, None] * HOP + np.arange(N_FFT)[None, :]
    return padded[idx]


_CHROMA_MAP = None


def _chroma_map() -> np.ndarray:
    """FFT-bin -> pitch-class assignment matrix (12, n_bins)."""
    global _CHROMA_MAP
    if _CHROMA_MAP is None:
        freqs = np.arange(N_FFT // 2 + 1) * SAMPLE_RATE / N_FFT
        mapping = np.zeros((N_CHROMA, freqs.shape[0]))
        valid = (freqs >= 55.0) & (freqs < SAMPLE_RATE / 2)
        # pitch class with C=0; 440 Hz (A4) lands on class 9
        classes = np.zeros(freqs.shape[0], dtype=np.int64)
        classes[valid] = (np.round(12.0 * np.log2(freqs[valid] / 440.0)).astype(np.int64) + 9) % 12
        for k in np.nonzero(valid)[0]:
            mapping[classes[k], k] = 1.0
        _CHROMA_MAP = mapping
    return _CHROMA_MAP


def _power_spectrogram(audio: AudioClip, n_frames: int) -> np.ndarray:
    if audio.sample_rate != SAMPLE_RATE:
        raise DuetError("bad-sample-rate", "features expect 15,360 Hz audio")
    if (n_frames - 1) * HOP >= audio.samples.shape[0]:
        raise DuetError("audio-too-short")
    frames = _frame_signal(audio.samples, n_frames)
    window = np.hanning(N_FFT)
    spec = rfft(frames * window, axis=1)
    return np.abs(spec) ** 2


def extract_features(audio: AudioClip, n_frames: int) -> MusicFeatures:
    """MFCC + delta + chroma rows, one per motion frame at 30 FPS."""
    power = _power_spectrogram(audio, n_frames)

    mel = power @ _mel_filterbank(SAMPLE_RATE, N_FFT, N_MELS).T
    log_mel = np.log10(np.maximum(mel, LOG_FLOOR))
    mfcc = dct(log_mel, type=2, norm="ortho", axis=1)[:, :N_MFCC]

    padded = np.concatenate([mfcc[:1], mfcc, mfcc[-1:]], axis=0)
    delta = (padded[2:] - padded[:-2]) / 2.0

    chroma = power @ _chroma_map().T
    chroma = chroma + 1e-12
    chroma = chroma / chroma.sum(axis=1, keepdims=True)

    return MusicFeatures(frames=np.concatenate([mfcc, delta, chroma], axis=1))


def detect_music_beats(audio: AudioClip) -> np.ndarray:
    """Beat times (s, ascending) from spectral-flux onset peak picking.

    A frame is a beat when its half-wave-rectified mel flux is maximal within
    +-7 frames and exceeds mean + 1 sigma of the envelope.
    """
    if audio.samples.shape[0] == 0:
        return np.zeros(0)
    n_frames = audio.samples.shape[0] // HOP
    if n_frames < 3:
        return np.zeros(0)
    power = _power_spectrogram(audio, n_frames)
    log_mel = np.log10(np.maximum(power @ _mel_filterbank(SAMPLE_RATE, N_FFT, N_MELS).T,
                                  LOG_FLOOR))
    flux = np.zeros(n_frames)
    flux[1:] = np.maximum(0.0, np.diff(log_mel, axis=0)).sum(axis=1)
    thresh = flux.mean() + flux.std()
    if flux.std() < 1e-12:
        return np.zeros(0)
    beats = []
    for i in range(n_frames):
        lo, hi = max(0, i - 7), min(n_frames, i + 8)
        window = flux[lo:hi]
        if flux[i] >= window.max() and flux[i] > thresh:
            if i > 0 and flux[i] == flux[i - 1]:
                continue  # plateau: keep the first index only
            beats.append(i / 30.0)
    return np.array(sorted(set(beats)))


def synth_click_track(bpm: float, duration: float, seed: int) -> tuple[AudioClip, np.ndarray]:
    """Deterministic click track with a low harmonic bed; returns beat times."""
    if not (40.0 <= bpm <= 240.0):
        raise DuetError("bad-bpm")
    if duration <= 0:
        raise DuetError("bad-duration")
    n = int(round(duration * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    beat_times = np.arange(0.0, duration - 1e-9, 60.0 / bpm)

    samples = np.zeros(n)
    click_len = int(0.05 * SAMPLE_RATE)
    tc = np.arange(click_len) / SAMPLE_RATE
    click = 0.8 * np.sin(2 * np.pi * 1000.0 * tc) * np.exp(-tc * 200.0)
    for tb in beat_times:
        start = int(round(tb * SAMPLE_RATE))
        stop = min(start + click_len, n)
        samples[start:stop] += click[: stop - start]

    rng = np.random.default_rng(seed)
    for _ in range(3):
        freq = rng.uniform(110.0, 330.0)
        phase = rng.uniform(0.0, 2 * np.pi)
        samples += 0.02 * np.sin(2 * np.pi * freq * t + phase)
    samples = np.clip(samples, -1.0, 1.0)
    return AudioClip(samples=samples, sample_rate=SAMPLE_RATE), beat_times

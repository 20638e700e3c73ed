"""Acoustic low-level descriptors, functionals and embedding pooling.

The built-in descriptor set covers the energy, cepstral and spectral
descriptors that need no auditory or pitch model (29 streams).  Further
descriptors can be supplied as precomputed LLD matrices and concatenated
column-wise before summarization.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import TooShortError, ValidationError

__all__ = [
    "LldMatrix",
    "FunctionalSequence",
    "LLD_NAMES",
    "FUNCTIONAL_NAMES",
    "frame_signal",
    "extract_lld",
    "delta",
    "concat_lld",
    "functionals_window",
    "functional_sequence",
    "pool_embeddings",
    "read_wav",
    "read_lld_csv",
    "write_lld_csv",
    "read_sequence_csv",
    "write_sequence_csv",
    "read_embedding_csv",
]

FRAME_WIN_S = 0.06
FRAME_HOP_S = 0.01

LLD_NAMES = (
    ("rms_energy", "zcr")
    + tuple(f"mfcc_{i}" for i in range(1, 15))
    + ("band_energy_250_650", "band_energy_1k_4k")
    + ("rolloff_25", "rolloff_50", "rolloff_75", "rolloff_90")
    + ("spectral_flux", "spectral_centroid", "spectral_entropy", "spectral_slope")
    + ("spectral_variance", "spectral_skewness", "spectral_kurtosis")
)

FUNCTIONAL_NAMES = (
    "mean",
    "stddev",
    "linreg_slope",
    "linreg_err",
    "quadreg_a",
    "quadreg_err",
    "pctlrange_1_99",
    "pctl_6",
    "pctl_94",
)

N_MEL = 26
N_MFCC = 14
MEL_LOG_FLOOR = 1e-10


def _check_finite(values, what):
    if not np.all(np.isfinite(values)):
        raise ValidationError(f"{what} contains NaN or Inf")


@dataclass(frozen=True)
class LldMatrix:
    """Time-major descriptor matrix sampled every ``frame_period_s`` seconds."""

    values: np.ndarray
    descriptor_names: tuple
    frame_period_s: float = FRAME_HOP_S

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValidationError(f"LLD matrix must be T x D with T, D >= 1, got {v.shape}")
        if not self.frame_period_s > 0:
            raise ValidationError("frame_period_s must be positive")
        _check_finite(v, "LLD matrix")
        names = tuple(self.descriptor_names)
        if len(names) != v.shape[1]:
            raise ValidationError(f"{len(names)} names for {v.shape[1]} descriptor columns")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "descriptor_names", names)

    @property
    def n_frames(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class FunctionalSequence:
    """Per-utterance feature vectors, one row per (nominally 1 Hz) window."""

    vectors: np.ndarray
    feature_names: tuple
    window_s: float = 2.0
    step_s: float = 1.0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        v = np.array(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1:
            raise ValidationError(f"feature sequence must be W x F with W >= 1, got {v.shape}")
        _check_finite(v, "feature sequence")
        names = tuple(self.feature_names)
        if len(names) != v.shape[1]:
            raise ValidationError(f"{len(names)} names for {v.shape[1]} feature columns")
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)
        object.__setattr__(self, "feature_names", names)

    @property
    def n_windows(self):
        return self.vectors.shape[0]


def frame_signal(samples, sample_rate, win_s=FRAME_WIN_S, hop_s=FRAME_HOP_S) -> np.ndarray:
    """Cut ``samples`` into overlapping frames without padding.

    Returns an array of shape (n_frames, frame_length).
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1:
        raise ValidationError("expected a mono (1-D) signal")
    if sample_rate <= 0 or win_s <= 0 or hop_s <= 0:
        raise ValidationError("sample_rate, win_s and hop_s must be positive")
    flen = int(round(win_s * sample_rate))
    hop = int(round(hop_s * sample_rate))
    if flen < 1 or hop < 1:
        raise ValidationError("frame or hop shorter than one sample")
    if x.size < flen:
        raise TooShortError(f"signal of {x.size} samples is shorter than one {flen}-sample frame")
    n = (x.size - flen) // hop + 1
    idx = np.arange(flen)[None, :] + hop * np.arange(n)[:, None]
    return x[idx]


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_filters, n_fft, sample_rate):
    """Triangular filters with edges equally spaced on the mel scale, 0 Hz to Nyquist."""
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    edges = _mel_to_hz(np.linspace(0.0, _hz_to_mel(sample_rate / 2.0), n_filters + 2))
    fb = np.zeros((n_filters, freqs.size))
    for m in range(n_filters):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def _dct2_ortho(n):
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    mat = np.cos(np.pi * k * (2 * i + 1) / (2 * n)) * math.sqrt(2.0 / n)
    mat[0] /= math.sqrt(2.0)
    return mat


def _spectral_descriptors(mag, freqs):
    """Spectral shape descriptors for a (T, K) magnitude spectrogram."""
    T = mag.shape[0]
    total = mag.sum(axis=1)
    safe = np.where(total > 0, total, 1.0)
    dist = mag / safe[:, None]

    centroid = dist @ freqs
    dev = freqs[None, :] - centroid[:, None]
    var = np.einsum("tk,tk->t", dist, dev**2)
    sd = np.sqrt(var)
    safe_sd = np.where(sd > 0, sd, 1.0)
    skew = np.where(sd > 0, np.einsum("tk,tk->t", dist, dev**3) / safe_sd**3, 0.0)
    kurt = np.where(sd > 0, np.einsum("tk,tk->t", dist, dev**4) / safe_sd**4, 0.0)

    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(dist > 0, dist * np.log(np.where(dist > 0, dist, 1.0)), 0.0)
    entropy = -plogp.sum(axis=1)

    flux = np.zeros(T)
    if T > 1:
        flux[1:] = np.linalg.norm(np.diff(dist, axis=0), axis=1)

    cum = np.cumsum(mag, axis=1)
    rolloffs = []
    for p in (0.25, 0.50, 0.75, 0.90):
        # first bin where the cumulative magnitude reaches p of the total
        k = np.argmax(cum >= p * total[:, None] - 1e-12 * safe[:, None], axis=1)
        rolloffs.append(np.where(total > 0, freqs[k], 0.0))

    fc = freqs - freqs.mean()
    slope = (mag - mag.mean(axis=1, keepdims=True)) @ fc / np.dot(fc, fc)

    centroid = np.where(total > 0, centroid, 0.0)
    var = np.where(total > 0, var, 0.0)
    return rolloffs, flux, centroid, entropy, slope, var, skew, kurt


def extract_lld(samples, sample_rate) -> LldMatrix:
    """Compute the 29 built-in descriptors on 60 ms frames every 10 ms."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1:
        raise ValidationError("extract_lld expects a mono signal")
    if sample_rate < 8000:
        raise ValidationError(f"sample rate {sample_rate} Hz below 8000 Hz")
    _check_finite(x, "audio signal")
    frames = frame_signal(x, sample_rate, FRAME_WIN_S, FRAME_HOP_S)
    T, L = frames.shape

    rms = np.sqrt(np.mean(frames**2, axis=1))
    sb = np.signbit(frames)
    zcr = np.count_nonzero(sb[:, 1:] != sb[:, :-1], axis=1) / (L - 1)
    silent = ~np.any(frames != 0.0, axis=1)
    zcr[silent] = 0.0

    n_fft = 1 << (L - 1).bit_length()
    win = np.hamming(L)
    mag = np.abs(np.fft.rfft(frames * win, n=n_fft, axis=1))
    freqs = np.arange(mag.shape[1]) * (sample_rate / n_fft)

    power = mag**2
    mel = power @ mel_filterbank(N_MEL, n_fft, sample_rate).T
    logmel = np.log(np.maximum(mel, MEL_LOG_FLOOR))
    mfcc = logmel @ _dct2_ortho(N_MEL).T
    mfcc = mfcc[:, 1 : N_MFCC + 1]

    band_lo = power[:, (freqs >= 250) & (freqs <= 650)].sum(axis=1)
    band_hi = power[:, (freqs >= 1000) & (freqs <= 4000)].sum(axis=1)

    rolloffs, flux, centroid, entropy, slope, var, skew, kurt = _spectral_descriptors(mag, freqs)

    cols = (
        [rms, zcr]
        + [mfcc[:, i] for i in range(N_MFCC)]
        + [band_lo, band_hi]
        + rolloffs
        + [flux, centroid, entropy, slope, var, skew, kurt]
    )
    return LldMatrix(np.column_stack(cols), LLD_NAMES, FRAME_HOP_S)


def delta(m: LldMatrix) -> LldMatrix:
    """First-order frame difference with a zero first frame."""
    d = np.zeros_like(m.values)
    d[1:] = np.diff(m.values, axis=0)
    return LldMatrix(d, tuple(f"{n}.delta" for n in m.descriptor_names), m.frame_period_s)


def concat_lld(*mats: LldMatrix) -> LldMatrix:
    """Column-wise concatenation; frame periods must agree, frame counts are cut to the shortest."""
    if not mats:
        raise ValidationError("nothing to concatenate")
    period = mats[0].frame_period_s
    for m in mats[1:]:
        if not math.isclose(m.frame_period_s, period, rel_tol=1e-9):
            raise ValidationError(
                f"frame period mismatch: {m.frame_period_s} vs {period}"
            )
    T = min(m.n_frames for m in mats)
    names = sum((m.descriptor_names for m in mats), ())
    if len(set(names)) != len(names):
        raise ValidationError("duplicate descriptor names after concatenation")
    return LldMatrix(np.hstack([m.values[:T] for m in mats]), names, period)


def _percentile_sorted(s, p):
    n = s.shape[0]
    pos = p * (n - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, n - 1)
    frac = pos - lo
    return s[lo] + (s[hi] - s[lo]) * frac


def functionals_window(segment) -> np.ndarray:
    """The nine functionals of a 1-D segment, in ``FUNCTIONAL_NAMES`` order."""
    y = np.asarray(segment, dtype=np.float64).ravel()
    t = y.size
    if t < 2:
        raise TooShortError(f"functionals need at least 2 frames, got {t}")
    return _functionals_matrix(y[:, None])[:, 0]


def _functionals_matrix(Y) -> np.ndarray:
    """Functionals for every column of a (t, D) block; returns (9, D)."""
    t = Y.shape[0]
    # fits use tau centered at its mean; leading coefficients are unchanged
    tau = np.arange(t, dtype=np.float64)
    tc = tau - tau.mean()
    mean = Y.mean(axis=0)
    std = np.sqrt(np.mean((Y - mean) ** 2, axis=0))

    lin = np.column_stack([tc, np.ones(t)])
    lcoef, *_ = np.linalg.lstsq(lin, Y, rcond=None)
    lerr = np.mean((Y - lin @ lcoef) ** 2, axis=0)

    # for t == 2 the centered square column vanishes and lstsq returns a = 0
    q = tc**2
    quad = np.column_stack([q - q.mean(), tc, np.ones(t)])
    qcoef, *_ = np.linalg.lstsq(quad, Y, rcond=None)
    qerr = np.mean((Y - quad @ qcoef) ** 2, axis=0)

    S = np.sort(Y, axis=0)
    p1, p6, p94, p99 = (_percentile_sorted(S, p) for p in (0.01, 0.06, 0.94, 0.99))
    out = np.vstack([mean, std, lcoef[0], lerr, qcoef[0], qerr, p99 - p1, p6, p94])
    return out


def _window_bounds(T, period_or_rate, win_s, step_s, rate=False):
    if rate:
        L = int(round(win_s * period_or_rate))
        H = int(round(step_s * period_or_rate))
    else:
        L = int(round(win_s / period_or_rate))
        H = int(round(step_s / period_or_rate))
    if L < 1 or H < 1:
        raise ValidationError("window or step shorter than one frame")
    if T < L:
        return [(0, T)]
    n = (T - L) // H + 1
    return [(i * H, i * H + L) for i in range(n)]


def functional_sequence(m: LldMatrix, win_s=2.0, step_s=1.0) -> FunctionalSequence:
    """Summarize LLD and delta-LLD trajectories over sliding windows.

    Columns are grouped per descriptor: its 9 functionals, then the 9
    functionals of its delta, so the width is ``18 * D``.
    """
    if m.n_frames < 2:
        raise TooShortError(f"need at least 2 frames, got {m.n_frames}")
    dm = delta(m)
    D = m.values.shape[1]
    bounds = _window_bounds(m.n_frames, m.frame_period_s, win_s, step_s)
    rows = np.empty((len(bounds), 18 * D))
    for w, (a, b) in enumerate(bounds):
        f_lld = _functionals_matrix(m.values[a:b])
        f_del = _functionals_matrix(dm.values[a:b])
        rows[w] = np.concatenate([f_lld, f_del], axis=0).T.ravel()
    names = []
    for name in m.descriptor_names:
        names += [f"{name}__{f}" for f in FUNCTIONAL_NAMES]
        names += [f"{name}.delta__{f}" for f in FUNCTIONAL_NAMES]
    return FunctionalSequence(
        rows,
        tuple(names),
        win_s,
        step_s,
        meta={"kind": "functionals", "frame_period_s": m.frame_period_s},
    )


def pool_embeddings(frames, frame_rate, win_s=2.0, step_s=1.0, names=None) -> FunctionalSequence:
    """Average per-frame embeddings over sliding windows."""
    E = np.asarray(frames, dtype=np.float64)
    if E.ndim == 1:
        E = E[:, None]
    if E.ndim != 2 or E.shape[0] < 1 or E.shape[1] < 1:
        raise ValidationError("embedding input is empty")
    if frame_rate <= 0:
        raise ValidationError("frame_rate must be positive")
    bounds = _window_bounds(E.shape[0], frame_rate, win_s, step_s, rate=True)
    pooled = np.vstack([E[a:b].mean(axis=0) for a, b in bounds])
    if names is None:
        names = tuple(f"emb_{i}" for i in range(E.shape[1]))
    return FunctionalSequence(
        pooled, tuple(names), win_s, step_s, meta={"kind": "pooled", "frame_rate": frame_rate}
    )


# ----------------------------------------------------------------------------
# file formats


def read_wav(path):
    """Read a mono 16-bit PCM or 32-bit float WAV; returns (samples, rate)."""
    from scipy.io import wavfile

    try:
        rate, data = wavfile.read(str(path))
    except (ValueError, OSError) as exc:
        raise ValidationError(f"{path}: cannot read WAV ({exc})") from None
    if data.ndim != 1:
        raise ValidationError(f"{path}: {data.shape[1]} channels, mono required")
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        x = data.astype(np.float64)
    else:
        raise ValidationError(f"{path}: unsupported sample format {data.dtype}")
    return x, int(rate)


def write_wav(path, samples, rate, fmt="int16"):
    from scipy.io import wavfile

    x = np.asarray(samples, dtype=np.float64)
    if fmt == "int16":
        data = np.clip(np.round(x * 32767.0), -32768, 32767).astype(np.int16)
    else:
        data = x.astype(np.float32)
    wavfile.write(str(path), int(rate), data)


def _sidecar(path):
    p = Path(path)
    return p.with_name(p.name + ".json")


def _write_matrix_csv(path, names, values):
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(names) + "\n")
        for row in values:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def _read_matrix_csv(path):
    path = Path(path)
    try:
        with path.open(encoding="utf-8") as fh:
            header = fh.readline().rstrip("\r\n")
            if not header:
                raise ValidationError(f"{path}: missing header row")
            names = tuple(header.split(","))
            rows = []
            for lineno, line in enumerate(fh, start=2):
                line = line.strip()
                if not line:
                    continue
                parts = line.split(",")
                if len(parts) != len(names):
                    raise ValidationError(
                        f"{path} line {lineno}: {len(parts)} fields, header has {len(names)}"
                    )
                try:
                    rows.append([float(p) for p in parts])
                except ValueError:
                    raise ValidationError(f"{path} line {lineno}: non-numeric value") from None
    except OSError as exc:
        raise ValidationError(f"{path}: {exc}") from None
    if not rows:
        raise ValidationError(f"{path}: no data rows")
    return names, np.array(rows, dtype=np.float64)


def _read_sidecar(path):
    sc = _sidecar(path)
    if not sc.exists():
        return {}
    try:
        return json.loads(sc.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{sc}: {exc}") from None


def write_lld_csv(m: LldMatrix, path):
    _write_matrix_csv(path, m.descriptor_names, m.values)
    _sidecar(path).write_text(
        json.dumps({"kind": "lld", "frame_period_s": m.frame_period_s}, sort_keys=True) + "\n",
        encoding="utf-8",
    )


def read_lld_csv(path) -> LldMatrix:
    names, values = _read_matrix_csv(path)
    meta = _read_sidecar(path)
    return LldMatrix(values, names, float(meta.get("frame_period_s", FRAME_HOP_S)))


def write_sequence_csv(seq: FunctionalSequence, path, extra_meta=None):
    _write_matrix_csv(path, seq.feature_names, seq.vectors)
    meta = {"window_s": seq.window_s, "step_s": seq.step_s}
    meta.update(seq.meta)
    if extra_meta:
        meta.update(extra_meta)
    _sidecar(path).write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")


def read_sequence_csv(path) -> FunctionalSequence:
    names, values = _read_matrix_csv(path)
    meta = _read_sidecar(path)
    return FunctionalSequence(
        values,
        names,
        float(meta.get("window_s", 2.0)),
        float(meta.get("step_s", 1.0)),
        meta=meta,
    )


def read_embedding_csv(path):
    """Per-frame embeddings and their frame rate (from the sidecar)."""
    names, values = _read_matrix_csv(path)
    meta = _read_sidecar(path)
    if "frame_rate" not in meta:
        raise ValidationError(f"{path}: sidecar must record frame_rate")
    return values, float(meta["frame_rate"]), names

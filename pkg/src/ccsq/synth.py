"""Synthetic corpora for end-to-end checks.

``write_audio_corpus`` renders WAV files whose arousal label is a smooth
function of the signal's loudness and pitch, so it is recoverable from the
built-in acoustic descriptors.  ``confounded_corpus`` builds pooled-embedding
style feature sequences where part of the label is a per-speaker offset and
the features carry a strong speaker signature.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .dataset import DatasetManifest, UtteranceRecord, write_manifest
from .features import write_wav

__all__ = ["render_utterance", "write_audio_corpus", "confounded_corpus", "write_confounded_corpus"]

SAMPLE_RATE = 16000


def render_utterance(level, rng, duration_s, timbre, sample_rate=SAMPLE_RATE):
    """Synthesize a voiced-like signal whose loudness and pitch track ``level``.

    ``level`` in [-1, 1] sets the mean amplitude and fundamental; the
    trajectory drifts slowly around it.  ``timbre`` is a vector of harmonic
    weights (the speaker's voice).
    """
    n = int(duration_s * sample_rate)
    t = np.arange(n) / sample_rate
    drift = 0.15 * np.sin(2 * np.pi * rng.uniform(0.1, 0.4) * t + rng.uniform(0, 2 * np.pi))
    z = np.clip(level + drift, -1.2, 1.2)
    f0 = 140.0 * 2.0 ** (0.8 * z)
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    sig = np.zeros(n)
    for h, w in enumerate(timbre, start=1):
        sig += w * np.sin(h * phase)
    sig /= np.sum(np.abs(timbre))
    # syllable-rate amplitude modulation
    syll = 0.6 + 0.4 * np.abs(np.sin(2 * np.pi * rng.uniform(2.0, 4.0) * t))
    # recording gain is unrelated to the label
    gain = 10.0 ** rng.uniform(-0.2, 0.2)
    amp = 0.25 * gain * 10.0 ** (0.6 * z) * syll
    noise = rng.normal(0.0, 0.004 * rng.uniform(0.5, 2.0), n)
    return np.clip(amp * sig + noise, -1.0, 1.0)


def write_audio_corpus(out_dir, n_utts=300, n_speakers=20, seed=0, partition="train",
                       prefix="utt", duration=(3.0, 6.0), speaker_seed=None):
    """Render ``n_utts`` WAVs plus ``manifest.csv`` into ``out_dir``.

    Arousal is written in the unit range ([0, 1]); valence is an independent
    random label.  Returns the manifest path.
    """
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    srng = np.random.default_rng(seed if speaker_seed is None else speaker_seed)
    timbres = [np.abs(srng.normal(1.0, 0.5, 6)) + 0.05 for _ in range(n_speakers)]
    lines = ["utterance_id,video_id,speaker_id,arousal,valence,feature_path,arousal_range"]
    for i in range(n_utts):
        spk = i % n_speakers
        level = rng.uniform(-1.0, 1.0)
        dur = rng.uniform(*duration)
        x = render_utterance(level, rng, dur, timbres[spk])
        uid = f"{prefix}{i:04d}"
        write_wav(out / "wav" / f"{uid}.wav", x, SAMPLE_RATE)
        # arousal label is a smooth monotone function of the level, in [0, 1]
        raw = float(0.5 + 0.5 * np.tanh(1.5 * level) / np.tanh(1.5))
        valence = float(np.clip(rng.normal(0.0, 0.4), -1, 1))
        lines.append(
            f"{uid},vid{spk:02d}_{i // n_speakers:03d},spk{spk:02d},{raw!r},{valence!r},wav/{uid}.wav,unit"
        )
    path = out / "manifest.csv"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def confounded_corpus(n_speakers=20, utts_per_speaker=10, seed=0, length=(4, 9),
                      signal_dims=4, identity_dims=12, speaker_sd=0.35, emotion_sd=0.35,
                      signal_noise=0.8, identity_strength=1.5, task="valence"):
    """Speaker-confounded feature sequences.

    The label of an utterance is ``speaker_offset + emotion`` (clipped to
    [-1, 1]).  Features are ``signal_dims`` noisy views of the emotion term
    followed by ``identity_dims`` columns holding the speaker's random
    signature, which carries no emotion information beyond the speaker's
    offset.  Returns ``(manifest, {utterance_id: (W, F) array})``.
    """
    rng = np.random.default_rng(seed)
    offsets = rng.normal(0.0, speaker_sd, n_speakers)
    signatures = rng.normal(0.0, 1.0, (n_speakers, identity_dims)) * identity_strength
    records, feats = [], {}
    for s in range(n_speakers):
        for j in range(utts_per_speaker):
            uid = f"s{s:02d}u{j:03d}"
            emo = rng.normal(0.0, emotion_sd)
            label = float(np.clip(offsets[s] + emo, -1.0, 1.0))
            W = int(rng.integers(length[0], length[1] + 1))
            sig = emo / emotion_sd + rng.normal(0.0, signal_noise, (W, signal_dims))
            ident = signatures[s] + rng.normal(0.0, 0.1, (W, identity_dims))
            feats[uid] = np.hstack([sig, ident])
            other = float(np.clip(rng.normal(0.0, 0.3), -1, 1))
            aro, val = (other, label) if task == "valence" else (label, other)
            records.append(UtteranceRecord(uid, f"v{s:02d}", f"spk{s:02d}", aro, val, f"{uid}.csv"))
    return DatasetManifest("train", tuple(records)), feats


def write_confounded_corpus(out_dir, **kwargs):
    """Write ``confounded_corpus`` as a manifest plus per-utterance feature CSVs."""
    from .features import FunctionalSequence, write_sequence_csv

    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    manifest, feats = confounded_corpus(**kwargs)
    for r in manifest:
        x = feats[r.utterance_id]
        names = tuple(f"f{i}" for i in range(x.shape[1]))
        write_sequence_csv(FunctionalSequence(x, names), out / "features" / f"{r.utterance_id}.csv")
    write_manifest(manifest, out / "manifest.csv")
    return out / "manifest.csv"

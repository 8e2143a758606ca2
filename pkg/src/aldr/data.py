"""Synthetic speakers, manifests, trial lists and PCM-16 WAV files.

File formats (all plain text, one record per line, ``#`` starts a comment):

* manifest: ``<utt_id> <speaker_label> <relative_path>``
* trials:   ``<label 0|1> <utt_id_a> <utt_id_b>`` (1 = same speaker)
* nuisance: ``<utt_id> <nuisance_id>`` (synthetic corpora only; never used for training)
"""
from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import Spectrogram, Waveform, normalize, spectrogram, window_samples
from .errors import ParameterError, ParseError, UnsupportedFormatError, ValidationError

MANIFEST_NAME = "manifest.txt"
TRIALS_NAME = "trials.txt"
NUISANCE_NAME = "nuisance.txt"


@dataclass
class ManifestEntry:
    id: str
    speaker_id: int
    path: str


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    speaker_labels: list[str]
    root: Path | None = None

    @property
    def n_speakers(self) -> int:
        return len(self.speaker_labels)

    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    def index(self) -> dict[str, ManifestEntry]:
        return {e.id: e for e in self.entries}

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() or self.root is None else self.root / p


@dataclass
class TrialPair:
    label: int
    utt_a: str
    utt_b: str

    @property
    def same(self) -> bool:
        return self.label == 1


@dataclass
class Utterance:
    id: str
    speaker_id: int
    nuisance_id: int | None = None
    waveform: Waveform | None = None
    spectrogram: Spectrogram | None = None


def _data_lines(path: Path):
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield lineno, line.split()


def load_manifest(path) -> Manifest:
    path = Path(path)
    rows = []
    seen: set[str] = set()
    for lineno, fields in _data_lines(path):
        if len(fields) != 3:
            raise ParseError(f"expected 'id speaker_label path', got {len(fields)} fields", lineno)
        utt, label, rel = fields
        if utt in seen:
            raise ValidationError(f"duplicate utterance id {utt!r} at line {lineno}")
        seen.add(utt)
        rows.append((utt, label, rel))
    if not rows:
        raise ValidationError(f"manifest {path} has no entries (no speakers)")
    labels = sorted({label for _, label, _ in rows})
    lookup = {label: i for i, label in enumerate(labels)}
    entries = [ManifestEntry(utt, lookup[label], rel) for utt, label, rel in rows]
    return Manifest(entries, labels, root=path.parent)


def write_manifest(manifest: Manifest, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in manifest.entries:
            fh.write(f"{e.id} {manifest.speaker_labels[e.speaker_id]} {e.path}\n")


def load_trials(path, manifest: Manifest | None = None) -> list[TrialPair]:
    known = set(manifest.ids()) if manifest is not None else None
    trials = []
    for lineno, fields in _data_lines(Path(path)):
        if len(fields) != 3:
            raise ParseError(f"expected '<label> <id_a> <id_b>', got {len(fields)} fields", lineno)
        label, a, b = fields
        if label not in ("0", "1"):
            raise ParseError(f"trial label must be 0 or 1, got {label!r}", lineno)
        if known is not None:
            for utt in (a, b):
                if utt not in known:
                    raise ValidationError(f"unknown utterance id {utt!r} in trial list at line {lineno}")
        trials.append(TrialPair(int(label), a, b))
    return trials


def write_trials(trials: list[TrialPair], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in trials:
            fh.write(f"{t.label} {t.utt_a} {t.utt_b}\n")


def load_nuisance_labels(path) -> dict[str, int]:
    out = {}
    for lineno, fields in _data_lines(Path(path)):
        if len(fields) != 2:
            raise ParseError("expected '<id> <nuisance_id>'", lineno)
        try:
            out[fields[0]] = int(fields[1])
        except ValueError:
            raise ParseError(f"nuisance id must be an integer, got {fields[1]!r}", lineno) from None
    return out


# ---------------------------------------------------------------------------
# WAV


def read_wav(path) -> Waveform:
    """Read a mono PCM-16 RIFF/WAVE file, scaling samples by 1/32768."""
    try:
        with wave.open(str(path), "rb") as wf:
            channels, width, rate, n = wf.getnchannels(), wf.getsampwidth(), wf.getframerate(), wf.getnframes()
            if channels != 1:
                raise UnsupportedFormatError("channels", channels)
            if width != 2:
                raise UnsupportedFormatError("bits_per_sample", 8 * width)
            raw = wf.readframes(n)
    except wave.Error as exc:
        msg = str(exc)
        if msg.startswith("unknown format"):
            raise UnsupportedFormatError("audio_format", msg.split(":")[-1].strip()) from None
        raise UnsupportedFormatError("container", msg) from None
    except EOFError:
        raise UnsupportedFormatError("container", "truncated header") from None
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32768.0, rate)


def write_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(w.sample_rate)
        wf.writeframes(pcm.tobytes())


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class SpeakerSignature:
    harmonic_bins: tuple[int, int, int]
    formant_centers: np.ndarray
    formant_widths: np.ndarray
    syllable_rate: float

    def envelope(self, freqs: np.ndarray) -> np.ndarray:
        d = (freqs[:, None] - self.formant_centers[None, :]) / self.formant_widths[None, :]
        return np.exp(-0.5 * d * d).sum(axis=1)


@dataclass
class NuisanceProfile:
    band_center: float
    band_width: float
    tilt: float
    period: float
    duty: float

    def spectrum(self, freqs: np.ndarray, nyquist: float) -> np.ndarray:
        d = (freqs - self.band_center) / self.band_width
        return np.exp(-0.5 * d * d) + 0.05 * np.exp(self.tilt * freqs / nyquist)


@dataclass
class SyntheticCorpus:
    manifest: Manifest
    utterances: list[Utterance]
    speakers: list[SpeakerSignature] = field(default_factory=list)
    nuisances: list[NuisanceProfile] = field(default_factory=list)


def _shaped_noise(rng: np.random.Generator, n: int, magnitude_fn, sample_rate: int) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    out = np.fft.irfft(spec * magnitude_fn(freqs), n)
    return out / (np.sqrt(np.mean(out * out)) + 1e-12)


def generate_synthetic(
    n_speakers: int,
    n_nuisance: int,
    utts_per_speaker: int,
    rng: np.random.Generator,
    *,
    sample_rate: int = 16000,
    duration: float = 4.0,
    noise_level: float = 0.15,
) -> SyntheticCorpus:
    """Speakers = 3 harmonics + formant envelope; nuisance = gated colored noise.

    Each speaker has a fundamental bin b (harmonics at b, 2b, 3b on the analysis
    grid), two formant bumps and a syllable rate; the voiced part is amplitude
    modulated by the syllable rhythm.  Each nuisance class is band-limited noise
    with a tilt and an on/off gating pattern.  Every utterance gets one nuisance
    class (balanced per speaker), a gain in [0.5, 2] and random time offsets.
    """
    if n_speakers < 2 or n_nuisance < 2 or utts_per_speaker < 2:
        raise ParameterError(
            f"need n_speakers, n_nuisance, utts_per_speaker >= 2; got {n_speakers}, {n_nuisance}, {utts_per_speaker}"
        )
    W, _ = window_samples(sample_rate)
    bin_hz = sample_rate / W
    nyquist = sample_rate / 2
    n_bins = W // 2 + 1
    max_f0_bin = (n_bins - 1) // 4
    candidates = np.arange(5, max_f0_bin + 1)
    if candidates.size < n_speakers:
        raise ParameterError(f"at most {candidates.size} speakers fit on a {W}-sample analysis grid")

    f0_bins = rng.choice(candidates, size=n_speakers, replace=False)
    speakers = [
        SpeakerSignature(
            harmonic_bins=(int(b), int(2 * b), int(3 * b)),
            formant_centers=rng.uniform(0.05, 0.6, size=2) * nyquist,
            formant_widths=rng.uniform(0.02, 0.06, size=2) * nyquist,
            syllable_rate=float(rng.uniform(2.5, 6.0)),
        )
        for b in f0_bins
    ]
    nuisances = [
        NuisanceProfile(
            band_center=float(rng.uniform(0.05, 0.8) * nyquist),
            band_width=float(rng.uniform(0.06, 0.2) * nyquist),
            tilt=float(rng.uniform(-3.0, 3.0)),
            period=float(rng.uniform(0.12, 0.6)),
            duty=float(rng.uniform(0.3, 0.7)),
        )
        for _ in range(n_nuisance)
    ]

    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    labels = [f"spk{s:03d}" for s in range(n_speakers)]
    entries, utterances = [], []
    for s, sig in enumerate(speakers):
        classes = rng.permutation(np.resize(np.arange(n_nuisance), utts_per_speaker))
        for u in range(utts_per_speaker):
            k = int(classes[u])
            prof = nuisances[k]
            jitter = 1.0 + rng.uniform(-0.004, 0.004)
            phases = rng.uniform(0, 2 * np.pi, size=3)
            env_at = sig.envelope(np.array(sig.harmonic_bins, dtype=float) * bin_hz)
            amps = 0.35 * (0.6 + 0.4 * env_at / (env_at.max() + 1e-12))
            voiced = sum(
                a * np.sin(2 * np.pi * h * bin_hz * jitter * t + ph)
                for a, h, ph in zip(amps, sig.harmonic_bins, phases)
            )
            voiced = voiced + 0.3 * _shaped_noise(rng, n, sig.envelope, sample_rate)
            offset = rng.uniform(0, duration)
            syllables = 0.1 + 0.9 * (0.5 + 0.5 * np.sin(2 * np.pi * sig.syllable_rate * (t + offset)))
            identity = syllables * voiced

            gain = rng.uniform(0.5, 2.0)
            noise_offset = rng.uniform(0, prof.period)
            gate = (((t + noise_offset) / prof.period) % 1.0) < prof.duty
            noise = _shaped_noise(rng, n, lambda f: prof.spectrum(f, nyquist), sample_rate)
            noise = noise_level * gain * (0.15 + 0.85 * gate) * noise

            x = identity + noise
            peak = np.abs(x).max()
            if peak > 0.95:
                x = x * (0.95 / peak)
            uid = f"{labels[s]}-{u:03d}"
            wav = Waveform(x, sample_rate)
            utterances.append(Utterance(uid, s, k, wav))
            entries.append(ManifestEntry(uid, s, f"wav/{uid}.wav"))
    return SyntheticCorpus(Manifest(entries, labels), utterances, speakers, nuisances)


def eval_split(utterances: list[Utterance], per_speaker: int) -> tuple[list[Utterance], list[Utterance]]:
    """Last ``per_speaker`` utterances of every speaker are held out."""
    by_spk: dict[int, list[Utterance]] = {}
    for u in utterances:
        by_spk.setdefault(u.speaker_id, []).append(u)
    train, held = [], []
    for spk in sorted(by_spk):
        us = by_spk[spk]
        if per_speaker >= len(us):
            raise ParameterError(f"speaker {spk} has {len(us)} utterances; cannot hold out {per_speaker}")
        train.extend(us[: len(us) - per_speaker])
        held.extend(us[len(us) - per_speaker :])
    return train, held


def make_trials(utterances: list[Utterance], rng: np.random.Generator) -> list[TrialPair]:
    """One same-speaker and one different-speaker partner per utterance.

    When nuisance labels are known, even-indexed utterances take partners that
    share their nuisance class and odd-indexed ones take partners that do not,
    so nuisance agreement is balanced between target and non-target trials.
    """
    trials = []
    for i, u in enumerate(utterances):
        want_match = i % 2 == 0
        for same in (True, False):
            pool = [v for v in utterances if v.id != u.id and (v.speaker_id == u.speaker_id) == same]
            if not pool:
                raise ValidationError(f"no {'same' if same else 'different'}-speaker partner for {u.id}")
            if u.nuisance_id is not None:
                strat = [v for v in pool if (v.nuisance_id == u.nuisance_id) == want_match]
                pool = strat or pool
            partner = pool[int(rng.integers(len(pool)))]
            trials.append(TrialPair(int(same), u.id, partner.id))
    return trials


def materialize(corpus: SyntheticCorpus, out_dir, trials: list[TrialPair]) -> None:
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    for utt, entry in zip(corpus.utterances, corpus.manifest.entries):
        write_wav(out / entry.path, utt.waveform)
    write_manifest(corpus.manifest, out / MANIFEST_NAME)
    write_trials(trials, out / TRIALS_NAME)
    with open(out / NUISANCE_NAME, "w", encoding="utf-8") as fh:
        for u in corpus.utterances:
            fh.write(f"{u.id} {u.nuisance_id}\n")


def load_utterances(manifest: Manifest, nuisance: dict[str, int] | None = None, scope: str = "bin") -> list[Utterance]:
    """Read every manifest entry and attach its normalized spectrogram."""
    out = []
    for e in manifest.entries:
        w = read_wav(manifest.resolve(e))
        nid = None if nuisance is None else nuisance.get(e.id)
        out.append(Utterance(e.id, e.speaker_id, nid, w, normalize(spectrogram(w), scope)))
    return out


def with_spectrograms(utterances: list[Utterance], scope: str = "bin") -> list[Utterance]:
    for u in utterances:
        if u.spectrogram is None:
            u.spectrogram = normalize(spectrogram(u.waveform), scope)
    return utterances

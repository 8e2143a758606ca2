import struct
import wave

import numpy as np
import pytest

from aldr import data
from aldr.audio import Waveform, spectrogram
from aldr.errors import ParameterError, ParseError, UnsupportedFormatError, ValidationError


@pytest.fixture(scope="module")
def corpus():
    return data.generate_synthetic(8, 4, 6, np.random.default_rng(0))


def local_peaks(m, k=3):
    loc = [i for i in range(1, len(m) - 1) if m[i] >= m[i - 1] and m[i] >= m[i + 1]]
    return set(sorted(loc, key=lambda i: -m[i])[:k])


class TestSynthetic:
    def test_counts_and_length(self, corpus):
        assert len(corpus.utterances) == 48
        assert corpus.manifest.n_speakers == 8
        assert all(u.waveform.duration == 4.0 for u in corpus.utterances)
        assert all(np.abs(u.waveform.samples).max() <= 0.95 + 1e-12 for u in corpus.utterances)

    def test_nuisance_balanced_per_speaker(self, corpus):
        for s in range(8):
            ks = [u.nuisance_id for u in corpus.utterances if u.speaker_id == s]
            counts = np.bincount(ks, minlength=4)
            assert counts.max() - counts.min() <= 1

    def test_same_speaker_shares_harmonic_peaks(self, corpus):
        for u in corpus.utterances:
            m = spectrogram(u.waveform).frames.mean(axis=0)
            assert len(local_peaks(m) & set(corpus.speakers[u.speaker_id].harmonic_bins)) >= 2, u.id

    def test_distinct_speakers_have_disjoint_peaks(self, corpus):
        by_spk = {}
        for u in corpus.utterances:
            m = spectrogram(u.waveform).frames.mean(axis=0)
            by_spk.setdefault(u.speaker_id, []).append(local_peaks(m) & set(corpus.speakers[u.speaker_id].harmonic_bins))
        for a in range(8):
            for b in range(a + 1, 8):
                ha, hb = set(corpus.speakers[a].harmonic_bins), set(corpus.speakers[b].harmonic_bins)
                if ha.isdisjoint(hb):
                    assert by_spk[a][0].isdisjoint(by_spk[b][0])

    def test_within_speaker_similarity_beats_across(self, corpus):
        ms = np.array([spectrogram(u.waveform).frames.mean(axis=0) for u in corpus.utterances])
        ms /= np.linalg.norm(ms, axis=1, keepdims=True)
        S = ms @ ms.T
        spk = np.array([u.speaker_id for u in corpus.utterances])
        for s in range(8):
            own = spk == s
            within = S[np.ix_(own, own)][~np.eye(own.sum(), dtype=bool)].mean()
            across = S[np.ix_(own, ~own)].mean()
            assert within > across

    def test_seed_determinism(self):
        a = data.generate_synthetic(2, 2, 2, np.random.default_rng(11))
        b = data.generate_synthetic(2, 2, 2, np.random.default_rng(11))
        for u, v in zip(a.utterances, b.utterances):
            assert u.waveform.samples.tobytes() == v.waveform.samples.tobytes()
            assert (u.id, u.speaker_id, u.nuisance_id) == (v.id, v.speaker_id, v.nuisance_id)

    @pytest.mark.parametrize("args", [(1, 2, 2), (2, 1, 2), (2, 2, 1)])
    def test_bounds(self, args):
        with pytest.raises(ParameterError):
            data.generate_synthetic(*args, np.random.default_rng(0))


class TestTrials:
    def test_balanced_and_stratified(self, corpus):
        _, held = data.eval_split(corpus.utterances, 3)
        trials = data.make_trials(held, np.random.default_rng(0))
        labels = [t.label for t in trials]
        assert labels.count(1) == labels.count(0) == len(held)
        nuis = {u.id: u.nuisance_id for u in held}
        spk = {u.id: u.speaker_id for u in held}
        for t in trials:
            assert (spk[t.utt_a] == spk[t.utt_b]) == bool(t.label)
        match = lambda lab: np.mean([nuis[t.utt_a] == nuis[t.utt_b] for t in trials if t.label == lab])  # noqa: E731
        assert abs(match(1) - match(0)) <= 0.5

    def test_eval_split_takes_tail(self, corpus):
        train, held = data.eval_split(corpus.utterances, 2)
        assert len(held) == 16 and len(train) == 32
        assert {u.id for u in held if u.speaker_id == 0} == {"spk000-004", "spk000-005"}


class TestManifest:
    def test_labels_reindexed(self, tmp_path):
        p = tmp_path / "m.txt"
        p.write_text("# comment\nu1 bob a.wav\nu2 alice b.wav\nu3 bob c.wav\n")
        m = data.load_manifest(p)
        assert m.n_speakers == 2
        assert m.speaker_labels == ["alice", "bob"]
        assert [e.speaker_id for e in m.entries] == [1, 0, 1]

    def test_empty(self, tmp_path):
        p = tmp_path / "m.txt"
        p.write_text("\n# nothing\n")
        with pytest.raises(ValidationError):
            data.load_manifest(p)

    def test_malformed_line_number(self, tmp_path):
        p = tmp_path / "m.txt"
        p.write_text("u1 a x.wav\nu2 b\n")
        with pytest.raises(ParseError, match="line 2"):
            data.load_manifest(p)

    def test_duplicate(self, tmp_path):
        p = tmp_path / "m.txt"
        p.write_text("u1 a x.wav\nu1 b y.wav\n")
        with pytest.raises(ValidationError, match="duplicate"):
            data.load_manifest(p)

    def test_round_trip(self, tmp_path, corpus):
        p = tmp_path / "m.txt"
        data.write_manifest(corpus.manifest, p)
        m = data.load_manifest(p)
        assert [(e.id, e.speaker_id, e.path) for e in m.entries] == [
            (e.id, e.speaker_id, e.path) for e in corpus.manifest.entries
        ]


class TestTrialFile:
    @pytest.fixture
    def manifest(self, tmp_path):
        p = tmp_path / "m.txt"
        p.write_text("u1 a 1.wav\nu2 a 2.wav\nu3 b 3.wav\n")
        return data.load_manifest(p)

    def test_parse(self, tmp_path, manifest):
        p = tmp_path / "t.txt"
        p.write_text("1 u1 u2\n0 u1 u3\n")
        t = data.load_trials(p, manifest)
        assert t[0].same and not t[1].same

    def test_two_fields(self, tmp_path):
        p = tmp_path / "t.txt"
        p.write_text("1 u1 u2\n0 u1\n")
        with pytest.raises(ParseError, match="line 2"):
            data.load_trials(p)

    def test_bad_label(self, tmp_path):
        p = tmp_path / "t.txt"
        p.write_text("2 u1 u2\n")
        with pytest.raises(ParseError):
            data.load_trials(p)

    def test_unknown_id(self, tmp_path, manifest):
        p = tmp_path / "t.txt"
        p.write_text("1 u1 u9\n")
        with pytest.raises(ValidationError, match="u9"):
            data.load_trials(p, manifest)


def write_raw_wav(path, samples, channels=1, width=2, rate=16000):
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(channels)
        wf.setsampwidth(width)
        wf.setframerate(rate)
        wf.writeframes(samples)


class TestWav:
    def test_zeros(self, tmp_path):
        p = tmp_path / "z.wav"
        write_raw_wav(p, b"\x00\x00" * 100)
        w = data.read_wav(p)
        assert w.samples.shape == (100,) and not w.samples.any()

    def test_scaling(self, tmp_path):
        p = tmp_path / "h.wav"
        write_raw_wav(p, struct.pack("<3h", 16384, -32768, 32767))
        np.testing.assert_array_equal(data.read_wav(p).samples, [0.5, -1.0, 32767 / 32768])

    def test_round_trip(self, tmp_path):
        pcm = np.random.default_rng(0).integers(-32768, 32768, 1000)
        w = Waveform(pcm / 32768.0, 8000)
        p = tmp_path / "r.wav"
        data.write_wav(p, w)
        back = data.read_wav(p)
        assert back.sample_rate == 8000
        np.testing.assert_array_equal(back.samples, w.samples)

    def test_stereo_rejected(self, tmp_path):
        p = tmp_path / "s.wav"
        write_raw_wav(p, b"\x00\x00" * 8, channels=2)
        with pytest.raises(UnsupportedFormatError, match="channels"):
            data.read_wav(p)

    def test_8bit_rejected(self, tmp_path):
        p = tmp_path / "b.wav"
        write_raw_wav(p, b"\x80" * 8, width=1)
        with pytest.raises(UnsupportedFormatError, match="bits_per_sample"):
            data.read_wav(p)

    def test_float_format_rejected(self, tmp_path):
        p = tmp_path / "f.wav"
        body = struct.pack("<4sIHHIIHH", b"fmt ", 16, 3, 1, 16000, 64000, 4, 32) + struct.pack("<4sI", b"data", 4) + b"\0" * 4
        p.write_bytes(b"RIFF" + struct.pack("<I", 4 + len(body)) + b"WAVE" + body)
        with pytest.raises(UnsupportedFormatError, match="audio_format"):
            data.read_wav(p)

    def test_not_riff(self, tmp_path):
        p = tmp_path / "n.wav"
        p.write_bytes(b"garbage" * 10)
        with pytest.raises(UnsupportedFormatError, match="container"):
            data.read_wav(p)


def test_materialize_and_reload(tmp_path):
    c = data.generate_synthetic(2, 2, 3, np.random.default_rng(5))
    _, held = data.eval_split(c.utterances, 2)
    trials = data.make_trials(held, np.random.default_rng(0))
    data.materialize(c, tmp_path, trials)
    m = data.load_manifest(tmp_path / data.MANIFEST_NAME)
    nuis = data.load_nuisance_labels(tmp_path / data.NUISANCE_NAME)
    utts = data.load_utterances(m, nuis)
    assert [u.id for u in utts] == [u.id for u in c.utterances]
    assert [u.nuisance_id for u in utts] == [u.nuisance_id for u in c.utterances]
    assert all(u.spectrogram.normalized for u in utts)
    assert len(data.load_trials(tmp_path / data.TRIALS_NAME, m)) == len(trials)

"""Verification scoring, EER / detection cost, linear probes and report files."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import cyclic_pad
from .data import TrialPair, Utterance
from .errors import DegenerateInputError, ValidationError

SCORES_NAME = "scores.txt"
DET_NAME = "det.csv"
REPORT_NAME = "report.txt"


@dataclass(frozen=True)
class ScoredTrial:
    trial: TrialPair
    score: float

    def __post_init__(self):
        if not math.isfinite(self.score) or abs(self.score) > 1 + 1e-9:
            raise ValidationError(f"trial score must be finite and within [-1, 1], got {self.score}")


@dataclass
class VerificationReport:
    eer: float
    eer_threshold: float
    c_det_min: float
    c_det_at_eer: float
    det_points: list[tuple[float, float, float]]
    n_target: int
    n_nontarget: int


@dataclass
class ProbeReport:
    probe_target: str
    feature_source: str
    accuracy: float
    chance: float


# ---------------------------------------------------------------------------
# embeddings


def _segments(frames: np.ndarray, length: int) -> np.ndarray:
    """Consecutive non-overlapping windows covering every frame; the tail is cyclic-padded."""
    chunks = [frames[i : i + length] for i in range(0, frames.shape[0], length)]
    return np.stack([c if c.shape[0] == length else cyclic_pad(c, length) for c in chunks])


def embed_utterance(model, utt: Utterance, source: str = "f_p") -> np.ndarray:
    """Mean encoder output over all segments of the utterance, L2-normalized."""
    if utt.spectrogram is None:
        raise ValidationError(f"utterance {utt.id} has no spectrogram")
    encode = {"f_p": model.encode_p, "f_e": model.encode_e}[source]
    segs = _segments(utt.spectrogram.frames, model.cfg.segment_shape[0])
    v = encode(segs).data.mean(axis=0)
    norm = np.linalg.norm(v)
    if not norm > 0:
        raise DegenerateInputError(f"embedding of {utt.id} is the zero vector")
    return v / norm


def embed_all(model, utterances: list[Utterance], source: str = "f_p") -> dict[str, np.ndarray]:
    return {u.id: embed_utterance(model, u, source) for u in utterances}


def cosine_score(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b))


def score_trials(trials: list[TrialPair], embeddings: dict[str, np.ndarray]) -> list[ScoredTrial]:
    for t in trials:
        for uid in (t.utt_a, t.utt_b):
            if uid not in embeddings:
                raise ValidationError(f"trial references unknown utterance {uid!r}")
    return [ScoredTrial(t, float(np.clip(cosine_score(embeddings[t.utt_a], embeddings[t.utt_b]), -1.0, 1.0))) for t in trials]


# ---------------------------------------------------------------------------
# metrics


def _split(scored) -> tuple[np.ndarray, np.ndarray]:
    tar = np.array([s.score for s in scored if s.trial.label == 1], dtype=np.float64)
    non = np.array([s.score for s in scored if s.trial.label == 0], dtype=np.float64)
    if tar.size == 0 or non.size == 0:
        raise ValidationError(f"need target and non-target trials; got {tar.size} targets, {non.size} non-targets")
    return tar, non


def operating_points(tar: np.ndarray, non: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thresholds (distinct scores then +inf) with their miss and false-alarm rates.

    A trial is accepted when ``score >= threshold``.
    """
    thr = np.append(np.unique(np.concatenate([tar, non])), np.inf)
    p_miss = np.searchsorted(np.sort(tar), thr, side="left") / tar.size
    p_fa = (non.size - np.searchsorted(np.sort(non), thr, side="left")) / non.size
    return thr, p_fa, p_miss


def _eer_from_points(thr, p_fa, p_miss) -> tuple[float, float]:
    d = p_miss - p_fa
    i = int(np.argmax(d >= 0))  # d[-1] == 1, so a crossing exists; d[0] < 0
    if i == 0:
        return float(p_miss[0]), float(thr[0])
    d0, d1 = d[i - 1], d[i]
    alpha = -d0 / (d1 - d0)
    eer = p_miss[i - 1] + alpha * (p_miss[i] - p_miss[i - 1])
    return float(eer), float(thr[i])


def compute_eer(scored: list[ScoredTrial]) -> tuple[float, float]:
    """EER by linear interpolation between the two operating points bracketing FAR = FRR.

    The returned threshold is the first swept threshold with FRR >= FAR.
    """
    return _eer_from_points(*operating_points(*_split(scored)))


def detection_cost(p_miss, p_fa, p_tar: float = 0.01, c_miss: float = 1.0, c_fa: float = 1.0):
    return c_miss * np.asarray(p_miss) * p_tar + c_fa * np.asarray(p_fa) * (1.0 - p_tar)


def compute_cdet(scored: list[ScoredTrial], P_tar: float = 0.01, C_miss: float = 1.0, C_fa: float = 1.0):
    """Returns ``(c_det_min, c_det_at_eer, det_points)``; det points are ``(P_fa, P_miss, threshold)``."""
    thr, p_fa, p_miss = operating_points(*_split(scored))
    cost = detection_cost(p_miss, p_fa, P_tar, C_miss, C_fa)
    _, eer_thr = _eer_from_points(thr, p_fa, p_miss)
    at_eer = float(cost[int(np.searchsorted(thr, eer_thr))])
    points = [(float(a), float(b), float(t)) for a, b, t in zip(p_fa, p_miss, thr)]
    return float(cost.min()), at_eer, points


def verification_report(scored: list[ScoredTrial], P_tar: float = 0.01) -> VerificationReport:
    eer, eer_thr = compute_eer(scored)
    c_min, c_eer, points = compute_cdet(scored, P_tar)
    n_tar = sum(1 for s in scored if s.trial.label == 1)
    return VerificationReport(eer, eer_thr, c_min, c_eer, points, n_tar, len(scored) - n_tar)


# ---------------------------------------------------------------------------
# probes


def stratified_split(labels: np.ndarray, seed: int, test_fraction: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_test = int(round(idx.size * test_fraction))
        test.extend(idx[:n_test])
        train.extend(idx[n_test:])
    return np.sort(np.array(train, dtype=np.int64)), np.sort(np.array(test, dtype=np.int64))


def fit_logistic(X: np.ndarray, y: np.ndarray, n_classes: int, iterations: int = 500, lr: float = 0.1):
    """Multinomial logistic regression by full-batch gradient descent from zero weights."""
    W = np.zeros((X.shape[1], n_classes))
    b = np.zeros(n_classes)
    onehot = np.eye(n_classes)[y]
    for _ in range(iterations):
        z = X @ W + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / X.shape[0]
        W -= lr * (X.T @ g)
        b -= lr * g.sum(axis=0)
    return W, b


def linear_probe(
    features: np.ndarray,
    labels,
    split: tuple[np.ndarray, np.ndarray] | None = None,
    seed: int = 0,
    probe_target: str = "speaker",
    feature_source: str = "f_p",
) -> ProbeReport:
    """Test accuracy of a logistic-regression probe on frozen features.

    Features are used as given.  Without an explicit ``split`` a stratified
    half/half split is drawn from ``seed``.
    """
    X = np.asarray(features, dtype=np.float64)
    raw = np.asarray(labels)
    classes, y = np.unique(raw, return_inverse=True)
    if classes.size < 2:
        raise ValidationError("probe needs at least 2 classes")
    counts = np.bincount(y)
    if counts.min() < 4:
        raise ValidationError(f"class {classes[counts.argmin()]!r} has {counts.min()} samples; need >= 4")
    train, test = split if split is not None else stratified_split(y, seed)
    test_counts = np.bincount(y[test], minlength=classes.size)
    if test_counts.min() < 2:
        raise ValidationError(f"class {classes[test_counts.argmin()]!r} has fewer than 2 test samples")
    W, b = fit_logistic(X[train], y[train], classes.size)
    pred = np.argmax(X[test] @ W + b, axis=1)
    return ProbeReport(probe_target, feature_source, float(np.mean(pred == y[test])), 1.0 / classes.size)


def probe_suite(model, utterances: list[Utterance], seed: int = 0) -> list[ProbeReport]:
    """Speaker and nuisance probes on both feature sources."""
    out = []
    for source in ("f_p", "f_e"):
        X = np.stack([embed_utterance(model, u, source) for u in utterances])
        out.append(linear_probe(X, [u.speaker_id for u in utterances], seed=seed, probe_target="speaker", feature_source=source))
        if all(u.nuisance_id is not None for u in utterances):
            out.append(
                linear_probe(X, [u.nuisance_id for u in utterances], seed=seed, probe_target="nuisance", feature_source=source)
            )
    return out


# ---------------------------------------------------------------------------
# files


def emit_report(
    report: VerificationReport,
    out_dir,
    scored: list[ScoredTrial] | None = None,
    probes: list[ProbeReport] | None = None,
    title: str = "system",
) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [
        f"{'system':<20}{'EER (%)':>10}{'C_det':>10}{'C_det@EER':>12}{'targets':>10}{'non-targets':>13}",
        f"{title:<20}{100 * report.eer:>10.2f}{report.c_det_min:>10.4f}{report.c_det_at_eer:>12.4f}"
        f"{report.n_target:>10d}{report.n_nontarget:>13d}",
        f"eer_threshold {report.eer_threshold!r}",
    ]
    if probes:
        lines += ["", "probes", f"{'target':<10}{'source':<8}{'accuracy':>10}{'chance':>10}"]
        lines += [f"{p.probe_target:<10}{p.feature_source:<8}{p.accuracy:>10.4f}{p.chance:>10.4f}" for p in probes]
    (out / REPORT_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")
    with open(out / DET_NAME, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "p_fa", "p_miss"])
        for p_fa, p_miss, thr in report.det_points:
            w.writerow([repr(thr), repr(p_fa), repr(p_miss)])
    if scored is not None:
        with open(out / SCORES_NAME, "w", encoding="utf-8") as fh:
            fh.writelines(f"{s.trial.label} {s.score!r}\n" for s in scored)
    return out


def read_det_csv(path) -> list[tuple[float, float, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [(float(r["p_fa"]), float(r["p_miss"]), float(r["threshold"])) for r in rows]


def parse_report(path) -> dict:
    """Headline numbers and probe rows from ``report.txt``."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    cols = lines[1].split()
    out: dict = {
        "eer_percent": float(cols[-5]),
        "c_det_min": float(cols[-4]),
        "c_det_at_eer": float(cols[-3]),
        "n_target": int(cols[-2]),
        "n_nontarget": int(cols[-1]),
        "probes": {},
    }
    if "probes" in lines:
        for row in lines[lines.index("probes") + 2 :]:
            target, source, acc, chance = row.split()
            out["probes"][(target, source)] = (float(acc), float(chance))
    return out

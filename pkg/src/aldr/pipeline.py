"""File-level workflows: generate a corpus, train from a config, evaluate a checkpoint."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import data
from . import evaluation as ev
from .audio import segment_frames
from .checkpoint import read_checkpoint
from .config import RunConfig
from .errors import ParameterError, ValidationError
from .networks import Model, ModelConfig
from .trainer import Trainer, TrainData, model_from_checkpoint, plan_for

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "model.ckpt"
LOG_NAME = "train.log"


def generate_dataset(
    out_dir,
    n_speakers: int = 8,
    n_nuisance: int = 4,
    utts_per_speaker: int = 20,
    seed: int = 0,
    noise_level: float = 1.0,
    heldout_per_speaker: int = 5,
    force: bool = False,
) -> data.SyntheticCorpus:
    """Write WAVs, manifest, nuisance labels and a trial list over the held-out utterances.

    The last ``heldout_per_speaker`` utterances of every speaker form the trial
    set (clipped to half the speaker's utterances, at least 2).
    """
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise FileExistsError(f"{out} exists and is not empty; pass --force to overwrite")
    corpus = data.generate_synthetic(
        n_speakers, n_nuisance, utts_per_speaker, np.random.default_rng(seed), noise_level=noise_level
    )
    held_n = max(2, min(heldout_per_speaker, utts_per_speaker // 2))
    if held_n >= utts_per_speaker:
        raise ParameterError(f"need more than {held_n} utterances per speaker to hold out {held_n}")
    _, held = data.eval_split(corpus.utterances, held_n)
    trials = data.make_trials(held, np.random.default_rng([seed, 2]))
    data.materialize(corpus, out, trials)
    return corpus


@dataclass
class LoadedData:
    manifest: data.Manifest
    utterances: list[data.Utterance]
    train: list[data.Utterance]
    heldout: list[data.Utterance]
    trials: list[data.TrialPair]


def _nuisance(dir_: Path) -> dict[str, int] | None:
    path = dir_ / data.NUISANCE_NAME
    return data.load_nuisance_labels(path) if path.exists() else None


def load_dataset(data_dir, trials_path=None, normalization: str = "bin") -> LoadedData:
    """Utterances appearing in the trial list are held out of training."""
    data_dir = Path(data_dir)
    manifest = data.load_manifest(data_dir / data.MANIFEST_NAME)
    trials = data.load_trials(trials_path or data_dir / data.TRIALS_NAME, manifest)
    utts = data.load_utterances(manifest, _nuisance(data_dir), normalization)
    held_ids = {t.utt_a for t in trials} | {t.utt_b for t in trials}
    train = [u for u in utts if u.id not in held_ids]
    heldout = [u for u in utts if u.id in held_ids]
    return LoadedData(manifest, utts, train, heldout, trials)


def build_trainer(cfg: RunConfig, loaded: LoadedData, resume=None) -> Trainer:
    T = segment_frames()
    train = TrainData(loaded.train, T)
    held = TrainData(loaded.heldout, T) if loaded.heldout else None
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    log_path = cfg.out_dir / LOG_NAME
    ckpt_path = cfg.out_dir / CHECKPOINT_NAME
    if resume is not None:
        # hyperparameters come from the checkpoint; only the epoch budgets may be extended
        tr = Trainer.resume(resume, train, held, log_path, ckpt_path)
        tr.cfg = replace(tr.cfg, phase1_epochs=cfg.train.phase1_epochs, phase2_epochs=cfg.train.phase2_epochs)
        return tr
    n_bins = loaded.utterances[0].spectrogram.n_bins
    mcfg = ModelConfig(cfg.model.encoder, (T, n_bins), loaded.manifest.n_speakers, cfg.model.adv_hidden)
    model = Model(mcfg, np.random.default_rng([cfg.seed, 0]))
    log_path.write_text("", encoding="utf-8")
    extra = {**cfg.snapshot(), "eval.source": plan_for(cfg.train.ablation).embedding}
    return Trainer(model, train, cfg.train, held, log_path, ckpt_path, extra)


def train_from_config(cfg: RunConfig, resume=None) -> Trainer:
    loaded = load_dataset(cfg.data_dir, cfg.trials, cfg.normalization)
    trainer = build_trainer(cfg, loaded, resume)
    trainer.run()
    trainer.save()
    return trainer


@dataclass
class EvalResult:
    report: ev.VerificationReport
    scored: list[ev.ScoredTrial]
    probes: list[ev.ProbeReport]


def evaluate_checkpoint(checkpoint, trials_path, out_dir=None, probe: bool = False, manifest_path=None, source=None) -> EvalResult:
    ckpt = read_checkpoint(checkpoint)
    model = model_from_checkpoint(ckpt)
    trials_path = Path(trials_path)
    manifest_path = Path(manifest_path) if manifest_path else trials_path.parent / data.MANIFEST_NAME
    manifest = data.load_manifest(manifest_path)
    trials = data.load_trials(trials_path, manifest)
    scope = ckpt.config.get("data.normalization", "bin")
    source = source or ckpt.config.get("eval.source", "f_p")
    nuisance = _nuisance(manifest_path.parent)
    if probe:
        needed = manifest
    else:
        ids = {t.utt_a for t in trials} | {t.utt_b for t in trials}
        needed = data.Manifest([e for e in manifest.entries if e.id in ids], manifest.speaker_labels, manifest.root)
    utts = data.load_utterances(needed, nuisance, scope)
    if utts and utts[0].spectrogram.n_bins != model.cfg.segment_shape[1]:
        raise ValidationError(
            f"audio gives {utts[0].spectrogram.n_bins} frequency bins but the model expects {model.cfg.segment_shape[1]}"
        )
    scored = ev.score_trials(trials, ev.embed_all(model, utts, source))
    report = ev.verification_report(scored)
    probes = ev.probe_suite(model, utts, seed=int(ckpt.config.get("seed", 0))) if probe else []
    if out_dir is not None:
        title = str(ckpt.config.get("train.ablation", "model"))
        ev.emit_report(report, out_dir, scored, probes, title=title)
    return EvalResult(report, scored, probes)

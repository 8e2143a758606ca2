"""Two-phase training with gated gradient application.

Phase 1 trains the purifying encoder and speaker classifier.  Phase 2 copies
E_p into E_e and then, on every batch:

1. steps C_adv on the adversary's speaker loss (f_e detached),
2. steps E_e on the uniform-target loss (C_adv frozen),
3. jointly steps E_p, C_speaker, D_r and E_e on ``lambda_p L_p + lambda_r L_r``.

Ablations switch pieces of that step off.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses
from .audio import cyclic_pad, sample_segment
from .autodiff import Tensor
from .checkpoint import read_checkpoint, write_checkpoint
from .data import Utterance
from .errors import CheckpointError, NumericFault, ParameterError
from .networks import EncoderConfig, Model, ModelConfig, fuse

logger = logging.getLogger(__name__)

ABLATIONS = ("full", "ep_only", "ep_dr", "ee_only", "ee_no_adv_s", "ee_no_adv_e", "ep_randvec_dr")


@dataclass(frozen=True)
class AblationPlan:
    uses_e: bool
    adv_s: bool
    adv_e: bool
    decoder_slot: str | None  # "f_e", "zeros", "random" or None (no decoder)
    embedding: str  # "f_p" or "f_e"


PLANS = {
    "full": AblationPlan(True, True, True, "f_e", "f_p"),
    "ep_only": AblationPlan(False, False, False, None, "f_p"),
    "ep_dr": AblationPlan(False, False, False, "zeros", "f_p"),
    "ee_only": AblationPlan(True, True, True, "f_e", "f_e"),
    "ee_no_adv_s": AblationPlan(True, False, True, "f_e", "f_e"),
    "ee_no_adv_e": AblationPlan(True, True, False, "f_e", "f_e"),
    "ep_randvec_dr": AblationPlan(False, False, False, "random", "f_p"),
}


def plan_for(ablation: str) -> AblationPlan:
    if ablation not in PLANS:
        raise ParameterError(f"unknown ablation {ablation!r}; valid names: {', '.join(ABLATIONS)}")
    return PLANS[ablation]


@dataclass
class TrainConfig:
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_init: float = 1e-2
    lr_floor: float = 1e-6
    lr_decay: float = 0.9
    lr_cycle_epochs: int = 1
    phase1_epochs: int = 20
    phase1_accuracy_threshold: float = 0.9
    phase2_epochs: int = 20
    lambda_p: float = 1.0
    lambda_adv: float = 0.1
    lambda_r: float = 0.02
    k_adv: int = 1
    speaker_loss: str = "softmax"
    margin_m: int = 4
    lambda_cos: float = 5.0
    patience: int = 5
    seed: int = 0
    ablation: str = "full"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 < self.lr_decay < 1:
            raise ParameterError(f"lr_decay must lie in (0, 1), got {self.lr_decay}")
        if min(self.lr_init, self.lr_floor, self.weight_decay) < 0 or not 0 <= self.momentum < 1:
            raise ParameterError("learning rates and weight_decay must be >= 0 and momentum in [0, 1)")
        if min(self.lambda_p, self.lambda_adv, self.lambda_r) < 0:
            raise ParameterError("loss weights must be non-negative")
        if self.k_adv < 1 or self.lr_cycle_epochs < 1:
            raise ParameterError("k_adv and lr_cycle_epochs must be >= 1")
        if self.speaker_loss not in ("softmax", "asoftmax"):
            raise ParameterError(f"speaker_loss must be 'softmax' or 'asoftmax', got {self.speaker_loss!r}")
        plan_for(self.ablation)


def lr_schedule(epoch: int, cfg: TrainConfig | None = None) -> float:
    """``max(lr_init * decay**cycle, lr_floor)`` with one cycle per ``lr_cycle_epochs``."""
    cfg = cfg or TrainConfig()
    if epoch < 0:
        raise ParameterError(f"epoch must be >= 0, got {epoch}")
    return max(cfg.lr_init * cfg.lr_decay ** (epoch // cfg.lr_cycle_epochs), cfg.lr_floor)


class SGD:
    """Momentum SGD with L2 weight decay folded into the velocity."""

    def __init__(self, momentum: float = 0.9, weight_decay: float = 5e-4):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[int, np.ndarray] = {}

    def step(self, params, lr: float) -> None:
        params = list(params)
        for p in params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericFault(f"non-finite gradient in {p.name or 'parameter'}", component=p.name)
        for p in params:
            g = p.grad_or_zeros()
            v = self.velocity.get(id(p))
            v = g + self.weight_decay * p.data if v is None else self.momentum * v + g + self.weight_decay * p.data
            self.velocity[id(p)] = v
            p.data = p.data - lr * v
            p.grad = None


def sgd_step(group: ad.ParamGroup, lr: float, optimizer: SGD) -> None:
    optimizer.step(group.params, lr)


@dataclass
class Batch:
    indices: np.ndarray
    segments: np.ndarray
    labels: np.ndarray


class TrainData:
    """In-memory normalized spectrograms with speaker labels."""

    def __init__(self, utterances: list[Utterance], segment_frames: int):
        if not utterances:
            raise ParameterError("no utterances")
        self.ids = [u.id for u in utterances]
        self.frames = [u.spectrogram.frames for u in utterances]
        self.labels = np.array([u.speaker_id for u in utterances], dtype=np.int64)
        self.nuisance = [u.nuisance_id for u in utterances]
        self.segment_frames = segment_frames
        self.spectrograms = [u.spectrogram for u in utterances]

    def __len__(self) -> int:
        return len(self.ids)

    def batches(self, rng: np.random.Generator, batch_size: int):
        order = rng.permutation(len(self))
        for start in range(0, len(order) - batch_size + 1, batch_size):
            idx = order[start : start + batch_size]
            segs = np.stack([sample_segment(self.spectrograms[i], rng, n_frames=self.segment_frames).frames for i in idx])
            yield Batch(idx, segs, self.labels[idx])

    def first_segments(self) -> np.ndarray:
        T = self.segment_frames
        return np.stack([f[:T] if f.shape[0] >= T else cyclic_pad(f, T) for f in self.frames])


class Trainer:
    def __init__(
        self,
        model: Model,
        train: TrainData,
        cfg: TrainConfig,
        heldout: TrainData | None = None,
        log_path=None,
        checkpoint_path=None,
        extra_config: dict | None = None,
    ):
        if len(train) < cfg.batch_size:
            raise ParameterError(f"{len(train)} training utterances cannot fill one batch of {cfg.batch_size}")
        self.model = model
        self.train = train
        self.heldout = heldout
        self.cfg = cfg
        self.plan = plan_for(cfg.ablation)
        self.opt = SGD(cfg.momentum, cfg.weight_decay)
        self.rng = np.random.default_rng(cfg.seed)
        self.random_vectors = np.random.default_rng([cfg.seed, 1]).standard_normal((len(train), model.embedding_dim))
        self.log_path = Path(log_path) if log_path else None
        self.checkpoint_path = Path(checkpoint_path) if checkpoint_path else None
        self.extra_config = dict(extra_config or {})
        self.phase = 1
        self.phase_epoch = 0
        self.epoch = 0
        self.step = 0
        self.history: list[dict] = []
        self.epoch_log: list[dict] = []

    # -- losses -------------------------------------------------------------

    def speaker_loss(self, f_p: Tensor, labels) -> Tensor:
        if self.cfg.speaker_loss == "asoftmax":
            W = self.model.C_speaker.layers[0].W
            return losses.a_softmax_loss(f_p, W, labels, losses.ASoftmaxConfig(self.cfg.margin_m, self.cfg.lambda_cos))
        return losses.softmax_ce(self.model.classify_speaker(f_p), labels)

    def _groups(self, names):
        return [self.model.param_groups[n] for n in names]

    def _apply(self, loss: Tensor, groups: frozenset[str] | set[str], lr: float) -> None:
        self.model.zero_grad()
        ad.backward(loss, allowed=groups)
        for g in self._groups(sorted(groups)):
            sgd_step(g, lr, self.opt)

    def _check(self, name: str, t: Tensor) -> None:
        if not np.isfinite(t.data).all():
            raise NumericFault(f"{name} became non-finite at step {self.step}", component=name)

    # -- steps --------------------------------------------------------------

    def speaker_step(self, batch: Batch, lr: float) -> dict:
        f_p = self.model.encode_p(batch.segments)
        L_p = self.speaker_loss(f_p, batch.labels)
        self._check("L_p", L_p)
        self._apply(ad.scale(L_p, self.cfg.lambda_p), losses.ROUTES["L_p"], lr)
        return {"L_p": float(L_p.data)}

    def adversarial_step(self, batch: Batch, lr: float) -> dict:
        cfg, plan, model = self.cfg, self.plan, self.model
        S, y = batch.segments, batch.labels
        out: dict[str, float] = {}
        f_e = model.encode_e(S) if plan.uses_e else None

        if plan.adv_s:
            for i in range(cfg.k_adv):
                L_adv_s = losses.adv_classifier_loss(model.classify_adv(ad.detach(f_e)), y)
                self._check("L_adv_s", L_adv_s)
                self._apply(ad.scale(L_adv_s, cfg.lambda_adv), losses.ROUTES["L_adv_s"], lr)
                if i == 0:
                    out["L_adv_s"] = float(L_adv_s.data)
        if plan.adv_e:
            L_adv_e = losses.adv_eliminate_loss(model.classify_adv(f_e))
            self._check("L_adv_e", L_adv_e)
            self._apply(ad.scale(L_adv_e, cfg.lambda_adv), losses.ROUTES["L_adv_e"], lr)
            out["L_adv_e"] = float(L_adv_e.data)
            f_e = model.encode_e(S)

        f_p = model.encode_p(S)
        L_p = self.speaker_loss(f_p, y)
        self._check("L_p", L_p)
        out["L_p"] = float(L_p.data)
        groups = set(losses.ROUTES["L_p"])
        if plan.decoder_slot is None:
            joint = ad.scale(L_p, cfg.lambda_p)
        else:
            if plan.decoder_slot == "f_e":
                slot = f_e
            elif plan.decoder_slot == "zeros":
                slot = Tensor(np.zeros(f_p.shape))
            else:
                slot = Tensor(self.random_vectors[batch.indices])
            L_r = losses.reconstruction_loss(model.decode(fuse(f_p, slot)), S)
            self._check("L_r", L_r)
            out["L_r"] = float(L_r.data)
            routes = losses.ROUTES["L_r"] if plan.uses_e else losses.ROUTES["L_r"] - {"E_e"}
            groups |= routes
            joint = ad.weighted_sum([L_p, L_r], [cfg.lambda_p, cfg.lambda_r])
        self._apply(joint, groups, lr)
        return out

    # -- loop ---------------------------------------------------------------

    def _log_step(self, values: dict, lr: float) -> None:
        bundle = losses.total_loss(
            values.get("L_p"), values.get("L_adv_s"), values.get("L_adv_e"), values.get("L_r"),
            self.cfg.lambda_p, self.cfg.lambda_adv, self.cfg.lambda_r,
        )
        row = {"epoch": self.epoch, "step": self.step, "phase": self.phase, **bundle.values(), "lr": lr}
        self.history.append(row)
        if self.log_path is not None:
            with open(self.log_path, "a", encoding="utf-8") as fh:
                fh.write(
                    f"{row['epoch']} {row['step']} {row['L_p']:.10g} {row['L_adv_s']:.10g} {row['L_adv_e']:.10g} "
                    f"{row['L_r']:.10g} {row['L_total']:.10g} {lr:.10g}\n"
                )

    def run_epoch(self) -> None:
        lr = lr_schedule(self.epoch, self.cfg)
        step_fn = self.speaker_step if self.phase == 1 else self.adversarial_step
        for batch in self.train.batches(self.rng, self.cfg.batch_size):
            values = step_fn(batch, lr)
            self.step += 1
            self._log_step(values, lr)
        self.epoch += 1
        self.phase_epoch += 1

    def _check_progress(self) -> None:
        p = self.cfg.patience
        losses_by_epoch = [e["L_p"] for e in self.epoch_log if e["phase"] == self.phase]
        if len(losses_by_epoch) > p and min(losses_by_epoch[-p:]) >= losses_by_epoch[-p - 1]:
            warnings.warn(f"L_p has not decreased for {p} epochs (phase {self.phase}, epoch {self.epoch})", RuntimeWarning)

    def _end_epoch(self) -> dict:
        rows = [h for h in self.history if h["epoch"] == self.epoch - 1]
        entry = {
            "phase": self.phase,
            "epoch": self.epoch - 1,
            "L_p": float(np.mean([r["L_p"] for r in rows])) if rows else float("nan"),
            "heldout_accuracy": self.speaker_accuracy() if self.heldout is not None else None,
        }
        self.epoch_log.append(entry)
        logger.info("phase %d epoch %d L_p %.4f acc %s", self.phase, entry["epoch"], entry["L_p"], entry["heldout_accuracy"])
        self._check_progress()
        return entry

    def start_phase2(self) -> None:
        self.phase = 2
        self.phase_epoch = 0
        if self.plan.uses_e:
            self.model.init_e_from_p()

    def run(self) -> Model:
        """Run (or resume) phase 1 then phase 2, checkpointing after every epoch."""
        if self.phase == 1 and self.cfg.phase1_epochs == 0:
            self.start_phase2()
        while self.phase == 1:
            self.run_epoch()
            acc = self._end_epoch()["heldout_accuracy"]
            if (acc is not None and acc >= self.cfg.phase1_accuracy_threshold) or self.phase_epoch >= self.cfg.phase1_epochs:
                self.start_phase2()
            self.save()
        while self.phase_epoch < self.cfg.phase2_epochs:
            self.run_epoch()
            self._end_epoch()
            self.save()
        return self.model

    # -- evaluation helpers -------------------------------------------------

    def _accuracy(self, encode, classify, data: TrainData) -> float:
        segs = data.first_segments()
        correct = 0
        for start in range(0, len(data), 64):
            logits = classify(encode(segs[start : start + 64])).data
            correct += int((logits.argmax(axis=1) == data.labels[start : start + 64]).sum())
        return correct / len(data)

    def speaker_accuracy(self, data: TrainData | None = None) -> float:
        data = data or self.heldout
        m = self.model
        if self.cfg.speaker_loss == "asoftmax":
            W = m.C_speaker.layers[0].W.data
            classify = lambda f: Tensor(f.data @ (W / np.linalg.norm(W, axis=0)))  # noqa: E731
        else:
            classify = m.classify_speaker
        return self._accuracy(m.encode_p, classify, data)

    def adversary_accuracy(self, data: TrainData | None = None) -> float:
        data = data or self.heldout
        return self._accuracy(self.model.encode_e, self.model.classify_adv, data)

    # -- persistence --------------------------------------------------------

    def state_config(self) -> dict:
        cfg = {f"train.{k}": v for k, v in asdict(self.cfg).items()}
        cfg.update(model_config_dict(self.model.cfg))
        cfg.update(self.extra_config)
        cfg.update({
            "state.phase": self.phase,
            "state.phase_epoch": self.phase_epoch,
            "state.epoch": self.epoch,
            "state.step": self.step,
            "state.rng": self.rng.bit_generator.state,
            "state.epoch_log": self.epoch_log,
        })
        return cfg

    def state_tensors(self) -> dict[str, np.ndarray]:
        tensors = {}
        for name, p in self.model.named_parameters():
            tensors[f"param/{name}"] = p.data
            v = self.opt.velocity.get(id(p))
            if v is not None:
                tensors[f"velocity/{name}"] = v
        tensors["random_vectors"] = self.random_vectors
        return tensors

    def save(self, path=None) -> None:
        path = path or self.checkpoint_path
        if path is not None:
            write_checkpoint(path, self.state_config(), self.state_tensors())

    @classmethod
    def resume(cls, path, train: TrainData, heldout: TrainData | None = None, log_path=None, checkpoint_path=None):
        ckpt = read_checkpoint(path)
        model = model_from_checkpoint(ckpt)
        cfg = train_config_from_dict(ckpt.config)
        extra = {k: v for k, v in ckpt.config.items() if not k.startswith(("train.", "model.", "state."))}
        tr = cls(model, train, cfg, heldout, log_path, checkpoint_path, extra)
        c = ckpt.config
        tr.phase, tr.phase_epoch, tr.epoch, tr.step = c["state.phase"], c["state.phase_epoch"], c["state.epoch"], c["state.step"]
        tr.rng.bit_generator.state = c["state.rng"]
        tr.epoch_log = list(c.get("state.epoch_log", []))
        for name, p in model.named_parameters():
            key = f"velocity/{name}"
            if key in ckpt.tensors:
                tr.opt.velocity[id(p)] = ckpt.tensors[key]
        tr.random_vectors = ckpt.tensors["random_vectors"]
        return tr


def train_phase1(model: Model, data: TrainData, cfg: TrainConfig, heldout: TrainData | None = None) -> Model:
    tr = Trainer(model, data, cfg, heldout)
    while tr.phase_epoch < cfg.phase1_epochs:
        tr.run_epoch()
        entry = tr._end_epoch()
        if entry["heldout_accuracy"] is not None and entry["heldout_accuracy"] >= cfg.phase1_accuracy_threshold:
            break
    return model


def train_phase2(model: Model, data: TrainData, cfg: TrainConfig, heldout: TrainData | None = None) -> Model:
    tr = Trainer(model, data, cfg, heldout)
    tr.start_phase2()
    while tr.phase_epoch < cfg.phase2_epochs:
        tr.run_epoch()
        tr._end_epoch()
    return model


# ---------------------------------------------------------------------------
# (de)serialization of models


def model_config_dict(cfg: ModelConfig) -> dict:
    out = {f"model.encoder.{k}": v for k, v in asdict(cfg.encoder).items()}
    out["model.segment_shape"] = list(cfg.segment_shape)
    out["model.n_speakers"] = cfg.n_speakers
    out["model.adv_hidden"] = list(cfg.adv_hidden)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}


def model_config_from_dict(d: dict) -> ModelConfig:
    enc = {f.name: d[f"model.encoder.{f.name}"] for f in fields(EncoderConfig) if f"model.encoder.{f.name}" in d}
    return ModelConfig(
        encoder=EncoderConfig(**enc),
        segment_shape=tuple(d["model.segment_shape"]),
        n_speakers=int(d["model.n_speakers"]),
        adv_hidden=tuple(d["model.adv_hidden"]),
    )


def train_config_from_dict(d: dict) -> TrainConfig:
    return TrainConfig(**{f.name: d[f"train.{f.name}"] for f in fields(TrainConfig) if f"train.{f.name}" in d})


def model_from_checkpoint(ckpt) -> Model:
    try:
        model = Model(model_config_from_dict(ckpt.config), np.random.default_rng(0))
    except KeyError as exc:
        raise CheckpointError(f"checkpoint lacks model config key {exc}") from None
    for name, p in model.named_parameters():
        key = f"param/{name}"
        if key not in ckpt.tensors:
            raise CheckpointError(f"checkpoint lacks parameter {name}")
        if ckpt.tensors[key].shape != p.shape:
            raise CheckpointError(f"parameter {name} has shape {ckpt.tensors[key].shape}, expected {p.shape}")
        p.data = ckpt.tensors[key].astype(np.float64)
    return model


def save_checkpoint(model: Model, path, config: dict | None = None) -> None:
    cfg = model_config_dict(model.cfg)
    cfg.update(config or {})
    write_checkpoint(path, cfg, {f"param/{n}": p.data for n, p in model.named_parameters()})


def load_checkpoint(path) -> Model:
    return model_from_checkpoint(read_checkpoint(path))

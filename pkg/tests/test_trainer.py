import numpy as np
import pytest

from aldr import autodiff as ad
from aldr import data, losses
from aldr.autodiff import Tensor
from aldr.checkpoint import read_checkpoint, write_checkpoint
from aldr.errors import CheckpointError, NumericFault, ParameterError
from aldr.networks import EncoderConfig, Model, ModelConfig
from aldr.trainer import (
    SGD,
    Trainer,
    TrainConfig,
    TrainData,
    load_checkpoint,
    lr_schedule,
    save_checkpoint,
    train_phase1,
)

T = 298


@pytest.fixture(scope="module")
def utterances():
    corpus = data.generate_synthetic(3, 2, 6, np.random.default_rng(0), noise_level=1.0)
    return data.with_spectrograms(corpus.utterances, "utterance")


@pytest.fixture(scope="module")
def split(utterances):
    train, held = data.eval_split(utterances, 2)
    return TrainData(train, T), TrainData(held, T)


def make_model(seed=0):
    enc = EncoderConfig(kind="mlp", hidden=(12,), embedding_dim=6)
    return Model(ModelConfig(enc, (T, 201), 3, adv_hidden=(10, 10, 10)), np.random.default_rng(seed))


def make_cfg(**kw):
    base = dict(batch_size=4, phase1_epochs=1, phase2_epochs=1, lambda_r=1e-4, lambda_adv=1.0, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def snapshot(model):
    return {n: p.data.copy() for n, p in model.named_parameters()}


def changed_groups(model, before):
    out = set()
    for n, p in model.named_parameters():
        if p.data.tobytes() != before[n].tobytes():
            out.add(p.group)
    return out


def phase2_trainer(split, ablation="full", **kw):
    train, held = split
    tr = Trainer(make_model(), train, make_cfg(ablation=ablation, **kw), held)
    tr.start_phase2()
    return tr


def first_batch(tr):
    return next(tr.train.batches(np.random.default_rng(0), tr.cfg.batch_size))


class TestSGD:
    def test_hand_step(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        p.grad = np.array([1.0])
        opt = SGD(0.9, 0.0)
        opt.step([p], 0.1)
        assert p.data[0] == pytest.approx(0.9, abs=1e-15)
        assert opt.velocity[id(p)][0] == 1.0
        assert p.grad is None

    def test_decay_only(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        p.grad = np.array([0.0])
        SGD(0.9, 0.5).step([p], 0.1)
        assert p.data[0] == pytest.approx(0.95, abs=1e-15)

    def test_zero_everything_is_noop(self):
        p = Tensor(np.array([0.3, -2.0]), requires_grad=True)
        p.grad = np.zeros(2)
        SGD(0.9, 0.0).step([p], 0.1)
        np.testing.assert_array_equal(p.data, [0.3, -2.0])

    def test_momentum_accumulates(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        opt = SGD(0.9, 0.0)
        for _ in range(2):
            p.grad = np.array([1.0])
            opt.step([p], 1.0)
        assert opt.velocity[id(p)][0] == pytest.approx(1.9)
        assert p.data[0] == pytest.approx(-2.9)

    def test_nan_grad(self):
        p = Tensor(np.array([1.0]), requires_grad=True, name="w")
        p.grad = np.array([np.nan])
        with pytest.raises(NumericFault):
            SGD().step([p], 0.1)
        assert p.data[0] == 1.0


class TestSchedule:
    def test_values(self):
        assert lr_schedule(0) == pytest.approx(1e-2, abs=1e-18)
        assert lr_schedule(1) == pytest.approx(9e-3, abs=1e-15)
        assert lr_schedule(10_000) == 1e-6

    def test_cycle_length(self):
        cfg = TrainConfig(lr_cycle_epochs=3)
        assert [lr_schedule(e, cfg) for e in (0, 2, 3)] == [1e-2, 1e-2, pytest.approx(9e-3)]

    def test_negative_epoch(self):
        with pytest.raises(ParameterError):
            lr_schedule(-1)

    @pytest.mark.parametrize("kw", [{"batch_size": 0}, {"lr_decay": 1.0}, {"lambda_r": -1}, {"ablation": "nope"}, {"momentum": 1.0}])
    def test_invalid_config(self, kw):
        with pytest.raises(ParameterError):
            TrainConfig(**kw)


class TestPhaseOne:
    def test_lr_zero_leaves_parameters(self, split):
        model = make_model()
        before = snapshot(model)
        train_phase1(model, split[0], make_cfg(lr_init=0.0, lr_floor=0.0, phase1_epochs=2))
        assert not changed_groups(model, before)

    def test_only_speaker_groups_move(self, split):
        model = make_model()
        before = snapshot(model)
        train_phase1(model, split[0], make_cfg())
        assert changed_groups(model, before) == {"E_p", "C_speaker"}

    def test_deterministic(self, split):
        a, b = make_model(), make_model()
        train_phase1(a, split[0], make_cfg(phase1_epochs=2))
        train_phase1(b, split[0], make_cfg(phase1_epochs=2))
        for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
            assert p.data.tobytes() == q.data.tobytes()

    def test_learns_above_chance(self, split):
        train, held = split
        tr = Trainer(make_model(), train, make_cfg(phase1_epochs=15, phase2_epochs=0, lr_cycle_epochs=10), held)
        tr.run()
        assert tr.speaker_accuracy() > 1 / 3

    def test_batch_larger_than_data(self, split):
        with pytest.raises(ParameterError):
            Trainer(make_model(), split[0], make_cfg(batch_size=100))


class TestRouting:
    def test_full_step_footprint(self, split):
        tr = phase2_trainer(split)
        before = snapshot(tr.model)
        tr.adversarial_step(first_batch(tr), 1e-2)
        assert changed_groups(tr.model, before) == {"E_p", "C_speaker", "C_adv", "E_e", "D_r"}

    @pytest.mark.parametrize("name", ["L_adv_s", "L_adv_e"])
    def test_adversarial_losses_in_isolation(self, split, name):
        tr = phase2_trainer(split)
        S = first_batch(tr)
        f_e = tr.model.encode_e(S.segments)
        if name == "L_adv_s":
            L = losses.adv_classifier_loss(tr.model.classify_adv(ad.detach(f_e)), S.labels)
        else:
            L = losses.adv_eliminate_loss(tr.model.classify_adv(f_e))
        before = snapshot(tr.model)
        tr._apply(L, losses.ROUTES[name], 1e-2)
        assert changed_groups(tr.model, before) == losses.ROUTES[name]

    def test_adv_s_never_reaches_encoder_even_ungated(self, split):
        tr = phase2_trainer(split)
        S = first_batch(tr)
        L = losses.adv_classifier_loss(tr.model.classify_adv(ad.detach(tr.model.encode_e(S.segments))), S.labels)
        tr.model.zero_grad()
        ad.backward(L)
        assert all(p.grad is None for g in ("E_e", "E_p", "D_r", "C_speaker") for p in tr.model.param_groups[g].params)

    @pytest.mark.parametrize(
        "ablation, expected",
        [
            ("ep_only", {"E_p", "C_speaker"}),
            ("ep_dr", {"E_p", "C_speaker", "D_r"}),
            ("ep_randvec_dr", {"E_p", "C_speaker", "D_r"}),
            ("ee_no_adv_s", {"E_p", "C_speaker", "E_e", "D_r"}),
            ("ee_no_adv_e", {"E_p", "C_speaker", "C_adv", "E_e", "D_r"}),
        ],
    )
    def test_ablation_footprints(self, split, ablation, expected):
        tr = phase2_trainer(split, ablation)
        before = snapshot(tr.model)
        tr.adversarial_step(first_batch(tr), 1e-2)
        assert changed_groups(tr.model, before) == expected

    def test_no_adv_e_moves_e_only_through_reconstruction(self, split):
        tr = phase2_trainer(split, "ee_no_adv_e", lambda_r=0.0, weight_decay=0.0)
        e_before = {n: p.data.copy() for n, p in tr.model.named_parameters() if p.group == "E_e"}
        for batch in tr.train.batches(np.random.default_rng(1), 4):
            tr.adversarial_step(batch, 1e-2)
        for n, p in tr.model.named_parameters():
            if p.group == "E_e":
                assert p.data.tobytes() == e_before[n].tobytes()

    def test_randvec_never_evaluates_e(self, split, monkeypatch):
        tr = phase2_trainer(split, "ep_randvec_dr")

        def boom(_):
            raise AssertionError("E_e evaluated")

        monkeypatch.setattr(tr.model, "encode_e", boom)
        tr.run_epoch()
        assert "L_r" in tr.history[-1] and tr.history[-1]["L_adv_e"] == 0.0

    def test_random_vectors_fixed_per_utterance(self, split):
        a = phase2_trainer(split, "ep_randvec_dr")
        b = phase2_trainer(split, "ep_randvec_dr")
        np.testing.assert_array_equal(a.random_vectors, b.random_vectors)
        assert a.random_vectors.shape == (len(split[0]), 6)


class TestReductions:
    def test_ep_only_phase2_equals_phase1(self, split):
        train, held = split
        a = Trainer(make_model(), train, make_cfg(ablation="ep_only", phase1_epochs=1, phase2_epochs=2))
        a.run()
        b = Trainer(make_model(), train, make_cfg(ablation="ep_only", phase1_epochs=3, phase2_epochs=0))
        b.run()
        assert [h["L_p"] for h in a.history] == [h["L_p"] for h in b.history]
        for (_, p), (_, q) in zip(a.model.named_parameters(), b.model.named_parameters()):
            if p.group in ("E_p", "C_speaker"):
                assert p.data.tobytes() == q.data.tobytes()

    def test_zero_weights_make_full_equal_ep_only(self, split):
        train = split[0]
        runs = []
        for ablation in ("full", "ep_only"):
            tr = Trainer(make_model(), train, make_cfg(ablation=ablation, lambda_adv=0.0, lambda_r=0.0, phase2_epochs=2))
            tr.run()
            runs.append(tr)
        assert [h["L_p"] for h in runs[0].history] == [h["L_p"] for h in runs[1].history]

    def test_phase2_no_nan_and_logs_all_losses(self, split, tmp_path):
        train, held = split
        log = tmp_path / "train.log"
        tr = Trainer(make_model(), train, make_cfg(phase2_epochs=2), held, log_path=log)
        tr.run()
        rows = [line.split() for line in log.read_text().splitlines()]
        assert len(rows) == tr.step and all(len(r) == 8 for r in rows)
        assert all(np.isfinite([float(x) for x in r]).all() for r in rows)
        last = tr.history[-1]
        assert min(last["L_adv_s"], last["L_adv_e"], last["L_r"]) > 0


class TestCheckpoint:
    def test_model_round_trip_bitwise(self, tmp_path):
        m = make_model(4)
        save_checkpoint(m, tmp_path / "m.ckpt")
        back = load_checkpoint(tmp_path / "m.ckpt")
        for (n, p), (k, q) in zip(m.named_parameters(), back.named_parameters()):
            assert n == k and p.data.tobytes() == q.data.tobytes()

    def test_trainer_state_round_trip(self, split, tmp_path):
        tr = phase2_trainer(split)
        tr.run_epoch()
        tr.save(tmp_path / "t.ckpt")
        back = Trainer.resume(tmp_path / "t.ckpt", split[0], split[1])
        assert (back.phase, back.epoch, back.step) == (tr.phase, tr.epoch, tr.step)
        for (n, p), (_, q) in zip(tr.model.named_parameters(), back.model.named_parameters()):
            assert p.data.tobytes() == q.data.tobytes()
            assert tr.opt.velocity[id(p)].tobytes() == back.opt.velocity[id(q)].tobytes()

    def test_version_mismatch(self, tmp_path):
        p = tmp_path / "m.ckpt"
        save_checkpoint(make_model(), p)
        raw = bytearray(p.read_bytes())
        raw[8:12] = (99).to_bytes(4, "little")
        p.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(p)

    @pytest.mark.parametrize("keep", [0, 5, 20, 200, -1])
    def test_truncated(self, tmp_path, keep):
        p = tmp_path / "m.ckpt"
        save_checkpoint(make_model(), p)
        raw = p.read_bytes()
        p.write_bytes(raw[:keep])
        with pytest.raises(CheckpointError):
            load_checkpoint(p)

    def test_missing_parameter(self, tmp_path):
        p = tmp_path / "m.ckpt"
        save_checkpoint(make_model(), p)
        ck = read_checkpoint(p)
        tensors = {k: v for k, v in ck.tensors.items() if not k.endswith("E_p.fc0.W")}
        assert len(tensors) < len(ck.tensors)
        write_checkpoint(p, ck.config, tensors)
        with pytest.raises(CheckpointError):
            load_checkpoint(p)

    def test_resume_replays_trajectory(self, split, tmp_path):
        train, held = split
        cfg = make_cfg(phase1_epochs=2, phase2_epochs=3)
        full = Trainer(make_model(), train, cfg, held)
        full.run()

        first = Trainer(make_model(), train, make_cfg(phase1_epochs=2, phase2_epochs=1), held)
        first.run()
        first.save(tmp_path / "mid.ckpt")
        resumed = Trainer.resume(tmp_path / "mid.ckpt", train, held)
        resumed.cfg = cfg
        resumed.run()
        tail = full.history[first.step :]
        assert len(tail) == len(resumed.history) > 0
        assert tail == resumed.history

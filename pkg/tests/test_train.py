from dataclasses import replace

import numpy as np
import pytest

from jazzvae import tensor as T
from jazzvae.corpus import Corpus, sample_ratio, synth_corpus, to_pianoroll
from jazzvae.model import JAZZ, OTHER, ModelConfig, RecurrentVAE
from jazzvae.train import (
    NumericalError, Regime, TrainConfig, TrainLog, classify, generate, lr_schedule_finetune, phrases_to_frames,
    run_stage, train_baseline, train_classifier, train_finetune, train_multitask,
)

TINY = ModelConfig(d_hidden=4, dense=(8,), d_z=3)


def cfg(**kw):
    base = dict(regime="baseline-target", R=None, epochs=2, finetune_epochs=2, batch_size=4, model=TINY)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def corpora():
    return synth_corpus("c-drone", 6, seed=0, test_fraction=0), synth_corpus("db-drone", 20, seed=1, test_fraction=0)


def test_schedule_exhaustive():
    for t in range(201):
        expected = 1e-5 if t < 40 else (1e-7 if t < 80 else 1e-9)
        assert lr_schedule_finetune(t) == expected
    assert (lr_schedule_finetune(39), lr_schedule_finetune(40), lr_schedule_finetune(80)) == (1e-5, 1e-7, 1e-9)
    with pytest.raises(ValueError):
        lr_schedule_finetune(-1)


def test_config_validation():
    with pytest.raises(ValueError, match="ratio"):
        TrainConfig(regime="finetune", R=None)
    with pytest.raises(ValueError):
        TrainConfig(regime="baseline-source", R=None, lr=0)
    assert Regime("multitask").uses_source_ratio and not Regime("baseline-source").uses_source_ratio
    c = TrainConfig(regime="finetune", R=2, model={"d_z": 5})
    assert c.model.d_z == 5 and c.to_dict()["regime"] == "finetune"


def test_frames():
    ps = synth_corpus("major", 3, seed=0).phrases
    x = phrases_to_frames(ps)
    assert x.shape == (3, 64, 48) and x.dtype == np.float64
    assert np.array_equal(x[1].reshape(4, 16, 48), to_pianoroll(ps[1]))


class TestBaseline:
    def test_deterministic(self, corpora, tmp_path):
        target, _ = corpora
        a = train_baseline(cfg(), target, tmp_path / "a")
        b = train_baseline(cfg(), target, tmp_path / "b")
        assert a.log.to_csv(wall_time=False) == b.log.to_csv(wall_time=False)
        assert (tmp_path / "a/model-stage1.ckpt").read_bytes() == (tmp_path / "b/model-stage1.ckpt").read_bytes()

    def test_log_shape(self, corpora):
        res = train_baseline(cfg(epochs=3), corpora[0])
        assert [r.epoch for r in res.log.records] == [0, 1, 2]
        assert all(r.lr == 1e-3 and r.l_genre is None for r in res.log.records)
        assert all(np.isfinite([r.l_recon, r.l_lat]).all() for r in res.log.records)
        header = res.log.to_csv().splitlines()[0]
        assert header == "epoch,stage,lr,l_recon,l_lat,l_genre,seconds"

    def test_empty_corpus(self):
        with pytest.raises(ValueError, match="empty"):
            train_baseline(cfg(), Corpus([]))

    def test_periodic_checkpoints(self, corpora, tmp_path):
        train_baseline(cfg(epochs=4, checkpoint_every=2), corpora[0], tmp_path)
        names = sorted(p.name for p in tmp_path.iterdir())
        assert names == ["model-stage1-epoch0002.ckpt", "model-stage1.ckpt"]
        arrays, meta = T.load_checkpoint(tmp_path / "model-stage1.ckpt")
        assert meta["stage"] == 1 and meta["train"]["model"]["d_z"] == 3

    def test_non_finite_loss(self, corpora):
        old = T.set_finite_check(False)
        try:
            c = cfg()
            model = RecurrentVAE(replace(TINY, seed=c.init_seed))
            model.decoder.out.b.data[0] = np.nan
            with pytest.raises(NumericalError):
                run_stage(model, phrases_to_frames(corpora[0].phrases), c, 1, 1, lambda t: 1e-3,
                          T.AdamState(), TrainLog())
        finally:
            T.set_finite_check(old)


class TestFinetune:
    def test_two_stages(self, corpora):
        target, source = corpora
        c = cfg(regime="finetune", R=2)
        res = train_finetune(c, source, target)
        s1, s2 = res.log.stage(1), res.log.stage(2)
        assert len(s1) == 2 and len(s2) == 2
        assert s2[0].lr == 1e-5 and s2[0].epoch == 0
        assert len(res.train_corpus) == 12
        delta = sum(np.abs(res.stage_checkpoints[2][k] - res.stage_checkpoints[1][k]).sum()
                    for k in res.stage_checkpoints[1])
        assert delta > 0

    def test_stage_one_is_source_baseline(self, corpora):
        target, source = corpora
        c = cfg(regime="finetune", R=2)
        res = train_finetune(c, source, target)
        sampled = sample_ratio(source, target, 2, c.sample_seed)
        base = train_baseline(replace(c, regime=Regime.BASELINE_SOURCE, R=None), sampled)
        for k, v in base.stage_checkpoints[1].items():
            assert np.array_equal(v, res.stage_checkpoints[1][k])

    def test_reset_adam_changes_stage_two(self, corpora):
        target, source = corpora
        a = train_finetune(cfg(regime="finetune", R=1), source, target)
        b = train_finetune(cfg(regime="finetune", R=1, reset_adam=True), source, target)
        assert any(not np.array_equal(a.stage_checkpoints[2][k], b.stage_checkpoints[2][k])
                   for k in a.stage_checkpoints[2])


class TestMultitask:
    @pytest.fixture(scope="class")
    @staticmethod
    def classifier(corpora):
        target, source = corpora
        return train_classifier(source, target, epochs=1, seed=0, model_cfg=TINY).classifier

    def test_genre_logged_and_classifier_frozen(self, corpora, classifier):
        target, source = corpora
        before = {k: v.tobytes() for k, v in classifier.arrays().items()}
        res = train_multitask(cfg(regime="multitask", R=1), source, target, classifier)
        assert all(r.l_genre is not None and r.l_genre > 0 for r in res.log.records)
        assert {k: v.tobytes() for k, v in classifier.arrays().items()} == before
        genres = {p.genre.value for p in res.train_corpus}
        assert genres == {"jazz", "other"}

    def test_lambda_zero_matches_conditioned_elbo(self, corpora, classifier):
        target, source = corpora
        c = cfg(regime="multitask", R=1, model=replace(TINY, lambda_genre=0.0))
        res = train_multitask(c, source, target, classifier)
        sampled = sample_ratio(source, target, 1, c.sample_seed).phrases
        x = phrases_to_frames(sampled + target.train().phrases)
        y = np.vstack([np.tile(OTHER, (len(sampled), 1)), np.tile(JAZZ, (len(target), 1))])
        model = RecurrentVAE(replace(c.model, seed=c.init_seed, multitask=True))
        log = TrainLog()
        run_stage(model, x, c, 1, c.epochs, lambda t: c.lr, T.AdamState(lr=c.lr), log, y=y)
        assert [r.l_recon for r in log.records] == [r.l_recon for r in res.log.records]
        assert [r.l_lat for r in log.records] == [r.l_lat for r in res.log.records]


class TestClassifier:
    def test_accuracy_and_determinism(self, corpora):
        target, source = corpora
        a = train_classifier(source, target, epochs=2, seed=4, model_cfg=TINY)
        b = train_classifier(source, target, epochs=2, seed=4, model_cfg=TINY)
        assert 0 <= a.accuracy <= 1
        assert a.losses == b.losses
        probs = classify(a.classifier, phrases_to_frames(target.phrases))
        assert probs.shape == (6,) and ((probs > 0) & (probs < 1)).all()

    def test_empty(self, corpora):
        with pytest.raises(ValueError):
            train_classifier(Corpus([]), corpora[0], epochs=1, seed=0, model_cfg=TINY)


class TestGenerate:
    def test_count_and_determinism(self):
        m = RecurrentVAE(replace(TINY, seed=2))
        a, b = generate(m, 10, seed=5), generate(m, 10, seed=5)
        assert len(a) == 10 and a.phrases == b.phrases
        assert all(p.notes == tuple(sorted(p.notes)) for p in a)

    def test_confident_decoder_produces_notes(self):
        m = RecurrentVAE(replace(TINY, seed=2))
        m.decoder.out.b.data[12] = 50.0
        g = generate(m, 3, seed=0)
        assert all(len(p.notes) == 1 and p.notes[0].pitch == 60 and p.notes[0].duration == 64 for p in g)

    def test_label_contract(self):
        with pytest.raises(ValueError):
            generate(RecurrentVAE(TINY), 2, seed=0, y=JAZZ)
        mt = RecurrentVAE(replace(TINY, multitask=True))
        assert {p.genre.value for p in generate(mt, 2, seed=0, y=OTHER)} == {"other"}
        with pytest.raises(ValueError):
            generate(mt, 0, seed=0, y=JAZZ)

"""Estimator API: sklearn conventions, validation helpers, fit/predict."""

import numpy as np
import pytest
from sklearn.base import clone

from sparsemodal.estimator import MultimodalEmotionClassifier, validate_samples
from sparsemodal.signal import GeneratorConfig, ModalitySample, synth_sample

GEN = GeneratorConfig(frame_size=8, frames_range=(2, 2),
                      audio_seconds=(0.40, 0.41), text_len=(4, 6))


def samples(n, seed0=0):
    return [synth_sample(i % 6, seed=seed0 + i, gen=GEN) for i in range(n)]


def small_estimator(**kwargs):
    base = dict(d_model=16, heads=2, layers=1, n_blocks=2, attn_width=4,
                stem_channels=2, max_text_len=16, max_seq_len=8,
                learning_rate=1e-3, batch_size=6, epochs=2, seed=0)
    base.update(kwargs)
    return MultimodalEmotionClassifier(**base)


class TestSklearnConventions:
    def test_get_set_params_roundtrip(self):
        est = small_estimator(mode="MESM", top_p=0.4)
        params = est.get_params()
        assert params["top_p"] == 0.4
        est.set_params(top_p=0.9)
        assert est.top_p == 0.9

    def test_clone(self):
        est = small_estimator(mode="MESM", top_p=0.3)
        dup = clone(est)
        assert dup.get_params() == est.get_params()

    def test_unfitted_predict_raises(self):
        with pytest.raises(RuntimeError, match="not fitted"):
            small_estimator().predict(samples(2))


class TestValidation:
    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            validate_samples([])

    def test_wrong_type_rejected(self):
        with pytest.raises(TypeError):
            validate_samples([np.zeros(3)])

    def test_inconsistent_extents_rejected(self):
        bad = samples(2)
        other = synth_sample(0, seed=0)  # 16x16 frames
        with pytest.raises(ValueError, match="frame extents"):
            validate_samples([bad[0], other])

    def test_label_width_mismatch_rejected(self):
        s = samples(1)[0]
        short = ModalitySample(s.tokens, s.audio_chunks, s.frames,
                               np.array([1.0, 0.0]))
        with pytest.raises(ValueError, match="labels"):
            validate_samples([s, short])

    def test_bad_y_shape_rejected(self):
        est = small_estimator()
        with pytest.raises(ValueError, match="n_samples"):
            est.fit(samples(4), y=np.zeros(4))


class TestFitPredict:
    def test_fit_sets_attributes_and_predicts(self):
        est = small_estimator()
        train = samples(12)
        est.fit(train, X_valid=samples(6, seed0=100))
        assert len(est.classes_) == 6
        assert len(est.history_) == 2
        proba = est.predict_proba(train[:3])
        assert proba.shape == (3, 6)
        assert np.all((proba > 0) & (proba < 1))
        pred = est.predict(train[:3])
        assert set(np.unique(pred)) <= {0, 1}

    def test_score_is_mean_weighted_accuracy(self):
        est = small_estimator()
        train = samples(12)
        est.fit(train)
        score = est.score(train)
        assert 0.0 <= score <= 1.0

    def test_labels_from_y_override(self):
        est = small_estimator()
        train = samples(12)
        y = np.zeros((12, 6))
        y[:, 0] = 1.0
        with pytest.warns(UserWarning):  # five classes lose all positives
            est.fit(train, y=y)
        assert est.pos_weight_[0] == pytest.approx(0.0)

    def test_evaluate_reports_flops(self):
        est = small_estimator(mode="MESM", top_p=0.5)
        train = samples(12)
        est.fit(train)
        stats = est.evaluate(train[:6])
        assert 0.0 < stats["block_fraction"] <= 1.0
        assert stats["flops"]["total_executed"] <= stats["flops"]["total_dense"]
        assert "mean_wacc" in stats

    def test_mesm_seed_matches_fe2e_at_full_selection(self):
        train = samples(12)
        dense = small_estimator(mode="FE2E", seed=4, epochs=1).fit(train)
        sparse = small_estimator(mode="MESM", top_p=1.0, seed=4,
                                 epochs=1).fit(train)
        a = dense.predict_proba(train[:4])
        b = sparse.predict_proba(train[:4])
        np.testing.assert_allclose(a, b, atol=1e-6)

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jazzvae import tensor as T
from jazzvae.gradcheck import check_gradients, reduced_config
from jazzvae.model import (
    BCE_UNIFORM, JAZZ, OTHER, GenreClassifier, ModelConfig, RecurrentVAE, classifier_forward, decode, elbo_loss,
    encode, forward_loss, genre_label, genre_loss, kld_value, multitask_loss, reparameterize,
)


def small(**kw):
    return ModelConfig(**{"n_frames": 8, "d_hidden": 6, "dense": (12,), "d_z": 3, **kw})


def batch(cfg, n=2, seed=0):
    return (np.random.default_rng(seed).random((n, cfg.n_frames, cfg.n_pitches)) < 0.1).astype(float)


class TestClosedForm:
    def test_kld_zero(self):
        _, _, kld = elbo_loss(np.zeros((1, 64, 48)), T.Tensor(np.full((1, 64, 48), 0.5)),
                              T.Tensor(np.zeros((1, 32))), T.Tensor(np.zeros((1, 32))))
        assert kld.item() == 0.0

    @pytest.mark.parametrize("seed", [0, 1])
    def test_bce_uniform(self, seed):
        x = (np.random.default_rng(seed).random((1, 64, 48)) < 0.5).astype(float)
        _, recon, _ = elbo_loss(x, T.Tensor(np.full((1, 64, 48), 0.5)), T.Tensor(np.zeros((1, 4))),
                                T.Tensor(np.zeros((1, 4))))
        assert abs(recon.item() - 3072 * math.log(2)) <= 1e-9
        assert BCE_UNIFORM == pytest.approx(2129.35, abs=5e-3)

    def test_kld_unit_mean(self):
        _, _, kld = elbo_loss(np.zeros((1, 1, 1)), T.Tensor(np.full((1, 1, 1), 0.5)),
                              T.Tensor([[1.0]]), T.Tensor([[0.0]]))
        assert kld.item() == 0.5

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=1, max_size=6), st.lists(st.floats(-5, 5), min_size=6, max_size=6))
    def test_kld_non_negative(self, mu, lv):
        mu = np.asarray(mu)
        lv = np.asarray(lv[:len(mu)])
        assert kld_value(mu, lv) >= 0
        assert kld_value(np.zeros(3), np.zeros(3)) == 0

    def test_recon_range_checked(self):
        with pytest.raises(ValueError):
            elbo_loss(np.zeros((1, 2, 2)), T.Tensor(np.full((1, 2, 2), 1.5)), T.Tensor([[0.0]]), T.Tensor([[0.0]]))

    def test_genre_term(self):
        assert genre_loss(T.Tensor([0.5]), JAZZ).item() == pytest.approx(math.log(2), abs=1e-15)
        assert genre_loss(T.Tensor([1 - 1e-12]), JAZZ).item() == pytest.approx(0, abs=1e-11)
        assert genre_loss(T.Tensor([0.25]), OTHER).item() == pytest.approx(-math.log(0.75), abs=1e-15)

    def test_lambda_zero_reduces_to_elbo(self):
        x = np.zeros((1, 2, 2))
        rec = T.Tensor(np.full((1, 2, 2), 0.3))
        mu, lv = T.Tensor([[0.2]]), T.Tensor([[0.1]])
        total, *_ = multitask_loss(x, JAZZ, rec, mu, lv, T.Tensor([0.1]), lambda_genre=0.0)
        assert total.item() == elbo_loss(x, rec, mu, lv)[0].item()


def test_labels():
    assert np.array_equal(genre_label([True, False]), [[0, 1], [1, 0]])
    assert genre_label(True).sum() == 1


class TestShapes:
    def test_encode_shapes_and_finite(self):
        cfg = small()
        m = RecurrentVAE(cfg)
        mu, lv = encode(m, np.ones((1, 8, 48)))
        assert mu.shape == (1, 3) and lv.shape == (1, 3)
        assert np.isfinite(mu.data).all() and np.isfinite(lv.data).all()
        assert np.array_equal(encode(m, np.ones((1, 8, 48)))[0].data, mu.data)

    def test_full_size_decode(self):
        m = RecurrentVAE(ModelConfig(d_hidden=8, dense=(16,), d_z=4))
        out = decode(m, np.zeros(4)).data
        assert out.reshape(4, 16, 48).shape == (4, 16, 48)
        assert ((out > 0) & (out < 1)).all()

    def test_decode_pure_and_smooth(self):
        m = RecurrentVAE(small())
        z = np.random.default_rng(0).standard_normal((1, 3))
        a, b = decode(m, z).data, decode(m, z).data
        assert np.array_equal(a, b)
        c = decode(m, z + 1e-6).data
        assert 0 < np.abs(c - a).max() < 1e-4

    def test_label_contract(self):
        with pytest.raises(ValueError):
            decode(RecurrentVAE(small()), np.zeros(3), JAZZ)
        with pytest.raises(ValueError):
            decode(RecurrentVAE(small(multitask=True)), np.zeros(3))
        assert decode(RecurrentVAE(small(multitask=True)), np.zeros(3), JAZZ).shape == (1, 8, 48)

    def test_latent_dim_checked(self):
        with pytest.raises(T.ShapeError):
            decode(RecurrentVAE(small()), np.zeros(5))

    def test_classifier_range(self):
        clf = GenreClassifier(small())
        y = classifier_forward(clf, np.random.default_rng(0).random((3, 8, 48))).data
        assert y.shape == (3,) and ((y > 0) & (y < 1)).all()

    def test_parameter_names(self):
        names = RecurrentVAE(small()).parameters()
        assert all(k.startswith(("enc.", "dec.")) for k in names)
        assert "enc.mu.W" in names and "enc.log_var.W" in names


class TestReparameterize:
    def test_sigma_zero(self):
        mu = T.Tensor(np.array([[0.3, -1.2]]))
        z = reparameterize(mu, T.Tensor(np.full((1, 2), -60.0)), np.random.default_rng(0))
        assert np.allclose(z.data, mu.data, rtol=0, atol=1e-12)

    def test_eps_zero(self):
        mu = T.Tensor(np.array([[0.3, -1.2]]))
        z = reparameterize(mu, T.Tensor(np.ones((1, 2))), np.zeros((1, 2)))
        assert np.array_equal(z.data, mu.data)

    def test_monte_carlo_mean(self):
        n = 100_000
        mu = T.Tensor(np.full((n, 1), 0.7))
        sigma = math.exp(0.5 * 0.4)
        z = reparameterize(mu, T.Tensor(np.full((n, 1), 0.4)), np.random.default_rng(3))
        assert abs(z.data.mean() - 0.7) < 3 * sigma / math.sqrt(n)

    def test_gradients_flow_to_mu_and_log_var(self):
        mu, lv = T.Tensor(np.zeros((1, 2)), True), T.Tensor(np.zeros((1, 2)), True)
        eps = np.array([[1.0, -2.0]])
        T.backward(T.sum(reparameterize(mu, lv, eps)))
        assert np.array_equal(mu.grad, [[1, 1]])
        assert np.allclose(lv.grad, 0.5 * eps)


class TestGradients:
    @pytest.mark.parametrize("multitask", [False, True])
    def test_sampled_entries(self, multitask):
        cfg = reduced_config(multitask, seed=5)
        model = RecurrentVAE(cfg)
        x = batch(cfg, seed=1)
        eps = np.random.default_rng(2).standard_normal((2, cfg.d_z))
        if multitask:
            clf = GenreClassifier(reduced_config(False, 6))
            clf.freeze()
            y = genre_label([True, False])

            def loss():
                return forward_loss(model, x, eps, y=y, classifier=clf).total
        else:
            def loss():
                return forward_loss(model, x, eps).total
        reports = check_gradients(loss, model.parameters(), max_entries=6, rng=np.random.default_rng(0))
        worst = max(reports, key=lambda r: r.max_rel_error)
        assert worst.max_rel_error < 1e-3, worst

    def test_classifier_input_gradient(self):
        clf = GenreClassifier(small(seed=2))
        clf.freeze()
        x = T.Tensor(np.random.default_rng(0).random((1, 8, 48)), requires_grad=True)
        w = np.array([1.0])
        reports = check_gradients(lambda: T.sum(T.mul(classifier_forward(clf, x), w)), {"x": x},
                                  max_entries=40, rng=np.random.default_rng(1))
        assert reports[0].max_rel_error < 1e-4

    def test_frozen_classifier_untouched(self):
        cfg = small(multitask=True)
        model, clf = RecurrentVAE(cfg), GenreClassifier(small(seed=9))
        clf.freeze()
        before = {k: v.tobytes() for k, v in clf.arrays().items()}
        out = forward_loss(model, batch(cfg), np.random.default_rng(0), y=genre_label([True, False]), classifier=clf)
        T.backward(out.total)
        grads = {k: t.grad for k, t in model.parameters().items()}
        T.adam_step({k: t.data for k, t in model.parameters().items()}, grads, T.AdamState())
        assert {k: v.tobytes() for k, v in clf.arrays().items()} == before
        assert all(t.grad is None for t in clf.parameters().values())
        assert out.genre is not None and out.genre.item() > 0

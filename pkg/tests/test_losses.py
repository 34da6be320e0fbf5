import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from agemorph.losses import (
    LossWeights,
    NonFiniteLossError,
    adv_d_loss,
    adv_g_loss,
    cycle_loss,
    feature_cosine,
    identity_loss,
    rec_loss,
    rec_weight,
    total_generator_loss,
)


def numeric_grad(fn, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Central finite differences, element by element."""
    grad = torch.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in range(flat_x.numel()):
        xp = x.clone()
        xp.reshape(-1)[i] += eps
        xm = x.clone()
        xm.reshape(-1)[i] -= eps
        flat_g[i] = (float(fn(xp)) - float(fn(xm))) / (2 * eps)
    return grad


def autograd_grad(fn, x: torch.Tensor) -> torch.Tensor:
    x = x.clone().requires_grad_(True)
    fn(x).backward()
    return x.grad.clone()


def check_grad(fn, x: torch.Tensor):
    x = x.double()
    np.testing.assert_allclose(
        autograd_grad(fn, x).numpy(), numeric_grad(fn, x).numpy(), rtol=1e-4, atol=1e-7
    )


class TestFeatureCosine:
    def test_identical_is_one(self):
        v = torch.tensor([[1.0, 2.0, 3.0]])
        assert float(feature_cosine(v, v)) == pytest.approx(1.0)

    def test_opposite_is_minus_one(self):
        v = torch.tensor([[1.0, -2.0, 0.5]])
        assert float(feature_cosine(v, -v)) == pytest.approx(-1.0)

    def test_orthogonal_is_zero(self):
        a = torch.tensor([[1.0, 0.0]])
        b = torch.tensor([[0.0, 3.0]])
        assert float(feature_cosine(a, b)) == pytest.approx(0.0, abs=1e-7)

    def test_levels_average(self):
        v = torch.tensor([[1.0, 1.0]])
        got = feature_cosine([v, v], [v, -v])
        assert float(got) == pytest.approx(0.0, abs=1e-7)

    def test_batch_average(self):
        a = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
        b = torch.tensor([[1.0, 0.0], [0.0, -1.0]])
        assert float(feature_cosine(a, b)) == pytest.approx(0.0, abs=1e-7)

    def test_spatial_features_flatten(self):
        a = torch.ones(2, 3, 4, 4)
        assert float(feature_cosine(a, a * 2)) == pytest.approx(1.0)

    def test_zero_vector_safe(self):
        a = torch.zeros(1, 4)
        b = torch.ones(1, 4)
        assert float(feature_cosine(a, b)) == 0.0

    def test_one_d_vectors(self):
        v = torch.tensor([1.0, 2.0])
        assert float(feature_cosine(v, v)) == pytest.approx(1.0)

    def test_mismatches_raise(self):
        v = torch.ones(1, 4)
        with pytest.raises(ValueError):
            feature_cosine([v], [v, v])
        with pytest.raises(ValueError):
            feature_cosine(v, torch.ones(1, 5))

    def test_gradient(self, rng):
        b = torch.from_numpy(rng.standard_normal((2, 6)))
        a = torch.from_numpy(rng.standard_normal((2, 6)))
        check_grad(lambda x: feature_cosine(x, b), a)


class TestIdentityLoss:
    def test_perfect_reconstruction_orthogonal_age(self):
        f = torch.tensor([[1.0, 0.0, 0.0]])
        g = torch.tensor([[0.0, 1.0, 0.0]])
        assert float(identity_loss(f, f, g)) == pytest.approx(-1.0, abs=1e-7)

    def test_closed_form(self):
        f_iden = torch.tensor([[3.0, 4.0]])
        f_hat = torch.tensor([[4.0, 3.0]])
        f_age = torch.tensor([[0.0, 2.0]])
        expected = -(24.0 / 25.0) + abs(8.0 / (5.0 * 2.0))
        assert float(identity_loss(f_iden, f_hat, f_age)) == pytest.approx(expected)

    def test_orthogonality_penalises_both_signs(self):
        f = torch.tensor([[1.0, 0.0]])
        pos = identity_loss(f, f, torch.tensor([[1.0, 0.0]]), include_similarity=False)
        neg = identity_loss(f, f, torch.tensor([[-1.0, 0.0]]), include_similarity=False)
        assert float(pos) == pytest.approx(1.0)
        assert float(neg) == pytest.approx(1.0)

    def test_needs_a_term(self):
        f = torch.ones(1, 3)
        with pytest.raises(ValueError):
            identity_loss(f, f, f, include_similarity=False, include_orthogonality=False)

    def test_source_detached_in_similarity(self, rng):
        f_iden = torch.from_numpy(rng.standard_normal((2, 5))).requires_grad_(True)
        f_hat = torch.from_numpy(rng.standard_normal((2, 5))).requires_grad_(True)
        f_age = torch.from_numpy(rng.standard_normal((2, 5)))
        loss = identity_loss(f_iden, f_hat, f_age, include_orthogonality=False)
        loss.backward()
        assert f_iden.grad is None
        assert f_hat.grad is not None
        assert f_hat.grad.abs().sum() > 0

    def test_source_gradient_comes_only_from_orthogonality(self, rng):
        f_iden = torch.from_numpy(rng.standard_normal((2, 5))).requires_grad_(True)
        f_hat = torch.from_numpy(rng.standard_normal((2, 5)))
        f_age = torch.from_numpy(rng.standard_normal((2, 5)))
        identity_loss(f_iden, f_hat, f_age).backward()

        other = f_iden.detach().clone().requires_grad_(True)
        identity_loss(other, f_hat, f_age, include_similarity=False).backward()
        torch.testing.assert_close(f_iden.grad, other.grad)

    def test_gradient_wrt_reconstruction(self, rng):
        f_iden = torch.from_numpy(rng.standard_normal((2, 5)))
        f_age = torch.from_numpy(rng.standard_normal((2, 5)))
        check_grad(
            lambda x: identity_loss(f_iden, x, f_age),
            torch.from_numpy(rng.standard_normal((2, 5))),
        )


class TestCycleLoss:
    def test_zero_for_identical(self):
        x = torch.rand(2, 1, 4, 4)
        assert float(cycle_loss(x, x)) == 0.0

    def test_closed_form(self):
        x = torch.zeros(1, 4)
        y = torch.tensor([[1.0, -1.0, 2.0, 0.0]])
        assert float(cycle_loss(x, y)) == pytest.approx(1.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            cycle_loss(torch.zeros(1, 4), torch.zeros(1, 5))

    def test_gradient(self, rng):
        x = torch.from_numpy(rng.standard_normal((2, 6)))
        check_grad(lambda y: cycle_loss(x, y), torch.from_numpy(rng.random((2, 6)) + 2.0))


class TestRecWeight:
    def test_zero_gap_is_one(self):
        assert rec_weight(60, 60) == pytest.approx(1.0)

    def test_extreme_gap_frozen_value(self):
        assert rec_weight(48, 80) == pytest.approx(0.0022640387134577056, abs=1e-15)

    def test_symmetric(self):
        assert rec_weight(50, 70) == pytest.approx(rec_weight(70, 50))

    def test_tensor_path_matches_float_path(self):
        t = rec_weight(torch.tensor([50.0, 61.0]), torch.tensor([70.0, 48.0]))
        assert float(t[0]) == pytest.approx(rec_weight(50, 70))
        assert float(t[1]) == pytest.approx(rec_weight(61, 48))

    def test_beta_zero_is_flat(self):
        assert rec_weight(48, 80, beta=0.0) == pytest.approx(1.0)

    @given(
        gap1=st.floats(min_value=0.0, max_value=33.0),
        gap2=st.floats(min_value=0.0, max_value=33.0),
    )
    @settings(max_examples=100, deadline=None)
    def test_monotone_in_gap(self, gap1, gap2):
        lo, hi = sorted((gap1, gap2))
        w_lo = rec_weight(48.0, 48.0 + lo)
        w_hi = rec_weight(48.0, 48.0 + hi)
        assert w_lo >= w_hi - 1e-12
        assert 0.0 - 1e-12 <= w_hi <= 1.0 + 1e-12


class TestRecLoss:
    def test_same_age_is_plain_mse(self):
        x = torch.zeros(2, 1, 2, 2)
        y = torch.ones(2, 1, 2, 2)
        assert float(rec_loss(x, y, [50.0, 60.0], [50.0, 60.0])) == pytest.approx(1.0)

    def test_per_sample_weighting(self):
        x = torch.zeros(2, 1, 2, 2)
        y = torch.ones(2, 1, 2, 2) * 2.0
        ages_s = [48.0, 48.0]
        ages_t = [48.0, 80.0]
        expected = (4.0 * 1.0 + 4.0 * rec_weight(48, 80)) / 2.0
        got = rec_loss(x, y, ages_s, ages_t)
        assert float(got) == pytest.approx(expected, rel=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            rec_loss(torch.zeros(1, 2), torch.zeros(1, 3), [50.0], [50.0])

    def test_gradient(self, rng):
        x = torch.from_numpy(rng.random((2, 1, 3, 3)))
        check_grad(
            lambda y: rec_loss(x, y, [50.0, 55.0], [70.0, 52.0]),
            torch.from_numpy(rng.random((2, 1, 3, 3))),
        )


class TestAdversarial:
    def test_critic_optimum_is_zero(self):
        assert float(adv_d_loss(torch.ones(3, 1, 2, 2), torch.zeros(3, 1, 2, 2))) == 0.0

    def test_critic_fully_fooled(self):
        got = adv_d_loss(torch.zeros(2, 4), torch.ones(2, 4))
        assert float(got) == pytest.approx(1.0)

    def test_generator_optimum_is_zero(self):
        assert float(adv_g_loss(torch.ones(3, 1, 2, 2))) == 0.0

    def test_generator_closed_form(self):
        assert float(adv_g_loss(torch.zeros(5))) == pytest.approx(1.0)
        assert float(adv_g_loss(torch.full((5,), 3.0))) == pytest.approx(4.0)

    def test_gradients(self, rng):
        real = torch.from_numpy(rng.standard_normal((2, 1, 2, 2)))
        fake = torch.from_numpy(rng.standard_normal((2, 1, 2, 2)))
        check_grad(lambda f: adv_d_loss(real, f), fake)
        check_grad(lambda r: adv_d_loss(r, fake), real)
        check_grad(adv_g_loss, fake)


class TestWeights:
    def test_defaults(self):
        w = LossWeights()
        assert (w.lambda_adv, w.lambda_age, w.lambda_iden) == (1.0, 0.05, 1.0)
        assert (w.lambda_cyc, w.lambda_rec) == (0.1, 0.1)
        assert w.beta == 0.5 and w.age_range == 33.0

    def test_validation(self):
        with pytest.raises(ValueError):
            LossWeights(lambda_cyc=-0.1)
        with pytest.raises(ValueError):
            LossWeights(beta=0.6)
        with pytest.raises(ValueError):
            LossWeights(age_range=0.0)


class TestTotalLoss:
    UNIT = {k: 1.0 for k in ("adv_g", "age1", "age2", "iden", "cyc", "rec")}

    def test_unit_terms_frozen_total(self):
        total = total_generator_loss(self.UNIT)
        assert float(total) == pytest.approx(2.30, abs=1e-9)

    def test_respects_custom_weights(self):
        w = LossWeights(lambda_adv=2.0, lambda_age=0.0, lambda_iden=0.0,
                        lambda_cyc=0.0, lambda_rec=0.0)
        assert float(total_generator_loss(self.UNIT, w)) == pytest.approx(2.0)

    def test_omitted_terms_drop_out(self):
        total = total_generator_loss({"adv_g": 1.0, "iden": 1.0})
        assert float(total) == pytest.approx(2.0)

    def test_unknown_term_named(self):
        with pytest.raises(ValueError, match="bogus"):
            total_generator_loss({"adv_g": 1.0, "bogus": 1.0})

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            total_generator_loss({})

    def test_nonfinite_term_named(self):
        terms = dict(self.UNIT)
        terms["age2"] = float("nan")
        with pytest.raises(NonFiniteLossError, match="age2"):
            total_generator_loss(terms)
        terms["age2"] = torch.tensor(float("inf"))
        with pytest.raises(NonFiniteLossError, match="age2"):
            total_generator_loss(terms)

    def test_overflowing_total_caught(self):
        with pytest.raises(NonFiniteLossError, match="total"):
            total_generator_loss({"adv_g": 1e308, "iden": 1e308})

    def test_gradient_scales_are_the_weights(self):
        terms = {k: torch.tensor(1.0, requires_grad=True) for k in self.UNIT}
        total_generator_loss(terms).backward()
        w = LossWeights()
        assert float(terms["adv_g"].grad) == pytest.approx(w.lambda_adv)
        assert float(terms["age1"].grad) == pytest.approx(w.lambda_age)
        assert float(terms["age2"].grad) == pytest.approx(w.lambda_age)
        assert float(terms["iden"].grad) == pytest.approx(w.lambda_iden)
        assert float(terms["cyc"].grad) == pytest.approx(w.lambda_cyc)
        assert float(terms["rec"].grad) == pytest.approx(w.lambda_rec)

    def test_float32_terms_keep_dtype(self):
        terms = {"adv_g": torch.tensor(1.0), "cyc": torch.tensor(0.5)}
        total = total_generator_loss(terms)
        assert total.dtype == torch.float32
        assert float(total) == pytest.approx(1.0 + 0.05, rel=1e-6)

import math
import tracemalloc
import warnings

import numpy as np
import pytest

from paramdefense.constraints import INF, ConstraintSet, dual_exponent, lp_norm
from paramdefense.corruption import CorruptionTrace
from paramdefense.defense import (
    SGD,
    DefenseConfig,
    DefenseWarning,
    acrt_objective_grad,
    awp_objective_grad,
    defense_objective_grad,
    fgsm_batch,
    train,
)
from paramdefense.errors import DivergedTrainingError, RejectedInputError
from paramdefense.nn import Batch, Dense, Model, ParamPartition, evaluate, forward, loss_and_grad

from conftest import central_diff, rel_err, toy_batch


def frozen_objective(model, batch, corruptions, mask=None):
    """Average loss at w + a_k with the corruptions held fixed (oracle)."""

    def f(w):
        total = 0.0
        for a in corruptions:
            p = w.copy()
            if mask is None:
                p += a
            else:
                p[mask] += a
            total += forward(model.with_params(p), batch)[0]
        return total / len(corruptions)

    return f


@pytest.fixture
def model_282():
    return Model.init([2, 8, 2], activation="tanh", seed=0)


@pytest.fixture
def batch_282():
    return toy_batch(np.random.default_rng(1), 2, 2, rows=24)


@pytest.fixture
def moons():
    from paramdefense.bench.datasets import synth_dataset

    return synth_dataset("synth_moons", 200, 0.1, seed=0)


class TestConfig:
    def test_default_alpha(self):
        assert DefenseConfig(K=4, epsilon=0.2).step_size == pytest.approx(0.075)

    def test_short_budget_warns(self):
        with pytest.warns(DefenseWarning):
            DefenseConfig(K=2, epsilon=0.1, alpha=0.01)

    def test_short_budget_override(self):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            DefenseConfig(K=2, epsilon=0.1, alpha=0.01, allow_short_budget=True)

    def test_sam_forces_full_mix(self):
        assert DefenseConfig(variant="sam", epsilon=0.1, alpha_mix=0.3).alpha_mix == 1.0

    @pytest.mark.parametrize(
        "kwargs",
        [{"K": -1}, {"alpha_mix": 1.5}, {"variant": "fgsm"}, {"epsilon": -1.0}, {"variant": "awp", "inner_K": 0}],
    )
    def test_rejects(self, kwargs):
        with pytest.raises(RejectedInputError):
            DefenseConfig(**kwargs)


class TestDefenseObjective:
    def test_k0_is_plain_loss_bit_exact(self, model_282, batch_282):
        st = defense_objective_grad(model_282, batch_282, DefenseConfig(K=0, epsilon=0.1))
        loss, grad = loss_and_grad(model_282, batch_282)
        assert st.objective == loss
        np.testing.assert_array_equal(st.grad, grad)

    def test_zero_radius_is_clean_loss(self, model_282, batch_282):
        st = defense_objective_grad(model_282, batch_282, DefenseConfig(K=3, epsilon=0.0, alpha=0.1))
        loss, grad = loss_and_grad(model_282, batch_282)
        assert st.objective == pytest.approx(loss, rel=1e-15)
        np.testing.assert_allclose(st.grad, grad, rtol=1e-14)

    @pytest.mark.parametrize("p", [2.0, INF])
    def test_gradient_matches_finite_differences(self, model_282, batch_282, p):
        cfg = DefenseConfig(K=3, epsilon=0.05, p=p)
        st = defense_objective_grad(model_282, batch_282, cfg, keep_corruptions=True)
        assert len(st.corruptions) == 4
        f = frozen_objective(model_282, batch_282, st.corruptions)
        assert f(model_282.params) == pytest.approx(st.objective, rel=1e-13)
        assert rel_err(st.grad, central_diff(f, model_282.params)) < 1e-4

    def test_corruptions_follow_projected_ascent(self, model_282, batch_282):
        cfg = DefenseConfig(K=4, epsilon=0.05, p=2)
        st = defense_objective_grad(model_282, batch_282, cfg, keep_corruptions=True)
        steps = [np.linalg.norm(b - a) for a, b in zip(st.corruptions, st.corruptions[1:])]
        trace = CorruptionTrace(
            steps=[], final=st.corruptions[-1], epsilon=0.05, p=2.0, n=None, alpha=cfg.step_size, K=4
        )
        assert trace.invariant_violations() == []
        assert all(s <= cfg.step_size + 1e-12 for s in steps)
        assert all(lp_norm(a, 2) <= 0.05 + 1e-12 for a in st.corruptions)
        # losses increase along the ascent path on this smooth toy
        assert st.losses[-1] > st.losses[0]

    def test_masked_corruptions(self, model_282, batch_282):
        part = ParamPartition.layers(model_282, [-1])
        cfg = DefenseConfig(K=2, epsilon=0.05, partition=part)
        st = defense_objective_grad(model_282, batch_282, cfg, keep_corruptions=True)
        assert all(a.size == part.k for a in st.corruptions)
        f = frozen_objective(model_282, batch_282, st.corruptions, part.mask)
        assert rel_err(st.grad, central_diff(f, model_282.params)) < 1e-4

    def test_random_init_starts_on_boundary(self, model_282, batch_282):
        cfg = DefenseConfig(K=2, epsilon=0.05, p=INF, random_init=True)
        st = defense_objective_grad(model_282, batch_282, cfg, keep_corruptions=True)
        assert lp_norm(st.corruptions[0], INF) == pytest.approx(0.05)


class TestAcrt:
    def test_zero_mix_bit_exact(self, model_282, batch_282):
        st = acrt_objective_grad(model_282, batch_282, 0.1, p=2, alpha_mix=0.0)
        loss, grad = loss_and_grad(model_282, batch_282)
        assert st.objective == loss
        np.testing.assert_array_equal(st.grad, grad)

    def test_small_eps_band_on_quadratic(self):
        # linear network with squared error: the loss is an exact quadratic in the parameters
        model = Model([Dense(3, 2, "identity")], "mse", np.random.default_rng(0).standard_normal(8))
        batch = toy_batch(np.random.default_rng(2), 3, 2, rows=10, head="mse")
        clean, g = loss_and_grad(model, batch)
        curv = []
        for eps in (1e-2, 1e-3, 1e-4):
            obj = acrt_objective_grad(model, batch, eps, p=INF, alpha_mix=1.0).objective
            first = eps * lp_norm(g, dual_exponent(INF))
            assert abs(obj - clean) <= first + eps * eps * 100
            curv.append((obj - clean - first) / eps**2)
        # the remainder is exactly quadratic in eps
        np.testing.assert_allclose(curv[1:], curv[0], rtol=1e-3)

    def test_mix_interpolates(self, model_282, batch_282):
        full = acrt_objective_grad(model_282, batch_282, 0.05, p=2, alpha_mix=1.0)
        half = acrt_objective_grad(model_282, batch_282, 0.05, p=2, alpha_mix=0.5)
        clean = loss_and_grad(model_282, batch_282)[0]
        assert half.objective == pytest.approx(0.5 * clean + 0.5 * full.objective)

    def test_sam_gradient_is_taken_at_corrupted_point(self, model_282, batch_282):
        st = acrt_objective_grad(model_282, batch_282, 0.05, p=2, alpha_mix=1.0)
        a_hat = st.corruptions[0]
        _, g1 = loss_and_grad(model_282.with_params(model_282.params + a_hat), batch_282)
        np.testing.assert_array_equal(st.grad, g1)

    def test_substitutive_objective_and_gradient(self, model_282, batch_282):
        mix = 0.7
        st = acrt_objective_grad(model_282, batch_282, 0.05, p=2, alpha_mix=mix, substitutive=True)
        a_hat = st.corruptions[0]

        def surrogate(w):
            loss, g = loss_and_grad(model_282.with_params(w), batch_282)
            return loss + mix * a_hat @ g

        assert st.objective == pytest.approx(surrogate(model_282.params), rel=1e-14)
        assert rel_err(st.grad, central_diff(surrogate, model_282.params, h=1e-5)) < 1e-4

    def test_substitutive_matches_exact_to_first_order(self, model_282, batch_282):
        gaps = []
        for eps in (1e-2, 1e-3):
            a = acrt_objective_grad(model_282, batch_282, eps, p=2, substitutive=True).objective
            b = acrt_objective_grad(model_282, batch_282, eps, p=2).objective
            gaps.append(abs(a - b))
        assert gaps[1] < gaps[0] / 50

    def test_degenerate_gradient_gives_clean_loss(self):
        model = Model([Dense(1, 2, "identity")], "softmax_ce", np.zeros(4))
        batch = Batch([[0.0], [0.0]], [0, 1])
        st = acrt_objective_grad(model, batch, 0.1)
        assert st.objective == pytest.approx(math.log(2))
        assert st.degenerate_steps == [1]


class TestAwp:
    def test_both_off_is_plain_loss(self, model_282, batch_282):
        st = awp_objective_grad(model_282, batch_282, DefenseConfig(variant="awp", epsilon=0.0, input_eps=0.0))
        loss, grad = loss_and_grad(model_282, batch_282)
        assert st.objective == loss
        np.testing.assert_array_equal(st.grad, grad)

    def test_ascent_on_convex_toy(self):
        model = Model([Dense(3, 2, "identity")], "mse", np.random.default_rng(3).standard_normal(8))
        batch = toy_batch(np.random.default_rng(4), 3, 2, rows=10, head="mse")
        clean = loss_and_grad(model, batch)[0]
        cfg = DefenseConfig(variant="awp", epsilon=0.1, p=2, inner_K=3, input_eps=0.05)
        assert awp_objective_grad(model, batch, cfg).objective >= clean

    def test_gradient_at_corrupted_point(self, model_282, batch_282):
        cfg = DefenseConfig(variant="awp", epsilon=0.05, p=INF, inner_K=2, input_eps=0.1)
        st = awp_objective_grad(model_282, batch_282, cfg)
        adv = fgsm_batch(model_282, batch_282, 0.1)
        shifted = model_282.with_params(model_282.params + st.corruptions[0])
        loss, g = loss_and_grad(shifted, adv)
        assert st.objective == loss
        np.testing.assert_array_equal(st.grad, g)


class TestFgsm:
    def test_zero_is_identity(self, model_282, batch_282):
        assert fgsm_batch(model_282, batch_282, 0.0) is batch_282

    def test_step_size(self, model_282, batch_282):
        adv = fgsm_batch(model_282, batch_282, 0.3)
        d = np.abs(adv.inputs - batch_282.inputs)
        assert np.all(d <= 0.3 + 1e-12)
        np.testing.assert_allclose(d, 0.3, atol=1e-12)
        np.testing.assert_array_equal(adv.targets, batch_282.targets)

    def test_linear_model_loss_increases(self):
        model = Model([Dense(2, 2, "identity")], "mse", np.random.default_rng(5).standard_normal(6))
        batch = toy_batch(np.random.default_rng(6), 2, 2, head="mse")
        assert forward(model, fgsm_batch(model, batch, 0.1))[0] >= forward(model, batch)[0]

    def test_negative_rejected(self, model_282, batch_282):
        with pytest.raises(RejectedInputError):
            fgsm_batch(model_282, batch_282, -0.1)


class TestTrain:
    def _init(self, seed=0):
        return Model.init([2, 8, 2], seed=seed)

    def test_k0_defense_equals_baseline(self, moons):
        base, _ = train(self._init(), moons.train, None, SGD(0.1), epochs=5, seed=3)
        defended, _ = train(self._init(), moons.train, DefenseConfig(K=0, epsilon=0.1), SGD(0.1), epochs=5, seed=3)
        np.testing.assert_array_equal(base.params, defended.params)

    def test_start_epoch_gate(self, moons):
        seen = {"base": [], "def": []}

        def rec(tag):
            return lambda e, s, st: seen[tag].append((e, st.grad.copy()))

        train(self._init(), moons.train, None, SGD(0.1), epochs=4, seed=1, on_step=rec("base"))
        cfg = DefenseConfig(K=2, epsilon=0.05, start_epoch=2)
        _, rep = train(self._init(), moons.train, cfg, SGD(0.1), epochs=4, seed=1, on_step=rec("def"))
        early = [(b, d) for b, d in zip(seen["base"], seen["def"]) if b[0] < 2]
        assert early and all(np.array_equal(b[1], d[1]) for b, d in early)
        later = [(b, d) for b, d in zip(seen["base"], seen["def"]) if b[0] >= 2]
        assert not all(np.array_equal(b[1], d[1]) for b, d in later)
        assert [e.defense_active for e in rep.epochs] == [False, False, True, True]

    def test_deterministic_report(self, moons):
        cfg = DefenseConfig(K=2, epsilon=0.05, random_init=True)
        m1, r1 = train(self._init(), moons.train, cfg, SGD(0.1, momentum=0.9), epochs=3, seed=7)
        m2, r2 = train(self._init(), moons.train, cfg, SGD(0.1, momentum=0.9), epochs=3, seed=7)
        assert r1 == r2
        assert r1.to_dict() == r2.to_dict()
        assert m1 == m2

    def test_epochs_recorded(self, moons):
        _, rep = train(self._init(), moons.train, None, SGD(0.1), epochs=6, seed=0)
        assert len(rep.epochs) == 6

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_names_epoch_and_step(self, moons):
        with pytest.raises(DivergedTrainingError) as exc:
            train(self._init(), moons.train, None, SGD(1e6), epochs=20, seed=0)
        assert "epoch" in str(exc.value) and "step" in str(exc.value)

    def test_bad_epochs(self, moons):
        with pytest.raises(RejectedInputError):
            train(self._init(), moons.train, None, SGD(0.1), epochs=0)

    @pytest.mark.parametrize("variant", ["acrt", "sam", "awp"])
    def test_variants_train(self, moons, variant):
        cfg = DefenseConfig(variant=variant, epsilon=0.05, alpha_mix=0.5, inner_K=2, input_eps=0.05)
        _, rep = train(self._init(), moons.train, cfg, SGD(0.1), epochs=3, seed=0)
        assert all(math.isfinite(e.train_loss) for e in rep.epochs)

    def test_localized_defense_leaves_other_layers_alone(self, moons):
        model = Model.init([2, 8, 8, 2], seed=0)
        part = ParamPartition.layers(model, [-1])
        cfg = DefenseConfig(K=2, epsilon=0.05, partition=part)
        touched = []

        def check(e, s, st):
            for a in st.corruptions:
                full = part.embed(a)
                touched.append(np.count_nonzero(full[~part.mask]))

        train(model, moons.train, cfg, SGD(0.1), epochs=2, seed=0, on_step=check)
        assert touched and max(touched) == 0

    def test_memory_does_not_grow_with_k(self):
        model = Model.init([2, 64, 64, 2], seed=0)
        batch = toy_batch(np.random.default_rng(0), 2, 2, rows=32)
        peaks = []
        for K in (1, 8):
            cfg = DefenseConfig(K=K, epsilon=0.05)
            defense_objective_grad(model, batch, cfg)
            tracemalloc.start()
            defense_objective_grad(model, batch, cfg)
            peaks.append(tracemalloc.get_traced_memory()[1])
            tracemalloc.stop()
        # at most a few gradient-sized buffers regardless of K
        assert peaks[1] <= peaks[0] + 2 * model.k_total * 8

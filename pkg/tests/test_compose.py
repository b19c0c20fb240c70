import numpy as np
import pytest

from ppltape.autodiff import Parameter, ops
from ppltape.compose import SVIRecipe, alternate
from ppltape.data import make_gmm, spawn_rngs
from ppltape.dists import Normal, PointMass
from ppltape.errors import ConfigError, ShapeError
from ppltape.infer import SGD, Adam, FeedSlot, InferenceProblem
from ppltape.models import farthest_point_init, normal_normal, normal_normal_posterior
from ppltape.presets import _gmm_problems
from ppltape.vi import KLqp, MAP


def gmm_recipe(X, K, M, inner=2, reset=True, seed=0):
    N, D = X.shape
    slot, local, glob, logits, loc, _ = _gmm_problems(
        M, K, D, N / M, farthest_point_init(X, K), spawn_rngs(seed, 3))
    recipe = SVIRecipe(glob, local, [logits], slot, M, inner=inner, reset=reset)
    recipe.initialize({"optimizer": Adam(0.05)}, {"optimizer": Adam(1.0)})
    return recipe, logits, loc


@pytest.fixture(scope="module")
def data():
    return make_gmm(300, 3, 2, seed=1)["X"]


class TestAlternate:
    def test_each_inference_gets_its_own_slots(self):
        a_slot, b_slot = FeedSlot("a", (1,)), FeedSlot("b", (1,))
        pa, pb = Parameter("za", 0.0), Parameter("zb", 0.0)
        a = MAP(InferenceProblem(normal_normal(1), {"z": PointMass(pa)}, {"x": a_slot}))
        b = MAP(InferenceProblem(normal_normal(1), {"z": PointMass(pb)}, {"x": b_slot}))
        a.initialize(optimizer=SGD(0.5))
        b.initialize(optimizer=SGD(0.5))
        rounds = alternate([(a, 2), (b, 1)], 3, feeds={a_slot: [2.0], b_slot: [-2.0]})
        assert [len(r) for r in rounds] == [3, 3, 3]
        assert float(pa.value) == pytest.approx(1.0)
        assert float(pb.value) == pytest.approx(-1.0)

    def test_validation(self):
        a = MAP(InferenceProblem(normal_normal(1), {"z": PointMass(Parameter("z", 0.0))},
                                 {"x": np.ones(1)}))
        with pytest.raises(ConfigError):
            alternate([(a, 1)], 0)
        with pytest.raises(ConfigError):
            alternate([(a, -1)], 1)


class TestSVIRecipe:
    def test_local_parameters_reset_after_every_step(self, data):
        recipe, logits, _ = gmm_recipe(data, 3, 30)
        initial = logits.value.copy()
        rng = np.random.default_rng(0)
        for _ in range(3):
            recipe.svi_step(data[rng.choice(300, 30, replace=False)])
            np.testing.assert_array_equal(logits.value, initial)
            assert recipe.local_inf.optimizer.state == {}
            assert recipe.local_inf._b == {}

    def test_storage_scales_with_minibatch(self, data):
        small, _, _ = gmm_recipe(data, 3, 30)
        large, _, _ = gmm_recipe(data[:150], 3, 30)
        assert small.local_storage() == large.local_storage() == 30 * 3

    def test_minibatch_size_checked(self, data):
        recipe, _, _ = gmm_recipe(data, 3, 30)
        with pytest.raises(ShapeError, match="exactly M=30"):
            recipe.svi_step(data[:29])

    def test_construction_checks(self, data):
        recipe, logits, _ = gmm_recipe(data, 3, 30)
        g, l_inf, slot = recipe.global_inf, recipe.local_inf, recipe.slot
        with pytest.raises(ConfigError, match="M must be"):
            SVIRecipe(g, l_inf, [logits], slot, 0)
        with pytest.raises(ConfigError, match="rows"):
            SVIRecipe(g, l_inf, [logits], slot, 20)
        with pytest.raises(ConfigError, match="leading axis"):
            SVIRecipe(g, l_inf, [Parameter("bad", np.zeros((5, 3)))], slot, 30)
        with pytest.raises(ConfigError, match="non-negative"):
            SVIRecipe(g, l_inf, [logits], slot, 30, inner=-1)

    def test_full_batch_matches_alternation(self, data):
        X = data[:60]
        recipe, _, loc_a = gmm_recipe(X, 3, 60, inner=1, reset=False, seed=4)
        for _ in range(15):
            recipe.svi_step(X)

        slot, local, glob, _, loc_b, _ = _gmm_problems(
            60, 3, 2, 1.0, farthest_point_init(X, 3), spawn_rngs(4, 3))
        glob.initialize(optimizer=Adam(0.05))
        local.initialize(optimizer=Adam(1.0))
        alternate([(local, 1), (glob, 1)], 15, feeds={slot: X})
        np.testing.assert_array_equal(loc_a.value, loc_b.value)

    def test_global_only_converges_on_conjugate_toy(self):
        N, M = 1000, 20
        x = np.random.default_rng(5).normal(1.5, 1.0, size=N)
        slot = FeedSlot("x", (M,))
        m = Parameter("qz/loc", 0.0)
        raw = Parameter("qz/scale", 0.0)
        glob = KLqp(InferenceProblem(normal_normal(M), {"z": lambda: Normal(m, ops.softplus(raw))},
                                     {"x": slot}, scale={"x": N / M}),
                    estimator="reparam_analytic_kl", seed=6)

        def local_model(t):
            t.rv("u", Normal(np.zeros(M), 1.0))

        u = Parameter("qu/point", np.zeros(M))
        local = MAP(InferenceProblem(local_model, {"u": PointMass(u)}, slots=[slot]))
        recipe = SVIRecipe(glob, local, [u], slot, M, inner=0)
        recipe.initialize({"optimizer": Adam(0.01)}, {"optimizer": SGD(0.1)})
        rng = np.random.default_rng(7)
        recipe.run(lambda _: x[rng.choice(N, M, replace=False)], 3000)
        mean, _ = normal_normal_posterior(x)
        assert abs(float(m.value) - mean) <= 0.05
        np.testing.assert_array_equal(u.value, 0.0)

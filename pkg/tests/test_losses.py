import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from biphasic import losses as L
from biphasic.autodiff import Tensor, ops
from biphasic.autodiff.tensor import ShapeError
from biphasic.toydata import DomainSpec, LabelError

probs = st.floats(1e-3, 1.0 - 1e-3)
raw = st.floats(-3.0, 3.0, allow_nan=False)


def vec(elements, lo=1, hi=12):
    return st.integers(lo, hi).flatmap(lambda n: arrays(np.float64, n, elements=elements))


def identity_phi(x):
    return x


class FakeNet:
    name = "phi"
    frozen = False

    def embed(self, x):
        return x


# -- adversarial: initial phase ----------------------------------------------------


def test_vanilla_generator_loss_values():
    assert L.adv_loss_G_initial([0.5, 0.5], "vanilla").item() == pytest.approx(math.log(2), abs=1e-12)
    assert L.adv_loss_G_initial([0.25], "vanilla").item() == pytest.approx(math.log(4), abs=1e-12)
    assert L.adv_loss_G_initial([1 - 1e-12], "vanilla").item() < 1e-11


def test_vanilla_discriminator_loss_values():
    assert L.adv_loss_D_initial([0.5], [0.5], "vanilla").item() == pytest.approx(2 * math.log(2), abs=1e-12)
    assert L.adv_loss_D_initial([0.9], [0.1], "vanilla").item() == pytest.approx(-2 * math.log(0.9), abs=1e-12)
    assert L.adv_loss_D_initial([0.9], [0.1], "vanilla").item() == pytest.approx(0.210721, abs=1e-6)


def test_lsgan_perfect_discriminator_and_generator():
    assert L.adv_loss_D_initial([1.0, 1.0], [0.0, 0.0], "lsgan").item() == 0.0
    assert L.adv_loss_G_initial([1.0], "lsgan").item() == 0.0
    assert L.adv_loss_G_initial([3.0, -1.0], "lsgan").item() == pytest.approx((4 + 4) / 2)


@pytest.mark.parametrize("bad", [[0.0], [1.0], [1.2], [-0.1]])
def test_vanilla_rejects_scores_outside_open_interval(bad):
    with pytest.raises(L.LossError):
        L.adv_loss_G_initial(bad, "vanilla")
    with pytest.raises(L.LossError):
        L.adv_loss_D_initial([0.5], bad, "vanilla")


def test_lsgan_accepts_unbounded_scores():
    assert L.adv_loss_D_initial([7.0], [-5.0], "lsgan").item() == pytest.approx(36 + 25)


def test_unknown_family_and_empty_batch():
    with pytest.raises(L.LossError, match="family"):
        L.adv_loss_G_initial([0.5], "wgan")
    with pytest.raises(L.LossError):
        L.adv_loss_G_initial(np.zeros(0), "lsgan")


@given(vec(probs, 2, 8))
def test_vanilla_generator_loss_monotone(scores):
    higher = np.minimum(scores + 1e-3, 1 - 1e-4)
    if np.all(higher > scores):
        assert L.adv_loss_G_initial(higher, "vanilla").item() < L.adv_loss_G_initial(scores, "vanilla").item()


@given(vec(probs), vec(probs))
def test_vanilla_losses_nonnegative(r, f):
    n = min(len(r), len(f))
    assert L.adv_loss_D_initial(r[:n], f[:n], "vanilla").item() >= 0
    assert L.adv_loss_G_initial(f, "vanilla").item() >= 0


# -- inherited losses ---------------------------------------------------------------------


def test_inherited_d_hand_values():
    assert L.inherited_adv_loss_D([0.9], [0.1], [1.0], "vanilla").item() == pytest.approx(0.210721, abs=1e-6)
    # real term at its own soft target equals the target's entropy
    value = L.inherited_adv_loss_D([0.5], [1e-9], [0.5], "vanilla").item()
    assert value == pytest.approx(math.log(2), abs=1e-8)
    assert L.inherited_adv_loss_D([0.3], [0.0], [0.5], "lsgan").item() == pytest.approx(0.04)


@given(vec(probs, 1, 10), st.data())
def test_inherited_d_with_teacher_one_is_initial_d(real, data):
    fake = data.draw(arrays(np.float64, len(real), elements=probs))
    a = L.inherited_adv_loss_D(real, fake, np.ones(len(real)), "vanilla").item()
    b = L.adv_loss_D_initial(real, fake, "vanilla").item()
    assert a == pytest.approx(b, abs=1e-12)
    a = L.inherited_adv_loss_D(real, fake, np.ones(len(real)), "lsgan").item()
    assert a == pytest.approx(L.adv_loss_D_initial(real, fake, "lsgan").item(), abs=1e-12)


def test_inherited_d_length_mismatch():
    with pytest.raises(L.LossError):
        L.inherited_adv_loss_D([0.5, 0.5], [0.5], [0.5], "vanilla")


def test_importance_weight_examples():
    np.testing.assert_allclose(L.importance_weights([0.2, 0.5, 0.8]), [2.0, 1.5, 1.0], atol=1e-12)
    np.testing.assert_allclose(L.importance_weights([0.0, 1.0]), [2.0, 1.0])
    np.testing.assert_array_equal(L.importance_weights([0.3, 0.3, 0.3]), [1.0, 1.0, 1.0])
    with pytest.raises(L.LossError):
        L.importance_weights([])


@given(vec(st.floats(0.0, 1.0), 1, 16))
def test_importance_weight_properties(t):
    w = L.importance_weights(t)
    assert np.all((w >= 1.0) & (w <= 2.0))
    if t.max() - t.min() >= 1e-12:
        assert w.min() == pytest.approx(1.0) and w.max() == pytest.approx(2.0)
        assert w[np.argmin(t)] == w.max()
    else:
        assert np.all(w == 1.0)


def test_inherited_g_hand_values():
    assert L.inherited_adv_loss_G([0.5], [2.0], "vanilla").item() == pytest.approx(math.log(2), abs=1e-12)
    e = math.exp(-1)
    assert L.inherited_adv_loss_G([e, e, e], L.importance_weights([0.2, 0.5, 0.8]), "vanilla").item() == pytest.approx(0.75, abs=1e-12)
    with pytest.raises(L.LossError):
        L.inherited_adv_loss_G([0.5, 0.5], [1.0], "vanilla")


@given(vec(probs, 1, 10))
def test_inherited_g_with_unit_weights_is_half_initial(fake):
    for family in L.FAMILIES:
        a = L.inherited_adv_loss_G(fake, np.ones(len(fake)), family).item()
        assert a == pytest.approx(0.5 * L.adv_loss_G_initial(fake, family).item(), abs=1e-12)


# -- perceptual information ---------------------------------------------------------------------


def test_perceptual_distance_hand_value_and_symmetry():
    a, b = np.array([[0.0, 3.0]]), np.array([[4.0, 0.0]])
    assert L.perceptual_distance(a, b, identity_phi).data.tolist() == [5.0]
    assert L.perceptual_distance(a, a, identity_phi).data.tolist() == [0.0]
    np.testing.assert_array_equal(L.perceptual_distance(b, a, identity_phi).data, [5.0])
    with pytest.raises(ShapeError):
        L.perceptual_distance(a, np.zeros((1, 3)), identity_phi)


def test_unfrozen_embedder_is_rejected():
    with pytest.raises(L.LossError, match="frozen"):
        L.infonce_mi(np.zeros((2, 2)), np.zeros((2, 2)), FakeNet())


@pytest.mark.parametrize("k", [1, 2, 5, 8, 16])
def test_uniform_critic_gives_minus_log_k(k):
    assert L.infonce_from_critic(np.full((k, k), -0.37)).item() == pytest.approx(-math.log(k), abs=1e-9)


def test_single_pair_and_two_by_two_cases():
    assert L.infonce_mi(np.ones((1, 3)), np.zeros((1, 3)), identity_phi).item() == 0.0
    s = np.array([[0.0, -10.0], [-10.0, 0.0]])
    assert L.infonce_from_critic(s).item() == pytest.approx(-math.log1p(math.exp(-10)), abs=1e-15)
    assert L.mutual_perceptual_loss(np.ones((1, 3)), np.zeros((1, 3)), identity_phi).item() == 0.0


def test_uniform_critic_loss_is_log_eight():
    x = np.zeros((8, 4))  # every pair at distance 0: uniform critic
    assert L.mutual_perceptual_loss(x, x, identity_phi).item() == pytest.approx(math.log(8), abs=1e-12)


def test_diagonal_dominant_critic_loss_vanishes():
    x = np.eye(4) * 20.0 / math.sqrt(2)
    loss = L.mutual_perceptual_loss(x, x, identity_phi).item()
    assert 0.0 < loss < 1e-7


def test_i_hat_nonpositive_over_random_batches():
    r = np.random.default_rng(7)
    for _ in range(1000):
        k = int(r.integers(1, 17))
        i_hat = L.infonce_mi(r.normal(size=(k, 6)), r.normal(size=(k, 6)), identity_phi).item()
        assert i_hat <= 0.0


@given(st.integers(1, 10), st.integers(0, 2**31 - 1))
def test_loss_is_exact_negation(k, seed):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(k, 5)), r.normal(size=(k, 5))
    assert L.mutual_perceptual_loss(a, b, identity_phi).item() == -L.infonce_mi(a, b, identity_phi).item()


def test_interpretable_mi_bounds():
    assert L.interpretable_mi(Tensor(-math.log(8)), 8) == pytest.approx(0.0, abs=1e-12)
    assert L.interpretable_mi(0.0, 8) == pytest.approx(math.log(8))


def test_infonce_rejects_empty_batch():
    with pytest.raises(L.LossError):
        L.infonce_from_critic(np.zeros((0, 0)))


# -- auxiliary terms -----------------------------------------------------------------------------


def test_uv_and_cycle_losses():
    a = np.zeros((2, 2, 3, 3))
    assert L.uv_loss(a, a).item() == 0.0
    assert L.uv_loss(a, a + 0.5).item() == pytest.approx(0.5)
    assert L.uv_loss(a, a + 1.0).item() == pytest.approx(2 * L.uv_loss(a, a + 0.5).item())
    assert L.cycle_loss(a, a + 0.1).item() == pytest.approx(0.1)
    assert L.cycle_loss(a + 0.1, a).item() == L.cycle_loss(a, a + 0.1).item()
    with pytest.raises(ShapeError):
        L.uv_loss(a, np.zeros((2, 2, 3, 4)))


def test_attr_loss_hand_values():
    spec = DomainSpec(groups=(("color", ("a", "b", "c")),), flags=("f",))
    assert L.attr_loss([[0.0, 0.0, 0.0, 0.0]], [[1, 0, 0, 1]], spec).item() == pytest.approx(math.log(3) + math.log(2))
    three = L.attr_loss([[2.0, 0.0, 0.0, 50.0]], [[1, 0, 0, 1]], spec).item()
    assert three == pytest.approx(-math.log(math.exp(2) / (math.exp(2) + 2)) + math.log1p(math.exp(-50)), abs=1e-12)
    assert three == pytest.approx(math.log1p(2 * math.exp(-2)), abs=1e-12)
    flag_only = DomainSpec(groups=(("g", ("x", "y")),), flags=("f",))
    # the group is matched with a huge margin; the flag sits at uniform logits
    assert L.attr_loss([[60.0, -60.0, 0.0]], [[1, 0, 1]], flag_only).item() == pytest.approx(math.log(2), abs=1e-12)


def test_attr_loss_invalid_label():
    spec = DomainSpec()
    with pytest.raises(LabelError):
        L.attr_loss(np.zeros((1, 5)), [[1, 1, 0, 0, 0]], spec)


# -- totals ------------------------------------------------------------------------------------


def test_total_generator_examples():
    total, report = L.total_loss_G("initial", {"adv": 0.5, "mp": 0.2, "geom": 0.1, "attr": 0.3})
    assert total.item() == pytest.approx(1.1, abs=1e-12)
    assert sum(report.components.values()) == pytest.approx(report.total, abs=1e-12)
    total, _ = L.total_loss_G("enhancing", {"adv": 0.5, "mp": 0.2, "attr": 0.3}, exclude_geometry=True)
    assert total.item() == pytest.approx(1.0, abs=1e-12)


def test_total_generator_errors():
    with pytest.raises(L.LossError, match="missing"):
        L.total_loss_G("initial", {"adv": 0.5, "geom": 0.1, "attr": 0.3})
    with pytest.raises(L.LossError, match="unknown"):
        L.total_loss_G("initial", {"adv": 0.5, "mp": 0.2, "geom": 0.1, "attr": 0.3, "style": 1.0})
    with pytest.raises(L.LossError, match="excluded"):
        L.total_loss_G("initial", {"adv": 0.5, "mp": 0.2, "geom": 0.1, "attr": 0.3}, exclude_geometry=True)
    with pytest.raises(L.LossError, match="phase"):
        L.total_loss_G("middle", {"adv": 0.5})
    total, _ = L.total_loss_G("initial", {"adv": 0.5, "geom": 0.1, "attr": 0.3, "cycle": 0.2}, without=("mp",))
    assert total.item() == pytest.approx(1.1)


def test_total_discriminator_phase_semantics():
    assert L.total_loss_D("initial", {"adv": 1.0, "geom": 0.2, "attr": 0.3})[0].item() == pytest.approx(1.5)
    assert L.total_loss_D("enhancing", {"adv": 0.7})[0].item() == pytest.approx(0.7)
    for extra in ({"geom": 0.2}, {"attr": 0.3}):
        with pytest.raises(L.LossError, match="enhancing"):
            L.total_loss_D("enhancing", {"adv": 0.7, **extra})
    with pytest.raises(L.LossError, match="missing"):
        L.total_loss_D("initial", {"adv": 1.0, "attr": 0.3})
    assert L.total_loss_D("initial", {"adv": 1.0, "attr": 0.3}, exclude_geometry=True)[0].item() == pytest.approx(1.3)


@given(st.lists(st.floats(-5, 5), min_size=4, max_size=4))
def test_total_is_unit_weight_sum(values):
    terms = dict(zip(("adv", "mp", "geom", "attr"), values))
    total, report = L.total_loss_G("initial", terms)
    assert total.item() == pytest.approx(sum(values), abs=1e-12)
    assert list(report.components) == ["adv", "mp", "geom", "attr"]


def test_total_backpropagates_to_terms():
    a = Tensor(0.5, requires_grad=True)
    total, _ = L.total_loss_D("enhancing", {"adv": ops.square(a)})
    total.backward()
    assert a.grad == pytest.approx(1.0)

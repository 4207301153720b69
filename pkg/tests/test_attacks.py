import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import interior_points, linear_model
from gradmask import tensor as T
from gradmask.attacks import (
    AttackError, AttackSpec, deepfool, fgsm, least_likely_class, pgd, pgd_unbounded, project_linf, random_sign,
    result_from_bytes, result_to_bytes, run_attack, spsa, spsa_gradient_estimate, step_ll,
)
from gradmask.models import Model, ModelSpec, input_gradient, logits, predict

EPS8, EPS16 = 8 / 255, 16 / 255


def softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def constant_model(C=3, D=16):
    m = linear_model(D=D, C=C)
    m.params["W0"][:] = 0.0
    m.params["b0"][:] = np.arange(C, dtype=float)[::-1]  # always predicts class 0
    return m


def batch(n=8, D=6, C=3, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(size=(n, D)), rng.integers(0, C, n)


# fgsm / step_ll -------------------------------------------------------------------

@pytest.mark.parametrize("attack", [fgsm, step_ll])
def test_zero_eps_is_identity(attack):
    x, y = batch()
    res = attack(linear_model(), x, y, 0.0)
    np.testing.assert_array_equal(res.delta, 0.0)
    np.testing.assert_array_equal(res.x_adv, x)


def test_fgsm_linear_closed_form():
    m = linear_model(D=6, C=3, seed=3)
    x, y = interior_points(20, 6, seed=3), np.arange(20) % 3
    expected = EPS8 * np.sign((softmax(logits(m, x)) - np.eye(3)[y]) @ m.params["W0"])
    delta = fgsm(m, x, y, EPS8).delta  # x_adv - x, so exact only up to one rounding of x + eps
    np.testing.assert_array_equal(np.sign(delta), np.sign(expected))
    np.testing.assert_allclose(delta, expected, rtol=0, atol=1e-15)


def test_fgsm_lowers_accuracy_of_trained_model(standard_model, test_subset):
    clean = (predict(standard_model, test_subset.X) == test_subset.y).mean()
    assert fgsm(standard_model, test_subset.X, test_subset.y, EPS16).accuracy < clean


def test_step_ll_matches_fgsm_on_binary_linear_model():
    m = linear_model(D=6, C=2, seed=4)
    x = interior_points(40, 6, seed=4)
    y = predict(m, x)  # correctly classified by construction
    np.testing.assert_array_equal(least_likely_class(logits(m, x)), 1 - y)
    np.testing.assert_array_equal(step_ll(m, x, y, EPS8).delta, fgsm(m, x, y, EPS8).delta)


def test_least_likely_class():
    assert least_likely_class(np.array([[5.0, 1.0, -4.0]]))[0] == 2
    assert least_likely_class(np.array([[1.0, -2.0, -2.0]]))[0] == 1


# pgd --------------------------------------------------------------------------------

def test_single_full_step_pgd_is_fgsm(standard_model, test_subset):
    x, y = test_subset.X[:50], test_subset.y[:50]
    spec = AttackSpec("pgd", EPS16, iterations=1, relative_step=1.0, random_start=False)
    assert pgd(standard_model, x, y, spec).delta.tobytes() == fgsm(standard_model, x, y, EPS16).delta.tobytes()


@pytest.mark.parametrize("random_start", [False, True])
def test_pgd_linear_model_reaches_the_sign_vertex(random_start):
    m = linear_model(D=6, C=2, seed=5)
    x, y = interior_points(30, 6, seed=5), np.arange(30) % 2
    g = input_gradient(m, x, y)
    res = pgd(m, x, y, AttackSpec("pgd", EPS8, iterations=10, relative_step=0.25, random_start=random_start, seed=1))
    np.testing.assert_allclose(res.delta, EPS8 * np.sign(g), rtol=0, atol=1e-15)


def test_pgd_trajectory_length():
    x, y = batch()
    res = pgd(linear_model(), x, y, AttackSpec("pgd", EPS8, iterations=7, capture_trajectory=True))
    assert len(res.trajectory) == 7 and res.trajectory[0].shape == x.shape


def test_pgd_not_weaker_than_fgsm_on_trained_model(standard_model, test_subset):
    x, y = test_subset.X, test_subset.y
    p = pgd(standard_model, x, y, AttackSpec("pgd", EPS8, iterations=25, relative_step=0.1)).accuracy
    assert p <= fgsm(standard_model, x, y, EPS8).accuracy


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31), restarts=st.integers(2, 4))
def test_restarts_never_lower_the_loss(seed, restarts):
    m = Model(ModelSpec("mlp", (16,), input_dim=6, seed=seed % 1000))
    x, y = batch(seed=seed)
    one = pgd(m, x, y, AttackSpec("pgd", EPS16, iterations=5, seed=seed))
    many = pgd(m, x, y, AttackSpec("pgd", EPS16, iterations=5, seed=seed, restarts=restarts))
    assert (many.loss_achieved >= one.loss_achieved).all()


def test_pgd_is_deterministic():
    m = Model(ModelSpec("mlp", (16,), input_dim=6, seed=1))
    x, y = batch()
    spec = AttackSpec("pgd", EPS8, iterations=5, restarts=2, seed=9)
    assert pgd(m, x, y, spec).delta.tobytes() == pgd(m, x, y, spec).delta.tobytes()


# unbounded ---------------------------------------------------------------------------

def test_unbounded_pgd_fools_standard_model(standard_model, test_subset):
    res = pgd_unbounded(standard_model, test_subset.X, test_subset.y, 200, 0.05)
    assert res.accuracy == 0.0
    assert res.x_adv.min() >= 0.0 and res.x_adv.max() <= 1.0


def test_unbounded_pgd_cannot_move_constant_model():
    m = constant_model()
    x, y = np.full((5, 16), 0.4), np.zeros(5, dtype=int)
    res = pgd_unbounded(m, x, y)
    np.testing.assert_array_equal(res.x_adv, x)
    assert not res.success.any()


# random sign ----------------------------------------------------------------------------

def test_random_sign_basics():
    x = np.full((3, 8), 0.5)
    np.testing.assert_array_equal(random_sign(x, 0.0, 1).delta, 0.0)
    assert random_sign(x, EPS8, 1).delta.tobytes() == random_sign(x, EPS8, 1).delta.tobytes()
    np.testing.assert_allclose(np.abs(random_sign(x, EPS8, 1).delta), EPS8)


def test_random_sign_is_uncorrelated_with_fixed_vector():
    v = np.random.default_rng(0).standard_normal(64)
    x = np.full((1, 64), 0.5)
    cos = [random_sign(x, 0.01, s).delta[0] @ v / (0.01 * 8 * np.linalg.norm(v)) for s in range(1000)]
    assert abs(np.mean(cos)) < 0.05


# spsa ------------------------------------------------------------------------------------

def test_spsa_estimate_tracks_quadratic_gradient():
    rng = np.random.default_rng(0)
    D, n = 16, 32
    A = rng.uniform(0.5, 2.0, D)
    c = rng.uniform(0.3, 0.7, D)

    def oracle(pts, _y):
        return ((pts - c) ** 2 * A).sum(axis=1)

    x = rng.uniform(size=(n, D))
    dirs = rng.choice([-1.0, 1.0], size=(n, 128, D))  # 256 loss evaluations per example
    est = spsa_gradient_estimate(oracle, x, np.zeros(n, dtype=int), dirs, 0.01)
    true = 2 * A * (x - c)
    cos = (est * true).sum(1) / (np.linalg.norm(est, axis=1) * np.linalg.norm(true, axis=1))
    assert cos.mean() > 0.5


def test_spsa_zero_eps_and_bounds():
    m = Model(ModelSpec("mlp", (16,), input_dim=6, seed=2))
    x, y = batch()
    np.testing.assert_array_equal(spsa(m, x, y, AttackSpec("spsa", 0.0, iterations=3, spsa_samples=8)).delta, 0.0)
    res = spsa(m, x, y, AttackSpec("spsa", EPS16, iterations=3, spsa_samples=8))
    assert np.abs(res.delta).max() <= EPS16 + 1e-9


def test_spsa_never_differentiates():
    m = Model(ModelSpec("mlp", (16,), input_dim=6, seed=2))
    x, y = batch()
    before = T.backward_call_count()
    spsa(m, x, y, AttackSpec("spsa", EPS8, iterations=4, spsa_samples=16))
    assert T.backward_call_count() == before


def test_spsa_needs_even_samples():
    with pytest.raises(ValueError):
        AttackSpec("spsa", EPS8, spsa_samples=5)


# deepfool ---------------------------------------------------------------------------------

def centred_binary_model(seed):
    """Binary linear model whose decision hyperplane passes through the cube centre."""
    m = linear_model(D=6, C=2, seed=seed)
    w = m.params["W0"][1] - m.params["W0"][0]
    m.params["b0"][:] = [0.0, -0.5 * w.sum()]
    return m


def test_deepfool_binary_linear_closed_form():
    m = centred_binary_model(7)
    W, b = m.params["W0"], m.params["b0"]
    w, c = W[1] - W[0], b[1] - b[0]
    x = interior_points(25, 6, seed=7, lo=0.45, hi=0.55)
    res = deepfool(m, x, overshoot=0.02)
    assert res.converged.all() and (res.iterations == 1).all()
    f = x @ w + c
    expected = -(1.02) * f[:, None] * w / (w @ w)
    np.testing.assert_allclose(res.delta, expected, rtol=1e-9, atol=1e-15)
    np.testing.assert_allclose(np.linalg.norm(res.delta, axis=1), 1.02 * np.abs(f) / np.linalg.norm(w), rtol=1e-9)


def test_deepfool_near_boundary_converges_in_one_step():
    m = centred_binary_model(8)
    W, b = m.params["W0"], m.params["b0"]
    w, c = W[1] - W[0], b[1] - b[0]
    x0 = np.full(6, 0.5)
    x = (x0 - (x0 @ w + c - 1e-4) * w / (w @ w))[None]  # just on the class-1 side
    assert deepfool(m, x).iterations[0] == 1


def first_flip_fraction(model, x, d, label):
    """Bisection for the smallest s in (0, 1] with predict(x + s*d) != label."""
    lo, hi = 0.0, 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if predict(model, np.clip(x + mid * d, 0, 1)[None])[0] != label:
            hi = mid
        else:
            lo = mid
    return hi


def test_deepfool_is_close_to_the_minimal_flip_along_its_direction(test_subset):
    model = Model(ModelSpec(seed=1))
    x = test_subset.X[:60]
    res = deepfool(model, x)
    k0 = predict(model, x)
    assert res.converged.mean() > 0.9
    for i in np.flatnonzero(res.converged):
        s = first_flip_fraction(model, x[i], res.delta[i], k0[i])
        assert np.linalg.norm(res.delta[i]) <= 1.5 * s * np.linalg.norm(res.delta[i])


def test_deepfool_reports_non_convergence():
    res = deepfool(constant_model(), np.full((3, 16), 0.5), max_iter=3)
    assert not res.converged.any()


# projection and contracts ----------------------------------------------------------------

def test_project_linf():
    e = 0.1
    d = np.array([0.05, -0.02])
    np.testing.assert_array_equal(project_linf(d, e), d)
    np.testing.assert_array_equal(project_linf(np.array([2 * e, -2 * e]), e), [e, -e])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), eps=st.floats(0, 1))
def test_project_linf_idempotent(seed, eps):
    d = np.random.default_rng(seed).normal(size=10)
    once = project_linf(d, eps)
    assert project_linf(once, eps).tobytes() == once.tobytes()
    assert np.abs(once).max() <= eps


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31), eps=st.floats(0, 0.3),
       kind=st.sampled_from(["fgsm", "step_ll", "pgd", "random_sign", "spsa"]))
def test_bounded_attacks_respect_ball_and_box(seed, eps, kind):
    m = Model(ModelSpec("mlp", (8,), input_dim=6, seed=seed % 100))
    x, y = batch(seed=seed)
    x[0] = 0.0
    x[1] = 1.0  # corners exercise the box clamp
    res = run_attack(m, x, y, AttackSpec(kind, eps, iterations=3, spsa_samples=4, seed=seed))
    assert np.abs(res.delta).max() <= eps + 1e-9
    assert res.x_adv.min() >= 0 and res.x_adv.max() <= 1


def test_success_is_measured_against_true_label():
    m = constant_model(D=6)
    x = np.full((2, 6), 0.5)
    res = fgsm(m, x, np.array([0, 1]), EPS8)
    np.testing.assert_array_equal(res.success, [False, True])


def test_result_binary_round_trip():
    x, y = batch()
    spec = AttackSpec("fgsm", EPS8)
    res = fgsm(linear_model(), x, y, EPS8)
    header, delta = result_from_bytes(result_to_bytes(res, spec))
    assert delta.tobytes() == res.delta.tobytes()
    assert header["spec"]["kind"] == "fgsm" and header["success"] == [bool(v) for v in res.success]


def test_refined_deepfool_keeps_linear_closed_form():
    m = centred_binary_model(9)
    x = interior_points(15, 6, seed=9, lo=0.45, hi=0.55)
    plain, refined = deepfool(m, x), deepfool(m, x, refine=True)
    np.testing.assert_allclose(refined.delta, plain.delta, rtol=1e-9, atol=1e-15)


def test_refined_deepfool_is_at_most_one_overshoot_longer_and_still_flips(standard_model, test_subset):
    x = test_subset.X[:40]
    plain, refined = deepfool(standard_model, x), deepfool(standard_model, x, refine=True)
    assert (refined.converged == plain.converged).all()
    assert (np.linalg.norm(refined.delta, axis=1) <= 1.02 * np.linalg.norm(plain.delta, axis=1) + 1e-12).all()
    ok = refined.converged
    assert (predict(standard_model, refined.x_adv[ok]) != predict(standard_model, x[ok])).all()

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import interior_points, linear_model
from gradmask import diagnostics as dg
from gradmask.attacks import AttackSpec, deepfool
from gradmask.datasets import LabeledDataset
from gradmask.models import input_gradient, logits, per_example_loss, predict

EPS8, EPS16 = 8 / 255, 16 / 255
FAST_SPSA = AttackSpec("spsa", iterations=3, spsa_samples=16)


def ds_of(x, y):
    return LabeledDataset(x, np.asarray(y), "test")


def centred_binary(D=6, seed=0):
    m = linear_model(D=D, C=2, seed=seed)
    w = m.params["W0"][1] - m.params["W0"][0]
    m.params["b0"][:] = [0.0, -0.5 * w.sum()]
    return m, w


def constant_model(D=6):
    m = linear_model(D=D, C=3)
    m.params["W0"][:] = 0.0
    m.params["b0"][:] = [1.0, 0.0, -1.0]
    return m


# checklist -----------------------------------------------------------------------

def test_standard_model_trips_no_flag(standard_model, test_subset):
    rep = dg.run_checklist(standard_model, test_subset, [EPS8, EPS16])
    assert rep.flags() == {name: False for name in rep.FLAGS}
    assert not rep.overall_suspect and not rep.errors


def test_constant_model_trips_unbounded_flag():
    x = interior_points(10, 6)
    rep = dg.run_checklist(constant_model(), ds_of(x, [0] * 7 + [1] * 3), [EPS8], spsa_spec=FAST_SPSA)
    assert rep.unbounded_not_total == {"flag": True, "unbounded_acc": 0.7}
    assert rep.overall_suspect


def test_blackbox_flag_uses_margin():
    assert dg.blackbox_flag(0.01, 0.77, 0.0)
    assert not dg.blackbox_flag(0.5, 0.51, 0.4)
    assert dg.blackbox_flag(0.5, 0.53, 0.4)


def test_non_monotone_flag():
    assert not dg.non_monotone_flag([1.0, 0.8, 0.5])
    assert dg.non_monotone_flag([1.0, 0.4, 0.5])
    assert not dg.non_monotone_flag([1.0, 0.4, 0.41])


acc = st.floats(0, 1)
by_eps_strategy = st.dictionaries(st.sampled_from([EPS8, EPS16, 0.1]),
                                  st.fixed_dictionaries({"fgsm": acc, "pgd": acc, "spsa": acc, "strong": acc}),
                                  min_size=1)


@settings(max_examples=100, deadline=None)
@given(clean=acc, by_eps=by_eps_strategy, unbounded=acc, m1=st.floats(0, 0.5), m2=st.floats(0, 0.5))
def test_flags_are_monotone_in_margin(clean, by_eps, unbounded, m1, m2):
    lo, hi = sorted((m1, m2))
    a = dg.checklist_from_accuracies(clean, by_eps, unbounded, lo).flags()
    b = dg.checklist_from_accuracies(clean, by_eps, unbounded, hi).flags()
    for name in a:
        assert a[name] or not b[name]


def test_overall_suspect_is_or_of_flags():
    rep = dg.checklist_from_accuracies(0.9, {EPS8: {"fgsm": 0.8, "pgd": 0.7, "spsa": 0.8, "strong": 0.7}}, 0.0)
    assert not rep.overall_suspect
    rep = dg.checklist_from_accuracies(0.9, {EPS8: {"fgsm": 0.8, "pgd": 0.7, "spsa": 0.1, "strong": 0.7}}, 0.0)
    assert rep.blackbox_beats_whitebox["flag"] and rep.overall_suspect


def test_failing_attack_leaves_partial_report(monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("attack exploded")

    monkeypatch.setattr(dg, "pgd_unbounded", boom)
    m, _ = centred_binary()
    rep = dg.run_checklist(m, ds_of(interior_points(5, 6), [0, 1, 0, 1, 0]), [EPS8], spsa_spec=FAST_SPSA)
    assert rep.unbounded_not_total["flag"] is None and "unbounded" in rep.errors
    assert rep.blackbox_beats_whitebox["flag"] is not None


# gaps ----------------------------------------------------------------------------------

def test_gap_quantities_at_zero_eps(standard_model, test_subset):
    g = dg.gap_quantities(standard_model, test_subset, 0.0)
    clean = float((predict(standard_model, test_subset.X) == test_subset.y).mean())
    assert g.fgsm_acc == g.pgd_acc == g.strong_acc == clean
    assert g.fgsm_minus_strong == g.fgsm_minus_pgd == 0.0


def test_gaps_are_differences_and_consistent(standard_model, test_subset):
    g = dg.gap_quantities(standard_model, test_subset, EPS16)
    assert abs(g.fgsm_minus_strong - (g.fgsm_acc - g.strong_acc)) <= 1e-12
    assert abs(g.fgsm_minus_pgd - (g.fgsm_acc - g.pgd_acc)) <= 1e-12
    assert g.strong_attack["restarts"] == 10 and g.strong_attack["iterations"] == 50
    same = dg.gap_quantities(standard_model, test_subset, EPS16, strong_spec=dg.BENCHMARK_PGD)
    assert same.fgsm_minus_strong == g.fgsm_minus_pgd


# cross-sections ----------------------------------------------------------------------------

def test_cross_section_starts_at_clean_loss(standard_model, test_subset):
    cs = dg.loss_cross_section(standard_model, test_subset, 2 * EPS16, 17)
    np.testing.assert_array_equal(cs.curves[:, 0], per_example_loss(standard_model, test_subset.X, test_subset.y))
    assert cs.t_grid[0] == 0.0 and (np.diff(cs.t_grid) > 0).all()
    np.testing.assert_allclose(cs.mean_curve, cs.curves.mean(axis=0), atol=1e-12)


def test_cross_section_two_points():
    m, _ = centred_binary()
    cs = dg.loss_cross_section(m, ds_of(interior_points(4, 6), [0, 1, 0, 1]), 0.1, 2)
    header, rows = cs.csv_rows()
    assert header == ["t", "mean_loss", "std_loss", "boundary_mean", "boundary_std"] and len(rows) == 2


@pytest.mark.parametrize("bad", [dict(t_max=0.0), dict(t_max=-1.0), dict(K=1)])
def test_cross_section_preconditions(bad):
    m, _ = centred_binary()
    with pytest.raises(ValueError):
        dg.loss_cross_section(m, ds_of(interior_points(2, 6), [0, 1]), **{"t_max": 0.1, "K": 5, **bad})


def test_linear_cross_section_is_monotone():
    m = linear_model(D=6, C=3, seed=4)
    x, y = interior_points(30, 6, seed=4, lo=0.4, hi=0.6), np.arange(30) % 3
    cs = dg.loss_cross_section(m, ds_of(x, y), 0.09, 10)  # never reaches the box
    assert (np.diff(cs.curves, axis=1) >= -1e-12).all()


def test_boundary_location_matches_hyperplane():
    m, w = centred_binary(seed=5)
    x = interior_points(20, 6, seed=5, lo=0.48, hi=0.52)
    y = predict(m, x)
    cs = dg.loss_cross_section(m, ds_of(x, y), 0.05, 11)
    s = np.sign(input_gradient(m, x, y))
    f = x @ w + (m.params["b0"][1] - m.params["b0"][0])
    t_star = np.abs(f) / np.abs(s @ w)  # logit difference reaches zero
    hit = np.isfinite(cs.boundary)
    assert hit.any()
    np.testing.assert_allclose(cs.boundary[hit], t_star[hit], atol=0.005 * 2.0 ** -19)


def test_cross_section_without_flips_has_no_boundary():
    x = interior_points(3, 6)
    cs = dg.loss_cross_section(constant_model(), ds_of(x, [0, 1, 2]), 0.1, 4)
    assert cs.boundary_mean is None and cs.boundary_std is None
    assert cs.csv_rows()[1][0][3] == ""


# robustness score ---------------------------------------------------------------------------

def test_robustness_score_linear_closed_form():
    m, w = centred_binary(seed=6)
    x = interior_points(30, 6, seed=6, lo=0.45, hi=0.55)
    c = m.params["b0"][1] - m.params["b0"][0]
    expected = np.mean(np.abs(x @ w + c) * 1.02 / (np.linalg.norm(w) * np.linalg.norm(x, axis=1)))
    rs = dg.robustness_score(m, ds_of(x, predict(m, x)))
    assert rs.n == 30 and rs.excluded == 0
    assert abs(rs.score - expected) <= 1e-6


def test_robustness_score_equal_norm_inputs():
    m, _ = centred_binary(seed=7)
    x = interior_points(20, 6, seed=7, lo=0.45, hi=0.55)
    x = x / np.linalg.norm(x, axis=1, keepdims=True) * 1.2  # every |x| = 1.2, still inside the cube
    rs = dg.robustness_score(m, ds_of(x, predict(m, x)))
    mean_dist = np.linalg.norm(deepfool(m, x, refine=True).delta, axis=1).mean()
    assert rs.score == pytest.approx(mean_dist / 1.2, rel=1e-12)


def test_robust_model_has_larger_score(zoo_models, test_subset):
    robust = dg.robustness_score(zoo_models["pgd_8"], test_subset).score
    assert robust > dg.robustness_score(zoo_models["standard"], test_subset).score


def test_robustness_score_needs_convergence():
    with pytest.raises(dg.DiagnosticError):
        dg.robustness_score(constant_model(), ds_of(interior_points(4, 6), [0, 0, 0, 0]))


# correlation ---------------------------------------------------------------------------------

def zoo_rows(metric_values, gap_values):
    return [(f"m{i}", {"a": mv}, {"gap": gv}) for i, (mv, gv) in enumerate(zip(metric_values, gap_values))]


def test_exact_linear_relation_gives_unit_correlation():
    gaps = np.array([0.1, 0.5, 0.2, 0.9])
    up = dg.correlation_matrix(zoo_rows(3 * gaps + 1, gaps))
    down = dg.correlation_matrix(zoo_rows(-2 * gaps + 4, gaps))
    assert abs(up.metric_gap["a"]["gap"] - 1.0) <= 1e-12
    assert abs(down.metric_gap["a"]["gap"] + 1.0) <= 1e-12


def test_constant_column_is_undefined():
    cm = dg.correlation_matrix(zoo_rows([0.3, 0.3, 0.3], [0.1, 0.2, 0.4]))
    assert cm.metric_gap["a"]["gap"] is None
    assert cm.to_dict()["pearson_metric_gap"]["a"]["gap"] is None


def test_correlation_needs_three_models():
    with pytest.raises(ValueError):
        dg.correlation_matrix(zoo_rows([0.1, 0.2], [0.3, 0.4]))


def test_spearman_uses_ranks():
    assert dg.spearman([1, 2, 3, 4], [1, 8, 27, 64]) == pytest.approx(1.0)
    assert dg.spearman([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)


@settings(max_examples=50, deadline=None)
@given(data=arrays(np.float64, (6, 3), elements=st.floats(-5, 5)), gaps=arrays(np.float64, 6, elements=st.floats(-1, 1)))
def test_correlation_matrix_properties(data, gaps):
    zoo = [(f"m{i}", {"a": r[0], "b": r[1], "c": r[2]}, {"g": g}) for i, (r, g) in enumerate(zip(data, gaps))]
    cm = dg.correlation_matrix(zoo)
    for a in cm.metrics:
        for b in cm.metrics:
            assert cm.metric_metric[a][b] == cm.metric_metric[b][a]
        r = cm.metric_gap[a]["g"]
        assert r is None or -1 <= r <= 1

"""Accuracy trends of the training modes on the bundled presets (3-seed means)."""

import pytest

pytestmark = pytest.mark.slow


def _ood(summary, mode):
    return summary["modes"][mode]["ood_accuracy_pct"]["mean"]


def test_scm_perfmatch_randmatch_erm_order(run_preset):
    summary, _ = run_preset("scm_spurious")
    assert _ood(summary, "perfmatch") >= _ood(summary, "randmatch") >= _ood(summary, "erm")


def test_scm_hybrid_at_least_matchdg(run_preset):
    summary, _ = run_preset("scm_spurious")
    assert _ood(summary, "mdghybrid") >= _ood(summary, "matchdg")


def test_glyph_matchdg_at_least_randmatch(run_preset):
    summary, _ = run_preset("glyphs_rot")
    assert _ood(summary, "matchdg") >= _ood(summary, "randmatch")


def test_ablation_fraction_has_five_monotone_modes(run_preset):
    summary, _ = run_preset("ablation_fraction")
    accs = [_ood(summary, name) for name in summary["order"]]
    assert len(accs) == 5
    # Same 1-point noise tolerance per step as the acceptance check.
    assert all(b - a >= -1.0 for a, b in zip(accs, accs[1:]))

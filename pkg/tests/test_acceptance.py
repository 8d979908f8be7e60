"""Acceptance suite: one test per criterion, sharing a single pipeline run.

The heavy work (corpus generation, both training stages, synthesis) happens
once in the session fixture; each test then checks its criterion and prints
a pass/fail line.
"""

import os

import pytest

from talkmotion.acceptance import CRITERION_NAMES, run_all

TIME_BUDGET_S = 1800.0


@pytest.fixture(scope="session")
def report(tmp_path_factory):
    seed = int(os.environ.get("CODETALKER_SEED", "0"))
    out = tmp_path_factory.mktemp("acceptance")
    return run_all(out, seed=seed, log=None)


def _check(report, num):
    result = report["criteria"][str(num)]
    status = "PASS" if result["passed"] else "FAIL"
    print(f"criterion {num} ({CRITERION_NAMES[num]}): {status}")
    assert result["passed"], result


def test_criterion_01_quantizer_oracle(report):
    _check(report, 1)


def test_criterion_02_straight_through_gradient(report):
    _check(report, 2)


def test_criterion_03_vq_loss_stop_gradients(report):
    _check(report, 3)


def test_criterion_04_stage_one_reconstruction(report):
    _check(report, 4)


def test_criterion_05_frozen_prior_hash(report):
    _check(report, 5)


def test_criterion_06_causality(report):
    _check(report, 6)


def test_criterion_07_lip_sync(report):
    _check(report, 7)


def test_criterion_08_style_monotonicity(report):
    _check(report, 8)


def test_criterion_09_metric_oracles(report):
    _check(report, 9)


def test_criterion_10_instance_norm(report):
    _check(report, 10)


def test_criterion_11_ce_variant(report):
    _check(report, 11)


def test_criterion_12_report_and_budget(report, tmp_path_factory):
    covered = sorted(int(k) for k in report["criteria"])
    status = "PASS" if (covered == list(range(1, 12))
                        and report["total_seconds"] <= TIME_BUDGET_S) else "FAIL"
    print(f"criterion 12 (reproduce budget and coverage): {status}")
    assert covered == list(range(1, 12))
    assert report["total_seconds"] <= TIME_BUDGET_S
    assert isinstance(report["all_passed"], bool)

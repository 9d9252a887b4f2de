"""Acceptance gate: every criterion at its stated tolerance.

Each test delegates to the package's self-verification suite (the same
checks behind `pairglow verify`) and prints one pass line with the
measured margins. The two training experiments run at full budget, so
this module dominates suite runtime.
"""

import pytest

import pairglow.verify as V

_BY_NAME = {c.name: c for c in V.CHECKS}

CRITERIA = [
    ("invertibility", "1"),
    ("change_of_variables", "2"),
    ("gradient_correctness", "3"),
    ("initialization_contracts", "4"),
    ("learning", "5"),
    ("conditioning_ablation", "6"),
    ("temperature_semantics", "7"),
    ("content_transfer", "8"),
    ("checkpointed_recomputation", "9"),
    ("persistence", "10"),
    ("boundary_maps", "11"),
]


@pytest.mark.parametrize("name,number", CRITERIA, ids=[c[0] for c in CRITERIA])
def test_acceptance_criterion(name, number):
    check = _BY_NAME[name]
    try:
        detail = check.fn()
    except V.CheckFailed as e:
        pytest.fail(f"criterion {number} ({name}): {e}")
    print(f"PASS criterion {number} ({name}): {detail}")

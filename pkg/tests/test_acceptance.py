"""The ten acceptance criteria, each at its stated tolerance and runtime budget.

One PASS/FAIL line per criterion is printed in the terminal summary.
"""

import pytest

from gazegate.verify import CHECKS, run_check

RESULTS = []


@pytest.mark.parametrize("check", CHECKS, ids=[f"{c.id}-{c.group}" for c in CHECKS])
def test_criterion(check):
    result = run_check(check)
    RESULTS.append(result)
    line = (f"criterion {result.id}: {'PASS' if result.passed else 'FAIL'} "
            f"({result.seconds:.2f}s, budget {result.budget:g}s) {result.name}: {result.detail}")
    print(line)
    assert result.passed, line

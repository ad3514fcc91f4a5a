import random

import pytest

from hiergrain.hierarchy import LabelTree, parse_tree


def random_tree(rng: random.Random, max_depth: int = 6, max_leaves: int = 64) -> LabelTree:
    """Random uniform-depth tree with at most ``max_leaves`` leaves."""
    depth = rng.randint(1, max_depth)
    paths = [(f"r{t}",) for t in range(rng.randint(1, 3))]
    for _ in range(2, depth + 1):
        budget = max_leaves - len(paths)
        nxt = []
        for p in paths:
            extra = rng.randint(0, min(2, budget))
            budget -= extra
            nxt.extend(p + (f"{p[-1]}.{k}",) for k in range(1 + extra))
        paths = nxt
    rng.shuffle(paths)
    return parse_tree("\n".join("/".join(p) for p in paths))


@pytest.fixture
def balanced4() -> LabelTree:
    return parse_tree("p/a\np/b\nq/c\nq/d")


# one PASS/FAIL line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

"""Shared pytest hooks: one printed verdict line per acceptance criterion.

The acceptance gate in test_acceptance.py has one test per numbered
criterion. This plugin collects their outcomes and prints a compact
``ACCEPTANCE CRITERION n: PASS/FAIL`` block after the summary, so the gate's
verdict is readable without scanning the full test list.
"""

import re

CRITERIA = {
    1: "all four loss forms match central finite differences "
       "(relative tolerance 1e-4, 64-bit, under one minute)",
    2: "zero advantage: plain policy gradients vanish exactly; "
       "entropy-augmented gradients equal -weight * entropy gradient to 1e-10",
    3: "entropy-augmented fine-tuning ends with higher rollout entropy than "
       "plain in at least 4 of 5 seed pairs",
    4: "median held-out report score: entropy-augmented >= plain >= likelihood, "
       "margin >= +0.02 absolute, pipeline under 30 CPU-minutes",
    5: "extraction inverts rendering over the whole template space; "
       "labels recoverable on 10,000 generated studies",
    6: "bleu4 and rouge_l reproduce >= 10 frozen golden cases each to 1e-9",
    7: "report positions take zero gradient from future tokens and nonzero "
       "gradient from the prompt, on 20 random tiny configurations",
    8: "1,000 impression-only decodes emit no findings content and no [NI]; "
       "beam width 1 matches greedy token-exactly on 200 studies",
    9: "the large preset constructs, runs forward/backward on a 2-study "
       "batch, and its parameter manifest matches the declared shapes",
}

_CRITERION = re.compile(r"test_criterion_(\d+)")
_outcomes = {}


def pytest_runtest_logreport(report):
    match = _CRITERION.search(report.nodeid)
    if not match:
        return
    number = int(match.group(1))
    if report.failed:
        _outcomes[number] = "FAIL"
    elif report.when == "call" and report.passed:
        _outcomes.setdefault(number, "PASS")
    elif report.skipped:
        _outcomes.setdefault(number, "SKIPPED")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    seen = [n for n in sorted(CRITERIA) if n in _outcomes]
    if not seen:
        return
    terminalreporter.section("acceptance criteria")
    for number in seen:
        terminalreporter.write_line(
            f"ACCEPTANCE CRITERION {number}: {_outcomes[number]} — {CRITERIA[number]}"
        )

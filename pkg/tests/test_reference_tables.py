"""What the reference table fixture is consistent with (not an acceptance criterion)."""

from __future__ import annotations

from decimal import Decimal

from cryptoscan.bench import VerdictCounts, compute_metrics

from test_acceptance import load_reference_rows


def rounded(row: dict, gtm_total: int):
    counts = VerdictCounts(*(int(row[k]) for k in ("TP", "FP", "TN", "FN")), gtm_total)
    return compute_metrics(counts).rounded()


def printed(row: dict, key: str) -> Decimal:
    return Decimal(row[key])


def test_precision_matches_every_row():
    rows = load_reference_rows()
    assert all(rounded(r, 1)[0] == printed(r, "P") for r in rows)


def test_recall_fits_a_153_denominator_for_the_crafted_benchmark():
    rows = load_reference_rows()
    misses_154 = [r for r in rows if r["table"] == "II" and rounded(r, 154)[1] != printed(r, "R")]
    assert len(misses_154) == 10
    assert all(rounded(r, 153 if r["table"] == "II" else 53)[1] == printed(r, "R") for r in rows)


def test_accuracy_uses_the_row_sum_except_two_rows():
    rows = load_reference_rows()
    misses = [(r["model"], r["validation"], r["mode"]) for r in rows if rounded(r, 1)[2] != printed(r, "ACC")]
    assert misses == [("GPT-4", "w/oV", "UC"), ("DeepSeek", "w/V", "TA")]


def test_row_sums_are_not_constant():
    sums = {(r["table"], sum(int(r[k]) for k in ("TP", "FP", "TN", "FN"))) for r in load_reference_rows()}
    assert {s for t, s in sums if t == "II"} == {181, 184, 185}
    assert len({s for t, s in sums if t == "III"}) > 10

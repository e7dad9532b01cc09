"""Task scoring.

SI uses the character-overlap scorer: with C(s, t, h) = |s intersect t| / h
over same-article span pairs,

    P = (1/|S|) * sum_{s in S, t in T} C(s, t, |s|)
    R = (1/|T|) * sum_{s in S, t in T} C(s, t, |t|)

so partial overlaps earn partial credit. TC pools true/false positives and
negatives over all technique assignments (micro-averaged F), with a
per-class breakdown. Duplicate identical gold spans count as distinct
multiset members.
"""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field

from .errors import ContractError


@dataclass(frozen=True)
class ClassScore:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass(frozen=True)
class ScoreReport:
    precision: float
    recall: float
    f1: float
    per_class: dict[str, ClassScore] | None = None


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def _check_span(s):
    if not (0 <= s.begin < s.end):
        raise ContractError(f"malformed span ({s.begin}, {s.end}) in article {s.article_id}")


def si_score(predicted, gold) -> ScoreReport:
    """Overlap precision/recall/F over character spans.

    Empty predicted set scores P = 0 (and F = 0) unless gold is also empty,
    in which case P = R = F = 1.
    """
    predicted, gold = list(predicted), list(gold)
    for s in predicted:
        _check_span(s)
    for t in gold:
        _check_span(t)
    if not predicted and not gold:
        return ScoreReport(1.0, 1.0, 1.0)

    gold_by_article = defaultdict(list)
    for t in gold:
        gold_by_article[t.article_id].append(t)

    p_sum = 0.0
    r_sum = 0.0
    for s in predicted:
        for t in gold_by_article.get(s.article_id, ()):
            inter = min(s.end, t.end) - max(s.begin, t.begin)
            if inter > 0:
                p_sum += inter / (s.end - s.begin)
                r_sum += inter / (t.end - t.begin)
    precision = p_sum / len(predicted) if predicted else 0.0
    recall = r_sum / len(gold) if gold else 0.0
    return ScoreReport(precision, recall, _f1(precision, recall))


def tc_micro_f(predicted, gold, label_names=None) -> ScoreReport:
    """Micro-averaged F over technique assignments matched by (article, begin, end).

    Gold spans are given in the TC task, so every prediction row must pair
    with a gold identity; an unmatched prediction is a contract violation.
    """
    gold_by_key: dict[tuple, Counter] = defaultdict(Counter)
    for t in gold:
        if t.technique is None:
            raise ContractError("gold TC rows must carry a technique")
        gold_by_key[(t.article_id, t.begin, t.end)][t.technique] += 1

    pred_by_key: dict[tuple, Counter] = defaultdict(Counter)
    for s in predicted:
        if s.technique is None:
            raise ContractError("predicted TC rows must carry a technique")
        key = (s.article_id, s.begin, s.end)
        if key not in gold_by_key:
            raise ContractError(
                f"prediction row {s.article_id}\t{s.technique}\t{s.begin}\t{s.end} "
                "matches no gold span")
        pred_by_key[key][s.technique] += 1

    tp = Counter()
    fp = Counter()
    fn = Counter()
    support = Counter()
    for key, gold_counts in gold_by_key.items():
        pred_counts = pred_by_key.get(key, Counter())
        hits = gold_counts & pred_counts
        tp.update(hits)
        fp.update(pred_counts - hits)
        fn.update(gold_counts - hits)
        support.update(gold_counts)

    names = list(label_names) if label_names is not None else sorted(
        set(support) | set(fp))
    per_class = {}
    for name in names:
        p = tp[name] / (tp[name] + fp[name]) if tp[name] + fp[name] > 0 else 0.0
        r = tp[name] / (tp[name] + fn[name]) if tp[name] + fn[name] > 0 else 0.0
        per_class[name] = ClassScore(p, r, _f1(p, r), support[name])

    tp_all, fp_all, fn_all = sum(tp.values()), sum(fp.values()), sum(fn.values())
    precision = tp_all / (tp_all + fp_all) if tp_all + fp_all > 0 else 0.0
    recall = tp_all / (tp_all + fn_all) if tp_all + fn_all > 0 else 0.0
    return ScoreReport(precision, recall, _f1(precision, recall), per_class=per_class)


def format_report(report: ScoreReport, task: str) -> str:
    """Human-readable aligned text block."""
    lines = [f"task       {task}",
             f"precision  {report.precision:.6f}",
             f"recall     {report.recall:.6f}",
             f"f1         {report.f1:.6f}"]
    if report.per_class:
        width = max(len(n) for n in report.per_class)
        lines.append("")
        lines.append(f"{'technique'.ljust(width)}  precision  recall     f1         support")
        for name, cs in report.per_class.items():
            lines.append(f"{name.ljust(width)}  {cs.precision:<9.6f}  {cs.recall:<9.6f}  "
                         f"{cs.f1:<9.6f}  {cs.support}")
    return "\n".join(lines)


def report_rows(report: ScoreReport) -> list[tuple[str, str]]:
    """Machine-readable (metric, value) rows."""
    rows = [("precision", f"{report.precision:.6f}"),
            ("recall", f"{report.recall:.6f}"),
            ("f1", f"{report.f1:.6f}")]
    if report.per_class:
        for name, cs in report.per_class.items():
            rows.append((f"f1[{name}]", f"{cs.f1:.6f}"))
            rows.append((f"support[{name}]", str(cs.support)))
    return rows

"""Impression-level ranking metrics, engagement-quintile analysis, and
parameter accounting.

Per-impression metrics are pure functions; means use math.fsum so the
aggregation order can never change a reported number. Scores are pushed
through the prediction-dump precision (9 significant digits) before
ranking, which makes dump-based and in-process evaluation identical by
construction.
"""

import math
from dataclasses import dataclass, field

import numpy as np


class DegenerateImpression(ValueError):
    """Impression with a single label class; ranking quality undefined."""


class NoPositive(ValueError):
    pass


class MissingScores(KeyError):
    def __init__(self, impression_id):
        self.impression_id = impression_id
        super().__init__(impression_id)


class BaselineMissing(KeyError):
    pass


SCORE_FORMAT = "%.9g"


def canonical_scores(scores):
    """Round scores to the dump's printed precision."""
    return [float(SCORE_FORMAT % s) for s in scores]


def metric_auc(scores, labels):
    """Probability that a random positive outranks a random negative,
    ties counting one half (rank-sum formulation)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateImpression("need at least one positive and one negative")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    i = 0
    sorted_scores = scores[order]
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    pos_rank_sum = ranks[labels == 1].sum()
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def metric_mrr(scores, labels):
    """Mean reciprocal rank over positives; ties broken by candidate index."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if not (labels == 1).any():
        raise NoPositive("impression has no clicked candidate")
    order = np.argsort(-scores, kind="stable")
    rr = [1.0 / (rank + 1) for rank, idx in enumerate(order) if labels[idx] == 1]
    return math.fsum(rr) / len(rr)


def metric_ndcg(scores, labels, k):
    """Normalized DCG at k with 2^label - 1 gains and log2(rank+1) discount."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if not (labels > 0).any():
        raise NoPositive("impression has no clicked candidate")

    def dcg(ordered_labels):
        return math.fsum((2.0 ** l - 1.0) / math.log2(r + 2)
                         for r, l in enumerate(ordered_labels[:k]))

    order = np.argsort(-scores, kind="stable")
    ideal = np.sort(labels)[::-1]
    return dcg(labels[order]) / dcg(ideal)


@dataclass
class MetricReport:
    auc: float
    mrr: float
    ndcg5: float
    ndcg10: float
    impression_count: int
    skipped_single_class: int = 0
    per_impression: dict = field(default_factory=dict)

    def render(self):
        return (f"impressions {self.impression_count} "
                f"(skipped single-class: {self.skipped_single_class})\n"
                f"AUC    {self.auc:.2f}\n"
                f"MRR    {self.mrr:.2f}\n"
                f"nDCG@5 {self.ndcg5:.2f}\n"
                f"nDCG@10 {self.ndcg10:.2f}")


def evaluate_scores(scored_impressions, keep_per_impression=True) -> MetricReport:
    """Aggregate per-impression metrics, reported as percentages.

    scored_impressions: iterable of (impression_id, scores, labels).
    Impressions without both classes are skipped for every metric and
    counted. Scores are canonicalized to dump precision first.
    """
    aucs, mrrs, n5s, n10s = [], [], [], []
    per = {}
    skipped = 0
    total = 0
    for imp_id, scores, labels in scored_impressions:
        total += 1
        labels = np.asarray(labels)
        scores = np.asarray(canonical_scores(scores))
        if not (labels == 1).any() or not (labels == 0).any():
            skipped += 1
            continue
        rec = (metric_auc(scores, labels), metric_mrr(scores, labels),
               metric_ndcg(scores, labels, 5), metric_ndcg(scores, labels, 10))
        if keep_per_impression:
            per[imp_id] = rec
        aucs.append(rec[0])
        mrrs.append(rec[1])
        n5s.append(rec[2])
        n10s.append(rec[3])
    if not aucs:
        raise DegenerateImpression("no impression had both classes")
    mean = lambda xs: 100.0 * math.fsum(xs) / len(xs)
    return MetricReport(mean(aucs), mean(mrrs), mean(n5s), mean(n10s),
                        impression_count=len(aucs), skipped_single_class=skipped,
                        per_impression=per)


def write_prediction_dump(path, scored_impressions):
    """One line per impression: id, tab, comma-separated candidate scores."""
    with open(path, "w", encoding="utf-8") as f:
        for imp_id, scores in scored_impressions:
            f.write(imp_id)
            f.write("\t")
            f.write(",".join(SCORE_FORMAT % s for s in scores))
            f.write("\n")


def read_prediction_dump(path):
    out = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            imp_id, _, rest = line.partition("\t")
            out[imp_id] = [float(x) for x in rest.split(",")]
    return out


def evaluate_run(predictions, impressions) -> MetricReport:
    """Score a prediction dump (path or {impression_id: scores}) against
    labeled impressions."""
    if not isinstance(predictions, dict):
        predictions = read_prediction_dump(predictions)

    def gen():
        for imp in impressions:
            if imp.impression_id not in predictions:
                raise MissingScores(imp.impression_id)
            scores = predictions[imp.impression_id]
            labels = [lab for _, lab in imp.candidates]
            if len(scores) != len(labels):
                raise MissingScores(imp.impression_id)
            yield imp.impression_id, scores, labels

    return evaluate_scores(gen())


# ---------------------------------------------------------------------------
# engagement groups

@dataclass
class GroupPartition:
    groups: list            # list of user-id lists, coldest first
    mean_history_lengths: list
    user_history_lengths: dict

    def group_of(self):
        return {uid: gi for gi, users in enumerate(self.groups) for uid in users}


def bucket_users(impressions, num_groups=5) -> GroupPartition:
    """Sort users by click-history length (ties by user id) and cut at the
    20/40/60/80th percentiles into contiguous groups.

    A user's history length is the longest history observed across their
    impressions.
    """
    lengths = {}
    for imp in impressions:
        lengths[imp.user_id] = max(lengths.get(imp.user_id, 0), len(imp.history))
    users = sorted(lengths, key=lambda u: (lengths[u], u))
    n = len(users)
    cuts = [math.ceil(n * i / num_groups) for i in range(num_groups + 1)]
    groups = [users[cuts[i]:cuts[i + 1]] for i in range(num_groups)]
    means = [math.fsum(lengths[u] for u in g) / len(g) if g else 0.0 for g in groups]
    return GroupPartition(groups=groups, mean_history_lengths=means,
                          user_history_lengths=lengths)


@dataclass
class GroupReport:
    baseline: str
    user_counts: list
    mean_history_lengths: list
    auc: dict                # encoder -> [auc per group], percentages
    relative_change: dict    # encoder -> [(auc-base)/base per group]

    def render(self):
        lines = [f"baseline: {self.baseline}"]
        header = "group  users  mean_hist  " + "  ".join(
            f"{name:>10}" for name in self.auc)
        lines.append(header)
        for gi in range(len(self.user_counts)):
            row = (f"{gi + 1:>5}  {self.user_counts[gi]:>5}  "
                   f"{self.mean_history_lengths[gi]:>9.2f}  ")
            row += "  ".join(f"{self.auc[name][gi]:>10.2f}" for name in self.auc)
            lines.append(row)
        return "\n".join(lines)


def group_report(partition, reports_by_encoder, baseline) -> GroupReport:
    """Per-group AUC for each encoder plus relative change against a named
    baseline encoder. Reports must carry per-impression records keyed by
    impression id, with user resolution via ``impression_users``."""
    if baseline not in reports_by_encoder:
        raise BaselineMissing(baseline)
    group_of = partition.group_of()
    n_groups = len(partition.groups)
    auc = {}
    for name, (report, impression_users) in reports_by_encoder.items():
        sums = [[] for _ in range(n_groups)]
        for imp_id, rec in report.per_impression.items():
            gi = group_of.get(impression_users[imp_id])
            if gi is not None:
                sums[gi].append(rec[0])
        auc[name] = [100.0 * math.fsum(s) / len(s) if s else float("nan")
                     for s in sums]
    base = auc[baseline]
    rel = {name: [(a - b) / b if b else float("nan") for a, b in zip(vals, base)]
           for name, vals in auc.items()}
    return GroupReport(
        baseline=baseline,
        user_counts=[len(g) for g in partition.groups],
        mean_history_lengths=partition.mean_history_lengths,
        auc=auc, relative_change=rel)


# ---------------------------------------------------------------------------
# parameter accounting

@dataclass
class ParamAccount:
    total: int
    trainable: int
    by_component: dict       # component -> (total, trainable)

    def render(self):
        lines = [f"total {self.total}  trainable {self.trainable}"]
        for comp, (tot, tr) in sorted(self.by_component.items()):
            lines.append(f"  {comp:<6} total {tot:>12}  trainable {tr:>12}")
        return "\n".join(lines)


def count_params(graph) -> ParamAccount:
    """Sizes by name prefix (lm / fc / arch / user); trainable respects the
    freeze flags."""
    total = 0
    trainable = 0
    by_component = {}
    for name, info in graph.items():
        size = info.tensor.data.size
        comp = name.split(".", 1)[0]
        t, tr = by_component.get(comp, (0, 0))
        total += size
        t += size
        if info.trainable:
            trainable += size
            tr += size
        by_component[comp] = (t, tr)
    return ParamAccount(total=total, trainable=trainable, by_component=by_component)

"""
Metrics, ROC and the benchmark table
====================================

Recovers an integer confusion matrix from four rounded metrics and shows
the rank-based AUC agreeing with the trapezoid under the ROC curve.
"""

from trio_fundus import evaluation as ev

# a 640-image test split: 46 positives, 33 of them found, 4 false alarms
row = ev.compute_metrics(ev.Confusion(tp=33, fp=4, tn=590, fn=13), "DN")
print(row)

print("integer consistent:", ev.is_integer_consistent(row, 640))

scores = [0.9, 0.8, 0.3, 0.2]
labels = [1, 0, 1, 0]
roc = ev.roc_auc(scores, labels)
print("trapezoid AUC", roc.trapezoid_auc())

# ties share average ranks, so a fully tied set sits at 0.5
print("all tied", ev.roc_auc([0.5] * 4, labels).trapezoid_auc())

# a zero benchmark has no percent difference, only a flag
bench = {"DN": 0.607, "ODP": 0.0}
odp = ev.MetricsRow("ODP", 0.99, 0.5, 0.6, 0.55, 0.8)
for d in ev.benchmark_compare([row, odp], bench):
    print(d.disease, d.percent_diff, d.flag, d.note)

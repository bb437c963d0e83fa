"""Agreement, correlation, ROC, and clustered-bootstrap statistics.

Everything here treats the participant as the unit of resampling:
confidence intervals and P-values come from a percentile bootstrap that
draws whole patient clusters with replacement, which stands in for GEE
when comparing means of repeated, correlated measurements (the report
labels it as such). Two-sided bootstrap P-values use the small-sample
correction (count + 1) / (B + 1).

ROC follows the Mann-Whitney convention: ties between case and control
scores earn half credit, so the AUC equals exhaustive concordant-pair
counting exactly. Thickness-like scores declare ``low_is_disease=True``
and are negated internally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class StatsError(ValueError):
    """Statistic undefined for this input."""


def _as_vector(x, name):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise StatsError(f"{name} must be 1-D, got shape {arr.shape}")
    return arr


def _paired(pred, obs):
    p = _as_vector(pred, "pred")
    o = _as_vector(obs, "obs")
    if p.size != o.size:
        raise StatsError(f"length mismatch: {p.size} vs {o.size}")
    if p.size == 0:
        raise StatsError("empty input")
    return p, o


# ---------------------------------------------------------------------------
# agreement and correlation


def mae(pred, obs):
    """Mean absolute error of the predictions."""
    p, o = _paired(pred, obs)
    return float(np.abs(p - o).mean())


def pearson(pred, obs):
    """Product-moment correlation; undefined for constant inputs."""
    p, o = _paired(pred, obs)
    if p.size < 3:
        raise StatsError("pearson needs n >= 3")
    dp = p - p.mean()
    do = o - o.mean()
    denom = math.sqrt(float((dp * dp).sum()) * float((do * do).sum()))
    if denom == 0.0:
        raise StatsError("pearson undefined: at least one vector is constant")
    return float((dp * do).sum()) / denom


def bland_altman(pred, obs):
    """(bias, loa_low, loa_high): mean difference +/- 1.96 sample SD."""
    p, o = _paired(pred, obs)
    if p.size < 2:
        raise StatsError("bland_altman needs n >= 2")
    d = p - o
    bias = float(d.mean())
    sd = float(d.std(ddof=1))
    return bias, bias - 1.96 * sd, bias + 1.96 * sd


# ---------------------------------------------------------------------------
# ROC


@dataclass
class RocResult:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float
    ci_low: float = float("nan")
    ci_high: float = float("nan")
    n_boot: int = 0


def _auc_rank(scores, labels):
    """Mann-Whitney AUC via midranks; exact for ties.

    The numerator 2*R1 - n1*(n1+1) is integer-valued (midranks are
    multiples of 1/2), so the division is the only float operation and
    the result matches brute-force pair counting bit for bit.
    """
    n1 = int(labels.sum())
    n0 = labels.size - n1
    order = np.argsort(scores, kind="stable")
    s_sorted = scores[order]
    ranks2 = np.empty(labels.size, dtype=np.int64)  # 2 * midrank
    i = 0
    while i < labels.size:
        j = i
        while j + 1 < labels.size and s_sorted[j + 1] == s_sorted[i]:
            j += 1
        ranks2[order[i:j + 1]] = (i + 1) + (j + 1)   # 2 * (average rank)
        i = j + 1
    r1_doubled = int(ranks2[labels == 1].sum())
    return (r1_doubled - n1 * (n1 + 1)) / (2 * n1 * n0)


def roc_auc(scores, labels, low_is_disease=False):
    """ROC curve and AUC. ``labels`` are 1 for disease, 0 for controls.

    ``low_is_disease=True`` declares that smaller scores indicate
    disease (thickness-like direction); scores are negated internally so
    the returned curve always reads in the usual orientation.
    """
    s = _as_vector(scores, "scores")
    y = _as_vector(labels, "labels").astype(int)
    if set(np.unique(y)) - {0, 1}:
        raise StatsError("labels must be 0/1")
    n1 = int(y.sum())
    n0 = y.size - n1
    if n1 == 0 or n0 == 0:
        raise StatsError("roc_auc needs both classes present")
    if low_is_disease:
        s = -s

    auc = _auc_rank(s, y)

    # operating points from every distinct threshold, descending
    order = np.argsort(-s, kind="stable")
    s_desc = s[order]
    y_desc = y[order]
    distinct = np.nonzero(np.diff(s_desc))[0]
    cuts = np.concatenate([distinct, [y.size - 1]])
    tps = np.cumsum(y_desc)[cuts]
    fps = (cuts + 1) - tps
    tpr = np.concatenate([[0.0], tps / n1])
    fpr = np.concatenate([[0.0], fps / n0])
    thresholds = np.concatenate([[np.inf], s_desc[cuts]])
    return RocResult(fpr=fpr, tpr=tpr, thresholds=thresholds, auc=float(auc))


# ---------------------------------------------------------------------------
# clustered bootstrap


@dataclass
class BootstrapResult:
    estimate: float
    ci_low: float
    ci_high: float
    samples: np.ndarray
    n_boot: int


def _cluster_index(cluster_ids):
    ids = np.asarray(cluster_ids)
    uniq, inverse = np.unique(ids, return_inverse=True)
    members = [np.nonzero(inverse == k)[0] for k in range(uniq.size)]
    return uniq, members


def cluster_bootstrap(statistic, data, cluster_ids, n_boot=2000, seed=0):
    """Percentile CI of ``statistic`` under cluster resampling.

    ``data`` is a tuple of equal-length arrays (or a single array);
    every bootstrap replicate draws clusters with replacement and passes
    the row-gathered arrays to ``statistic``. Replicates where the
    statistic is undefined (raises StatsError) are redrawn, so the
    result is still deterministic in ``seed``.
    """
    if n_boot < 100:
        raise StatsError("cluster_bootstrap needs n_boot >= 100")
    arrays = data if isinstance(data, tuple) else (data,)
    arrays = tuple(np.asarray(a) for a in arrays)
    n = arrays[0].shape[0]
    if any(a.shape[0] != n for a in arrays):
        raise StatsError("data arrays must share their first dimension")
    uniq, members = _cluster_index(cluster_ids)
    if uniq.size < 2:
        raise StatsError("cluster_bootstrap needs at least 2 clusters")

    estimate = float(statistic(*arrays))
    rng = np.random.default_rng(seed)
    samples = np.empty(n_boot)
    for b in range(n_boot):
        while True:
            chosen = rng.integers(0, uniq.size, size=uniq.size)
            rows = np.concatenate([members[c] for c in chosen])
            try:
                samples[b] = statistic(*(a[rows] for a in arrays))
            except StatsError:
                continue
            break
    lo, hi = np.percentile(samples, [2.5, 97.5])
    return BootstrapResult(estimate, float(lo), float(hi), samples, n_boot)


def bootstrap_p_value(samples):
    """Two-sided sign-crossing P for a bootstrap difference distribution:
    2 * min(P(delta <= 0), P(delta >= 0)) with the (count+1)/(B+1)
    correction, capped at 1."""
    s = np.asarray(samples)
    b = s.size
    p_low = (int((s <= 0).sum()) + 1) / (b + 1)
    p_high = (int((s >= 0).sum()) + 1) / (b + 1)
    return min(1.0, 2.0 * min(p_low, p_high))


def compare_auc(scores_a, scores_b, labels, cluster_ids, n_boot=2000, seed=0,
                low_is_disease=False):
    """Paired AUC difference test under cluster resampling.

    Returns (auc_a, auc_b, p). Both score vectors must be defined on the
    same samples.
    """
    a = _as_vector(scores_a, "scores_a")
    b = _as_vector(scores_b, "scores_b")
    y = _as_vector(labels, "labels")
    if a.size != b.size or a.size != y.size:
        raise StatsError("compare_auc needs paired scores on identical samples")

    def delta(sa, sb, yy):
        return (roc_auc(sa, yy, low_is_disease).auc
                - roc_auc(sb, yy, low_is_disease).auc)

    boot = cluster_bootstrap(delta, (a, b, y), cluster_ids, n_boot, seed)
    auc_a = roc_auc(a, y, low_is_disease).auc
    auc_b = roc_auc(b, y, low_is_disease).auc
    return auc_a, auc_b, bootstrap_p_value(boot.samples)


def auc_with_ci(scores, labels, cluster_ids, n_boot=2000, seed=0, low_is_disease=False):
    """RocResult with a cluster-bootstrap percentile CI attached."""
    result = roc_auc(scores, labels, low_is_disease)
    boot = cluster_bootstrap(
        lambda s, y: roc_auc(s, y, low_is_disease).auc,
        (np.asarray(scores, dtype=np.float64), np.asarray(labels)),
        cluster_ids, n_boot, seed)
    result.ci_low = boot.ci_low
    result.ci_high = boot.ci_high
    result.n_boot = n_boot
    return result


# ---------------------------------------------------------------------------
# sensitivity at fixed specificity


def _sens_at_spec_point(scores, labels, spec, low_is_disease):
    """Conservative rule: the most permissive threshold still achieving
    specificity >= spec on the controls."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if low_is_disease:
        s = -s  # now: higher score indicates disease, positive iff s >= t
    controls = np.sort(s[y == 0])
    cases = np.sort(s[y == 1])
    if controls.size == 0 or cases.size == 0:
        raise StatsError("sens_at_spec needs both classes present")
    thresholds = np.unique(s)
    spec_at = np.searchsorted(controls, thresholds, side="left") / controls.size
    ok = spec_at >= spec
    if not ok.any():
        return 0.0
    sens_at = (cases.size - np.searchsorted(cases, thresholds, side="left")) / cases.size
    return float(sens_at[ok].max())


def sens_at_spec(scores, labels, spec, cluster_ids, n_boot=2000, seed=0,
                 low_is_disease=False):
    """Sensitivity at fixed specificity with a cluster-bootstrap CI.

    Returns (sensitivity, ci_low, ci_high). The threshold is re-derived
    inside every bootstrap replicate.
    """
    if not 0.0 < spec < 1.0:
        raise StatsError(f"spec must be in (0, 1), got {spec}")
    point = _sens_at_spec_point(scores, labels, spec, low_is_disease)
    boot = cluster_bootstrap(
        lambda s, y: _sens_at_spec_point(s, y, spec, low_is_disease),
        (np.asarray(scores, dtype=np.float64), np.asarray(labels)),
        cluster_ids, n_boot, seed)
    return point, boot.ci_low, boot.ci_high


# ---------------------------------------------------------------------------
# LOWESS


def lowess(x, y, span=2.0 / 3.0, robust_iters=3):
    """Locally weighted linear regression with tricube weights.

    Fits at every data point over the ``ceil(span * n)`` nearest
    neighbors, with ``robust_iters`` bisquare reweighting passes.
    Windows whose x values are all identical fall back to the weighted
    window mean. Returns (x_sorted, fitted).
    """
    xv = _as_vector(x, "x")
    yv = _as_vector(y, "y")
    if xv.size != yv.size:
        raise StatsError("x and y must have equal length")
    n = xv.size
    if n < 5:
        raise StatsError("lowess needs n >= 5")
    if not 0.0 < span <= 1.0:
        raise StatsError("span must be in (0, 1]")
    order = np.argsort(xv, kind="stable")
    xs = xv[order]
    ys = yv[order]
    k = min(n, int(math.ceil(span * n)))

    fitted = np.zeros(n)
    delta = np.ones(n)
    for iteration in range(robust_iters + 1):
        for i in range(n):
            d = np.abs(xs - xs[i])
            h = np.sort(d)[k - 1]
            if h <= 0.0:
                w = delta * (d == 0.0)
                fitted[i] = float((w * ys).sum() / w.sum()) if w.sum() > 0 else ys[i]
                continue
            u = np.clip(d / h, 0.0, 1.0)
            w = (1.0 - u ** 3) ** 3 * delta
            sw = w.sum()
            if sw <= 0.0:
                fitted[i] = ys[i]
                continue
            xm = (w * xs).sum() / sw
            ym = (w * ys).sum() / sw
            sxx = (w * (xs - xm) ** 2).sum()
            if sxx <= 1e-12 * max(1.0, xm * xm):
                fitted[i] = ym
                continue
            slope = (w * (xs - xm) * (ys - ym)).sum() / sxx
            fitted[i] = ym + slope * (xs[i] - xm)
        if iteration == robust_iters:
            break
        resid = ys - fitted
        s = np.median(np.abs(resid))
        if s <= 0.0:
            break
        delta = np.clip(resid / (6.0 * s), -1.0, 1.0)
        delta = (1.0 - delta ** 2) ** 2
    return xs, fitted


# ---------------------------------------------------------------------------
# mean comparison and classification agreement


def cluster_mean_diff(pred, obs, cluster_ids, n_boot=2000, seed=0):
    """Cluster-bootstrap test of mean(pred - obs) = 0; a declared
    GEE-approximation for paired repeated measures.

    Returns (mean_pred, mean_obs, p).
    """
    p, o = _paired(pred, obs)
    boot = cluster_bootstrap(lambda a, b: float((a - b).mean()), (p, o),
                             cluster_ids, n_boot, seed)
    return float(p.mean()), float(o.mean()), bootstrap_p_value(boot.samples)


NORMATIVE_TO_BINARY = {"within": "normal", "borderline": "normal", "outside": "abnormal"}


def classification_accuracy(predicted_class, reference_class):
    """Agreement with the normative-database classification.

    References in {within, borderline, outside} are first mapped to
    binary (borderline counts as normal, keeping specificity high);
    predictions may arrive as normal/abnormal or in the same 3-class
    scheme. Returns (accuracy, confusion) where confusion[i][j] counts
    reference i x predicted j over (normal, abnormal).
    """
    binary = ("normal", "abnormal")

    def to_binary(label, kind):
        if label in binary:
            return label
        if label in NORMATIVE_TO_BINARY:
            return NORMATIVE_TO_BINARY[label]
        raise StatsError(f"unknown {kind} class {label!r}")

    if len(predicted_class) != len(reference_class):
        raise StatsError("prediction/reference length mismatch")
    if len(reference_class) == 0:
        raise StatsError("empty input")
    confusion = np.zeros((2, 2), dtype=int)
    hits = 0
    for pred, ref in zip(predicted_class, reference_class):
        pb = to_binary(pred, "predicted")
        rb = to_binary(ref, "reference")
        confusion[binary.index(rb), binary.index(pb)] += 1
        hits += pb == rb
    return hits / len(reference_class), confusion


# ---------------------------------------------------------------------------
# report assembly


@dataclass
class EvalReport:
    n_rows: int = 0
    n_patients: int = 0
    n_boot: int = 0
    seed: int = 0
    mae: float = float("nan")
    pearson_r: float = float("nan")
    r_squared: float = float("nan")
    bias: float = float("nan")
    loa_low: float = float("nan")
    loa_high: float = float("nan")
    mean_pred: float = float("nan")
    mean_obs: float = float("nan")
    mean_diff_p: float = float("nan")
    auc_pred: RocResult | None = None
    auc_obs: RocResult | None = None
    auc_diff_p: float = float("nan")
    sens_pred: dict = field(default_factory=dict)   # spec -> (sens, lo, hi)
    sens_obs: dict = field(default_factory=dict)
    classification_acc: float | None = None
    confusion: np.ndarray | None = None
    lowess_pred: tuple | None = None                # (md_sorted, fitted_pred)
    lowess_obs: tuple | None = None


def build_report(pred_um, obs_um, cluster_ids, diagnosis, sap_md=None,
                 normative=None, predicted_class=None, n_boot=2000, seed=0):
    """Assemble every test-set statistic into an EvalReport.

    ROC statistics discriminate glaucoma from normal eyes (suspects are
    excluded from that contrast, matching the diagnostic-accuracy
    question); thickness scores run in the low-is-disease direction.
    """
    pred, obs = _paired(pred_um, obs_um)
    clusters = np.asarray(cluster_ids)
    diag = np.asarray(diagnosis)

    report = EvalReport(n_rows=pred.size, n_patients=len(set(clusters.tolist())),
                        n_boot=n_boot, seed=seed)
    report.mae = mae(pred, obs)
    report.pearson_r = pearson(pred, obs)
    report.r_squared = report.pearson_r ** 2
    report.bias, report.loa_low, report.loa_high = bland_altman(pred, obs)
    report.mean_pred, report.mean_obs, report.mean_diff_p = cluster_mean_diff(
        pred, obs, clusters, n_boot, seed)

    contrast = (diag == "glaucoma") | (diag == "normal")
    if contrast.any():
        y = (diag[contrast] == "glaucoma").astype(float)
        if 0 < y.sum() < y.size:
            sub_clusters = clusters[contrast]
            report.auc_pred = auc_with_ci(pred[contrast], y, sub_clusters,
                                          n_boot, seed, low_is_disease=True)
            report.auc_obs = auc_with_ci(obs[contrast], y, sub_clusters,
                                         n_boot, seed, low_is_disease=True)
            _, _, report.auc_diff_p = compare_auc(pred[contrast], obs[contrast], y,
                                                  sub_clusters, n_boot, seed,
                                                  low_is_disease=True)
            for spec in (0.80, 0.95):
                report.sens_pred[spec] = sens_at_spec(pred[contrast], y, spec,
                                                      sub_clusters, n_boot, seed,
                                                      low_is_disease=True)
                report.sens_obs[spec] = sens_at_spec(obs[contrast], y, spec,
                                                     sub_clusters, n_boot, seed,
                                                     low_is_disease=True)

    if sap_md is not None:
        md = _as_vector(sap_md, "sap_md")
        if md.size >= 5:
            report.lowess_pred = lowess(md, pred)
            report.lowess_obs = lowess(md, obs)

    if normative is not None and predicted_class is not None:
        report.classification_acc, report.confusion = classification_accuracy(
            predicted_class, normative)
    return report


def report_csv_lines(report: EvalReport):
    """Flatten the report into metric,value,ci_low,ci_high,detail rows."""
    def fmt(v):
        return "" if v is None else repr(float(v))

    rows = [("n_rows", report.n_rows, "", "", ""),
            ("n_patients", report.n_patients, "", "", ""),
            ("n_boot", report.n_boot, "", "", ""),
            ("mae_um", fmt(report.mae), "", "", ""),
            ("pearson_r", fmt(report.pearson_r), "", "", ""),
            ("r_squared", fmt(report.r_squared), "", "", ""),
            ("bland_altman_bias_um", fmt(report.bias), fmt(report.loa_low),
             fmt(report.loa_high), "limits of agreement"),
            ("mean_pred_um", fmt(report.mean_pred), "", "", ""),
            ("mean_obs_um", fmt(report.mean_obs), "", "",
             "GEE-approximation (cluster bootstrap)"),
            ("mean_diff_p", fmt(report.mean_diff_p), "", "",
             "GEE-approximation (cluster bootstrap)")]
    if report.auc_pred is not None:
        rows.append(("auc_pred", fmt(report.auc_pred.auc), fmt(report.auc_pred.ci_low),
                     fmt(report.auc_pred.ci_high), "glaucoma vs normal"))
        rows.append(("auc_obs", fmt(report.auc_obs.auc), fmt(report.auc_obs.ci_low),
                     fmt(report.auc_obs.ci_high), "glaucoma vs normal"))
        rows.append(("auc_diff_p", fmt(report.auc_diff_p), "", "", "paired cluster bootstrap"))
        for spec in sorted(report.sens_pred):
            s, lo, hi = report.sens_pred[spec]
            rows.append((f"sens_pred_at_spec{int(spec * 100)}", fmt(s), fmt(lo), fmt(hi), ""))
            s, lo, hi = report.sens_obs[spec]
            rows.append((f"sens_obs_at_spec{int(spec * 100)}", fmt(s), fmt(lo), fmt(hi), ""))
    if report.classification_acc is not None:
        rows.append(("classification_accuracy", fmt(report.classification_acc), "", "",
                     "vs normative database, borderline counted normal"))
        c = report.confusion
        rows.append(("confusion_nn_na_an_aa",
                     f"{c[0, 0]};{c[0, 1]};{c[1, 0]};{c[1, 1]}", "", "",
                     "reference x predicted"))
    return rows


def write_report_csv(path, report: EvalReport):
    with open(path, "w", encoding="ascii") as fh:
        fh.write("metric,value,ci_low,ci_high,detail\n")
        for metric, value, lo, hi, detail in report_csv_lines(report):
            fh.write(f"{metric},{value},{lo},{hi},{detail}\n")


def write_report_summary(path, report: EvalReport):
    lines = [
        f"Test rows: {report.n_rows} from {report.n_patients} participants",
        f"MAE: {report.mae:.2f} um",
        f"Pearson r: {report.pearson_r:.3f} (R^2 = {report.r_squared * 100:.1f}%)",
        f"Bland-Altman: bias {report.bias:.2f} um, limits {report.loa_low:.2f} to "
        f"{report.loa_high:.2f} um",
        f"Means: predicted {report.mean_pred:.1f} vs observed {report.mean_obs:.1f} um, "
        f"P = {report.mean_diff_p:.3f} [GEE-approximation (cluster bootstrap)]",
    ]
    if report.auc_pred is not None:
        lines.append(
            f"AUC glaucoma vs normal: predictions {report.auc_pred.auc:.3f} "
            f"(95% CI {report.auc_pred.ci_low:.3f}-{report.auc_pred.ci_high:.3f}) vs "
            f"observed {report.auc_obs.auc:.3f} "
            f"(95% CI {report.auc_obs.ci_low:.3f}-{report.auc_obs.ci_high:.3f}), "
            f"P = {report.auc_diff_p:.3f}")
        for spec in sorted(report.sens_pred):
            s, lo, hi = report.sens_pred[spec]
            lines.append(f"Sensitivity at {int(spec * 100)}% specificity (predictions): "
                         f"{s * 100:.0f}% (95% CI {lo * 100:.0f}-{hi * 100:.0f}%)")
    if report.classification_acc is not None:
        lines.append(f"Normative classification accuracy: {report.classification_acc * 100:.1f}%")
    lines.append(f"Bootstrap: B = {report.n_boot}, cluster = participant, seed = {report.seed}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")

"""Evaluation kernels: bias statistics, verification, probes, ranking metrics."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats


class UndefinedMetricWarning(UserWarning):
    pass


# ---- contingency ---------------------------------------------------------

@dataclass
class ContingencyTable:
    observed: np.ndarray
    expected: np.ndarray
    residuals: np.ndarray
    chi2: float
    df: int
    p_value: float


def pearson_residuals(observed) -> ContingencyTable:
    O = np.asarray(observed, dtype=float)
    if O.ndim != 2 or (O < 0).any():
        raise ValueError("observed must be a nonnegative 2-D count table")
    rows, cols = O.sum(axis=1), O.sum(axis=0)
    if (rows <= 0).any() or (cols <= 0).any():
        raise ValueError("zero marginal in contingency table")
    E = np.outer(rows, cols) / O.sum()
    r = (O - E) / np.sqrt(E)
    chi2 = float((r ** 2).sum())
    df = (O.shape[0] - 1) * (O.shape[1] - 1)
    return ContingencyTable(O, E, r, chi2, df, float(stats.chi2.sf(chi2, df)))


def sentiment_table(records, sentiments=("positive", "neutral", "negative")) -> np.ndarray:
    """2 x 3 counts: rows healthy/depressed, columns sentiments."""
    O = np.zeros((2, len(sentiments)), dtype=int)
    for r in records:
        O[int(r["label"]), sentiments.index(r["sentiment"])] += 1
    return O


# ---- verification --------------------------------------------------------

def _rates(same, diff, thr):
    # counts by binary search over sorted scores; O((n + m) log n) memory-light
    diff, same = np.sort(diff), np.sort(same)
    far = (diff.size - np.searchsorted(diff, thr, side="left")) / diff.size
    frr = np.searchsorted(same, thr, side="left") / same.size
    return far, frr


def eer(same_scores, diff_scores) -> tuple[float, float]:
    """Equal error rate and its threshold.

    Thresholds sweep the sorted score union (plus one above the maximum).
    Accept when score >= threshold. Between the last threshold where
    FAR > FRR and the first where FAR <= FRR the rates are linearly
    interpolated to the crossing.
    """
    same = np.asarray(same_scores, dtype=float).ravel()
    diff = np.asarray(diff_scores, dtype=float).ravel()
    if same.size == 0 or diff.size == 0:
        raise ValueError("both score sets must be nonempty")
    u = np.unique(np.concatenate([same, diff]))
    thr = np.append(u, u[-1] + 1.0)
    far, frr = _rates(same, diff, thr)
    d = far - frr
    i = int(np.argmax(d <= 0))  # d ends at -1 so a crossing always exists
    if i == 0 or d[i] == 0:
        return float((far[i] + frr[i]) / 2), float(thr[i])
    w = d[i - 1] / (d[i - 1] - d[i])
    e = (1 - w) * (far[i - 1] + frr[i - 1]) / 2 + w * (far[i] + frr[i]) / 2
    return float(e), float((1 - w) * thr[i - 1] + w * thr[i])


def cosine_matrix(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    Xn = X / np.maximum(np.linalg.norm(X, axis=1, keepdims=True), 1e-12)
    return Xn @ Xn.T


def pair_scores(embeddings, labels) -> tuple[np.ndarray, np.ndarray]:
    """Cosine scores for all same-label and different-label pairs (i < j)."""
    labels = np.asarray(labels)
    S = cosine_matrix(embeddings)
    iu = np.triu_indices(len(labels), k=1)
    same = labels[iu[0]] == labels[iu[1]]
    return S[iu][same], S[iu][~same]


def similarity_gap(embeddings, speakers) -> float:
    speakers = np.asarray(speakers)
    uniq, counts = np.unique(speakers, return_counts=True)
    if len(uniq) < 2 or (counts < 2).any():
        raise ValueError("need >= 2 speakers with >= 2 utterances each")
    same, diff = pair_scores(embeddings, speakers)
    return float(same.mean() - diff.mean())


# ---- probes --------------------------------------------------------------

def ridge_fit(X, Y, lam: float = 1e-3):
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    Xa = np.hstack([X, np.ones((len(X), 1))])
    reg = lam * np.eye(Xa.shape[1])
    reg[-1, -1] = 0.0
    return np.linalg.solve(Xa.T @ Xa + reg, Xa.T @ Y)


def ridge_predict(W, X):
    X = np.asarray(X, dtype=float)
    return np.hstack([X, np.ones((len(X), 1))]) @ W


def r2_score(y_true, y_pred) -> float:
    """Variance-weighted R^2 over output columns."""
    y = np.asarray(y_true, dtype=float)
    p = np.asarray(y_pred, dtype=float)
    ss_res = ((y - p) ** 2).sum()
    ss_tot = ((y - y.mean(axis=0)) ** 2).sum()
    return float(1.0 - ss_res / ss_tot) if ss_tot > 0 else float("nan")


def roc_auc(y_true, scores) -> float:
    """Mann-Whitney AUC; NaN with a warning for single-class input."""
    y = np.asarray(y_true).astype(int)
    s = np.asarray(scores, dtype=float)
    pos, neg = s[y == 1], s[y == 0]
    if len(pos) == 0 or len(neg) == 0:
        warnings.warn("ROC-AUC undefined for single-class labels", UndefinedMetricWarning)
        return float("nan")
    ranks = stats.rankdata(s)
    return float((ranks[y == 1].sum() - len(pos) * (len(pos) + 1) / 2) / (len(pos) * len(neg)))


def linear_probe(X_train, y_train, X_eval, y_eval, mode: str = "regression",
                 lam: float = 1e-3, seed: int = 0) -> dict:
    if mode == "regression":
        W = ridge_fit(X_train, y_train, lam)
        pred = ridge_predict(W, X_eval)
        y = np.asarray(y_eval, dtype=float)
        return {"mse": float(((y - pred) ** 2).mean()), "r2": r2_score(y, pred), "pred": pred}
    if mode == "classification":
        from sklearn.linear_model import LogisticRegression
        from sklearn.preprocessing import StandardScaler

        scaler = StandardScaler().fit(X_train)
        clf = LogisticRegression(max_iter=2000, random_state=seed)
        clf.fit(scaler.transform(X_train), y_train)
        Xe = scaler.transform(X_eval)
        pred = clf.predict(Xe)
        y = np.asarray(y_eval)
        out = {"accuracy": float((pred == y).mean()),
               "macro_f1": macro_f1(y, pred, labels=clf.classes_)}
        if len(clf.classes_) == 2:
            out["roc_auc"] = roc_auc(y == clf.classes_[1], clf.decision_function(Xe))
        return out
    raise ValueError(f"unknown probe mode {mode!r}")


# ---- representation similarity -------------------------------------------

def cka(X, Y) -> float:
    """Linear CKA on column-centred features."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.shape[0] != Y.shape[0]:
        raise ValueError("row counts differ")
    if X.shape[0] < 3:
        raise ValueError("need at least 3 rows")
    X = X - X.mean(axis=0)
    Y = Y - Y.mean(axis=0)
    xx = np.linalg.norm(X.T @ X)
    yy = np.linalg.norm(Y.T @ Y)
    if xx == 0 or yy == 0:
        warnings.warn("CKA undefined for constant input; reporting 0", UndefinedMetricWarning)
        return 0.0
    return float(np.linalg.norm(Y.T @ X) ** 2 / (xx * yy))


# ---- ranking -------------------------------------------------------------

def c_index(values, grades) -> float:
    v = np.asarray(values, dtype=float)
    g = np.asarray(grades, dtype=float)
    dv = v[:, None] - v[None, :]
    dg = g[:, None] - g[None, :]
    comparable = dg > 0
    n = comparable.sum()
    if n == 0:
        raise ValueError("no comparable pairs (all grades equal)")
    score = np.where(dv > 0, 1.0, np.where(dv == 0, 0.5, 0.0))
    return float(score[comparable].sum() / n)


def spearman_rho(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) != len(y) or len(x) < 3:
        raise ValueError("need two sequences of equal length >= 3")
    rx, ry = stats.rankdata(x), stats.rankdata(y)
    rx -= rx.mean()
    ry -= ry.mean()
    den = np.sqrt((rx ** 2).sum() * (ry ** 2).sum())
    if den == 0:
        warnings.warn("Spearman rho undefined for constant ranks", UndefinedMetricWarning)
        return float("nan")
    return float((rx * ry).sum() / den)


# ---- classification ------------------------------------------------------

def macro_f1(y_true, y_pred, labels=None) -> float:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    labels = np.unique(np.concatenate([y_true, y_pred])) if labels is None else labels
    f1s = []
    for c in labels:
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        den = 2 * tp + fp + fn
        f1s.append(2 * tp / den if den else 0.0)
    return float(np.mean(f1s))


def classification_report(y_true, y_pred) -> dict:
    y_true = np.asarray(y_true).astype(int)
    y_pred = np.asarray(y_pred).astype(int)
    if y_true.size == 0:
        raise ValueError("empty input")
    tp = int(np.sum((y_pred == 1) & (y_true == 1)))
    tn = int(np.sum((y_pred == 0) & (y_true == 0)))
    fp = int(np.sum((y_pred == 1) & (y_true == 0)))
    fn = int(np.sum((y_pred == 0) & (y_true == 1)))
    flags = []

    def f1(tp_, fp_, fn_, name):
        den = 2 * tp_ + fp_ + fn_
        if den == 0:
            flags.append(f"f1_{name}_zero_denominator")
            return 0.0
        return 2 * tp_ / den

    sens = tp / (tp + fn) if tp + fn else 0.0
    spec = tn / (tn + fp) if tn + fp else 0.0
    return {
        "macro_f1": (f1(tp, fp, fn, "pos") + f1(tn, fn, fp, "neg")) / 2,
        "sensitivity": sens,
        "specificity": spec,
        "accuracy": (tp + tn) / y_true.size,
        "confusion": {"tp": tp, "fp": fp, "fn": fn, "tn": tn},
        "flags": flags,
    }


# ---- severity coordinate -------------------------------------------------

@dataclass
class SeverityCoordinate:
    projections: np.ndarray
    direction: np.ndarray
    c_index: float
    spearman: float
    explained_variance: float = 0.0


def pca_severity_coordinate(embeddings, intended_grades) -> SeverityCoordinate:
    X = np.asarray(embeddings, dtype=float)
    g = np.asarray(intended_grades, dtype=float)
    if X.shape[0] < 3:
        raise ValueError("need at least 3 embeddings")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / (len(X) - 1)
    evals, evecs = np.linalg.eigh(cov)
    if evals[-1] <= 0:
        raise ValueError("zero covariance")
    v = evecs[:, -1]
    proj = Xc @ v
    if np.corrcoef(proj, g)[0, 1] < 0:
        v, proj = -v, -proj
    return SeverityCoordinate(proj, v, c_index(proj, g), spearman_rho(proj, g),
                              float(evals[-1] / evals.sum()))


@dataclass
class MarkerCorrelation:
    per_group: dict[str, list[float]] = field(default_factory=dict)
    mean: dict[str, float] = field(default_factory=dict)
    median: dict[str, float] = field(default_factory=dict)
    undefined: dict[str, int] = field(default_factory=dict)
    skipped_groups: int = 0


def intra_speaker_marker_correlation(groups, n_levels: int = 5) -> MarkerCorrelation:
    """groups: iterable of lists of (intended_level, {marker: value}) per base utterance."""
    out = MarkerCorrelation()
    for variants in groups:
        levels = sorted(lv for lv, _ in variants)
        if levels != list(range(n_levels)):
            out.skipped_groups += 1
            continue
        lv = np.array([v[0] for v in variants], dtype=float)
        names = variants[0][1].keys()
        for m in names:
            vals = np.array([v[1][m] for v in variants], dtype=float)
            if not np.isfinite(vals).all() or np.ptp(vals) == 0:
                out.undefined[m] = out.undefined.get(m, 0) + 1
                continue
            out.per_group.setdefault(m, []).append(spearman_rho(lv, vals))
    for m, rhos in out.per_group.items():
        out.mean[m] = float(np.mean(rhos))
        out.median[m] = float(np.median(rhos))
    return out

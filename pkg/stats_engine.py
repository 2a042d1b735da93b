"""
Scoring and significance testing for detector and human-study results.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum

import numpy as np
import pandas as pd
from scipy import stats

from errors import StatsError

logger = logging.getLogger(__name__)

CLASSES = ('machine', 'original')
PREDICTION_FIELDS = ('doc_id', 'source', 'truth', 'label', 'detector')
EXACT_MAX_N = 20
_TIE_TOLERANCE = 1e-12


class TestMethod(str, Enum):
    T_TWO_SAMPLE = 't_two_sample'
    PERMUTATION = 'permutation'


@dataclass(frozen=True)
class ConfusionMatrix:
    """counts[i][j]: examples of true class CLASSES[i] predicted as CLASSES[j]."""
    counts: tuple

    @classmethod
    def from_labels(cls, truth, predicted):
        truth, predicted = [str(getattr(t, 'value', t)) for t in truth], [str(getattr(p, 'value', p)) for p in predicted]
        if len(truth) != len(predicted):
            raise StatsError(f"{len(truth)} true labels but {len(predicted)} predictions")
        counts = [[0, 0], [0, 0]]
        for t, p in zip(truth, predicted):
            if t not in CLASSES or p not in CLASSES:
                raise StatsError(f"labels must be one of {CLASSES}, got {t!r}/{p!r}")
            counts[CLASSES.index(t)][CLASSES.index(p)] += 1
        return cls(tuple(tuple(row) for row in counts))

    @property
    def total(self):
        return sum(sum(row) for row in self.counts)


@dataclass(frozen=True)
class StatResult:
    statistic: float
    p_value: float
    method: TestMethod
    corrected: float = None


def _per_class_f1(cm, k):
    tp = cm.counts[k][k]
    predicted = sum(cm.counts[i][k] for i in range(2))
    actual = sum(cm.counts[k])
    precision = tp / predicted if predicted else 0.0
    recall = tp / actual if actual else 0.0
    return 2 * precision * recall / (precision + recall) if precision + recall else 0.0


def f1_macro(cm):
    """Unweighted mean of per-class F1; a class with no support or no predictions scores 0."""
    if cm.total <= 0:
        raise StatsError("confusion matrix is empty")
    return sum(_per_class_f1(cm, k) for k in range(2)) / 2


def accuracy(cm):
    if cm.total <= 0:
        raise StatsError("confusion matrix is empty")
    return (cm.counts[0][0] + cm.counts[1][1]) / cm.total


# --- Significance tests ---

def _exact_sign_flip_count(diffs, observed):
    n = len(diffs)
    bits = np.arange(n)
    count = 0
    chunk = 1 << 16
    for start in range(0, 1 << n, chunk):
        patterns = np.arange(start, min(start + chunk, 1 << n), dtype=np.int64)
        signs = 1.0 - 2.0 * ((patterns[:, None] >> bits) & 1)
        permuted = np.abs(signs @ diffs) / n
        count += int(np.count_nonzero(permuted >= observed - _TIE_TOLERANCE))
    return count


def _monte_carlo_count(diffs, observed, iterations, seed, workers, chunk_size=2000):
    n = len(diffs)
    chunk_sizes = [min(chunk_size, iterations - start) for start in range(0, iterations, chunk_size)]
    streams = np.random.SeedSequence(seed).spawn(len(chunk_sizes))

    def run_chunk(args):
        size, stream = args
        signs = np.random.default_rng(stream).choice((-1.0, 1.0), size=(size, n))
        return int(np.count_nonzero(np.abs(signs @ diffs) / n >= observed - _TIE_TOLERANCE))

    jobs = list(zip(chunk_sizes, streams))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return sum(pool.map(run_chunk, jobs))
    return sum(map(run_chunk, jobs))


def permutation_test(scores_a, scores_b, iterations=10_000, seed=0, method='auto', workers=1):
    """
    Paired two-sided sign-flip test on the mean difference of per-example scores.
    method: 'exact' enumerates all 2^n sign patterns, 'monte_carlo' samples `iterations`
    of them with p = (1 + hits) / (1 + iterations), 'auto' is exact for n <= 20.
    """
    a, b = np.asarray(scores_a, dtype=float), np.asarray(scores_b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise StatsError(f"paired samples must have equal length, got {a.shape} and {b.shape}")
    if iterations < 1:
        raise StatsError(f"iterations must be >= 1, got {iterations}")
    if len(a) == 0:
        raise StatsError("paired samples are empty")

    diffs = a - b
    observed_signed = float(np.ones_like(diffs) @ diffs / len(diffs))
    observed = abs(observed_signed)
    if method == 'auto':
        method = 'exact' if len(diffs) <= EXACT_MAX_N else 'monte_carlo'

    if method == 'exact':
        if len(diffs) > 30:
            raise StatsError(f"exact enumeration of 2^{len(diffs)} patterns is not supported")
        p_value = _exact_sign_flip_count(diffs, observed) / (1 << len(diffs))
    elif method == 'monte_carlo':
        hits = _monte_carlo_count(diffs, observed, iterations, seed, workers)
        p_value = (1 + hits) / (1 + iterations)
    else:
        raise StatsError(f"unknown permutation method '{method}'")
    return StatResult(observed_signed, min(1.0, p_value), TestMethod.PERMUTATION)


def t_test_two_sample(a, b):
    """Welch two-sided t-test. Identical zero-variance samples give t = 0, p = 1."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if len(a) < 2 or len(b) < 2:
        raise StatsError(f"t-test needs at least 2 values per sample, got {len(a)} and {len(b)}")
    if np.var(a) == 0 and np.var(b) == 0:
        if a[0] == b[0]:
            return StatResult(0.0, 1.0, TestMethod.T_TWO_SAMPLE)
        return StatResult(math.copysign(math.inf, a[0] - b[0]), np.finfo(float).tiny, TestMethod.T_TWO_SAMPLE)
    result = stats.ttest_ind(a, b, equal_var=False)
    p_value = float(result.pvalue)
    # p stays in (0, 1].
    return StatResult(float(result.statistic), min(1.0, max(p_value, np.finfo(float).tiny)), TestMethod.T_TWO_SAMPLE)


def bonferroni(pvals, m=None):
    m = len(pvals) if m is None else m
    if m < 1:
        raise StatsError(f"number of comparisons must be >= 1, got {m}")
    return [min(1.0, m * p) for p in pvals]


def mean_ci(values, level=0.95):
    """Mean and t-distribution confidence interval."""
    values = np.asarray(values, dtype=float)
    if len(values) < 2:
        raise StatsError(f"a confidence interval needs at least 2 values, got {len(values)}")
    if not 0 < level < 1:
        raise StatsError(f"confidence level must be in (0, 1), got {level}")
    mean = float(values.mean())
    sem = float(values.std(ddof=1)) / math.sqrt(len(values))
    half_width = float(stats.t.ppf((1 + level) / 2, len(values) - 1)) * sem
    return mean, mean - half_width, mean + half_width


# --- Detection report ---

def _correctness(records):
    return {r['doc_id']: float(r['label'] == r['truth']) for r in records}


def evaluation_report(predictions, baseline='random', reference_detectors=(), iterations=10_000, seed=0,
                      method='auto'):
    """
    Builds the detection table from prediction records (dicts with doc_id, source, truth,
    label, detector). Each detector is scored per source and overall, then compared with
    the random baseline and with the best reference (non-autoregressive) detector by a
    paired permutation test on per-document correctness; p-values are Bonferroni-adjusted
    over all comparisons made.

    Returns (report dict, pandas DataFrame of the score table).
    """
    by_detector = {}
    for index, record in enumerate(predictions):
        missing = [f for f in PREDICTION_FIELDS if not isinstance(record, dict) or f not in record]
        if missing:
            raise StatsError(f"prediction record {index} lacks {', '.join(missing)}")
        by_detector.setdefault(record['detector'], []).append(record)
    if not by_detector:
        raise StatsError("no predictions to evaluate")

    rows = []
    for detector in sorted(by_detector):
        records = by_detector[detector]
        groups = {'all': records}
        for record in records:
            groups.setdefault(record['source'], []).append(record)
        for source in sorted(groups):
            cm = ConfusionMatrix.from_labels([r['truth'] for r in groups[source]], [r['label'] for r in groups[source]])
            rows.append({'detector': detector, 'source': source, 'n': cm.total,
                         'f1_macro': f1_macro(cm), 'accuracy': accuracy(cm)})
    table = pd.DataFrame(rows, columns=['detector', 'source', 'n', 'f1_macro', 'accuracy'])

    overall = table[table['source'] == 'all'].set_index('detector')['f1_macro']
    references = [d for d in reference_detectors if d in overall.index]
    best_reference = max(references, key=lambda d: (overall[d], d)) if references else None

    comparisons = []
    for detector in sorted(by_detector):
        for kind, against in (('vs_random', baseline), ('vs_best_baseline', best_reference)):
            if against is None or against == detector or against not in by_detector:
                continue
            mine, theirs = _correctness(by_detector[detector]), _correctness(by_detector[against])
            shared = sorted(set(mine) & set(theirs))
            if not shared:
                continue
            result = permutation_test([mine[d] for d in shared], [theirs[d] for d in shared],
                                      iterations=iterations, seed=seed, method=method)
            comparisons.append({'detector': detector, 'comparison': kind, 'against': against, 'n': len(shared),
                                'difference': result.statistic, 'p_value': result.p_value})
    for comparison, corrected in zip(comparisons, bonferroni([c['p_value'] for c in comparisons] or [1.0])):
        comparison['p_bonferroni'] = corrected

    report = {
        'scores': {d: {row['source']: {'n': int(row['n']), 'f1_macro': row['f1_macro'], 'accuracy': row['accuracy']}
                       for row in rows if row['detector'] == d} for d in sorted(by_detector)},
        'significance': comparisons,
        'best_baseline': best_reference,
        'provenance': {'baseline': baseline, 'iterations': iterations, 'seed': seed, 'method': method},
    }
    logger.info("Evaluated %d detectors with %d significance comparisons", len(by_detector), len(comparisons))
    return report, table

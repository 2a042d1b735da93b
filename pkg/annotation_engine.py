"""
Human-study analytics: annotation ingestion and validation, assessment filtering,
participant and per-system accuracy, rater agreement, Likert summaries, duration
outliers and participant demographics.
"""
import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass
from enum import Enum

import numpy as np
import pandas as pd
from statsmodels.stats import inter_rater

from errors import AnnotationError, MetricError
from stats_engine import bonferroni, mean_ci, t_test_two_sample
from text_metrics import DEFAULT_SCHEME, sem_match, text_match, tokenize

logger = logging.getLogger(__name__)

LIKERT_DIMENSIONS = ('clarity', 'fluency', 'coherence')
LIKERT_RANGE = (1, 5)
RECORD_FIELDS = ('participant_id', 'item_id', 'system', 'answer', 'likert', 'justification',
                 'duration_minutes', 'demographics')
ORIGINAL_SYSTEM = 'original'


class Answer(str, Enum):
    MACHINE = 'machine'
    ORIGINAL = 'original'
    DONT_KNOW = 'dont_know'


class RejectReason(str, Enum):
    TOO_SHORT = 'too-short'
    COPIED_TEXT = 'copied-text'


@dataclass(frozen=True)
class AnnotationRecord:
    participant_id: str
    item_id: str
    system: str
    answer: Answer = None
    likert: dict = None
    justification: str = ''
    duration_minutes: float = None
    demographics: dict = None

    def __post_init__(self):
        if (self.answer is None) == (self.likert is None):
            raise AnnotationError(f"record {self.participant_id}/{self.item_id} needs exactly one of answer or likert")
        if self.answer is not None and not isinstance(self.answer, Answer):
            try:
                object.__setattr__(self, 'answer', Answer(self.answer))
            except ValueError:
                raise AnnotationError(f"answer must be one of {[a.value for a in Answer]}, got {self.answer!r}") from None
        if self.likert is not None:
            if not self.likert:
                raise AnnotationError(f"record {self.participant_id}/{self.item_id} has an empty likert map")
            for dimension, value in self.likert.items():
                if dimension not in LIKERT_DIMENSIONS:
                    raise AnnotationError(f"unknown likert dimension '{dimension}'")
                if isinstance(value, bool) or not isinstance(value, int) or not LIKERT_RANGE[0] <= value <= LIKERT_RANGE[1]:
                    raise AnnotationError(f"likert {dimension} must be an integer in 1..5, got {value!r}")
        if self.duration_minutes is not None and self.duration_minutes < 0:
            raise AnnotationError(f"duration must be non-negative, got {self.duration_minutes}")

    @property
    def is_classification(self):
        return self.answer is not None

    @property
    def truth(self):
        return Answer.ORIGINAL if self.system == ORIGINAL_SYSTEM else Answer.MACHINE

    def to_record(self):
        record = {'participant_id': self.participant_id, 'item_id': self.item_id, 'system': self.system,
                  'justification': self.justification}
        if self.answer is not None:
            record['answer'] = self.answer.value
        if self.likert is not None:
            record['likert'] = dict(self.likert)
        if self.duration_minutes is not None:
            record['duration_minutes'] = self.duration_minutes
        if self.demographics is not None:
            record['demographics'] = dict(self.demographics)
        return record


def load_annotations(path):
    """Reads one AnnotationRecord per JSONL line, rejecting unknown fields and invalid values."""
    records = []
    with open(path, 'r', encoding='utf-8') as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
                unknown = sorted(set(raw) - set(RECORD_FIELDS))
                if unknown:
                    raise AnnotationError(f"unknown field(s) {', '.join(unknown)}")
                records.append(AnnotationRecord(
                    participant_id=str(raw['participant_id']),
                    item_id=str(raw['item_id']),
                    system=str(raw['system']),
                    answer=raw.get('answer'),
                    likert=raw.get('likert'),
                    justification=raw.get('justification') or '',
                    duration_minutes=raw.get('duration_minutes'),
                    demographics=raw.get('demographics'),
                ))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise AnnotationError(f"{path}:{line_number}: {e}") from e
    logger.info("Loaded %d annotation records from %s", len(records), path)
    return records


# --- Filtering ---

def filter_assessments(records, task_text_by_item, max_copy_match=0.9, min_tokens=3, n=3, scheme=DEFAULT_SCHEME):
    """
    Rejects classification records whose justification is shorter than min_tokens or
    copies the task text (text_match above max_copy_match). Likert records pass through.
    Returns (kept, [(record, RejectReason), ...]).
    """
    kept, rejected = [], []
    for record in records:
        if not record.is_classification:
            kept.append(record)
            continue
        justification = tokenize(record.justification, scheme)
        if len(justification) < min_tokens:
            rejected.append((record, RejectReason.TOO_SHORT))
            continue
        task = tokenize(task_text_by_item.get(record.item_id, ''), scheme)
        if len(task) and len(justification) >= n and float(text_match(justification, task, n)) > max_copy_match:
            rejected.append((record, RejectReason.COPIED_TEXT))
            continue
        kept.append(record)
    if rejected:
        logger.info("Rejected %d of %d assessments (%s)", len(rejected), len(records),
                    dict(Counter(reason.value for _, reason in rejected)))
    return kept, rejected


def _participant_profiles(records):
    profiles = {}
    for record in sorted(records, key=lambda r: (r.participant_id, r.item_id)):
        if record.demographics and record.participant_id not in profiles:
            profiles[record.participant_id] = record.demographics
    return profiles


def qualification_filter(records, min_acceptance_rate=None, location=None, min_tasks=None):
    """
    Recruitment rules over participants' demographics fields 'acceptance_rate',
    'location' and 'approved_tasks'. Rules left as None are not applied. Returns
    (kept_records, {participant_id: reason}).
    """
    profiles = _participant_profiles(records)
    rules = (
        ('acceptance_rate', min_acceptance_rate, lambda value, limit: value > limit),
        ('location', location, lambda value, limit: str(value).lower() == str(limit).lower()),
        ('approved_tasks', min_tasks, lambda value, limit: value >= limit),
    )
    excluded = {}
    for participant in sorted({r.participant_id for r in records}):
        profile = profiles.get(participant, {})
        for field, limit, passes in rules:
            if limit is None:
                continue
            if field not in profile:
                excluded[participant] = f"missing {field}"
                break
            if not passes(profile[field], limit):
                excluded[participant] = f"{field} {profile[field]!r} fails {limit!r}"
                break
    return [r for r in records if r.participant_id not in excluded], excluded


# --- Accuracy ---

@dataclass(frozen=True)
class ParticipantScore:
    accuracy: float
    dont_know_ratio: float
    n_answers: int


def participant_accuracy(records):
    """
    Per participant: accuracy over non-neutral answers and the ratio of "don't know"
    answers over all answers. Returns (scores, excluded) where excluded maps
    participants without any non-neutral answer to a reason.
    """
    counts = defaultdict(lambda: [0, 0, 0])  # correct, non-neutral, all
    for record in records:
        if not record.is_classification:
            continue
        tally = counts[record.participant_id]
        tally[2] += 1
        if record.answer is Answer.DONT_KNOW:
            continue
        tally[1] += 1
        tally[0] += record.answer is record.truth

    scores, excluded = {}, {}
    for participant in sorted(counts):
        correct, decided, total = counts[participant]
        if not decided:
            excluded[participant] = "no non-neutral answers"
            continue
        scores[participant] = ParticipantScore(correct / decided, (total - decided) / total, total)
    return scores, excluded


def system_accuracy_table(records, control, level=0.95):
    """
    Human accuracy per paraphrasing system: mean participant accuracy with a t-based
    confidence interval, Welch t-test against the control system (Bonferroni-adjusted
    over the systems compared) and the share of "don't know" answers.
    """
    by_system = defaultdict(list)
    for record in records:
        if record.is_classification:
            by_system[record.system].append(record)
    if control not in by_system:
        raise AnnotationError(f"control system '{control}' has no classification records")

    accuracies = {}
    for system, system_records in by_system.items():
        scores, _ = participant_accuracy(system_records)
        accuracies[system] = [scores[p].accuracy for p in sorted(scores)]

    systems = [control] + sorted(s for s in by_system if s != control)
    rows = []
    for system in systems:
        values = accuracies[system]
        answers = by_system[system]
        row = {'system': system, 'n_participants': len(values),
               'mean_accuracy': float(np.mean(values)) if values else float('nan'),
               'ci_low': float('nan'), 'ci_high': float('nan'),
               't_vs_control': float('nan'), 'p_value': float('nan'), 'p_bonferroni': float('nan'),
               'dont_know_ratio': sum(r.answer is Answer.DONT_KNOW for r in answers) / len(answers)}
        if len(values) >= 2:
            _, row['ci_low'], row['ci_high'] = mean_ci(values, level)
        else:
            logger.warning("System %s has %d scored participants; no confidence interval", system, len(values))
        if system != control and len(values) >= 2 and len(accuracies[control]) >= 2:
            result = t_test_two_sample(values, accuracies[control])
            row['t_vs_control'], row['p_value'] = result.statistic, result.p_value
        rows.append(row)

    tested = [row for row in rows if not np.isnan(row['p_value'])]
    if tested:
        for row, corrected in zip(tested, bonferroni([row['p_value'] for row in tested])):
            row['p_bonferroni'] = corrected
    return pd.DataFrame(rows)


# --- Agreement ---

@dataclass(frozen=True)
class AgreementResult:
    kappa: float
    n_items: int
    n_raters_per_item: int


def fleiss_kappa(matrix):
    """
    Fleiss' kappa over an items x categories count matrix with the same number of raters
    per item. When every rating falls into one category the chance term is 1 and kappa
    is reported as 1.0.
    """
    table = np.asarray(matrix, dtype=float)
    if table.ndim != 2 or table.shape[0] < 1 or table.shape[1] < 1:
        raise AnnotationError(f"rating matrix must be items x categories, got shape {table.shape}")
    if (table < 0).any() or not np.array_equal(table, np.round(table)):
        raise AnnotationError("rating matrix must hold non-negative integer counts")
    row_sums = table.sum(axis=1)
    if not np.all(row_sums == row_sums[0]):
        raise AnnotationError(f"items have unequal rater counts: {sorted(set(row_sums.astype(int).tolist()))}")
    raters = int(row_sums[0])
    if raters < 2:
        raise AnnotationError(f"agreement needs at least 2 raters per item, got {raters}")

    shares = table.sum(axis=0) / table.sum()
    if np.isclose(float(np.sum(shares ** 2)), 1.0):
        return AgreementResult(1.0, table.shape[0], raters)
    kappa = float(inter_rater.fleiss_kappa(table, method='fleiss'))
    return AgreementResult(kappa, table.shape[0], raters)


def _rating_value(record, dimension):
    if dimension == 'answer':
        return record.answer.value if record.is_classification else None
    return (record.likert or {}).get(dimension)


def rating_matrix(records, dimension='answer'):
    """
    Items x categories count matrix for one dimension ('answer' or a Likert dimension).
    Only items rated by the most common number of raters are kept. Returns
    (item_ids, categories, matrix).
    """
    if dimension == 'answer':
        categories = [a.value for a in Answer]
    elif dimension in LIKERT_DIMENSIONS:
        categories = list(range(LIKERT_RANGE[0], LIKERT_RANGE[1] + 1))
    else:
        raise AnnotationError(f"unknown rating dimension '{dimension}'")

    ratings = defaultdict(list)
    for record in records:
        value = _rating_value(record, dimension)
        if value is not None:
            ratings[record.item_id].append(categories.index(value))
    if not ratings:
        raise AnnotationError(f"no ratings for dimension '{dimension}'")

    size_counts = Counter(len(codes) for codes in ratings.values())
    raters = max(size_counts, key=lambda size: (size_counts[size], size))
    item_ids = sorted(item for item, codes in ratings.items() if len(codes) == raters)
    if len(item_ids) < len(ratings):
        logger.warning("Dropped %d items without exactly %d ratings for %s",
                       len(ratings) - len(item_ids), raters, dimension)
    codes = np.array([ratings[item] for item in item_ids])
    counts, _ = inter_rater.aggregate_raters(codes, n_cat=len(categories))
    return item_ids, categories, counts


def kappa_by_group(records, field, dimension='answer'):
    """Agreement within each participant group defined by a demographics field, plus overall."""
    profiles = _participant_profiles(records)
    groups = defaultdict(list)
    for record in records:
        group = profiles.get(record.participant_id, {}).get(field)
        if group is not None:
            groups[str(group)].append(record)
    results = {}
    for group, group_records in sorted(groups.items()) + [('all', list(records))]:
        try:
            _, _, matrix = rating_matrix(group_records, dimension)
            results[group] = fleiss_kappa(matrix)
        except AnnotationError as e:
            logger.warning("No agreement for %s=%s: %s", field, group, e)
    return results


# --- Likert, durations, similarity ---

def likert_summary(records):
    """
    Per system and dimension: mean and sample standard deviation of Likert ratings.
    A single-rating cell gets std 0 and single_rating=True; systems with no rating in a
    dimension are omitted.
    """
    rows = [{'system': r.system, 'dimension': dimension, 'rating': value}
            for r in records if r.likert for dimension, value in r.likert.items()]
    columns = ['system', 'dimension', 'n', 'mean', 'std', 'single_rating']
    if not rows:
        logger.warning("No Likert ratings to summarise")
        return pd.DataFrame(columns=columns)

    frame = pd.DataFrame(rows)
    summary = (frame.groupby(['system', 'dimension'])['rating']
               .agg(n='count', mean='mean', std='std')
               .reset_index())
    summary['single_rating'] = summary['n'] == 1
    summary['std'] = summary['std'].fillna(0.0)
    for _, row in summary[summary['single_rating']].iterrows():
        logger.warning("Single Likert rating for %s/%s; std reported as 0", row['system'], row['dimension'])
    present = set(zip(summary['system'], summary['dimension']))
    for system in sorted(frame['system'].unique()):
        for dimension in LIKERT_DIMENSIONS:
            if (system, dimension) not in present:
                logger.warning("No %s ratings for %s; cell omitted", dimension, system)
    return summary[columns]


def participant_durations(records, how='sum'):
    frame = pd.DataFrame([{'participant_id': r.participant_id, 'duration': r.duration_minutes}
                          for r in records if r.duration_minutes is not None])
    if frame.empty:
        return pd.Series(dtype=float)
    return frame.groupby('participant_id')['duration'].agg(how)


def duration_outliers(records, k=2.0, how='sum', population=True):
    """Participants whose total duration lies outside mean +/- k standard deviations."""
    durations = participant_durations(records, how)
    if len(durations) < 2:
        raise AnnotationError(f"outlier detection needs at least 2 participants with durations, got {len(durations)}")
    mean = float(durations.mean())
    sigma = float(durations.std(ddof=0 if population else 1))
    flagged = durations[(durations - mean).abs() > k * sigma]
    return sorted(flagged.index.tolist())


def similarity_triangle(originals, human_paras, machine_paras, emb, scheme=DEFAULT_SCHEME):
    """Mean sem_match over (human, original), (machine, original) and (human, machine)."""
    if not len(originals) == len(human_paras) == len(machine_paras):
        raise AnnotationError(f"misaligned triples: {len(originals)}/{len(human_paras)}/{len(machine_paras)}")
    if not originals:
        raise AnnotationError("no triples to compare")
    totals = np.zeros(3)
    for original, human, machine in zip(originals, human_paras, machine_paras):
        o, h, m = (tokenize(text, scheme) for text in (original, human, machine))
        try:
            totals += [float(sem_match(h, o, emb)), float(sem_match(m, o, emb)), float(sem_match(h, m, emb))]
        except MetricError as e:
            raise AnnotationError(f"cannot compare triple: {e}") from e
    human_original, machine_original, human_machine = (totals / len(originals)).tolist()
    return human_original, machine_original, human_machine


# --- Demographics ---

def demographic_summary(records):
    """Participant counts and demographic distributions, with a Welch t-test of age by gender."""
    participants = sorted({r.participant_id for r in records})
    profiles = _participant_profiles(records)
    frame = pd.DataFrame([{'participant_id': p, **profiles[p]} for p in sorted(profiles)])
    summary = {'n_participants': len(participants), 'n_with_demographics': len(profiles)}
    if frame.empty:
        return summary

    def numeric(column):
        values = pd.to_numeric(frame[column], errors='coerce').dropna() if column in frame else pd.Series(dtype=float)
        if values.empty:
            return None
        return {'mean': float(values.mean()), 'std': float(values.std(ddof=1)) if len(values) > 1 else 0.0,
                'min': float(values.min()), 'max': float(values.max()), 'n': int(len(values))}

    summary['age'] = numeric('age')
    summary['approved_tasks'] = numeric('approved_tasks')
    for column in ('gender', 'education', 'first_language'):
        if column in frame:
            summary[column] = {str(k): int(v) for k, v in sorted(frame[column].dropna().value_counts().items())}

    if 'age' in frame and 'gender' in frame:
        ages = frame.assign(age=pd.to_numeric(frame['age'], errors='coerce')).dropna(subset=['age', 'gender'])
        sizes = ages['gender'].value_counts()
        eligible = sorted((g for g in sizes.index if sizes[g] >= 2), key=lambda g: (-sizes[g], str(g)))
        if len(eligible) >= 2:
            first, second = eligible[:2]
            result = t_test_two_sample(ages.loc[ages['gender'] == first, 'age'], ages.loc[ages['gender'] == second, 'age'])
            summary['age_by_gender'] = {'groups': [str(first), str(second)], 't': result.statistic,
                                        'p_value': result.p_value}
    return summary

import math
from collections import defaultdict

import numpy as np
import pytest
from scipy import stats

from annotation_engine import (AnnotationRecord, Answer, RejectReason, demographic_summary, duration_outliers,
                               filter_assessments, fleiss_kappa, kappa_by_group, likert_summary, load_annotations,
                               participant_accuracy, qualification_filter, rating_matrix, similarity_triangle,
                               system_accuracy_table)
from errors import AnnotationError
from synthetic_fixtures import ANNOTATION_SYSTEMS, synthetic_annotations, write_annotations


def answer(participant, item, system, value, **options):
    return AnnotationRecord(participant, item, system, answer=value, **options)


def likert(participant, item, system, **ratings):
    return AnnotationRecord(participant, item, system, likert=ratings)


@pytest.fixture(scope='module')
def study():
    return synthetic_annotations(seed=0)


def test_record_validation():
    with pytest.raises(AnnotationError):
        AnnotationRecord('p', 'i', 's')
    with pytest.raises(AnnotationError):
        AnnotationRecord('p', 'i', 's', answer=Answer.MACHINE, likert={'clarity': 3})
    with pytest.raises(AnnotationError):
        AnnotationRecord('p', 'i', 's', answer='maybe')
    with pytest.raises(AnnotationError):
        likert('p', 'i', 's', clarity=6)
    with pytest.raises(AnnotationError):
        likert('p', 'i', 's', clarity=3.5)
    with pytest.raises(AnnotationError):
        likert('p', 'i', 's', beauty=3)
    assert AnnotationRecord('p', 'i', 's', answer='dont_know').answer is Answer.DONT_KNOW


def test_load_annotations_round_trip_and_errors(tmp_path, study):
    records, _, _ = study
    path = tmp_path / 'annotations.jsonl'
    write_annotations(records[:50], path)
    assert load_annotations(path) == records[:50]

    path.write_text('{"participant_id": "p", "item_id": "i", "system": "s", "answer": "machine"}\n'
                    '{"participant_id": "p", "item_id": "j", "system": "s", "answer": "machine", "mood": "ok"}\n',
                    encoding='utf-8')
    with pytest.raises(AnnotationError, match=r'annotations\.jsonl:2: unknown field\(s\) mood'):
        load_annotations(path)


def test_filter_assessments_reasons():
    task = {'i1': "the committee approved the new library budget after a long debate"}
    copied = answer('p1', 'i1', 'spinner', Answer.MACHINE, justification=task['i1'])
    short = answer('p2', 'i1', 'spinner', Answer.MACHINE, justification="good")
    fine = answer('p3', 'i1', 'spinner', Answer.MACHINE, justification="several words sound swapped for odd synonyms")
    rating = likert('p4', 'i1', 'spinner', clarity=3)
    kept, rejected = filter_assessments([copied, short, fine, rating], task)
    assert kept == [fine, rating]
    assert rejected == [(copied, RejectReason.COPIED_TEXT), (short, RejectReason.TOO_SHORT)]


def test_participant_accuracy_examples():
    records = [answer('p1', 'a', 'spinner', Answer.MACHINE), answer('p1', 'b', 'original', Answer.ORIGINAL),
               answer('p1', 'c', 'spinner', Answer.ORIGINAL), answer('p1', 'd', 'spinner', Answer.DONT_KNOW),
               answer('p2', 'a', 'spinner', Answer.DONT_KNOW),
               answer('p3', 'a', 'spinner', Answer.MACHINE), answer('p3', 'b', 'original', Answer.ORIGINAL)]
    scores, excluded = participant_accuracy(records)
    assert scores['p1'].accuracy == pytest.approx(2 / 3)
    assert scores['p1'].dont_know_ratio == 0.25
    assert (scores['p3'].accuracy, scores['p3'].dont_know_ratio) == (1.0, 0.0)
    assert list(excluded) == ['p2']
    assert participant_accuracy(list(reversed(records))) == (scores, excluded)


def _one_pass_oracle(records, control, level=0.95):
    """Per-system accuracy table computed independently in a single sweep."""
    tallies = defaultdict(lambda: defaultdict(lambda: [0, 0]))
    for r in records:
        if r.answer is None or r.answer is Answer.DONT_KNOW:
            continue
        truth = Answer.ORIGINAL if r.system == 'original' else Answer.MACHINE
        tally = tallies[r.system][r.participant_id]
        tally[0] += r.answer is truth
        tally[1] += 1
    accuracies = {s: [c / n for _, (c, n) in sorted(t.items())] for s, t in tallies.items()}
    out = {}
    for system, values in accuracies.items():
        values = np.array(values)
        mean = values.sum() / len(values)
        half = stats.t.ppf((1 + level) / 2, len(values) - 1) * values.std(ddof=1) / math.sqrt(len(values))
        out[system] = {'mean': mean, 'low': mean - half, 'high': mean + half}
        if system != control:
            other = np.array(accuracies[control])
            va, vb = values.var(ddof=1) / len(values), other.var(ddof=1) / len(other)
            t = (values.mean() - other.mean()) / math.sqrt(va + vb)
            df = (va + vb) ** 2 / (va ** 2 / (len(values) - 1) + vb ** 2 / (len(other) - 1))
            out[system]['t'] = t
            out[system]['p'] = 2 * stats.t.sf(abs(t), df)
    tested = len(out) - 1
    for system in out:
        if system != control:
            out[system]['p_bonferroni'] = min(1.0, tested * out[system]['p'])
    return out


def test_system_accuracy_table_matches_one_pass_oracle(study):
    records, _, _ = study
    table = system_accuracy_table(records, control='spinner').set_index('system')
    oracle = _one_pass_oracle(records, control='spinner')
    assert list(table.index) == ['spinner'] + sorted(s for s in ANNOTATION_SYSTEMS if s != 'spinner')
    for system, expected in oracle.items():
        row = table.loc[system]
        assert row['mean_accuracy'] == pytest.approx(expected['mean'], abs=1e-9)
        assert row['ci_low'] == pytest.approx(expected['low'], abs=1e-9)
        assert row['ci_high'] == pytest.approx(expected['high'], abs=1e-9)
        if system == 'spinner':
            assert math.isnan(row['p_value'])
        else:
            assert row['t_vs_control'] == pytest.approx(expected['t'], abs=1e-9)
            assert row['p_value'] == pytest.approx(expected['p'], abs=1e-9)
            assert row['p_bonferroni'] == pytest.approx(expected['p_bonferroni'], abs=1e-9)
        assert 0.0 <= row['dont_know_ratio'] <= 1.0


def test_system_accuracy_table_needs_the_control(study):
    records, _, _ = study
    with pytest.raises(AnnotationError):
        system_accuracy_table(records, control='human')


def test_planted_duration_outliers_are_flagged(study):
    records, _, outliers = study
    assert outliers == ['p00', 'p01']
    assert duration_outliers(records) == outliers


def test_duration_outlier_examples():
    def session(minutes):
        return [answer(f"p{i:02d}", 'x', 'spinner', Answer.MACHINE, duration_minutes=m) for i, m in enumerate(minutes)]

    assert duration_outliers(session([8] * 19 + [43])) == ['p19']
    assert duration_outliers(session([8, 8, 9])) == []
    assert duration_outliers(session([5, 5, 5])) == []
    with pytest.raises(AnnotationError):
        duration_outliers(session([8]))


def _hand_kappa(matrix):
    table = np.asarray(matrix, dtype=float)
    n = table.sum(axis=1)[0]
    agreement = ((table * (table - 1)).sum(axis=1) / (n * (n - 1))).mean()
    shares = table.sum(axis=0) / table.sum()
    chance = (shares ** 2).sum()
    return (agreement - chance) / (1 - chance)


def test_fleiss_kappa_examples():
    assert fleiss_kappa([[2, 0], [0, 2]]).kappa == 1.0
    assert fleiss_kappa([[1, 1], [1, 1]]).kappa == pytest.approx(-1.0, abs=1e-9)
    fixture = [[3, 0, 0], [1, 2, 0], [0, 1, 2], [1, 1, 1]]
    result = fleiss_kappa(fixture)
    assert result.kappa == pytest.approx(_hand_kappa(fixture), abs=1e-9)
    assert (result.n_items, result.n_raters_per_item) == (4, 3)
    # Relabeling the categories permutes columns only.
    assert fleiss_kappa([row[::-1] for row in fixture]).kappa == pytest.approx(result.kappa, abs=1e-12)
    assert fleiss_kappa([[3, 0], [3, 0]]).kappa == 1.0


def test_fleiss_kappa_validation():
    with pytest.raises(AnnotationError):
        fleiss_kappa([[2, 0], [1, 2]])
    with pytest.raises(AnnotationError):
        fleiss_kappa([[1, 0], [0, 1]])
    with pytest.raises(AnnotationError):
        fleiss_kappa([[1.5, 0.5]])


def test_rating_matrix_and_group_agreement(study):
    records, _, _ = study
    item_ids, categories, counts = rating_matrix(records)
    assert categories == ['machine', 'original', 'dont_know']
    assert len(item_ids) == 150
    assert set(counts.sum(axis=1).tolist()) == {3}

    groups = kappa_by_group(records, 'education')
    assert groups['all'].n_items == 150
    assert -1.0 <= groups['all'].kappa <= 1.0

    _, likert_categories, likert_counts = rating_matrix(records, 'clarity')
    assert likert_categories == [1, 2, 3, 4, 5]
    assert likert_counts.shape == (40, 5)
    with pytest.raises(AnnotationError):
        rating_matrix(records, 'beauty')


def test_likert_summary_examples():
    records = [likert('p1', 'a', 'x', clarity=3), likert('p2', 'a', 'x', clarity=5),
               likert('p1', 'b', 'y', clarity=4, fluency=2), likert('p2', 'b', 'z', fluency=2),
               likert('p3', 'b', 'z', fluency=2)]
    summary = likert_summary(records).set_index(['system', 'dimension'])
    assert summary.loc[('x', 'clarity'), 'mean'] == 4
    assert summary.loc[('x', 'clarity'), 'std'] == pytest.approx(math.sqrt(2))
    assert summary.loc[('y', 'clarity'), 'std'] == 0.0
    assert bool(summary.loc[('y', 'clarity'), 'single_rating'])
    assert summary.loc[('z', 'fluency'), 'std'] == 0.0
    assert not bool(summary.loc[('z', 'fluency'), 'single_rating'])
    assert ('x', 'fluency') not in summary.index


def test_likert_means_stay_on_the_scale(study):
    records, _, _ = study
    summary = likert_summary(records)
    assert len(summary) == 4 * 3
    assert summary['mean'].between(1, 5).all()


def test_qualification_filter(study):
    records, _, _ = study
    kept, excluded = qualification_filter(records, location='us')
    assert sorted(excluded) == ['p00', 'p05', 'p10', 'p15', 'p20', 'p25']
    assert {r.participant_id for r in kept}.isdisjoint(excluded)
    everyone, none = qualification_filter(records)
    assert (len(everyone), none) == (len(records), {})
    _, strict = qualification_filter(records, min_acceptance_rate=1.0)
    assert len(strict) == 30


def test_similarity_triangle(one_hot):
    emb = one_hot(['a', 'b', 'c', 'd', 'e', 'f'])
    assert similarity_triangle(["a b"], ["a b"], ["a b"], emb) == pytest.approx((1.0, 1.0, 1.0))
    human_original, machine_original, human_machine = similarity_triangle(
        ["a b c", "d e"], ["a b f", "d f"], ["a b f", "d f"], emb)
    assert human_machine == 1.0
    assert human_machine > max(human_original, machine_original)
    with pytest.raises(AnnotationError):
        similarity_triangle(["a"], ["a"], [], emb)


def test_demographic_summary(study):
    records, _, _ = study
    summary = demographic_summary(records)
    assert summary['n_participants'] == summary['n_with_demographics'] == 30
    assert summary['gender'] == {'female': 15, 'male': 15}
    assert sum(summary['education'].values()) == 30
    assert 18 <= summary['age']['min'] <= summary['age']['max'] < 42
    assert summary['age_by_gender']['groups'] == ['female', 'male']
    assert 0 < summary['age_by_gender']['p_value'] <= 1

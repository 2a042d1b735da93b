import json
import logging
import os

import pandas as pd
import pytest

import main_app
from conftest import DATA_DIR, ROOT
from corpus_store import ingest, load_corpus, read_candidate_sets, read_split
from run_config import load_config
from stats_engine import evaluation_report
from synthetic_fixtures import (synthetic_annotations, synthetic_originals, write_annotations, write_documents,
                                write_example_inputs, write_synthetic_embeddings, write_task_texts)
from text_metrics import load_embeddings

SYNONYMS = os.path.join(DATA_DIR, 'synonyms.tsv')


@pytest.fixture
def workspace(tmp_path, synonyms):
    originals = tmp_path / 'originals.jsonl'
    write_documents(synthetic_originals(60, synonyms, seed=5), originals)
    embeddings = tmp_path / 'embeddings.txt'
    write_synthetic_embeddings(synonyms, embeddings, seed=5)
    return tmp_path, str(originals), str(embeddings)


def write_config(directory, payload):
    path = directory / 'run.json'
    path.write_text(json.dumps(payload, indent=2), encoding='utf-8')
    return str(path)


def base_config(originals, embeddings, backend):
    return {
        'seed': 11,
        'generation': {'originals_path': originals, 'synonyms_path': SYNONYMS, 'candidates_per_original': 2,
                       'max_new_tokens_ratio': 1.0, 'backend': backend},
        'selection': {'embeddings_path': embeddings},
        'corpus': {'split_ratios': [0.6, 0.2, 0.2]},
        'detection': {'detectors': ['w2v+nb', 'ngram+mnb', 'text-match', 'random']},
        'evaluation': {'iterations': 500},
    }


def read_bytes(path):
    with open(path, 'rb') as f:
        return f.read()


def test_unknown_config_key_exits_with_status_1(tmp_path, caplog):
    config = write_config(tmp_path, {'seed': 1, 'generaton': {}})
    with caplog.at_level(logging.ERROR, logger='paraforge'):
        assert main_app.main(['generate', '--config', config]) == 1
    assert "unknown config key 'generaton' (line 3)" in caplog.text


def test_runtime_failures_exit_with_status_2(tmp_path):
    config = write_config(tmp_path, {'generation': {'originals_path': str(tmp_path / 'absent.jsonl')}})
    assert main_app.main(['generate', '--config', config, '--out', str(tmp_path / 'out')]) == 2


def test_missing_required_path_is_a_config_error(tmp_path):
    assert main_app.main(['select', '--out', str(tmp_path)]) == 1


def test_malformed_records_exit_with_status_2(tmp_path, caplog):
    predictions = tmp_path / 'predictions.jsonl'
    complete = {'doc_id': '1-ORIG-0', 'source': 'arxiv', 'truth': 'original', 'label': 'original', 'detector': 'random'}
    incomplete = {k: v for k, v in complete.items() if k != 'source'}
    predictions.write_text(json.dumps(complete) + '\n' + json.dumps(incomplete) + '\n', encoding='utf-8')
    config = write_config(tmp_path, {'evaluation': {'predictions_path': str(predictions)}})
    with caplog.at_level(logging.ERROR, logger='paraforge'):
        assert main_app.main(['evaluate', '--config', config, '--out', str(tmp_path / 'out')]) == 2
    assert f"{predictions}:2: missing field(s) source" in caplog.text

    records, task_texts, _ = synthetic_annotations(seed=2)
    annotations = tmp_path / 'annotations.jsonl'
    write_annotations(records, annotations)
    texts = tmp_path / 'tasks.jsonl'
    write_task_texts(task_texts, texts)
    triples = tmp_path / 'triples.jsonl'
    triples.write_text('{"original": "a b", "human": "a c"}\n', encoding='utf-8')
    config = write_config(tmp_path, {'annotations': {'path': str(annotations), 'task_texts_path': str(texts),
                                                     'triples_path': str(triples)}})
    caplog.clear()
    with caplog.at_level(logging.ERROR, logger='paraforge'):
        assert main_app.main(['analyze-annotations', '--config', config, '--out', str(tmp_path / 'out')]) == 2
    assert f"{triples}:1: missing field(s) machine" in caplog.text


def test_generate_and_select_are_byte_identical_across_runs(workspace):
    tmp_path, originals, embeddings = workspace
    config = write_config(tmp_path, base_config(originals, embeddings, {'kind': 'mock', 'echo': True}))
    runs = []
    for name in ('first', 'second'):
        out = str(tmp_path / name)
        assert main_app.main(['generate', '--config', config, '--out', out]) == 0
        assert main_app.main(['select', '--config', config, '--out', out]) == 0
        runs.append(out)
    for artifact in ('candidates.jsonl', 'documents.jsonl', 'pairs.jsonl', 'selection_failures.json'):
        first, second = (read_bytes(os.path.join(run, artifact)) for run in runs)
        assert first == second and first
    with open(os.path.join(runs[0], 'manifest.json'), 'r', encoding='utf-8') as f:
        manifest = json.load(f)
    assert manifest['subcommand'] == 'select'
    assert originals in manifest['inputs']


def test_generation_parameters_are_part_of_the_provenance(workspace):
    tmp_path, originals, embeddings = workspace
    backend = {'kind': 'mock', 'responses': ['network layer of the system', 'the corpus and the graph', 'a signal']}
    config = write_config(tmp_path, base_config(originals, embeddings, backend))
    assert main_app.main(['generate', '--config', config, '--out', str(tmp_path / 'a'), '--seed', '1']) == 0
    assert main_app.main(['generate', '--config', config, '--out', str(tmp_path / 'b'), '--seed', '1',
                          '--set', 'generation.temperature=0.3']) == 0
    first = read_candidate_sets(str(tmp_path / 'a' / 'candidates.jsonl'))
    second = read_candidate_sets(str(tmp_path / 'b' / 'candidates.jsonl'))
    assert [cs.candidates for cs in first] == [cs.candidates for cs in second]
    assert first[0].generator != second[0].generator
    assert first[0].generator.split('@')[0] == second[0].generator.split('@')[0]


def test_full_detection_pipeline(workspace):
    tmp_path, originals, embeddings = workspace
    out = str(tmp_path / 'run')
    config = write_config(tmp_path, base_config(originals, embeddings, {'kind': 'spinner', 'spin_period': 4}))
    for subcommand in ('build-corpus', 'train-detector', 'detect', 'evaluate'):
        assert main_app.main([subcommand, '--config', config, '--out', out]) == 0, subcommand

    pairs = load_corpus(out)
    corpus_split = read_split(os.path.join(out, 'split.json'))
    assert len(pairs) == 60
    assert (len(corpus_split.train), len(corpus_split.dev), len(corpus_split.test)) == (36, 12, 12)
    assert os.path.isfile(os.path.join(out, main_app.GAUSSIAN_MODEL_FILE))
    assert os.path.isfile(os.path.join(out, main_app.MULTINOMIAL_MODEL_FILE))

    with open(os.path.join(out, 'predictions.jsonl'), 'r', encoding='utf-8') as f:
        predictions = [json.loads(line) for line in f]
    assert {p['detector'] for p in predictions} == {'w2v+nb', 'ngram+mnb', 'text-match', 'random'}
    assert predictions == sorted(predictions, key=lambda p: (p['detector'], p['doc_id']))

    with open(os.path.join(out, 'evaluation.json'), 'r', encoding='utf-8') as f:
        report = json.load(f)
    config_obj = load_config(config, seed=None, out_dir=out)
    settings = config_obj.evaluation
    expected, table = evaluation_report(predictions, baseline=settings.baseline,
                                        reference_detectors=settings.reference_detectors,
                                        iterations=settings.iterations, seed=config_obj.seed, method=settings.method)
    assert report == json.loads(json.dumps(expected))
    csv = pd.read_csv(os.path.join(out, 'evaluation.csv'))
    assert list(csv.columns) == list(table.columns)
    assert len(csv) == len(table)

    before = read_bytes(os.path.join(out, 'evaluation.json'))
    assert main_app.main(['evaluate', '--config', config, '--out', out]) == 0
    assert read_bytes(os.path.join(out, 'evaluation.json')) == before


def test_external_detector_from_the_command_line(workspace):
    tmp_path, originals, embeddings = workspace
    out = str(tmp_path / 'run')
    payload = base_config(originals, embeddings, {'kind': 'spinner', 'spin_period': 4})
    payload['detection'] = {'detectors': ['external', 'random'],
                            'external_backend': {'kind': 'mock', 'responses': ['Label: original']}}
    config = write_config(tmp_path, payload)
    for subcommand in ('build-corpus', 'detect', 'evaluate'):
        assert main_app.main([subcommand, '--config', config, '--out', out]) == 0, subcommand

    with open(os.path.join(out, 'predictions.jsonl'), 'r', encoding='utf-8') as f:
        predictions = [json.loads(line) for line in f]
    external = [p for p in predictions if p['detector'] == 'external']
    assert len(external) == 24
    assert {p['label'] for p in external} == {'original'}


def test_scores_by_backend(workspace):
    tmp_path, originals, embeddings = workspace
    paths = []
    for name, backend in (('echo', {'kind': 'mock', 'echo': True}), ('spin', {'kind': 'spinner', 'spin_period': 2})):
        config = write_config(tmp_path, base_config(originals, embeddings, backend))
        assert main_app.main(['generate', '--config', config, '--out', str(tmp_path / name)]) == 0
        paths.append(str(tmp_path / name / 'candidates.jsonl'))

    out = str(tmp_path / 'compare')
    assert main_app.main(['scores-by-backend', '--config', config, '--out', out,
                          '--set', f'selection.compare_paths={json.dumps(paths)}']) == 0
    summary = pd.read_csv(os.path.join(out, 'scores_by_backend.csv'))
    assert len(summary) == 2
    assert set(summary['sem_match_count']) == {120}
    echo = summary[summary['backend'] == 'mock:echo'].iloc[0]
    spinner = summary[summary['backend'] != 'mock:echo'].iloc[0]
    assert echo['rouge_l_mean'] == pytest.approx(1.0)
    assert spinner['rouge_l_mean'] < 1.0


def test_example_config_reads_bundled_and_generated_inputs(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    written = write_example_inputs()
    example = os.path.join(DATA_DIR, 'example_config.json')
    config = load_config(example)
    assert {config.generation.originals_path, config.selection.embeddings_path, config.annotations.path,
            config.annotations.task_texts_path} == set(written)
    for path in written:
        assert os.path.isfile(path)
    for path in (config.generation.examples_path, config.generation.synonyms_path):
        assert os.path.isfile(os.path.join(ROOT, path))
    assert len(ingest(config.generation.originals_path)) == 200
    assert len(load_embeddings(config.selection.embeddings_path)) > 0

    assert main_app.main(['analyze-annotations', '--config', example]) == 0
    assert os.path.isfile(os.path.join(config.out_dir, 'annotations_report.json'))


def test_analyze_annotations(tmp_path):
    records, task_texts, outliers = synthetic_annotations(seed=2)
    annotations = tmp_path / 'annotations.jsonl'
    write_annotations(records, annotations)
    texts = tmp_path / 'tasks.jsonl'
    write_task_texts(task_texts, texts)
    config = write_config(tmp_path, {'annotations': {'path': str(annotations), 'task_texts_path': str(texts),
                                                     'kappa_groups': ['education', 'expert']}})
    out = str(tmp_path / 'out')
    assert main_app.main(['analyze-annotations', '--config', config, '--out', out]) == 0

    with open(os.path.join(out, 'annotations_report.json'), 'r', encoding='utf-8') as f:
        report = json.load(f)
    assert report['duration_outliers'] == outliers
    assert [row['system'] for row in report['system_accuracy']][0] == 'spinner'
    assert len(report['system_accuracy']) == 5
    assert report['rejected_assessments'] == []
    assert 'all' in report['agreement']['answer']['education']
    assert report['demographics']['n_participants'] == 30
    assert len(pd.read_csv(os.path.join(out, 'likert_summary.csv'))) == 12

import argparse
import json
import logging
import os
import sys

import pandas as pd

from annotation_engine import (LIKERT_DIMENSIONS, demographic_summary, duration_outliers, filter_assessments,
                               kappa_by_group, likert_summary, load_annotations, participant_accuracy,
                               qualification_filter, similarity_triangle, system_accuracy_table)
from backends import make_backend
from candidate_selection import AXES, SelectionWeights, metric_vector
from corpus_store import (build_pairs, export_corpus, ingest, load_corpus, read_candidate_sets,
                          read_split, select_all, spot_check, split, write_candidate_sets, write_split)
from detectors import (Label, ReferenceIndex, embed_doc, external_detect_many, fewshot_detect_many, load_model,
                       nb_predict, random_detect, save_model, textmatch_detect, train_multinomial_nb, train_nb)
from errors import ConfigError, CorpusFormatError, DetectorError, GenerationError, MetricError, ParaforgeError
from paraphrase_engine import GenParams, PromptSpec, generate_many, load_prompt_examples, load_synonym_table
from run_config import load_config, write_run_record
from stats_engine import PREDICTION_FIELDS, evaluation_report
from text_metrics import DEFAULT_SCHEME, load_embeddings, tokenize

logger = logging.getLogger('paraforge')

SUBCOMMANDS = ('generate', 'select', 'build-corpus', 'train-detector', 'detect', 'evaluate',
               'analyze-annotations', 'scores-by-backend')
LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'

GAUSSIAN_MODEL_FILE = 'model_w2v_nb.json'
MULTINOMIAL_MODEL_FILE = 'model_ngram_mnb.json'


# --- Shared helpers ---

def _required(value, key):
    if not value:
        raise ConfigError(f"'{key}' is not set")
    return value


def _out(config, name):
    return os.path.join(config.out_dir, name)


def _write_json(path, payload):
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        json.dump(payload, f, indent=2, sort_keys=True, ensure_ascii=False)
        f.write('\n')
    return path


def _write_csv(path, frame):
    frame.to_csv(path, index=False, lineterminator='\n')
    return path


def _frame_records(frame):
    return json.loads(frame.to_json(orient='records'))


def _read_records(path, required):
    """JSONL objects from path, each checked for the required fields."""
    records = []
    with open(path, 'r', encoding='utf-8') as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusFormatError(f"invalid JSON ({e.msg})", path, line_number) from e
            if not isinstance(record, dict):
                raise CorpusFormatError("record is not an object", path, line_number)
            missing = [name for name in required if name not in record]
            if missing:
                raise CorpusFormatError(f"missing field(s) {', '.join(missing)}", path, line_number)
            records.append(record)
    return records


def _embeddings(config):
    return load_embeddings(_required(config.selection.embeddings_path, 'selection.embeddings_path'))


def _weights(config):
    unknown = sorted(set(config.selection.weights) - set(AXES))
    if unknown:
        raise ConfigError(f"unknown selection.weights axis: {', '.join(unknown)}")
    return SelectionWeights(**config.selection.weights)


def _metric_options(config):
    return {'lm_order': config.selection.lm_order, 'bleu_max_n': config.selection.bleu_max_n}


def _prompt_spec(config):
    generation = config.generation
    examples = load_prompt_examples(generation.examples_path) if generation.examples_path else ()
    return PromptSpec(instruction=generation.instruction, example_pairs=examples,
                      context_budget_tokens=generation.context_budget_tokens)


def _gen_params(config):
    generation = config.generation
    return GenParams(max_new_tokens_ratio=generation.max_new_tokens_ratio, temperature=generation.temperature,
                     candidates_per_original=generation.candidates_per_original, seed=config.seed,
                     max_retries=generation.max_retries)


def _backend(config):
    synonyms_path = config.generation.synonyms_path
    return make_backend(config.generation.backend, load_synonym_table(synonyms_path) if synonyms_path else None)


def _originals(config):
    path = _required(config.generation.originals_path, 'generation.originals_path')
    documents = ingest(path, config.generation.input_format)
    originals = [d for d in documents if d.kind == 'ORIG']
    if len(originals) < len(documents):
        logger.warning("Ignoring %d non-original documents in %s", len(documents) - len(originals), path)
    return originals


def _check_error_rate(failures, total, config):
    rate = len(failures) / total if total else 0.0
    if rate > config.corpus.max_error_rate:
        raise GenerationError(f"{len(failures)} of {total} originals failed "
                              f"({rate:.1%} > {config.corpus.max_error_rate:.1%})")


def _failure_record(failures):
    return {doc_id: str(error) for doc_id, error in sorted(failures.items())}


def _corpus_paths(config):
    corpus_dir = config.corpus.corpus_dir or config.out_dir
    split_path = config.corpus.split_path or os.path.join(corpus_dir, 'split.json')
    return corpus_dir, split_path


def _labeled_documents(pairs, pair_ids):
    """(document, truth) for both sides of each listed pair, in pair id order."""
    by_id = {pair.id: pair for pair in pairs}
    labeled = []
    for pair_id in sorted(pair_ids):
        pair = by_id[pair_id]
        labeled.append((pair.original, Label.ORIGINAL))
        labeled.append((pair.paraphrase, Label.MACHINE))
    return labeled


# --- Subcommands ---

def handle_generate(config):
    """Originals -> unscored candidate sets."""
    originals = _originals(config)
    backend = _backend(config)
    candidate_sets, failures = generate_many(backend, originals, _gen_params(config), _prompt_spec(config),
                                             config.generation.max_in_flight)
    _check_error_rate(failures, len(originals), config)

    os.makedirs(config.out_dir, exist_ok=True)
    candidates_path = _out(config, 'candidates.jsonl')
    write_candidate_sets(candidates_path, candidate_sets)
    failures_path = _write_json(_out(config, 'generation_failures.json'), _failure_record(failures))
    return [config.generation.originals_path], [candidates_path, failures_path]


def handle_select(config):
    """Candidate sets -> aligned pairs, one selected paraphrase per original."""
    originals = _originals(config)
    candidates_path = config.selection.candidates_path or _out(config, 'candidates.jsonl')
    candidate_sets = read_candidate_sets(candidates_path)
    pairs, failures = select_all(originals, candidate_sets, _embeddings(config), _weights(config),
                                 **_metric_options(config))
    _check_error_rate(failures, len(candidate_sets), config)

    documents_path, pairs_path = export_corpus(pairs, config.out_dir)
    failures_path = _write_json(_out(config, 'selection_failures.json'), _failure_record(failures))
    inputs = [config.generation.originals_path, candidates_path, config.selection.embeddings_path]
    return inputs, [documents_path, pairs_path, failures_path]


def handle_build_corpus(config):
    """Generation, selection, spot check and train/dev/test split in one pass."""
    # 1. Generate and select with the configured failure threshold
    emb = _embeddings(config)
    result = build_pairs(_originals(config), _backend(config), _gen_params(config), _prompt_spec(config), emb,
                         weights=_weights(config), max_error_rate=config.corpus.max_error_rate,
                         max_in_flight=config.generation.max_in_flight, **_metric_options(config))

    # 2. Persist the corpus and recheck a sample of the stored metric vectors
    documents_path, pairs_path = export_corpus(result.pairs, config.out_dir)
    spot_check(result.pairs, emb, config.corpus.spot_check_size, config.seed, **_metric_options(config))

    # 3. Seeded split over pair ids
    corpus_split = split([pair.id for pair in result.pairs], config.corpus.split_ratios, config.seed)
    split_path = _out(config, 'split.json')
    write_split(split_path, corpus_split)
    failures_path = _write_json(_out(config, 'generation_failures.json'), _failure_record(result.failures))
    inputs = [config.generation.originals_path, config.selection.embeddings_path,
              config.generation.synonyms_path, config.generation.examples_path]
    return inputs, [documents_path, pairs_path, split_path, failures_path]


def _features(labeled, emb):
    features, labels = [], []
    for document, truth in labeled:
        try:
            features.append(embed_doc(tokenize(document.text, DEFAULT_SCHEME), emb))
            labels.append(truth)
        except (DetectorError, MetricError) as e:
            logger.warning("Skipping %s: %s", document.id, e)
    return features, labels


def handle_train_detector(config):
    corpus_dir, split_path = _corpus_paths(config)
    pairs = load_corpus(corpus_dir)
    training = _labeled_documents(pairs, read_split(split_path).train)
    model_dir = config.detection.model_dir or config.out_dir
    os.makedirs(model_dir, exist_ok=True)

    outputs = []
    if 'w2v+nb' in config.detection.detectors:
        emb = _embeddings(config)
        features, labels = _features(training, emb)
        model = train_nb(features, labels, config.detection.variance_floor, emb.digest())
        outputs.append(os.path.join(model_dir, GAUSSIAN_MODEL_FILE))
        save_model(model, outputs[-1])
    if 'ngram+mnb' in config.detection.detectors:
        model = train_multinomial_nb([d.text for d, _ in training], [t for _, t in training],
                                     config.detection.mnb_alpha, config.detection.ngram_max)
        outputs.append(os.path.join(model_dir, MULTINOMIAL_MODEL_FILE))
        save_model(model, outputs[-1])
    if not outputs:
        raise ConfigError("detection.detectors names no trainable detector (w2v+nb, ngram+mnb)")
    inputs = [os.path.join(corpus_dir, 'documents.jsonl'), os.path.join(corpus_dir, 'pairs.jsonl'), split_path]
    return inputs, outputs


def _run_detector(name, config, evaluated, pairs, training):
    """{doc_id: Prediction} for one configured detector; documents it cannot judge are left out."""
    detection = config.detection
    model_dir = detection.model_dir or config.out_dir
    if name == 'random':
        return random_detect([d.id for d, _ in evaluated], config.seed)

    predictions = {}
    if name == 'w2v+nb':
        emb = _embeddings(config)
        model = load_model(os.path.join(model_dir, GAUSSIAN_MODEL_FILE), emb.digest())
        for document, _ in evaluated:
            try:
                predictions[document.id] = nb_predict(model, embed_doc(tokenize(document.text, DEFAULT_SCHEME), emb))
            except (DetectorError, MetricError) as e:
                logger.warning("w2v+nb abstains on %s: %s", document.id, e)
    elif name == 'ngram+mnb':
        model = load_model(os.path.join(model_dir, MULTINOMIAL_MODEL_FILE))
        predictions = {document.id: model.predict(document.text) for document, _ in evaluated}
    elif name == 'text-match':
        if detection.reference_path:
            sources = [d.text for d in ingest(detection.reference_path)]
        else:
            sources = [pair.original.text for pair in pairs]
        index = ReferenceIndex([tokenize(text, DEFAULT_SCHEME) for text in sources], detection.textmatch_n)
        for document, _ in evaluated:
            try:
                predictions[document.id] = textmatch_detect(tokenize(document.text, DEFAULT_SCHEME), index,
                                                            detection.textmatch_threshold, detection.textmatch_n)
            except MetricError as e:
                logger.warning("text-match abstains on %s: %s", document.id, e)
    elif name == 'fewshot':
        examples = [(d.text, truth.value) for d, truth in training[:detection.fewshot_examples]]
        results = fewshot_detect_many(_backend(config), [d.text for d, _ in evaluated], examples,
                                      max_in_flight=config.generation.max_in_flight,
                                      context_budget_tokens=config.generation.context_budget_tokens)
        predictions = {d.id: p for (d, _), p in zip(evaluated, results) if p is not None}
    elif name == 'external':
        results = external_detect_many(make_backend(detection.external_backend), [d.text for d, _ in evaluated],
                                       max_in_flight=config.generation.max_in_flight)
        predictions = {d.id: p for (d, _), p in zip(evaluated, results) if p is not None}
    else:
        raise ConfigError(f"unknown detector '{name}'")
    return predictions


def handle_detect(config):
    corpus_dir, split_path = _corpus_paths(config)
    pairs = load_corpus(corpus_dir)
    corpus_split = read_split(split_path)
    if config.detection.evaluate_split not in ('train', 'dev', 'test'):
        raise ConfigError(f"detection.evaluate_split must be train, dev or test, got '{config.detection.evaluate_split}'")
    evaluated = _labeled_documents(pairs, getattr(corpus_split, config.detection.evaluate_split))
    training = _labeled_documents(pairs, corpus_split.train)

    records = []
    for name in config.detection.detectors:
        predictions = _run_detector(name, config, evaluated, pairs, training)
        for document, truth in evaluated:
            prediction = predictions.get(document.id)
            if prediction is None:
                continue
            records.append({'doc_id': document.id, 'source': document.source.value, 'truth': truth.value,
                            'label': prediction.label.value, 'confidence': prediction.confidence,
                            'detector': name})
        logger.info("Detector %s judged %d of %d documents", name, len(predictions), len(evaluated))

    records.sort(key=lambda r: (r['detector'], r['doc_id']))
    predictions_path = _out(config, 'predictions.jsonl')
    os.makedirs(config.out_dir, exist_ok=True)
    with open(predictions_path, 'w', encoding='utf-8', newline='\n') as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True) + '\n')
    return [os.path.join(corpus_dir, 'pairs.jsonl'), split_path], [predictions_path]


def handle_evaluate(config):
    predictions_path = config.evaluation.predictions_path or _out(config, 'predictions.jsonl')
    records = _read_records(predictions_path, PREDICTION_FIELDS)
    evaluation = config.evaluation
    report, table = evaluation_report(records, baseline=evaluation.baseline,
                                      reference_detectors=evaluation.reference_detectors,
                                      iterations=evaluation.iterations, seed=config.seed, method=evaluation.method)
    os.makedirs(config.out_dir, exist_ok=True)
    report_path = _write_json(_out(config, 'evaluation.json'), report)
    table_path = _write_csv(_out(config, 'evaluation.csv'), table)
    return [predictions_path], [report_path, table_path]


def _read_task_texts(path):
    return {str(record['item_id']): record['text'] for record in _read_records(path, ('item_id', 'text'))}


def handle_analyze_annotations(config):
    settings = config.annotations
    path = _required(settings.path, 'annotations.path')
    records = load_annotations(path)
    inputs = [path]

    # 1. Recruitment rules and assessment filtering
    records, disqualified = qualification_filter(records, settings.min_acceptance_rate, settings.location,
                                                 settings.min_tasks)
    task_texts = {}
    if settings.task_texts_path:
        task_texts = _read_task_texts(settings.task_texts_path)
        inputs.append(settings.task_texts_path)
    records, rejected = filter_assessments(records, task_texts, settings.max_copy_match, settings.min_tokens)

    # 2. Accuracy, agreement and ratings
    scores, excluded = participant_accuracy(records)
    accuracy_table = system_accuracy_table(records, settings.control, settings.level)
    likert = likert_summary(records)
    agreement = {}
    for dimension in ('answer',) + LIKERT_DIMENSIONS:
        for field in settings.kappa_groups:
            results = kappa_by_group(records, field, dimension)
            if results:
                agreement.setdefault(dimension, {})[field] = {
                    group: {'kappa': r.kappa, 'n_items': r.n_items, 'n_raters_per_item': r.n_raters_per_item}
                    for group, r in results.items()}

    # 3. Durations, demographics and the optional similarity triangle
    try:
        outliers = duration_outliers(records, settings.outlier_k, settings.duration_how)
    except ParaforgeError as e:
        logger.warning("No duration outliers computed: %s", e)
        outliers = []
    report = {
        'participants': {p: {'accuracy': s.accuracy, 'dont_know_ratio': s.dont_know_ratio, 'n_answers': s.n_answers}
                         for p, s in scores.items()},
        'excluded_participants': excluded,
        'disqualified_participants': disqualified,
        'rejected_assessments': [{'participant_id': r.participant_id, 'item_id': r.item_id, 'reason': reason.value}
                                 for r, reason in rejected],
        'system_accuracy': _frame_records(accuracy_table),
        'likert': _frame_records(likert),
        'agreement': agreement,
        'duration_outliers': outliers,
        'demographics': demographic_summary(records),
    }
    if settings.triples_path:
        triples = _read_records(settings.triples_path, ('original', 'human', 'machine'))
        human_original, machine_original, human_machine = similarity_triangle(
            [t['original'] for t in triples], [t['human'] for t in triples], [t['machine'] for t in triples],
            _embeddings(config))
        report['similarity'] = {'human_original': human_original, 'machine_original': machine_original,
                                'human_machine': human_machine}
        inputs.append(settings.triples_path)

    os.makedirs(config.out_dir, exist_ok=True)
    outputs = [_write_json(_out(config, 'annotations_report.json'), report),
               _write_csv(_out(config, 'system_accuracy.csv'), accuracy_table),
               _write_csv(_out(config, 'likert_summary.csv'), likert)]
    return inputs, outputs


def handle_scores_by_backend(config):
    """Metric vectors of every candidate, grouped by the backend identity that generated it."""
    paths = config.selection.compare_paths or (config.selection.candidates_path or _out(config, 'candidates.jsonl'),)
    originals = {d.id: d for d in _originals(config)}
    emb = _embeddings(config)
    rows = []
    for path in paths:
        for candidate_set in read_candidate_sets(path):
            original = originals.get(candidate_set.original_id)
            if original is None:
                logger.warning("Skipping candidates for unknown original %s", candidate_set.original_id)
                continue
            backend = candidate_set.generator.split('@')[0]
            for i, candidate in enumerate(candidate_set.candidates):
                try:
                    vector = metric_vector(tokenize(candidate.text, DEFAULT_SCHEME),
                                           tokenize(original.text, DEFAULT_SCHEME), emb, i, **_metric_options(config))
                except MetricError as e:
                    logger.warning("Unscorable candidate %d of %s: %s", i, candidate_set.original_id, e)
                    continue
                rows.append({'backend': backend, 'original_id': original.id, 'candidate': i, **vector.as_dict()})
    if not rows:
        raise MetricError("no candidate could be scored")

    frame = pd.DataFrame(rows).sort_values(['backend', 'original_id', 'candidate'])
    summary = frame.groupby('backend')[list(AXES)].agg(['mean', 'std', 'count'])
    summary.columns = [f"{axis}_{stat}" for axis, stat in summary.columns]
    os.makedirs(config.out_dir, exist_ok=True)
    outputs = [_write_csv(_out(config, 'scores_by_backend.csv'), summary.reset_index()),
               _write_csv(_out(config, 'scores_by_candidate.csv'), frame)]
    return list(paths) + [config.generation.originals_path, config.selection.embeddings_path], outputs


HANDLERS = {
    'generate': handle_generate,
    'select': handle_select,
    'build-corpus': handle_build_corpus,
    'train-detector': handle_train_detector,
    'detect': handle_detect,
    'evaluate': handle_evaluate,
    'analyze-annotations': handle_analyze_annotations,
    'scores-by-backend': handle_scores_by_backend,
}


def run(subcommand, config):
    """Runs one subcommand. Returns (exit status, artifact paths)."""
    try:
        inputs, outputs = HANDLERS[subcommand](config)
        resolved_path, manifest_path = write_run_record(config, subcommand, inputs, outputs)
    except ConfigError as e:
        logger.error("Invalid configuration: %s", e)
        return 1, []
    except (ParaforgeError, OSError, ValueError) as e:
        logger.error("%s failed: %s", subcommand, e)
        return 2, []
    logger.info("%s wrote %d artifacts to %s", subcommand, len(outputs), config.out_dir)
    return 0, outputs + [resolved_path, manifest_path]


def build_parser():
    parser = argparse.ArgumentParser(prog='paraforge', description="Machine-paraphrase corpus and detection toolkit.")
    parser.add_argument('--verbose', action='store_true', help="log at DEBUG level")
    subparsers = parser.add_subparsers(dest='subcommand', required=True)
    for name in SUBCOMMANDS:
        sub = subparsers.add_parser(name)
        sub.add_argument('--config', help="JSON run configuration")
        sub.add_argument('--seed', type=int, help="overrides the config seed")
        sub.add_argument('--out', help="overrides the config out_dir")
        sub.add_argument('--set', action='append', default=[], metavar='KEY=VALUE',
                         help="overrides one config key, e.g. generation.temperature=0.5")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format=LOG_FORMAT)
    try:
        config = load_config(args.config, args.set, seed=args.seed, out_dir=args.out)
    except ConfigError as e:
        logger.error("Invalid configuration: %s", e)
        return 1
    status, _ = run(args.subcommand, config)
    return status


# --- Main execution block ---
if __name__ == "__main__":
    sys.exit(main())

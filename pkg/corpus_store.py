"""
Aligned original/paraphrase corpora: documents, pairs, ingestion, assembly, splits and
JSONL persistence.
"""
import json
import logging
import math
import os
import random
import re
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

from candidate_selection import (AXES, Candidate, CandidateSet, MetricVector,
                                 SelectionWeights, metric_vector, score_candidates,
                                 select_candidate)
from errors import (CorpusFormatError, DuplicateIdError, GenerationError,
                    MetricError, SplitError)
from paraphrase_engine import generate_many
from text_metrics import DEFAULT_SCHEME, tokenize

logger = logging.getLogger(__name__)

DOC_ID_PATTERN = re.compile(r'^(?P<doc>[A-Za-z0-9_.]+)-(?P<kind>ORIG|SPUN)-(?P<para>\d+)$')


class Source(str, Enum):
    ARXIV = 'arxiv'
    WIKIPEDIA = 'wikipedia'
    THESES = 'theses'
    OTHER = 'other'


class PairLabel(str, Enum):
    MACHINE = 'machine'
    HUMAN = 'human'


@dataclass(frozen=True)
class Document:
    id: str
    source: Source
    text: str

    def __post_init__(self):
        if not DOC_ID_PATTERN.match(self.id):
            raise CorpusFormatError(f"document id '{self.id}' does not match <doc>-<ORIG|SPUN>-<para>")
        if not self.text.strip():
            raise CorpusFormatError(f"document '{self.id}' has empty text")

    @property
    def coordinates(self):
        match = DOC_ID_PATTERN.match(self.id)
        return match.group('doc'), match.group('para')

    @property
    def kind(self):
        return DOC_ID_PATTERN.match(self.id).group('kind')

    def to_record(self):
        return {'id': self.id, 'source': self.source.value, 'text': self.text}


@dataclass(frozen=True)
class AlignedPair:
    original: Document
    paraphrase: Document
    generator: str
    label: PairLabel
    metrics: MetricVector

    def __post_init__(self):
        if self.original.coordinates != self.paraphrase.coordinates:
            raise CorpusFormatError(f"pair {self.original.id} / {self.paraphrase.id} is not aligned")
        if self.label is PairLabel.HUMAN and self.generator:
            raise CorpusFormatError(f"human pair {self.original.id} carries a generator digest")

    @property
    def id(self):
        return self.original.id

    def to_record(self):
        return {
            'original_id': self.original.id,
            'paraphrase_id': self.paraphrase.id,
            'label': self.label.value,
            'generator': self.generator,
            'metrics': self.metrics.as_dict(),
        }


@dataclass(frozen=True)
class CorpusSplit:
    train: tuple
    dev: tuple
    test: tuple
    seed: int
    ratios: tuple

    def to_record(self):
        return {'train': list(self.train), 'dev': list(self.dev), 'test': list(self.test),
                'seed': self.seed, 'ratios': list(self.ratios)}

    @classmethod
    def from_record(cls, record):
        return cls(tuple(record['train']), tuple(record['dev']), tuple(record['test']),
                   record['seed'], tuple(record['ratios']))


def paraphrase_id_for(original_id):
    match = DOC_ID_PATTERN.match(original_id)
    return f"{match.group('doc')}-SPUN-{match.group('para')}"


# --- Ingestion ---

def _document_from_record(record, path, line_number):
    try:
        source = Source(record.get('source', 'other'))
        return Document(record['id'], source, record['text'])
    except KeyError as e:
        raise CorpusFormatError(f"missing field {e}", path, line_number) from e
    except (ValueError, TypeError, AttributeError) as e:
        raise CorpusFormatError(str(e), path, line_number) from e


def _read_jsonl(path):
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
            yield line_number, record


def _paired_dir_records(path):
    root = Path(path)
    for file_path in sorted(root.rglob('*.txt')):
        source_dir = file_path.relative_to(root).parts[0] if len(file_path.relative_to(root).parts) > 1 else 'other'
        source = source_dir if source_dir in {s.value for s in Source} else 'other'
        text = file_path.read_text(encoding='utf-8').strip()
        yield str(file_path), {'id': file_path.stem, 'source': source, 'text': text}


def ingest(path, format='jsonl'):
    """Reads documents from a JSONL file or from <path>/<source>/<id>.txt files, rejecting duplicate ids."""
    if format == 'jsonl':
        records = ((path, line_number, record) for line_number, record in _read_jsonl(path))
    elif format == 'paired-dirs':
        records = ((file_path, 1, record) for file_path, record in _paired_dir_records(path))
    else:
        raise CorpusFormatError(f"unknown corpus format '{format}'", path)

    documents, seen = [], set()
    for location, line_number, record in records:
        document = _document_from_record(record, location, line_number)
        if document.id in seen:
            raise DuplicateIdError(f"duplicate document id '{document.id}'", location, line_number)
        seen.add(document.id)
        documents.append(document)
    logger.info("Ingested %d documents from %s", len(documents), path)
    return documents


# --- Persistence ---

def _write_jsonl(path, records):
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        for record in records:
            f.write(json.dumps(record, ensure_ascii=False) + '\n')


def export_corpus(pairs, directory):
    """Writes documents.jsonl and pairs.jsonl (both in pair order) to directory."""
    os.makedirs(directory, exist_ok=True)
    documents = []
    for pair in pairs:
        documents.extend([pair.original, pair.paraphrase])
    _write_jsonl(os.path.join(directory, 'documents.jsonl'), (d.to_record() for d in documents))
    _write_jsonl(os.path.join(directory, 'pairs.jsonl'), (p.to_record() for p in pairs))
    return os.path.join(directory, 'documents.jsonl'), os.path.join(directory, 'pairs.jsonl')


def load_corpus(directory):
    """Inverse of export_corpus."""
    documents = {d.id: d for d in ingest(os.path.join(directory, 'documents.jsonl'))}
    pairs_path = os.path.join(directory, 'pairs.jsonl')
    pairs = []
    for line_number, record in _read_jsonl(pairs_path):
        try:
            metrics = MetricVector(**{axis: float(record['metrics'][axis]) for axis in AXES})
            pairs.append(AlignedPair(
                original=documents[record['original_id']],
                paraphrase=documents[record['paraphrase_id']],
                generator=record.get('generator', ''),
                label=PairLabel(record['label']),
                metrics=metrics,
            ))
        except KeyError as e:
            raise CorpusFormatError(f"unknown document or missing field {e}", pairs_path, line_number) from e
        except (ValueError, TypeError) as e:
            raise CorpusFormatError(str(e), pairs_path, line_number) from e
    return pairs


def write_candidate_sets(path, candidate_sets):
    _write_jsonl(path, ({'original_id': cs.original_id, 'generator': cs.generator,
                         'candidates': [c.text for c in cs.candidates]} for cs in candidate_sets))


def read_candidate_sets(path):
    candidate_sets = []
    for line_number, record in _read_jsonl(path):
        try:
            candidate_sets.append(CandidateSet(record['original_id'],
                                               tuple(Candidate(text) for text in record['candidates']),
                                               generator=record.get('generator', '')))
        except (KeyError, TypeError, MetricError) as e:
            raise CorpusFormatError(f"bad candidate set ({e})", path, line_number) from e
    return candidate_sets


def write_split(path, corpus_split):
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        json.dump(corpus_split.to_record(), f, indent=2)
        f.write('\n')


def read_split(path):
    with open(path, 'r', encoding='utf-8') as f:
        return CorpusSplit.from_record(json.load(f))


# --- Assembly ---

def select_pairs(originals, candidate_sets, emb, weights, **metric_options):
    """Scores each candidate set against its original and keeps the selected candidate as an AlignedPair."""
    by_id = {d.id: d for d in originals}
    pairs = []
    for candidate_set in sorted(candidate_sets, key=lambda cs: cs.original_id):
        if candidate_set.original_id not in by_id:
            raise CorpusFormatError(f"candidate set refers to unknown original '{candidate_set.original_id}'")
        original = by_id[candidate_set.original_id]
        scored = score_candidates(candidate_set, original.text, emb, **metric_options)
        chosen = scored.candidates[select_candidate(scored, weights)]
        paraphrase = Document(paraphrase_id_for(original.id), original.source, chosen.text)
        pairs.append(AlignedPair(original, paraphrase, candidate_set.generator, PairLabel.MACHINE,
                                 replace(chosen.vector, candidate_id=0)))
    return pairs


def select_all(originals, candidate_sets, emb, weights, **metric_options):
    """Like select_pairs, but collects per-original scoring failures instead of raising. Returns (pairs, failures)."""
    pairs, failures = [], {}
    for candidate_set in sorted(candidate_sets, key=lambda cs: cs.original_id):
        try:
            pairs.extend(select_pairs(originals, [candidate_set], emb, weights, **metric_options))
        except MetricError as e:
            logger.warning("Scoring failed for %s: %s", candidate_set.original_id, e)
            failures[candidate_set.original_id] = e
    return pairs, failures


@dataclass(frozen=True)
class BuildResult:
    pairs: tuple
    failures: dict


def build_pairs(originals, backend, params, spec, emb, weights=None, max_error_rate=0.0,
                max_in_flight=1, **metric_options):
    """
    Generates, scores and selects one paraphrase per original. Per-document failures are
    collected; the run fails only when their share exceeds max_error_rate.
    """
    originals = list(originals)
    if not originals:
        raise GenerationError("build_pairs needs at least one original document")
    for document in originals:
        if document.kind != 'ORIG':
            raise CorpusFormatError(f"'{document.id}' is not an original (ORIG) document")

    candidate_sets, failures = generate_many(backend, originals, params, spec, max_in_flight)
    scorable, score_failures = select_all(originals, candidate_sets, emb, weights or SelectionWeights(), **metric_options)
    failures = {**failures, **score_failures}

    error_rate = len(failures) / len(originals)
    if error_rate > max_error_rate:
        raise GenerationError(f"{len(failures)} of {len(originals)} originals failed "
                              f"({error_rate:.1%} > {max_error_rate:.1%})", backend.identity)
    logger.info("Built %d aligned pairs (%d failures)", len(scorable), len(failures))
    return BuildResult(tuple(sorted(scorable, key=lambda p: p.id)), failures)


def spot_check(pairs, emb, sample_size=20, seed=0, tolerance=1e-9, **metric_options):
    """Recomputes the stored MetricVector of a seeded sample of pairs; raises on any mismatch."""
    pairs = list(pairs)
    sample = random.Random(seed).sample(pairs, min(sample_size, len(pairs)))
    for pair in sample:
        recomputed = metric_vector(tokenize(pair.paraphrase.text, DEFAULT_SCHEME),
                                   tokenize(pair.original.text, DEFAULT_SCHEME), emb, **metric_options)
        for axis in AXES:
            if not math.isclose(getattr(recomputed, axis), getattr(pair.metrics, axis), abs_tol=tolerance):
                raise MetricError(f"stored {axis} of pair {pair.id} is {getattr(pair.metrics, axis)}, "
                                  f"recomputed {getattr(recomputed, axis)}")
    logger.info("Spot-checked %d pairs", len(sample))
    return len(sample)


def split(pair_ids, ratios, seed):
    """Seeded shuffle of the ids cut into train/dev/test by largest-remainder rounding."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise SplitError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    ids = sorted(pair_ids)
    if len(set(ids)) != len(ids):
        raise SplitError("pair ids are not unique")
    non_zero = sum(1 for r in ratios if r > 0)
    if len(ids) < non_zero:
        raise SplitError(f"{len(ids)} pairs cannot fill {non_zero} non-empty partitions")

    random.Random(seed).shuffle(ids)
    exact = [r * len(ids) for r in ratios]
    sizes = [math.floor(x) for x in exact]
    by_remainder = sorted(range(3), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in by_remainder[:len(ids) - sum(sizes)]:
        sizes[i] += 1

    train = tuple(ids[:sizes[0]])
    dev = tuple(ids[sizes[0]:sizes[0] + sizes[1]])
    test = tuple(ids[sizes[0] + sizes[1]:])
    return CorpusSplit(train, dev, test, seed, ratios)

"""
Seeded synthetic inputs for verification runs and tests: original documents built from a
synonym table's vocabulary, embeddings in which spinning leaves a measurable trace, and
human-study annotation files with planted duration outliers.
"""
import json
import os
import sys

import numpy as np

from annotation_engine import AnnotationRecord, Answer
from corpus_store import Document, Source
from paraphrase_engine import load_synonym_table
from text_metrics import EmbeddingTable, save_embeddings

FILLER_WORDS = (
    'the', 'a', 'of', 'and', 'to', 'in', 'is', 'that', 'for', 'on', 'with', 'as', 'by', 'this', 'we',
    'are', 'from', 'at', 'be', 'an', 'which', 'was', 'or', 'it', 'their', 'these', 'can', 'not', 'has',
    'have', 'our', 'also', 'between', 'each', 'both', 'into', 'over', 'such', 'than', 'when', 'where',
    'across', 'after', 'before', 'under', 'within', 'without', 'through', 'during', 'against', 'among',
    'network', 'language', 'system', 'corpus', 'layer', 'sentence', 'token', 'vector', 'graph', 'energy',
    'river', 'city', 'century', 'museum', 'village', 'record', 'season', 'album', 'player', 'election',
    'history', 'culture', 'market', 'theory', 'protein', 'signal', 'sample', 'measure', 'process', 'design',
)

ANNOTATION_SYSTEMS = ('spinner', 'autoencoder', 'small-lm', 'large-lm', 'original')
DETECTION_RATES = {'spinner': 0.82, 'autoencoder': 0.72, 'small-lm': 0.64, 'large-lm': 0.53, 'original': 0.6}
EDUCATION_LEVELS = ('bachelor', 'master', 'phd')
LANGUAGES = ('english', 'german', 'hindi', 'spanish')


def filler_vocabulary(synonym_table):
    taken = set(synonym_table) | {value.lower() for value in synonym_table.values()}
    return [word for word in FILLER_WORDS if word not in taken]


def synthetic_embeddings(synonym_table, dim=16, shift=2.0, seed=0):
    """
    Random vectors for the filler vocabulary and the table's keys, with dimension 0 drawn
    narrowly; each replacement word sits at its key's vector plus `shift` along dimension 0.
    """
    rng = np.random.default_rng(seed)
    vectors = {}
    for word in sorted(set(filler_vocabulary(synonym_table)) | set(synonym_table)):
        vector = rng.normal(0.0, 1.0, dim)
        vector[0] = rng.normal(0.0, 0.3)
        vectors[word] = vector
    for key in sorted(synonym_table):
        replacement = synonym_table[key].lower()
        if replacement not in vectors:
            vector = vectors[key].copy()
            vector[0] += shift
            vectors[replacement] = vector
    return EmbeddingTable.from_vectors(vectors)


def synthetic_originals(count, synonym_table, seed=0, length=40, key_share=0.5,
                        sources=(Source.ARXIV, Source.WIKIPEDIA, Source.THESES)):
    """Lowercase, punctuation-free ORIG documents with about key_share of tokens spinnable."""
    rng = np.random.default_rng(seed)
    keys = sorted(synonym_table)
    filler = filler_vocabulary(synonym_table)
    documents = []
    for i in range(count):
        words = [keys[rng.integers(len(keys))] if rng.random() < key_share else filler[rng.integers(len(filler))]
                 for _ in range(length)]
        documents.append(Document(f"syn{i:05d}-ORIG-0", sources[i % len(sources)], ' '.join(words)))
    return documents


def write_documents(documents, path):
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        for document in documents:
            f.write(json.dumps(document.to_record()) + '\n')


def write_synthetic_embeddings(synonym_table, path, **options):
    emb = synthetic_embeddings(synonym_table, **options)
    save_embeddings(emb, path)
    return emb


# --- Annotation study ---

def _demographics(rng, index):
    return {
        'age': int(rng.integers(18, 42)),
        'gender': 'female' if index % 2 else 'male',
        'education': EDUCATION_LEVELS[index % len(EDUCATION_LEVELS)],
        'first_language': LANGUAGES[index % len(LANGUAGES)],
        'approved_tasks': int(rng.integers(300, 2500)),
        'acceptance_rate': float(np.round(rng.uniform(0.95, 1.0), 3)),
        'location': 'US' if index % 5 else 'CA',
        'expert': index < 5,
    }


def synthetic_annotations(seed=0, participants=30, items_per_system=30, raters_per_item=3, likert_items_per_system=10,
                          dont_know_rate=0.05, outliers=None):
    """
    A human study shaped like the detection-accuracy table: every system contributes
    items_per_system items, each judged by raters_per_item participants, plus Likert
    ratings for the machine systems. `outliers` maps participant ids to their total
    session minutes; everyone else takes about 8 minutes.

    Returns (records, task_text_by_item, sorted outlier ids).
    """
    rng = np.random.default_rng(seed)
    outliers = {'p00': 43.0, 'p01': 35.0} if outliers is None else outliers
    ids = [f"p{i:02d}" for i in range(participants)]
    profiles = {pid: _demographics(rng, i) for i, pid in enumerate(ids)}

    items, task_texts = [], {}
    for system in ANNOTATION_SYSTEMS:
        for j in range(items_per_system):
            item_id = f"{system}-{j:02d}"
            task_texts[item_id] = ' '.join(rng.choice(FILLER_WORDS, size=30))
            items.append((item_id, system))

    assignments = []
    for k, (item_id, system) in enumerate(items):
        for r in range(raters_per_item):
            assignments.append((ids[(k * raters_per_item + r) % participants], item_id, system, 'answer'))
    likert_systems = [s for s in ANNOTATION_SYSTEMS if s != 'original']
    for s, system in enumerate(likert_systems):
        for j in range(likert_items_per_system):
            for r in range(raters_per_item):
                pid = ids[((s * likert_items_per_system + j) * raters_per_item + r) % participants]
                assignments.append((pid, f"L-{system}-{j:02d}", system, 'likert'))

    per_participant = {pid: sum(1 for a in assignments if a[0] == pid) for pid in ids}
    totals = {pid: outliers.get(pid, float(np.clip(rng.normal(8.0, 1.5), 4.0, 12.0))) for pid in ids}

    records = []
    for pid, item_id, system, kind in assignments:
        duration = totals[pid] / per_participant[pid]
        if kind == 'answer':
            truth = Answer.ORIGINAL if system == 'original' else Answer.MACHINE
            wrong = Answer.MACHINE if truth is Answer.ORIGINAL else Answer.ORIGINAL
            if rng.random() < dont_know_rate:
                answer = Answer.DONT_KNOW
            else:
                answer = truth if rng.random() < DETECTION_RATES[system] else wrong
            records.append(AnnotationRecord(pid, item_id, system, answer=answer,
                                            justification=f"the wording of item {item_id} reads as {answer.value}",
                                            duration_minutes=duration, demographics=profiles[pid]))
        else:
            centre = {'spinner': 2, 'autoencoder': 3, 'small-lm': 4, 'large-lm': 4}[system]
            likert = {dim: int(np.clip(centre + rng.integers(-1, 2), 1, 5)) for dim in ('clarity', 'fluency', 'coherence')}
            records.append(AnnotationRecord(pid, item_id, system, likert=likert, duration_minutes=duration,
                                            demographics=profiles[pid]))
    return records, task_texts, sorted(outliers)


def write_annotations(records, path):
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        for record in records:
            f.write(json.dumps(record.to_record(), sort_keys=True) + '\n')


def write_task_texts(task_texts, path):
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        for item_id in sorted(task_texts):
            f.write(json.dumps({'item_id': item_id, 'text': task_texts[item_id]}) + '\n')


# --- Inputs of data/example_config.json ---

SYNONYMS_PATH = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'data', 'synonyms.tsv')
EXAMPLE_INPUTS_DIR = 'out/example-inputs'


def write_example_inputs(directory=EXAMPLE_INPUTS_DIR, seed=7, count=200):
    """Writes the originals, embeddings, annotations and task texts the example config reads."""
    os.makedirs(directory, exist_ok=True)
    synonyms = load_synonym_table(SYNONYMS_PATH)
    paths = [f"{directory}/{name}" for name in
             ('originals.jsonl', 'embeddings.txt', 'annotations.jsonl', 'task_texts.jsonl')]
    write_documents(synthetic_originals(count, synonyms, seed=seed), paths[0])
    write_synthetic_embeddings(synonyms, paths[1], seed=seed)
    records, task_texts, _ = synthetic_annotations(seed=seed)
    write_annotations(records, paths[2])
    write_task_texts(task_texts, paths[3])
    return paths


if __name__ == "__main__":
    target = sys.argv[1] if len(sys.argv) > 1 else EXAMPLE_INPUTS_DIR
    for path in write_example_inputs(target):
        print(f"Wrote {path}")

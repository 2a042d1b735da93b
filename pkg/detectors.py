"""
Automated machine-paraphrase detectors: Gaussian naive Bayes over mean-pooled word
embeddings, a multinomial naive Bayes ablation over n-gram counts, a text-match proxy
for commercial plagiarism checkers, a few-shot LLM detector, an adapter for externally
hosted classifiers, and the random baseline.

Trained models are immutable and may be shared across threads.
"""
import json
import logging
import random
import re
from collections import defaultdict
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import logsumexp
from sklearn.feature_extraction.text import CountVectorizer
from sklearn.naive_bayes import MultinomialNB

from errors import DetectorError, MetricError, UnparseableCompletionError
from paraphrase_engine import GenParams, fit_examples, map_bounded
from text_metrics import ngrams, text_match

logger = logging.getLogger(__name__)

MODEL_FORMAT = 'paraforge-nb'
MODEL_VERSION = 1


class Label(str, Enum):
    MACHINE = 'machine'
    ORIGINAL = 'original'


# Order in which the two labels are stored; tie-breaking never depends on it.
LABELS = (Label.MACHINE, Label.ORIGINAL)


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    oov_ratio: float


@dataclass(frozen=True)
class Prediction:
    label: Label
    confidence: float
    detector: str

    def __post_init__(self):
        if not 0.5 <= self.confidence <= 1.0:
            raise DetectorError(f"confidence {self.confidence} of {self.detector} outside [0.5, 1]")


def _verdict(posteriors, detector):
    """Prediction from a {label: posterior} map; an exact tie goes to 'original'."""
    machine, original = posteriors[Label.MACHINE], posteriors[Label.ORIGINAL]
    if machine > original:
        return Prediction(Label.MACHINE, float(min(1.0, max(0.5, machine))), detector)
    return Prediction(Label.ORIGINAL, float(min(1.0, max(0.5, original))), detector)


# --- Embedding features ---

def embed_doc(doc, emb):
    """Mean of the in-vocabulary token vectors of a TokenSeq."""
    if len(doc) == 0:
        raise DetectorError("cannot embed an empty document")
    matrix, misses = emb.matrix(doc.tokens)
    if len(matrix) == 0:
        raise DetectorError("every token of the document is out of vocabulary")
    return FeatureVector(matrix.mean(axis=0), misses / len(doc))


# --- Gaussian naive Bayes ---

@dataclass(frozen=True)
class NBModel:
    classes: tuple
    priors: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    variance_floor: float
    embedding_digest: str = ''

    @property
    def dim(self):
        return self.means.shape[1]


def train_nb(features, labels, variance_floor=1e-6, embedding_digest=''):
    """Per-class Gaussian fit of each feature dimension, variances floored."""
    if variance_floor <= 0:
        raise DetectorError(f"variance_floor must be positive, got {variance_floor}")
    matrix = np.vstack([f.values for f in features])
    labels = [Label(label) for label in labels]
    if len(labels) != len(matrix):
        raise DetectorError(f"{len(matrix)} feature vectors but {len(labels)} labels")

    priors, means, variances = [], [], []
    for label in LABELS:
        rows = matrix[[i for i, l in enumerate(labels) if l is label]]
        if len(rows) < 2:
            raise DetectorError(f"class '{label.value}' has {len(rows)} examples, need at least 2")
        priors.append(len(rows) / len(matrix))
        means.append(rows.mean(axis=0))
        variances.append(np.maximum(rows.var(axis=0), variance_floor))
    logger.info("Trained Gaussian NB on %d examples of dim %d", len(matrix), matrix.shape[1])
    return NBModel(LABELS, np.array(priors), np.vstack(means), np.vstack(variances),
                   variance_floor, embedding_digest)


def nb_log_joint(model, feat):
    if feat.values.shape != (model.dim,):
        raise DetectorError(f"feature dim {feat.values.shape} does not match model dim {model.dim}")
    x = feat.values
    log_density = -0.5 * (np.log(2 * np.pi * model.variances) + (x - model.means) ** 2 / model.variances)
    return np.log(model.priors) + log_density.sum(axis=1)


def nb_predict(model, feat, detector='w2v+nb'):
    """Posterior-argmax label; confidence is the winner's posterior."""
    log_joint = nb_log_joint(model, feat)
    posterior = np.exp(log_joint - logsumexp(log_joint))
    return _verdict({label: posterior[i] for i, label in enumerate(model.classes)}, detector)


# --- Multinomial naive Bayes over n-gram counts ---

class MultinomialDetector:
    """Multinomial NB over word n-gram counts, the ablation alternative to the embedding model."""

    def __init__(self, vectorizer, classifier, ngram_max):
        self.vectorizer = vectorizer
        self.classifier = classifier
        self.ngram_max = ngram_max

    def predict(self, text, detector='ngram+mnb'):
        probabilities = self.classifier.predict_proba(self.vectorizer.transform([text]))[0]
        return _verdict({Label(c): probabilities[i] for i, c in enumerate(self.classifier.classes_)}, detector)


def train_multinomial_nb(texts, labels, alpha=1.0, ngram_max=2):
    labels = [Label(label).value for label in labels]
    for label in LABELS:
        if labels.count(label.value) < 2:
            raise DetectorError(f"class '{label.value}' has fewer than 2 examples")
    vectorizer = CountVectorizer(ngram_range=(1, ngram_max), lowercase=True)
    counts = vectorizer.fit_transform(texts)
    classifier = MultinomialNB(alpha=alpha).fit(counts, labels)
    logger.info("Trained multinomial NB on %d texts, %d features", len(texts), counts.shape[1])
    return MultinomialDetector(vectorizer, classifier, ngram_max)


# --- Persistence ---

def save_model(model, path):
    """Writes a Gaussian NBModel or a MultinomialDetector as versioned JSON."""
    if isinstance(model, NBModel):
        record = {
            'format': MODEL_FORMAT, 'version': MODEL_VERSION, 'kind': 'gaussian',
            'classes': [c.value for c in model.classes],
            'priors': model.priors.tolist(),
            'means': model.means.tolist(),
            'variances': model.variances.tolist(),
            'variance_floor': model.variance_floor,
            'embedding_digest': model.embedding_digest,
        }
    elif isinstance(model, MultinomialDetector):
        classifier = model.classifier
        record = {
            'format': MODEL_FORMAT, 'version': MODEL_VERSION, 'kind': 'multinomial',
            'classes': list(classifier.classes_),
            'alpha': classifier.alpha,
            'ngram_max': model.ngram_max,
            'vocabulary': {term: int(index) for term, index in sorted(model.vectorizer.vocabulary_.items())},
            'class_count': classifier.class_count_.tolist(),
            'feature_count': classifier.feature_count_.tolist(),
            'class_log_prior': classifier.class_log_prior_.tolist(),
            'feature_log_prob': classifier.feature_log_prob_.tolist(),
        }
    else:
        raise DetectorError(f"cannot save model of type {type(model).__name__}")
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        json.dump(record, f)
        f.write('\n')


def load_model(path, expected_embedding_digest=None):
    with open(path, 'r', encoding='utf-8') as f:
        try:
            record = json.load(f)
        except json.JSONDecodeError as e:
            raise DetectorError(f"{path}: not a model file ({e})") from e
    if record.get('format') != MODEL_FORMAT or record.get('version') != MODEL_VERSION:
        raise DetectorError(f"{path}: unsupported model format {record.get('format')} v{record.get('version')}")

    if record['kind'] == 'gaussian':
        digest = record.get('embedding_digest', '')
        if expected_embedding_digest and digest and digest != expected_embedding_digest:
            raise DetectorError(f"{path}: model was trained with different embeddings")
        return NBModel(tuple(Label(c) for c in record['classes']), np.array(record['priors']),
                       np.array(record['means']), np.array(record['variances']),
                       record['variance_floor'], digest)

    if record['kind'] == 'multinomial':
        vectorizer = CountVectorizer(ngram_range=(1, record['ngram_max']), lowercase=True,
                                     vocabulary=record['vocabulary'])
        classifier = MultinomialNB(alpha=record['alpha'])
        classifier.classes_ = np.array(record['classes'])
        classifier.class_count_ = np.array(record['class_count'])
        classifier.feature_count_ = np.array(record['feature_count'])
        classifier.class_log_prior_ = np.array(record['class_log_prior'])
        classifier.feature_log_prob_ = np.array(record['feature_log_prob'])
        classifier.n_features_in_ = classifier.feature_log_prob_.shape[1]
        return MultinomialDetector(vectorizer, classifier, record['ngram_max'])

    raise DetectorError(f"{path}: unknown model kind '{record['kind']}'")


# --- Text-match proxy ---

class ReferenceIndex:
    """Known sources with an n-gram inverted index for candidate lookup."""

    def __init__(self, sources, n=3):
        self.sources = [s for s in sources if len(s) >= 1]
        if not self.sources:
            raise DetectorError("reference index is empty")
        self.n = n
        self._postings = defaultdict(set)
        for i, source in enumerate(self.sources):
            for gram in ngrams(source.tokens, n):
                self._postings[gram].add(i)

    def candidates(self, doc):
        hits = set()
        for gram in ngrams(doc.tokens, self.n):
            hits |= self._postings.get(gram, set())
        return sorted(hits)


def max_text_match(doc, index, n=3):
    """Highest text_match of doc against any indexed source (0.0 when no n-gram is shared)."""
    if len(doc) < n:
        raise MetricError(f"document has {len(doc)} tokens, fewer than n={n}")
    if isinstance(index, ReferenceIndex) and index.n == n:
        pool = [index.sources[i] for i in index.candidates(doc)]
    else:
        pool = index.sources if isinstance(index, ReferenceIndex) else list(index)
        if not pool:
            raise DetectorError("reference index is empty")
    return max((text_match(doc, source, n).value for source in pool), default=0.0)


def textmatch_detect(doc, reference_index, threshold=0.5, n=3):
    """
    Containment above threshold means the text reuses a known source verbatim, which the
    pair protocol scores as 'original'; anything else is 'machine'.
    """
    score = max_text_match(doc, reference_index, n)
    if score > threshold:
        return Prediction(Label.ORIGINAL, score, 'text-match')
    return Prediction(Label.MACHINE, max(0.5, 1.0 - score), 'text-match')


# --- Few-shot and external detectors ---

FEWSHOT_INSTRUCTION = "Decide whether each text is machine-paraphrased or original."
LABEL_KEYWORDS = {Label.MACHINE: 'machine-paraphrased', Label.ORIGINAL: 'original'}
# Whole words only; "machine paraphrased" with a space counts, a bare "machine" does not.
_KEYWORD_PATTERN = re.compile(r'\b(?:machine[- ]paraphrased|original)\b', re.IGNORECASE)


def parse_label(completion, detector='fewshot'):
    """The label named by the first keyword in a completion."""
    match = _KEYWORD_PATTERN.search(completion)
    if match is None:
        raise UnparseableCompletionError(completion, detector)
    return Label.ORIGINAL if match.group(0).lower() == 'original' else Label.MACHINE


def build_detection_prompt(doc, labeled_examples, context_budget_tokens=2048):
    header = f"{FEWSHOT_INSTRUCTION}\n\n"
    footer = f"Text: {doc}\nLabel:"
    blocks = [f"Text: {text}\nLabel: {LABEL_KEYWORDS[Label(label)]}\n\n" for text, label in labeled_examples]
    return header + ''.join(fit_examples(header, footer, blocks, context_budget_tokens)) + footer


def fewshot_detect(backend, doc, labeled_examples, params=GenParams(temperature=0.0, candidates_per_original=1),
                   context_budget_tokens=2048):
    """Classifies doc by prompting a completion backend with labeled examples."""
    present = {Label(label) for _, label in labeled_examples}
    if present != set(LABELS):
        raise DetectorError("few-shot examples must contain both labels")
    prompt = build_detection_prompt(doc, labeled_examples, context_budget_tokens)
    completion = backend.complete(prompt, 5, params)
    detector = f"fewshot:{backend.identity}"
    return Prediction(parse_label(completion, detector), 1.0, detector)


def external_detect(backend, doc, params=GenParams(temperature=0.0, candidates_per_original=1)):
    """Adapter for externally hosted fine-tuned classifiers answering with a label keyword."""
    detector = f"external:{backend.identity}"
    return Prediction(parse_label(backend.complete(doc, 5, params), detector), 1.0, detector)


def fewshot_detect_many(backend, docs, labeled_examples, max_in_flight=1, **options):
    """Runs fewshot_detect over docs under an in-flight cap; unparseable completions become None."""
    def attempt(doc):
        try:
            return fewshot_detect(backend, doc, labeled_examples, **options)
        except UnparseableCompletionError as e:
            logger.warning("Abstaining: %s", e)
            return None
    return map_bounded(attempt, docs, max_in_flight)


def external_detect_many(backend, docs, max_in_flight=1):
    """external_detect over docs under an in-flight cap; unparseable answers become None."""
    def attempt(doc):
        try:
            return external_detect(backend, doc)
        except UnparseableCompletionError as e:
            logger.warning("Abstaining: %s", e)
            return None
    return map_bounded(attempt, docs, max_in_flight)


def random_detect(doc_ids, seed=0):
    """Coin-flip baseline, seeded per run."""
    rng = random.Random(seed)
    return {doc_id: Prediction(rng.choice(LABELS), 0.5, 'random') for doc_id in doc_ids}

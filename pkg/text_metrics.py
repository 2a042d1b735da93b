"""
Similarity scores used for candidate selection, detection and analysis.

Every score is a UnitScore in [0, 1]. All functions are pure; an EmbeddingTable
is read-only once built, so everything here is safe to share across threads.
"""
import hashlib
import logging
import math
import unicodedata
from collections import Counter
from dataclasses import dataclass
from enum import Enum

import numpy as np

from errors import EmptyTokenSeqError, MetricError, OutOfVocabularyError

logger = logging.getLogger(__name__)

METRIC_IDS = ('bleu', 'rouge_l', 'sem_match', 'lm_like', 'text_match')


class TokenScheme(str, Enum):
    WHITESPACE = 'whitespace'
    WHITESPACE_LOWER_NOPUNCT = 'whitespace-lower-nopunct'


DEFAULT_SCHEME = TokenScheme.WHITESPACE_LOWER_NOPUNCT


@dataclass(frozen=True)
class TokenSeq:
    tokens: tuple
    scheme: TokenScheme

    def __len__(self):
        return len(self.tokens)

    def __iter__(self):
        return iter(self.tokens)


@dataclass(frozen=True)
class UnitScore:
    value: float
    metric_id: str

    def __post_init__(self):
        if self.metric_id not in METRIC_IDS:
            raise MetricError(f"unknown metric id '{self.metric_id}'")
        if not 0.0 <= self.value <= 1.0:
            raise MetricError(f"{self.metric_id} score {self.value} outside [0, 1]")

    def __float__(self):
        return self.value


def _unit(value, metric_id):
    # Float noise from normalisation can push identities a hair past 1.
    return UnitScore(float(min(1.0, max(0.0, value))), metric_id)


# --- Tokenization ---

def _is_punct(char):
    return unicodedata.category(char).startswith('P')


def strip_punct(token):
    """Strips leading and trailing unicode punctuation from a token."""
    start, end = 0, len(token)
    while start < end and _is_punct(token[start]):
        start += 1
    while end > start and _is_punct(token[end - 1]):
        end -= 1
    return token[start:end]


def tokenize(text, scheme=DEFAULT_SCHEME):
    """Splits text into a TokenSeq. May return an empty sequence; metrics reject those."""
    scheme = TokenScheme(scheme)
    tokens = text.split()
    if scheme is TokenScheme.WHITESPACE_LOWER_NOPUNCT:
        tokens = [strip_punct(token.lower()) for token in tokens]
        tokens = [token for token in tokens if token]
    return TokenSeq(tuple(tokens), scheme)


def _require(*seqs):
    schemes = {seq.scheme for seq in seqs}
    if len(schemes) > 1:
        raise MetricError(f"token sequences use different schemes: {sorted(s.value for s in schemes)}")
    for seq in seqs:
        if len(seq) == 0:
            raise EmptyTokenSeqError("metric input is empty after tokenization")


def ngrams(tokens, n):
    """Counter of the n-grams of a token sequence."""
    tokens = tuple(tokens)
    return Counter(tokens[i:i + n] for i in range(len(tokens) - n + 1))


def _clipped_matches(candidate_grams, reference_grams):
    return sum(min(count, reference_grams[gram]) for gram, count in candidate_grams.items())


# --- Count-based metrics ---

def bleu(candidate, reference, max_n=4):
    """Unsmoothed sentence BLEU with the standard brevity penalty."""
    _require(candidate, reference)
    if not 1 <= max_n <= 4:
        raise MetricError(f"max_n must be in 1..4, got {max_n}")

    log_precision_sum = 0.0
    for n in range(1, max_n + 1):
        candidate_grams = ngrams(candidate.tokens, n)
        total = sum(candidate_grams.values())
        if total == 0:
            return _unit(0.0, 'bleu')
        matched = _clipped_matches(candidate_grams, ngrams(reference.tokens, n))
        if matched == 0:
            return _unit(0.0, 'bleu')
        log_precision_sum += math.log(matched / total)

    c, r = len(candidate), len(reference)
    brevity_penalty = math.exp(1 - r / c) if c < r else 1.0
    return _unit(brevity_penalty * math.exp(log_precision_sum / max_n), 'bleu')


def lcs_length(a, b):
    """Length of the longest common subsequence, by dynamic programming."""
    a, b = tuple(a), tuple(b)
    if len(a) < len(b):
        a, b = b, a
    previous = [0] * (len(b) + 1)
    for token_a in a:
        current = [0]
        for j, token_b in enumerate(b):
            if token_a == token_b:
                current.append(previous[j] + 1)
            else:
                current.append(max(previous[j + 1], current[j]))
        previous = current
    return previous[-1]


def rouge_l(candidate, reference):
    """ROUGE-L F1 (beta = 1)."""
    _require(candidate, reference)
    lcs = lcs_length(candidate.tokens, reference.tokens)
    if lcs == 0:
        return _unit(0.0, 'rouge_l')
    precision = lcs / len(candidate)
    recall = lcs / len(reference)
    return _unit(2 * precision * recall / (precision + recall), 'rouge_l')


def text_match(candidate, reference, n=3):
    """Fraction of candidate n-grams contained in the reference n-gram multiset."""
    if n < 1:
        raise MetricError(f"n must be >= 1, got {n}")
    _require(candidate, reference)
    if len(candidate) < n:
        raise MetricError(f"candidate has {len(candidate)} tokens, fewer than n={n}")
    candidate_grams = ngrams(candidate.tokens, n)
    matched = _clipped_matches(candidate_grams, ngrams(reference.tokens, n))
    return _unit(matched / sum(candidate_grams.values()), 'text_match')


def lm_like(candidate, reference, order=2):
    """
    Likelihood proxy: exp of the mean token log-probability of the candidate under an
    add-one smoothed n-gram model estimated on the reference. The vocabulary size V is
    taken over the union of both sequences; histories are padded with a start symbol.
    """
    if order < 1:
        raise MetricError(f"order must be >= 1, got {order}")
    _require(candidate, reference)

    vocab_size = len(set(candidate.tokens) | set(reference.tokens))
    pad = ('<s>',) * (order - 1)
    padded_reference = pad + reference.tokens
    gram_counts = ngrams(padded_reference, order)
    if order == 1:
        history_counts = Counter({(): len(reference)})
    else:
        history_counts = ngrams(padded_reference[:-1], order - 1)

    padded_candidate = pad + candidate.tokens
    log_prob = 0.0
    for i in range(order - 1, len(padded_candidate)):
        gram = padded_candidate[i - order + 1:i + 1]
        history = gram[:-1]
        log_prob += math.log((gram_counts[gram] + 1) / (history_counts[history] + vocab_size))
    return _unit(math.exp(log_prob / len(candidate)), 'lm_like')


# --- Embeddings ---

class EmbeddingTable:
    """Immutable token -> vector table. A missing token is a miss (None), never a zero vector."""

    def __init__(self, dim, vectors):
        if dim <= 0:
            raise MetricError(f"embedding dim must be positive, got {dim}")
        self.dim = dim
        self._vectors = {}
        for token, vector in vectors.items():
            array = np.array(vector, dtype=np.float64)
            if array.shape != (dim,):
                raise MetricError(f"vector for '{token}' has shape {array.shape}, expected ({dim},)")
            array.setflags(write=False)
            self._vectors[token] = array
        self._digest = None

    @classmethod
    def from_vectors(cls, vectors):
        """Builds a table from a non-empty token -> sequence-of-floats mapping."""
        if not vectors:
            raise MetricError("cannot build an embedding table from no vectors")
        dim = len(next(iter(vectors.values())))
        return cls(dim, vectors)

    def __contains__(self, token):
        return token in self._vectors

    def __len__(self):
        return len(self._vectors)

    def lookup(self, token):
        return self._vectors.get(token)

    def tokens(self):
        return list(self._vectors)

    def matrix(self, tokens):
        """Stacks the vectors of in-vocabulary tokens; returns (matrix, number of misses)."""
        rows = [self._vectors[token] for token in tokens if token in self._vectors]
        misses = len(tokens) - len(rows)
        if not rows:
            return np.empty((0, self.dim)), misses
        return np.vstack(rows), misses

    def digest(self):
        if self._digest is None:
            sha = hashlib.sha256(str(self.dim).encode('utf-8'))
            for token in sorted(self._vectors):
                sha.update(token.encode('utf-8'))
                sha.update(self._vectors[token].tobytes())
            self._digest = sha.hexdigest()
        return self._digest


def load_embeddings(path):
    """Reads a word2vec-style text file: optional '<count> <dim>' header, then 'token v1 .. vdim'."""
    vectors = {}
    dim = None
    with open(path, 'r', encoding='utf-8') as f:
        for line_number, line in enumerate(f, start=1):
            parts = line.rstrip('\n').split()
            if not parts:
                continue
            if line_number == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                dim = int(parts[1])
                continue
            token, values = parts[0], parts[1:]
            if dim is None:
                dim = len(values)
            if len(values) != dim:
                raise MetricError(f"{path}:{line_number}: expected {dim} values for '{token}', found {len(values)}")
            try:
                vectors[token] = [float(v) for v in values]
            except ValueError as e:
                raise MetricError(f"{path}:{line_number}: {e}") from e
    if not vectors:
        raise MetricError(f"{path}: no embedding vectors found")
    logger.info("Loaded %d embeddings of dim %d from %s", len(vectors), dim, path)
    return EmbeddingTable(dim, vectors)


def save_embeddings(emb, path):
    """Inverse of load_embeddings; values are written with full float precision."""
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write(f"{len(emb)} {emb.dim}\n")
        for token in sorted(emb.tokens()):
            f.write(token + ' ' + ' '.join(repr(float(v)) for v in emb.lookup(token)) + '\n')


def _unit_rows(matrix):
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    # Zero vectors have no direction; they match nothing.
    return np.divide(matrix, norms, out=np.zeros_like(matrix), where=norms > 0)


def sem_match(candidate, reference, emb):
    """
    Greedy-matching F-score over static embeddings: each token is matched to its most
    similar token on the other side, negative cosines count as 0. Out-of-vocabulary
    tokens are skipped.
    """
    _require(candidate, reference)
    cand_matrix, _ = emb.matrix(candidate.tokens)
    ref_matrix, _ = emb.matrix(reference.tokens)
    if len(cand_matrix) == 0 or len(ref_matrix) == 0:
        raise OutOfVocabularyError("no in-vocabulary token on one side of sem_match")

    similarity = np.clip(_unit_rows(cand_matrix) @ _unit_rows(ref_matrix).T, 0.0, 1.0)
    precision = float(similarity.max(axis=1).mean())
    recall = float(similarity.max(axis=0).mean())
    if precision + recall == 0:
        return _unit(0.0, 'sem_match')
    return _unit(2 * precision * recall / (precision + recall), 'sem_match')

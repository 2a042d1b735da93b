"""
Pareto-optimal selection among generated paraphrase candidates.

A good paraphrase keeps the meaning (high sem_match, high lm_like) while changing the
wording (low rouge_l, low bleu). Candidates dominated on those four axes are discarded;
among the remaining frontier a weighted scalar picks the winner.
"""
import logging
from dataclasses import dataclass, field, replace

from errors import MetricError
from text_metrics import DEFAULT_SCHEME, bleu, lm_like, rouge_l, sem_match, tokenize

logger = logging.getLogger(__name__)

AXES = ('sem_match', 'lm_like', 'rouge_l', 'bleu')
# +1: larger is better, -1: smaller is better.
AXIS_DIRECTIONS = {'sem_match': 1, 'lm_like': 1, 'rouge_l': -1, 'bleu': -1}


@dataclass(frozen=True)
class MetricVector:
    sem_match: float
    lm_like: float
    rouge_l: float
    bleu: float
    candidate_id: int = 0

    def __post_init__(self):
        for axis in AXES:
            value = getattr(self, axis)
            if not 0.0 <= value <= 1.0:
                raise MetricError(f"{axis}={value} outside [0, 1]")

    def oriented(self):
        """The four components sign-normalised so that larger is better on every axis."""
        return tuple(AXIS_DIRECTIONS[axis] * getattr(self, axis) for axis in AXES)

    def as_dict(self):
        return {axis: getattr(self, axis) for axis in AXES}


@dataclass(frozen=True)
class SelectionWeights:
    sem_match: float = 0.5
    lm_like: float = 0.5
    rouge_l: float = 0.5
    bleu: float = 0.5


@dataclass(frozen=True)
class Candidate:
    text: str
    vector: MetricVector = None


@dataclass(frozen=True)
class CandidateSet:
    original_id: str
    candidates: tuple = field(default_factory=tuple)
    generator: str = ''

    def __post_init__(self):
        if not self.candidates:
            raise MetricError(f"candidate set for '{self.original_id}' is empty")

    @property
    def is_scored(self):
        return all(c.vector is not None for c in self.candidates)


def metric_vector(candidate, original, emb, candidate_id=0, lm_order=2, bleu_max_n=4, lm_scorer=None):
    """Scores one tokenized candidate against its tokenized original on all four axes."""
    lm_score = lm_scorer(candidate, original) if lm_scorer else lm_like(candidate, original, order=lm_order)
    return MetricVector(
        sem_match=sem_match(candidate, original, emb).value,
        lm_like=lm_score.value,
        rouge_l=rouge_l(candidate, original).value,
        bleu=bleu(candidate, original, max_n=bleu_max_n).value,
        candidate_id=candidate_id,
    )


def score_candidates(candidate_set, original_text, emb, scheme=DEFAULT_SCHEME, **metric_options):
    """Returns a copy of the candidate set with every candidate's MetricVector filled in."""
    original = tokenize(original_text, scheme)
    scored = tuple(
        replace(c, vector=metric_vector(tokenize(c.text, scheme), original, emb, candidate_id=i, **metric_options))
        for i, c in enumerate(candidate_set.candidates)
    )
    return replace(candidate_set, candidates=scored)


def dominates(a, b):
    """True if vector a is at least as good as b on every axis and strictly better on one."""
    oriented_a, oriented_b = a.oriented(), b.oriented()
    at_least_as_good = all(x >= y for x, y in zip(oriented_a, oriented_b))
    strictly_better = any(x > y for x, y in zip(oriented_a, oriented_b))
    return at_least_as_good and strictly_better


def pareto_frontier(vectors):
    """The non-dominated subset of vectors, in input order."""
    vectors = list(vectors)
    if not vectors:
        raise MetricError("pareto_frontier needs at least one vector")
    return [v for v in vectors if not any(dominates(other, v) for other in vectors if other is not v)]


def scalar_score(vector, weights=SelectionWeights()):
    return (weights.sem_match * vector.sem_match + weights.lm_like * vector.lm_like
            - weights.rouge_l * vector.rouge_l - weights.bleu * vector.bleu)


def select_candidate(candidate_set, weights=SelectionWeights()):
    """
    Index of the selected candidate: the frontier member with the highest weighted scalar.
    Exact scalar ties go to the lowest candidate_id. The frontier is invariant under
    monotone per-axis rescaling; the scalar tie-break is not.
    """
    if not candidate_set.is_scored:
        raise MetricError(f"candidate set for '{candidate_set.original_id}' has unscored candidates")
    vectors = [replace(c.vector, candidate_id=i) for i, c in enumerate(candidate_set.candidates)]
    frontier = pareto_frontier(vectors)
    best = max(frontier, key=lambda v: (scalar_score(v, weights), -v.candidate_id))
    logger.debug("Selected candidate %d of %d for %s (frontier size %d)",
                 best.candidate_id, len(vectors), candidate_set.original_id, len(frontier))
    return best.candidate_id


if __name__ == "__main__":
    # --- Candidate selection on the Gates example ---
    table = [
        ("Later, his time was allocated to business and philanthropic endeavors.", (0.79, 0.74, 0.55, 0.63)),
        ("Later in his career, Gates focused on business and charity.", (0.84, 0.83, 0.64, 0.51)),
        ("Gates focused on business and charitable efforts later in his career.", (0.83, 0.85, 0.35, 0.49)),
    ]
    example = CandidateSet('gates-ORIG-0', tuple(
        Candidate(text, MetricVector(*scores, candidate_id=i)) for i, (text, scores) in enumerate(table)))
    for c in example.candidates:
        print(f"{scalar_score(c.vector):+.3f}  {c.text}")
    print(f"Frontier size: {len(pareto_frontier([c.vector for c in example.candidates]))}")
    print(f"Selected: Out {select_candidate(example) + 1}")

"""
Few-shot paraphrase generation: prompt rendering under a token budget, rule-based
spinning, and candidate generation against a pluggable completion backend.
"""
import hashlib
import json
import logging
import math
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum

from candidate_selection import Candidate, CandidateSet
from errors import BackendError, ConfigError, GenerationError, PromptBudgetError
from text_metrics import TokenScheme, strip_punct, tokenize

logger = logging.getLogger(__name__)

DEFAULT_INSTRUCTION = "Rephrase the following sentence."
DEFAULT_CONTEXT_BUDGET = 2048


@dataclass(frozen=True)
class PromptSpec:
    instruction: str = DEFAULT_INSTRUCTION
    example_pairs: tuple = field(default_factory=tuple)
    target: str = ''
    context_budget_tokens: int = DEFAULT_CONTEXT_BUDGET


@dataclass(frozen=True)
class GenParams:
    max_new_tokens_ratio: float = 0.9
    temperature: float = 0.8
    candidates_per_original: int = 4
    seed: int = 0
    max_retries: int = 3

    def __post_init__(self):
        if not 0 < self.max_new_tokens_ratio <= 1:
            raise ConfigError(f"max_new_tokens_ratio must be in (0, 1], got {self.max_new_tokens_ratio}")
        if self.candidates_per_original < 1:
            raise ConfigError(f"candidates_per_original must be >= 1, got {self.candidates_per_original}")


class SpinMode(str, Enum):
    EVERY_KTH = 'every_kth'
    PROBABILITY = 'probability'


@dataclass(frozen=True)
class SpinPolicy:
    period: int = 4
    synonym_table: dict = field(default_factory=dict)
    mode: SpinMode = SpinMode.EVERY_KTH
    prob: float = 0.15

    def __post_init__(self):
        if self.period < 1:
            raise ConfigError(f"spin period must be >= 1, got {self.period}")
        if not 0.0 <= self.prob <= 1.0:
            raise ConfigError(f"spin probability must be in [0, 1], got {self.prob}")


# --- Prompt rendering ---

def _budget_tokens(text):
    return len(tokenize(text, TokenScheme.WHITESPACE))


def render_example(original, paraphrased):
    return f"Original: {original}\nParaphrased: {paraphrased}\n\n"


def fit_examples(header, footer, blocks, budget):
    """Keeps the longest prefix of example blocks such that header + blocks + footer fits the budget."""
    used = _budget_tokens(header) + _budget_tokens(footer)
    if used > budget:
        raise PromptBudgetError(f"instruction and target need {used} tokens, budget is {budget}")
    kept = []
    for block in blocks:
        cost = _budget_tokens(block)
        if used + cost > budget:
            break
        kept.append(block)
        used += cost
    return kept


def build_prompt(spec):
    """Renders the few-shot prompt, dropping trailing example pairs until it fits the budget."""
    if not spec.instruction.strip() or not spec.target.strip():
        raise PromptBudgetError("instruction and target must be non-empty")
    header = f"{spec.instruction}\n\n"
    footer = f"Original: {spec.target}\nParaphrased:"
    blocks = [render_example(o, p) for o, p in spec.example_pairs]
    kept = fit_examples(header, footer, blocks, spec.context_budget_tokens)
    if len(kept) < len(blocks):
        logger.debug("Prompt budget kept %d of %d example pairs", len(kept), len(blocks))
    return header + ''.join(kept) + footer


def prompt_target(prompt):
    """
    Recovers the to-be-paraphrased text from a rendered prompt: the text after the last
    "Original: " that starts a line. A target with a line of its own starting with that
    marker is ambiguous here, so paraphrase() also hands backends the target directly.
    """
    marker = "Original: "
    start = prompt.rfind("\n" + marker) + 1
    if start == 0 and not prompt.startswith(marker):
        return prompt
    start += len(marker)
    end = prompt.rfind("\nParaphrased:")
    return prompt[start:end if end >= start else None]


# --- Spinning ---

def _match_case(replacement, original):
    if original[:1].isupper():
        return replacement[:1].upper() + replacement[1:]
    return replacement


def _spin_token(token, table):
    core = strip_punct(token)
    if not core:
        return token
    synonym = table.get(core.lower())
    if synonym is None:
        return token
    start = token.index(core)
    return token[:start] + _match_case(synonym, core) + token[start + len(core):]


def spin(text, policy, seed=0):
    """Synonym-replaces every k-th token (1-indexed) or each token with probability prob."""
    tokens = text.split()
    rng = random.Random(seed)
    spun = []
    for position, token in enumerate(tokens, start=1):
        if policy.mode is SpinMode.EVERY_KTH:
            chosen = position % policy.period == 0
        else:
            chosen = rng.random() < policy.prob
        spun.append(_spin_token(token, policy.synonym_table) if chosen else token)
    return ' '.join(spun)


def load_synonym_table(path):
    """Reads a two-column tab-separated synonym table."""
    table = {}
    with open(path, 'r', encoding='utf-8') as f:
        for line_number, line in enumerate(f, start=1):
            line = line.rstrip('\n')
            if not line.strip() or line.startswith('#'):
                continue
            parts = line.split('\t')
            if len(parts) != 2 or not all(parts):
                raise ConfigError(f"{path}:{line_number}: expected two tab-separated tokens")
            table[parts[0].lower()] = parts[1]
    logger.info("Loaded %d synonyms from %s", len(table), path)
    return table


def load_prompt_examples(path):
    """Reads few-shot example pairs from JSONL objects with 'original' and 'paraphrased'."""
    pairs = []
    with open(path, 'r', encoding='utf-8') as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                pairs.append((record['original'], record['paraphrased']))
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise ConfigError(f"{path}:{line_number}: bad example pair ({e})") from e
    return tuple(pairs)


# --- Candidate generation ---

def max_new_tokens_for(original, params):
    return math.floor(params.max_new_tokens_ratio * _budget_tokens(original))


def clean_completion(completion, max_new_tokens):
    """Cuts a completion at its first blank line and at the token cap."""
    text = completion.replace('\r\n', '\n')
    blank = text.find('\n\n')
    if blank >= 0:
        text = text[:blank]
    tokens = text.split()
    return ' '.join(tokens[:max_new_tokens])


def generation_digest(backend, spec, params):
    """Provenance digest over backend identity, prompt template and generation parameters."""
    template = replace(spec, target='')
    payload = {
        'backend': backend.identity,
        'prompt_sha256': hashlib.sha256(json.dumps(asdict(template), sort_keys=True).encode('utf-8')).hexdigest(),
        'params': asdict(params),
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode('utf-8')).hexdigest()[:16], payload


def paraphrase(backend, original, params, spec, original_id=''):
    """Generates an unscored CandidateSet of up to candidates_per_original paraphrases."""
    if not original.strip():
        raise GenerationError("original text is empty", backend.identity)
    max_new_tokens = max_new_tokens_for(original, params)
    if max_new_tokens < 1:
        raise GenerationError(f"original '{original_id}' is too short for ratio {params.max_new_tokens_ratio}",
                              backend.identity)
    prompt = build_prompt(replace(spec, target=original))

    candidates = []
    for k in range(params.candidates_per_original):
        request_params = replace(params, seed=params.seed + k)
        text = ''
        for attempt in range(params.max_retries + 1):
            try:
                completion = backend.complete(prompt, max_new_tokens, request_params, target=original)
            except BackendError as e:
                raise GenerationError(f"backend failed for '{original_id}': {e}", backend.identity) from e
            text = clean_completion(completion, max_new_tokens)
            if text:
                break
            logger.warning("Empty completion for %s (candidate %d, attempt %d)", original_id, k, attempt + 1)
            request_params = replace(request_params, seed=request_params.seed + 1000)
        if text:
            candidates.append(Candidate(text))

    if not candidates:
        raise GenerationError(f"all candidates for '{original_id}' were empty", backend.identity)
    digest, _ = generation_digest(backend, spec, params)
    return CandidateSet(original_id, tuple(candidates), generator=f"{backend.identity}@{digest}")


def map_bounded(function, items, max_in_flight=1):
    """Applies function to items with at most max_in_flight concurrent calls; results keep input order."""
    items = list(items)
    if max_in_flight <= 1 or len(items) <= 1:
        return [function(item) for item in items]
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        return list(pool.map(function, items))


def generate_many(backend, originals, params, spec, max_in_flight=1):
    """
    Paraphrases many Documents concurrently. Returns (candidate_sets, failures) ordered by
    original id; failures maps document id to the GenerationError raised for it.
    """
    def attempt(document):
        try:
            return document.id, paraphrase(backend, document.text, replace(params, seed=_document_seed(params.seed, document.id)),
                                           spec, original_id=document.id)
        except GenerationError as e:
            logger.warning("Generation failed for %s: %s", document.id, e)
            return document.id, e

    digest, _ = generation_digest(backend, spec, params)
    results = sorted(map_bounded(attempt, originals, max_in_flight), key=lambda pair: pair[0])
    candidate_sets = [replace(result, generator=f"{backend.identity}@{digest}")
                      for _, result in results if isinstance(result, CandidateSet)]
    failures = {doc_id: result for doc_id, result in results if not isinstance(result, CandidateSet)}
    logger.info("Generated candidates for %d originals (%d failed)", len(candidate_sets), len(failures))
    return candidate_sets, failures


def _document_seed(seed, document_id):
    # Per-document seeds depend only on (seed, id), never on completion order.
    digest = hashlib.sha256(f"{seed}:{document_id}".encode('utf-8')).digest()
    return int.from_bytes(digest[:4], 'big')

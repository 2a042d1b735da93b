import os
import sys
import time

# Make the top-level modules importable when run from any directory.
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from backends import SpinnerBackend
from corpus_store import build_pairs, split
from detectors import Label, embed_doc, nb_predict, random_detect, train_nb
from paraphrase_engine import GenParams, PromptSpec, SpinPolicy, load_synonym_table
from stats_engine import ConfusionMatrix, f1_macro
from synthetic_fixtures import synthetic_embeddings, synthetic_originals
from text_metrics import DEFAULT_SCHEME, tokenize

SYNONYMS_PATH = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'data', 'synonyms.tsv')
# Replacement words sit +2.0 along dimension 0 of the synthetic embeddings, so this bound
# checks the wiring of the pipeline, not detector quality.
MIN_DETECTOR_F1 = 0.75
RANDOM_F1_RANGE = (0.47, 0.53)


def _labeled(pairs, ids):
    by_id = {pair.id: pair for pair in pairs}
    labeled = []
    for pair_id in sorted(ids):
        labeled.append((by_id[pair_id].original, Label.ORIGINAL))
        labeled.append((by_id[pair_id].paraphrase, Label.MACHINE))
    return labeled


def run_detection_scenario(n_pairs=2000, seed=0, period=4):
    """
    Spins n_pairs synthetic originals, trains the embedding + naive Bayes detector on an
    80/10/10 split and scores it on the test part. The random baseline is scored over
    every document. Returns a dict of the headline numbers.
    """
    # 1. Synthetic originals and embeddings built around the bundled synonym table
    synonyms = load_synonym_table(SYNONYMS_PATH)
    emb = synthetic_embeddings(synonyms, seed=seed)
    originals = synthetic_originals(n_pairs, synonyms, seed=seed)

    # 2. Aligned pairs from the spinner, one candidate per original
    backend = SpinnerBackend(SpinPolicy(period=period, synonym_table=synonyms))
    params = GenParams(max_new_tokens_ratio=1.0, candidates_per_original=1, seed=seed)
    result = build_pairs(originals, backend, params, PromptSpec(), emb)
    corpus_split = split([pair.id for pair in result.pairs], (0.8, 0.1, 0.1), seed)

    # 3. Train on the train part, predict the test part
    def features(labeled):
        return [embed_doc(tokenize(document.text, DEFAULT_SCHEME), emb) for document, _ in labeled]

    training = _labeled(result.pairs, corpus_split.train)
    model = train_nb(features(training), [truth for _, truth in training], embedding_digest=emb.digest())
    testing = _labeled(result.pairs, corpus_split.test)
    predicted = [nb_predict(model, feature).label for feature in features(testing)]
    detector_f1 = f1_macro(ConfusionMatrix.from_labels([truth for _, truth in testing], predicted))

    # 4. Random baseline over all documents
    everything = _labeled(result.pairs, [pair.id for pair in result.pairs])
    guesses = random_detect([document.id for document, _ in everything], seed)
    random_f1 = f1_macro(ConfusionMatrix.from_labels([truth for _, truth in everything],
                                                     [guesses[document.id].label for document, _ in everything]))
    return {'pairs': len(result.pairs), 'failures': len(result.failures), 'train': len(corpus_split.train),
            'test': len(corpus_split.test), 'detector_f1': detector_f1, 'random_f1': random_f1}


if __name__ == "__main__":
    start = time.monotonic()
    try:
        print("Building synthetic spinner corpus and training the w2v+nb detector...")
        outcome = run_detection_scenario()
    except Exception as e:
        print(f"CRITICAL ERROR: The detection scenario failed to run: {e}")
        sys.exit(1)

    elapsed = time.monotonic() - start
    print(f"Built {outcome['pairs']} pairs ({outcome['failures']} failures); "
          f"train {outcome['train']}, test {outcome['test']} pairs; {elapsed:.1f} s.")
    failed = False
    if outcome['detector_f1'] >= MIN_DETECTOR_F1:
        print(f"SUCCESS: w2v+nb test F1-macro {outcome['detector_f1']:.3f} >= {MIN_DETECTOR_F1}")
    else:
        print(f"CRITICAL ERROR: w2v+nb test F1-macro {outcome['detector_f1']:.3f} < {MIN_DETECTOR_F1}")
        failed = True
    if RANDOM_F1_RANGE[0] <= outcome['random_f1'] <= RANDOM_F1_RANGE[1]:
        print(f"SUCCESS: random baseline F1-macro {outcome['random_f1']:.3f} within {RANDOM_F1_RANGE}")
    else:
        print(f"CRITICAL ERROR: random baseline F1-macro {outcome['random_f1']:.3f} outside {RANDOM_F1_RANGE}")
        failed = True
    sys.exit(1 if failed else 0)

from verify_pipeline import MIN_DETECTOR_F1, RANDOM_F1_RANGE, run_detection_scenario


def test_spinner_corpus_is_detectable_and_random_is_chance():
    outcome = run_detection_scenario()
    assert (outcome['pairs'], outcome['failures']) == (2000, 0)
    assert (outcome['train'], outcome['test']) == (1600, 200)
    assert outcome['detector_f1'] >= MIN_DETECTOR_F1
    assert RANDOM_F1_RANGE[0] <= outcome['random_f1'] <= RANDOM_F1_RANGE[1]


def test_small_scenario_is_reproducible():
    first = run_detection_scenario(n_pairs=100, seed=3)
    assert first == run_detection_scenario(n_pairs=100, seed=3)
    assert (first['train'], first['test']) == (80, 10)

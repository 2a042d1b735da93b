import json
import os

import pytest

from conftest import DATA_DIR
from errors import ConfigError
from run_config import RunConfig, apply_overrides, config_to_dict, file_digest, load_config, write_run_record


def write_config(tmp_path, text):
    path = tmp_path / 'config.json'
    path.write_text(text, encoding='utf-8')
    return path


def test_defaults_without_a_file():
    config = load_config()
    assert config == RunConfig()
    assert config.generation.max_new_tokens_ratio == 0.9
    assert config.detection.detectors == ('w2v+nb', 'text-match', 'random')


def test_bundled_example_config_loads():
    config = load_config(os.path.join(DATA_DIR, 'example_config.json'))
    assert config.seed == 7
    assert config.generation.backend.kind == 'remote'
    assert config.generation.backend.body_template['n'] == 1
    assert config.annotations.kappa_groups == ('education', 'expert')


def test_unknown_key_names_path_and_line(tmp_path):
    path = write_config(tmp_path, '{\n  "seed": 1,\n  "detection": {\n    "detectorz": ["random"]\n  }\n}\n')
    with pytest.raises(ConfigError, match=r"unknown config key 'detection\.detectorz' \(line 4\)"):
        load_config(path)


def test_syntax_errors_report_line_and_column(tmp_path):
    path = write_config(tmp_path, '{\n  "seed": 1,\n  "out_dir": \n}\n')
    with pytest.raises(ConfigError, match=r'config\.json:4:1'):
        load_config(path)


def test_type_errors_name_the_key(tmp_path):
    path = write_config(tmp_path, '{"generation": {"temperature": "hot"}}')
    with pytest.raises(ConfigError, match=r"generation\.temperature"):
        load_config(path)
    path = write_config(tmp_path, '{"generation": {"candidates_per_original": 2.5}}')
    with pytest.raises(ConfigError, match=r"must be an integer"):
        load_config(path)


def test_overrides_and_flags(tmp_path):
    path = write_config(tmp_path, '{"seed": 1, "generation": {"temperature": 0.7}}')
    config = load_config(path, ['generation.temperature=0.5', 'detection.detectors=["random"]',
                                'annotations.location=US'], seed=9, out_dir=str(tmp_path / 'out'))
    assert config.generation.temperature == 0.5
    assert config.detection.detectors == ('random',)
    assert config.annotations.location == 'US'
    assert (config.seed, config.out_dir) == (9, str(tmp_path / 'out'))

    raw = {'a': {'b': 1}}
    assert apply_overrides(raw, ['a.c=2']) == {'a': {'b': 1, 'c': 2}}
    assert raw == {'a': {'b': 1}}
    with pytest.raises(ConfigError):
        apply_overrides(raw, ['a.b'])
    with pytest.raises(ConfigError):
        load_config(None, ['generation.bogus=1'])


def test_partial_nested_sections_keep_their_defaults(tmp_path):
    config = load_config()
    assert config.detection.external_backend.kind == 'remote'
    assert config.detection.external_backend.response_path == 'label'

    path = write_config(tmp_path, '{"detection": {"external_backend": {"endpoint": "http://localhost:9000"}}}')
    external = load_config(path).detection.external_backend
    assert external.endpoint == 'http://localhost:9000'
    assert (external.kind, external.name, external.response_path) == ('remote', 'external', 'label')
    assert external.body_template == {'text': '{{prompt}}'}

    config = load_config(None, ['detection.external_backend.kind=mock',
                                'detection.external_backend.responses=["original"]'])
    assert config.detection.external_backend.responses == ('original',)
    assert config.detection.external_backend.name == 'external'


def test_validation_rules():
    with pytest.raises(ConfigError):
        load_config(None, ['timezone=Mars/Olympus'])
    with pytest.raises(ConfigError):
        load_config(None, ['corpus.split_ratios=[0.5, 0.5]'])
    with pytest.raises(ConfigError):
        load_config(None, ['corpus.max_error_rate=1.5'])
    with pytest.raises(ConfigError):
        load_config(None, ['evaluation.method=bootstrap'])


def test_run_record(tmp_path):
    config = load_config(None, ['timezone=Europe/Berlin'], seed=3, out_dir=str(tmp_path))
    output = tmp_path / 'result.txt'
    output.write_text('done\n', encoding='utf-8')
    resolved_path, manifest_path = write_run_record(config, 'evaluate', [str(tmp_path / 'missing.jsonl')],
                                                    [str(output)])
    with open(resolved_path, 'r', encoding='utf-8') as f:
        assert json.load(f) == config_to_dict(config)
    with open(manifest_path, 'r', encoding='utf-8') as f:
        manifest = json.load(f)
    assert manifest['subcommand'] == 'evaluate'
    assert manifest['seed'] == 3
    assert manifest['inputs'] == {}
    assert manifest['outputs'] == {str(output): file_digest(output)}
    assert manifest['created'][-6:] in ('+01:00', '+02:00')
    assert 'numpy' in manifest['packages']

"""
Run configuration: a single JSON file parsed into frozen dataclass sections, command-line
overrides, and the resolved-config / provenance manifest written next to every output.
"""
import hashlib
import json
import logging
import os
import re
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from datetime import datetime
from importlib import metadata

import pytz

from errors import ConfigError

logger = logging.getLogger(__name__)

MANIFEST_PACKAGES = ('numpy', 'scipy', 'pandas', 'scikit-learn', 'statsmodels', 'requests', 'tenacity', 'pytz')


@dataclass(frozen=True)
class BackendConfig:
    kind: str = 'spinner'
    name: str = 'remote'
    responses: tuple = ()
    echo: bool = False
    spin_period: int = 4
    spin_mode: str = 'every_kth'
    spin_prob: float = 0.15
    endpoint: str = ''
    body_template: dict = field(default_factory=lambda: {'prompt': '{{prompt}}', 'max_tokens': '{{max_tokens}}',
                                                         'temperature': '{{temperature}}', 'seed': '{{seed}}'})
    response_path: str = 'choices/0/text'
    requests_per_minute: int = 60
    timeout: float = 60.0


@dataclass(frozen=True)
class GenerationConfig:
    originals_path: str = ''
    input_format: str = 'jsonl'
    examples_path: str = ''
    synonyms_path: str = ''
    instruction: str = "Rephrase the following sentence."
    context_budget_tokens: int = 2048
    max_new_tokens_ratio: float = 0.9
    temperature: float = 0.8
    candidates_per_original: int = 4
    max_retries: int = 3
    max_in_flight: int = 1
    backend: BackendConfig = field(default_factory=BackendConfig)


@dataclass(frozen=True)
class SelectionConfig:
    embeddings_path: str = ''
    candidates_path: str = ''
    compare_paths: tuple = ()
    weights: dict = field(default_factory=lambda: {'sem_match': 0.5, 'lm_like': 0.5, 'rouge_l': 0.5, 'bleu': 0.5})
    lm_order: int = 2
    bleu_max_n: int = 4


@dataclass(frozen=True)
class CorpusConfig:
    corpus_dir: str = ''
    split_path: str = ''
    split_ratios: tuple = (0.8, 0.1, 0.1)
    max_error_rate: float = 0.0
    spot_check_size: int = 20


@dataclass(frozen=True)
class DetectionConfig:
    detectors: tuple = ('w2v+nb', 'text-match', 'random')
    model_dir: str = ''
    evaluate_split: str = 'test'
    variance_floor: float = 1e-6
    mnb_alpha: float = 1.0
    ngram_max: int = 2
    textmatch_threshold: float = 0.5
    textmatch_n: int = 3
    reference_path: str = ''
    fewshot_examples: int = 4
    # Hosted classifier behind the 'external' detector; it answers with a label keyword.
    external_backend: BackendConfig = field(default_factory=lambda: BackendConfig(
        kind='remote', name='external', body_template={'text': '{{prompt}}'}, response_path='label'))


@dataclass(frozen=True)
class EvaluationConfig:
    predictions_path: str = ''
    baseline: str = 'random'
    reference_detectors: tuple = ('w2v+nb', 'ngram+mnb', 'text-match')
    iterations: int = 10_000
    method: str = 'auto'


@dataclass(frozen=True)
class AnnotationsConfig:
    path: str = ''
    task_texts_path: str = ''
    triples_path: str = ''
    control: str = 'spinner'
    min_tokens: int = 3
    max_copy_match: float = 0.9
    level: float = 0.95
    outlier_k: float = 2.0
    duration_how: str = 'sum'
    kappa_groups: tuple = ('education',)
    min_acceptance_rate: float = None
    location: str = None
    min_tasks: int = None


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: str = 'out'
    timezone: str = 'UTC'
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    annotations: AnnotationsConfig = field(default_factory=AnnotationsConfig)


def _key_line(text, key):
    if not text:
        return None
    match = re.search(r'"' + re.escape(key) + r'"\s*:', text)
    return text.count('\n', 0, match.start()) + 1 if match else None


def _coerce(value, default, dotted, where):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}'{dotted}' must be true or false, got {value!r}")
        return value
    if isinstance(default, (int, float)):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}'{dotted}' must be a number, got {value!r}")
        if isinstance(default, int) and not isinstance(value, int):
            raise ConfigError(f"{where}'{dotted}' must be an integer, got {value!r}")
        return value
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{where}'{dotted}' must be a string, got {value!r}")
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}'{dotted}' must be a list, got {value!r}")
        return tuple(value)
    if isinstance(default, dict) and not isinstance(value, dict):
        raise ConfigError(f"{where}'{dotted}' must be an object, got {value!r}")
    return value


def _build(cls, raw, prefix='', text=None, base=None):
    """A cls instance from raw; keys absent from raw keep the values of base (or cls defaults)."""
    if not isinstance(raw, dict):
        raise ConfigError(f"'{prefix or 'config'}' must be a JSON object")
    known = {f.name: f for f in fields(cls)}
    for key in raw:
        if key not in known:
            dotted = f"{prefix}.{key}" if prefix else key
            line = _key_line(text, key)
            raise ConfigError(f"unknown config key '{dotted}'" + (f" (line {line})" if line else ""))
    defaults = cls() if base is None else base
    values = {}
    for name, value in raw.items():
        dotted = f"{prefix}.{name}" if prefix else name
        default = getattr(defaults, name)
        if is_dataclass(known[name].type):
            values[name] = _build(known[name].type, value, dotted, text, base=default)
        else:
            line = _key_line(text, name)
            where = f"line {line}: " if line else ''
            values[name] = _coerce(value, default, dotted, where)
    return replace(defaults, **values)


def apply_overrides(raw, overrides):
    """Applies 'section.key=value' strings to a raw config dict; values parse as JSON, else as text."""
    raw = json.loads(json.dumps(raw))
    for override in overrides:
        if '=' not in override:
            raise ConfigError(f"override '{override}' is not of the form key=value")
        dotted, value = override.split('=', 1)
        try:
            value = json.loads(value)
        except json.JSONDecodeError:
            pass
        node = raw
        parts = dotted.strip().split('.')
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override '{dotted}' descends into a non-object")
        node[parts[-1]] = value
    return raw


def validate(config):
    try:
        pytz.timezone(config.timezone)
    except pytz.UnknownTimeZoneError:
        raise ConfigError(f"unknown timezone '{config.timezone}'") from None
    if len(config.corpus.split_ratios) != 3:
        raise ConfigError(f"corpus.split_ratios needs three values, got {list(config.corpus.split_ratios)}")
    if not 0.0 <= config.corpus.max_error_rate <= 1.0:
        raise ConfigError(f"corpus.max_error_rate must be in [0, 1], got {config.corpus.max_error_rate}")
    if config.evaluation.method not in ('auto', 'exact', 'monte_carlo'):
        raise ConfigError(f"evaluation.method must be auto, exact or monte_carlo, got '{config.evaluation.method}'")
    if config.annotations.duration_how not in ('sum', 'max', 'mean'):
        raise ConfigError(f"annotations.duration_how must be sum, max or mean, got '{config.annotations.duration_how}'")
    return config


def load_config(path=None, overrides=(), seed=None, out_dir=None):
    """
    Loads a RunConfig from a JSON file (or defaults when path is None), then applies
    --set overrides and the --seed / --out flags.
    """
    text, raw = None, {}
    if path:
        try:
            with open(path, 'r', encoding='utf-8') as f:
                text = f.read()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e
    raw = apply_overrides(raw, overrides)
    config = _build(RunConfig, raw, text=text)
    if seed is not None:
        config = replace(config, seed=seed)
    if out_dir is not None:
        config = replace(config, out_dir=out_dir)
    logger.debug("Resolved config from %s with %d overrides", path or 'defaults', len(overrides))
    return validate(config)


def config_to_dict(config):
    return json.loads(json.dumps(asdict(config)))


def file_digest(path):
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for block in iter(lambda: f.read(1 << 16), b''):
            digest.update(block)
    return digest.hexdigest()


def _package_versions():
    versions = {}
    for package in MANIFEST_PACKAGES:
        try:
            versions[package] = metadata.version(package)
        except metadata.PackageNotFoundError:
            versions[package] = None
    return versions


def write_run_record(config, subcommand, inputs=(), outputs=()):
    """Writes resolved_config.json and manifest.json into the run's output directory."""
    os.makedirs(config.out_dir, exist_ok=True)
    resolved_path = os.path.join(config.out_dir, 'resolved_config.json')
    with open(resolved_path, 'w', encoding='utf-8', newline='\n') as f:
        json.dump(config_to_dict(config), f, indent=2, sort_keys=True)
        f.write('\n')

    manifest = {
        'subcommand': subcommand,
        'seed': config.seed,
        'created': datetime.now(pytz.timezone(config.timezone)).isoformat(),
        'inputs': {path: file_digest(path) for path in sorted(set(inputs)) if path and os.path.isfile(path)},
        'outputs': {path: file_digest(path) for path in sorted(set(outputs)) if os.path.isfile(path)},
        'packages': _package_versions(),
    }
    manifest_path = os.path.join(config.out_dir, 'manifest.json')
    with open(manifest_path, 'w', encoding='utf-8', newline='\n') as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write('\n')
    return resolved_path, manifest_path

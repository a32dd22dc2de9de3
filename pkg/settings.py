"""Runtime configuration.

Environment (or a local .env file):
    DAYEMBED_OUTPUT_DIR   default directory for artifacts (default: ./output)
    DAYEMBED_DEBUG        '1' turns on debug logging and tracebacks

Everything else comes from CLI flags or a ``--config`` file of key=value
lines, e.g.::

    batch_size=64
    perplexity=20
"""

import dataclasses
import hashlib
import os
from typing import Any, Dict, Iterable, Optional

from dotenv import dotenv_values, load_dotenv

from errors import ConfigError

load_dotenv()

DEBUG = os.getenv('DAYEMBED_DEBUG', '0') == '1'
OUTPUT_DIR = os.getenv('DAYEMBED_OUTPUT_DIR') or os.path.join(os.getcwd(), 'output')

TOOL_VERSION = '1.0.0'

# Published hyperparameters, applied by --paper-mode.
PAPER_MODE: Dict[str, Any] = {
    'triplets_per_epoch': 100000,
    'batch_size': 256,
    'learning_rate': 2e-5,
    'weight_decay': 0.01,
    'warmup_steps': 10000,
    'k_min': 2,
    'k_max': 10,
    'perplexity': 30.0,
    'early_exaggeration': 12.0,
    'tsne_learning_rate': 'auto',
}


def derive_seed(seed: int, module: str, key: str = '') -> int:
    """Sub-seed for one module and unit of work.

    First 8 bytes of sha256("{seed}:{module}:{key}") as an unsigned integer, so
    results do not depend on the order units are processed in.
    """
    digest = hashlib.sha256(f"{seed}:{module}:{key}".encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'little')


def load_config_file(path: Optional[str]) -> Dict[str, str]:
    if not path:
        return {}
    if not os.path.isfile(path):
        raise ConfigError(f"Config file not found: {path}")
    values = dotenv_values(path)
    return {k: v for k, v in values.items() if v is not None}


def _coerce(raw: Any, current: Any, name: str) -> Any:
    if not isinstance(raw, str):
        return raw
    try:
        if isinstance(current, bool):
            if raw.lower() in ('1', 'true', 'yes', 'on'):
                return True
            if raw.lower() in ('0', 'false', 'no', 'off'):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if current is None:
            if raw.lower() in ('none', ''):
                return None
            return int(raw)
    except ValueError:
        raise ConfigError(f"Invalid value for {name}: {raw!r}")
    return raw


def apply_overrides(config, overrides: Dict[str, Any]):
    """Return a copy of dataclass ``config`` with matching keys replaced.

    Keys that are not fields are ignored; several config objects usually share
    one override file.
    """
    names = {f.name for f in dataclasses.fields(config)}
    changes = {}
    for key, raw in overrides.items():
        if key in names and raw is not None:
            changes[key] = _coerce(raw, getattr(config, key), key)
    return dataclasses.replace(config, **changes)


def check_known_keys(overrides: Dict[str, Any], *configs, extra: Iterable[str] = ()) -> None:
    names = set(extra)
    for config in configs:
        names.update(f.name for f in dataclasses.fields(config))
    unknown = set(overrides) - names
    if unknown:
        raise ConfigError(f"Unknown config keys: {sorted(unknown)}")

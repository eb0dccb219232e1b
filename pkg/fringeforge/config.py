"""
config.py - 設定・ログ初期化モジュール

- config/config.yaml（既定値）を pyyaml で読み込む
- .env を python-dotenv で読み込み、FRINGEFORGE_CONFIG / FRINGEFORGE_THREADS を参照
- RunConfig：config.yaml < `--config` ファイル（key = value 行）< コマンドライン引数

【Design constraints】
- Unknown keys are errors, whichever layer they come from.
- Values are coerced to the declared field type; failures name the key and line.
"""

import logging
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

import yaml

try:
    from dotenv import load_dotenv
    DOTENV_AVAILABLE = True
except ImportError:
    DOTENV_AVAILABLE = False
    logging.warning("python-dotenv not installed - .env files are ignored")

from .errors import ConfigError


logger = logging.getLogger(__name__)

DEFAULT_CONFIG_PATH = "config/config.yaml"
ENV_CONFIG = "FRINGEFORGE_CONFIG"
ENV_THREADS = "FRINGEFORGE_THREADS"

_env_loaded = False


def load_env() -> None:
    """.env を一度だけ読み込む（既存の環境変数は上書きしない）"""
    global _env_loaded
    if _env_loaded:
        return
    if DOTENV_AVAILABLE:
        load_dotenv(override=False)
    _env_loaded = True


def _candidate_paths(config_path: Optional[str]):
    if config_path:
        yield Path(config_path)
        return
    env_path = os.environ.get(ENV_CONFIG)
    if env_path:
        yield Path(env_path)
        return
    yield Path(DEFAULT_CONFIG_PATH)
    yield Path(__file__).resolve().parent.parent / DEFAULT_CONFIG_PATH


def load_config(config_path: Optional[str] = None) -> Dict:
    """
    config.yaml を読み込む

    Args:
        config_path: 明示パス（None なら FRINGEFORGE_CONFIG、次に config/config.yaml）

    Returns:
        設定辞書
    """
    load_env()
    tried = []
    for path in _candidate_paths(config_path):
        tried.append(str(path))
        if path.is_file():
            with open(path, 'r', encoding='utf-8') as f:
                config = yaml.safe_load(f) or {}
            if not isinstance(config, dict):
                raise ConfigError(f"{path}: top level must be a mapping")
            logger.debug(f"Loaded config: {path}")
            return config
    raise ConfigError(f"config file not found (tried {', '.join(tried)})")


def setup_logging(section: Optional[Mapping] = None) -> None:
    """
    config.yaml の logging セクションからログを設定

    Args:
        section: {'level', 'format', 'file'}
    """
    section = section or {}
    level = getattr(logging, str(section.get('level', 'INFO')).upper(), logging.INFO)
    fmt = section.get('format', "%(asctime)s - %(name)s - %(levelname)s - %(message)s")
    handlers = [logging.StreamHandler()]
    log_file = section.get('file')
    if log_file:
        os.makedirs(os.path.dirname(log_file) or '.', exist_ok=True)
        handlers.append(logging.FileHandler(log_file, encoding='utf-8'))
    logging.basicConfig(level=level, format=fmt, handlers=handlers, force=True)


def worker_threads(default: Optional[int] = None) -> int:
    """FRINGEFORGE_THREADS（未設定なら min(4, CPU 数)）"""
    load_env()
    raw = os.environ.get(ENV_THREADS)
    if raw is None or raw.strip() == '':
        return default or min(4, os.cpu_count() or 1)
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"{ENV_THREADS} must be a positive integer, got {raw!r}")
    if value < 1:
        raise ConfigError(f"{ENV_THREADS} must be ≥ 1, got {value}")
    return value


# ---------------------------------------------------------------------------
# RunConfig
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    """1 回の CLI 実行の設定"""
    n: int = 48
    size: int = 64
    seed: int = 1
    l_stages: int = 4
    alpha: float = 0.005
    beta: float = 0.0005
    sigma: float = 0.5
    mixge_lambda: float = 1.0
    clamp_eps: float = 1e-7
    pretrain_epochs: int = 30
    joint_epochs: int = 60
    epochs: int = 60
    lr: float = 0.008
    labels: str = 'analytic'
    style: str = 'A'
    max_blobs: int = 5
    phase_max: float = 12.0
    split: Tuple[float, float, float] = (0.6667, 0.1667, 0.1666)
    crop: Optional[int] = None
    window_radius: Optional[float] = None
    repeats: int = 5
    out: str = 'out'
    data: Optional[str] = None
    arch: Optional[str] = None
    checkpoint: Optional[str] = None

    @classmethod
    def from_yaml(cls, cfg: Mapping) -> 'RunConfig':
        """config.yaml の各セクションから既定値を作る"""
        dataset = cfg.get('dataset', {}) or {}
        search = cfg.get('search', {}) or {}
        train = cfg.get('train', {}) or {}
        supernet = cfg.get('supernet', {}) or {}
        classical = cfg.get('classical', {}) or {}
        bench = cfg.get('bench', {}) or {}
        values = {
            'n': dataset.get('n'),
            'size': dataset.get('size'),
            'seed': dataset.get('seed'),
            'labels': dataset.get('labels'),
            'style': dataset.get('style'),
            'max_blobs': dataset.get('max_blobs'),
            'phase_max': dataset.get('phase_max'),
            'split': dataset.get('split'),
            'l_stages': supernet.get('stages'),
            'alpha': search.get('alpha'),
            'beta': search.get('beta'),
            'sigma': search.get('sigma'),
            'mixge_lambda': search.get('mixge_lambda'),
            'clamp_eps': search.get('clamp_eps'),
            'pretrain_epochs': search.get('pretrain_epochs'),
            'joint_epochs': search.get('joint_epochs'),
            'epochs': train.get('epochs'),
            'lr': train.get('lr', search.get('lr')),
            'crop': train.get('crop'),
            'window_radius': classical.get('window_radius'),
            'repeats': bench.get('repeats'),
        }
        run = cls()
        run.update({k: v for k, v in values.items() if v is not None}, source='config.yaml')
        return run

    def update(self, values: Mapping[str, Any], source: str = 'flags',
               lines: Optional[Mapping[str, int]] = None) -> 'RunConfig':
        """
        値を上書き（未知のキーはエラー）

        Args:
            values: キー → 値（文字列なら型変換する）
            source: エラーメッセージ用の出所
            lines: キー → 行番号（設定ファイル由来の場合）
        """
        known = {f.name: f for f in fields(self)}
        for raw_key, value in values.items():
            key = raw_key.replace('-', '_')
            where = f"{source}:{lines[raw_key]}" if lines and raw_key in lines else source
            if key not in known:
                raise ConfigError(f"{where}: unknown config key {raw_key!r}")
            try:
                setattr(self, key, _coerce(key, value))
            except (TypeError, ValueError) as e:
                raise ConfigError(f"{where}: bad value {value!r} for {key}: {e}")
        return self

    def validate(self) -> None:
        if self.n < 3:
            raise ConfigError(f"n must be ≥ 3, got {self.n}")
        if self.size < 1 or self.size & (self.size - 1):
            raise ConfigError(f"size must be a power of two, got {self.size}")
        if self.l_stages < 2:
            raise ConfigError(f"l_stages must be ≥ 2, got {self.l_stages}")
        if self.size % (2 ** self.l_stages):
            raise ConfigError(f"size {self.size} must be divisible by 2^l_stages = {2 ** self.l_stages}")
        if not 0.0 < self.sigma < 1.0:
            raise ConfigError(f"sigma must lie in (0, 1), got {self.sigma}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        for name in ('epochs', 'joint_epochs', 'pretrain_epochs'):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be ≥ 0, got {getattr(self, name)}")
        if self.labels not in ('analytic', 'classical'):
            raise ConfigError(f"labels must be 'analytic' or 'classical', got {self.labels!r}")
        if self.repeats < 3:
            raise ConfigError(f"repeats must be ≥ 3, got {self.repeats}")


_INT = {'n', 'size', 'seed', 'l_stages', 'pretrain_epochs', 'joint_epochs', 'epochs',
        'max_blobs', 'repeats'}
_FLOAT = {'alpha', 'beta', 'sigma', 'mixge_lambda', 'clamp_eps', 'lr', 'phase_max'}
_OPT_INT = {'crop'}
_OPT_FLOAT = {'window_radius'}
_OPT_STR = {'data', 'arch', 'checkpoint'}
_NONE_WORDS = {'', 'none', 'null'}


def _coerce(key: str, value: Any) -> Any:
    text = value.strip() if isinstance(value, str) else value
    if key in _OPT_INT | _OPT_FLOAT | _OPT_STR:
        if text is None or (isinstance(text, str) and text.lower() in _NONE_WORDS):
            return None
    if key in _INT or key in _OPT_INT:
        if isinstance(text, float) and not text.is_integer():
            raise ValueError("expected an integer")
        return int(text)
    if key in _FLOAT or key in _OPT_FLOAT:
        return float(text)
    if key == 'split':
        items = text.split(',') if isinstance(text, str) else list(text)
        parts = tuple(float(x) for x in items)
        if len(parts) != 3:
            raise ValueError("expected three comma-separated fractions")
        return parts
    return str(text)


def read_run_file(path) -> Tuple[Dict[str, str], Dict[str, int]]:
    """
    `key = value` 形式の設定ファイルを読む（# 以降はコメント）

    Returns:
        (キー → 値文字列, キー → 行番号)
    """
    values: Dict[str, str] = {}
    lines: Dict[str, int] = {}
    with open(path, 'r', encoding='utf-8') as f:
        for lineno, line in enumerate(f, start=1):
            body = line.split('#', 1)[0].strip()
            if not body:
                continue
            if '=' not in body:
                raise ConfigError(f"{path}:{lineno}: expected `key = value`, got {body!r}")
            key, value = (part.strip() for part in body.split('=', 1))
            if not key:
                raise ConfigError(f"{path}:{lineno}: empty key")
            values[key] = value
            lines[key] = lineno
    return values, lines

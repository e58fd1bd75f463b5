"""
Run configuration loading
설정 우선순위: CLI 플래그 > 환경 변수 > YAML 파일 > 기본값
"""

import os
from typing import Any, Dict, Iterable, Mapping, Optional

import yaml
from dotenv import load_dotenv
from pydantic import ValidationError

from schemas.config import RunConfig
from schemas.digest import canonical_json, sha256_text
from schemas.gateway import BackendSettings
from services.exceptions import ConfigError


# 환경 변수 -> 설정 경로
ENV_KEYS = {
    "MODEL_API_KEY": "gateway.api_key",
    "MODEL_API_BASE": "gateway.api_base",
    "SPECS_COMPILE_CMD": "curation.compile_cmd",
    "REVIEW_OUTPUT_ROOT": "output_root",
    "REVIEW_WORKERS": "pipeline.workers",
    "OCR_ENDPOINT": "ingest.ocr_backend",
}

DEFAULT_BACKEND_IDS = ("reviewer", "critic", "judge", "generator")


def _set_dotted(tree: Dict[str, Any], dotted: str, value: Any):
    node = tree
    parts = dotted.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value


def _deep_merge(base: Dict[str, Any], override: Mapping[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def read_config_file(path: str) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"config file is not valid YAML: {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"config file must hold a mapping at top level: {path}")
    return data


def load_config(
    path: Optional[str] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    environ: Optional[Mapping[str, str]] = None,
    use_dotenv: bool = True,
) -> RunConfig:
    """파일 -> 환경 변수 -> 플래그(점 표기 키) 순서로 병합"""
    if use_dotenv and environ is None:
        load_dotenv()
    environ = os.environ if environ is None else environ

    tree: Dict[str, Any] = read_config_file(path) if path else {}
    if path:
        tree["config_path"] = path

    env_tree: Dict[str, Any] = {}
    for env_name, dotted in ENV_KEYS.items():
        if environ.get(env_name):
            _set_dotted(env_tree, dotted, environ[env_name])
    tree = _deep_merge(tree, env_tree)

    flag_tree: Dict[str, Any] = {}
    for dotted, value in (overrides or {}).items():
        if value is not None:
            _set_dotted(flag_tree, dotted, value)
    tree = _deep_merge(tree, flag_tree)

    try:
        config = RunConfig.model_validate(tree)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}") from e
    return with_default_backends(config)


def with_default_backends(config: RunConfig) -> RunConfig:
    """설정에 없는 기본 백엔드 id 채우기 (mock 이면 전부 fixture)"""
    backends = dict(config.gateway.backends)
    for backend_id in DEFAULT_BACKEND_IDS:
        if config.mock:
            backends[backend_id] = BackendSettings(provider="fixture")
        elif backend_id not in backends:
            backends[backend_id] = BackendSettings(provider="openai", model="gpt-5")
    gateway = config.gateway.model_copy(update={"backends": backends})
    return config.model_copy(update={"gateway": gateway})


def require_backends(config: RunConfig, backend_ids: Iterable[str]):
    missing = sorted(set(backend_ids) - set(config.gateway.backends))
    if missing:
        raise ConfigError(f"unresolvable backend ids: {', '.join(missing)}")


def config_digest(config: RunConfig) -> str:
    """비밀 값과 경로(config_path, output_root) 제외 정규 JSON 의 SHA-256"""
    payload = config.model_dump(mode="json", exclude={"config_path": True, "output_root": True, "gateway": {"api_key"}})
    return sha256_text(canonical_json(payload))

import hashlib
import json
from typing import Any


def canonical_json(data: Any) -> str:
    """정렬된 키, 고정 구분자 - 해시/재현성 비교용"""
    return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=False, default=str)


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()

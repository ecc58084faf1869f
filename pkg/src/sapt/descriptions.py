"""LLM-backed description generation with a per-class disk cache.

Responses are used verbatim apart from list-format cleanup: the provider
tends to answer with a numbered list, so lines are split and enumeration
prefixes stripped, but nothing is curated or filtered.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import tempfile
from pathlib import Path

import requests

from .catalog import normalize_description

API_KEY_ENV = "SAP_LLM_API_KEY"
CACHE_DIR_ENV = "SAP_CACHE_DIR"

QUERY_PATTERN = (
    "What are useful visual features for distinguishing a [classname] in a photo? "
    "Answer concisely."
)

_ENUM_PREFIX = re.compile(r"^\s*(?:\d+\s*[.)]\s*|[-*•]\s*)")


class DescriptionProviderError(RuntimeError):
    """Provider call failed and no cached response was available."""

    def __init__(self, class_name: str, reason: str):
        super().__init__(f"description fetch failed for class {class_name!r}: {reason}")
        self.class_name = class_name


def parse_description_response(text: str) -> list[str]:
    """Split a (possibly numbered) response into one description per line."""
    descriptions = []
    for line in text.splitlines():
        cleaned = normalize_description(_ENUM_PREFIX.sub("", line))
        if cleaned:
            descriptions.append(cleaned)
    return descriptions


class LLMClient:
    """Minimal chat-completion client over HTTP.

    The credential comes from the ``SAP_LLM_API_KEY`` environment variable;
    endpoint URL and model name come from configuration.
    """

    def __init__(self, endpoint: str, model: str, timeout: float = 60.0, session=None):
        self.endpoint = endpoint
        self.model = model
        self.timeout = timeout
        self._session = session or requests.Session()

    def complete(self, prompt: str) -> str:
        api_key = os.environ.get(API_KEY_ENV)
        if not api_key:
            raise RuntimeError(f"no API credential: set {API_KEY_ENV}")
        response = self._session.post(
            self.endpoint,
            headers={"Authorization": f"Bearer {api_key}"},
            json={"model": self.model, "messages": [{"role": "user", "content": prompt}]},
            timeout=self.timeout,
        )
        response.raise_for_status()
        return response.json()["choices"][0]["message"]["content"]


def _cache_path(cache_dir: str | Path, dataset_id: str, class_name: str) -> Path:
    digest = hashlib.sha256(class_name.encode("utf-8")).hexdigest()
    return Path(cache_dir) / dataset_id / f"{digest}.json"


def fetch_descriptions(
    class_name: str,
    llm: LLMClient | None,
    cache: str | Path,
    dataset_id: str,
) -> list[str]:
    """Fetch (or recall) the description list for one class.

    Cache hits never touch the provider, which makes warm-cache calls a pure
    function of ``(dataset_id, class_name)``. Writes are atomic per cache
    file so concurrent fetchers of the same key just race to identical
    content.
    """
    path = _cache_path(cache, dataset_id, class_name)
    if path.exists():
        return json.loads(path.read_text(encoding="utf-8"))["descriptions"]
    if llm is None:
        raise DescriptionProviderError(class_name, f"cache miss and no provider (set {API_KEY_ENV})")
    query = QUERY_PATTERN.replace("[classname]", class_name)
    try:
        response = llm.complete(query)
    except Exception as exc:
        raise DescriptionProviderError(class_name, str(exc)) from exc
    descriptions = parse_description_response(response)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = json.dumps(
        {"dataset": dataset_id, "class_name": class_name, "descriptions": descriptions},
        ensure_ascii=False,
        indent=2,
    )
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as handle:
            handle.write(payload + "\n")
        os.replace(tmp_name, path)
    finally:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
    return descriptions

"""Class-description catalogs and text template composition.

A catalog maps dataset class names to short visual-feature phrases and owns
the deduplicated union of all phrases, which downstream code encodes once
and reuses as cross-attention queries.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path


class CatalogError(ValueError):
    """Malformed catalog file or inconsistent catalog contents."""


def normalize_description(text: str) -> str:
    """Trim and collapse internal whitespace (case is preserved)."""
    return re.sub(r"\s+", " ", text.strip())


@dataclass(frozen=True)
class ClassEntry:
    """One class and its ordered, deduplicated description phrases."""

    class_name: str
    descriptions: tuple[str, ...]


@dataclass(frozen=True)
class PromptTemplate:
    """Text template with a class-name slot and a description joiner."""

    base_pattern: str = "a photo of a {class}"
    description_joiner: str = ", which {description}"

    def __post_init__(self):
        if self.base_pattern.count("{class}") != 1:
            raise ValueError("base_pattern must contain exactly one {class} slot")
        if self.description_joiner.count("{description}") != 1:
            raise ValueError("description_joiner must contain exactly one {description} slot")


DEFAULT_TEMPLATE = PromptTemplate()

_VOWELS = "aeiou"


def _fill_class_slot(pattern: str, class_name: str) -> str:
    # pick "an" over "a" for vowel-initial class names; the catalog file
    # never records articles, so this stays a rendering concern
    if class_name[:1].lower() in _VOWELS:
        pattern = re.sub(r"\b[Aa] \{class\}", lambda m: m.group(0)[0] + "n {class}", pattern, count=1)
    return pattern.replace("{class}", class_name)


def compose_class_templates(
    class_name: str,
    descriptions: list[str] | tuple[str, ...],
    template: PromptTemplate = DEFAULT_TEMPLATE,
) -> list[str]:
    """One template string per description; plain template if there are none."""
    base = _fill_class_slot(template.base_pattern, class_name)
    if not descriptions:
        return [base]
    return [base + template.description_joiner.replace("{description}", d) for d in descriptions]


def compose_ovc_templates(
    descriptions: list[str] | tuple[str, ...],
    template: PromptTemplate = DEFAULT_TEMPLATE,
) -> list[str]:
    """Class-name-free variant: the class slot is filled with ``object``."""
    return compose_class_templates("object", descriptions, template)


@dataclass
class DescriptionCatalog:
    """All per-class descriptions of one dataset plus their deduplicated union."""

    dataset_id: str
    entries: dict[str, ClassEntry]
    union_descriptions: list[str] = field(default_factory=list)
    class_index_map: dict[str, list[int]] = field(default_factory=dict)

    @property
    def n_descriptions(self) -> int:
        return len(self.union_descriptions)

    def descriptions_for(self, class_name: str) -> tuple[str, ...]:
        entry = self.entries.get(class_name)
        return entry.descriptions if entry is not None else ()


def build_catalog(dataset_id: str, classes: dict[str, list[str]]) -> DescriptionCatalog:
    """Normalize, dedup, and index descriptions; union ordered by first occurrence.

    Scan order is the order of ``classes``; within a class the given
    description order is preserved. Empty strings (after normalization) are
    dropped, intra-class duplicates keep their first position.
    """
    entries: dict[str, ClassEntry] = {}
    union: list[str] = []
    union_pos: dict[str, int] = {}
    index_map: dict[str, list[int]] = {}
    for name, raw_descriptions in classes.items():
        seen: dict[str, None] = {}
        for raw in raw_descriptions:
            text = normalize_description(raw)
            if text and text not in seen:
                seen[text] = None
        descriptions = tuple(seen)
        entries[name] = ClassEntry(class_name=name, descriptions=descriptions)
        indices = []
        for text in descriptions:
            if text not in union_pos:
                union_pos[text] = len(union)
                union.append(text)
            indices.append(union_pos[text])
        index_map[name] = indices
    return DescriptionCatalog(
        dataset_id=dataset_id,
        entries=entries,
        union_descriptions=union,
        class_index_map=index_map,
    )


def _reject_duplicate_keys(pairs):
    seen = set()
    out = {}
    for key, value in pairs:
        if key in seen:
            raise CatalogError(f"duplicate class name in catalog: {key!r}")
        seen.add(key)
        out[key] = value
    return out


def load_catalog(path: str | Path) -> DescriptionCatalog:
    """Load a catalog JSON file and rebuild union/index maps deterministically."""
    raw = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(raw, object_pairs_hook=_reject_duplicate_keys)
    except json.JSONDecodeError as exc:
        raise CatalogError(f"malformed catalog JSON in {path}: {exc}") from exc
    if not isinstance(data, dict) or "classes" not in data:
        raise CatalogError(f"catalog {path} missing top-level 'classes' object")
    classes = data["classes"]
    if not isinstance(classes, dict) or not all(isinstance(v, list) for v in classes.values()):
        raise CatalogError(f"catalog {path}: 'classes' must map class names to description lists")
    return build_catalog(str(data.get("dataset", "")), classes)


def canonical_bytes(catalog: DescriptionCatalog) -> bytes:
    """Canonical serialization: sorted keys, two-space indent, trailing newline."""
    payload = {
        "dataset": catalog.dataset_id,
        "classes": {name: list(entry.descriptions) for name, entry in catalog.entries.items()},
    }
    return (json.dumps(payload, sort_keys=True, indent=2, ensure_ascii=False) + "\n").encode("utf-8")


def save_catalog(catalog: DescriptionCatalog, path: str | Path) -> None:
    Path(path).write_bytes(canonical_bytes(catalog))


def catalog_hash(catalog: DescriptionCatalog) -> str:
    return hashlib.sha256(canonical_bytes(catalog)).hexdigest()

"""Ingest, clean, mark, template, augment and synthesize query-product records."""

from esci_rank.dataset.records import (
    COLUMNS,
    LOCALES,
    DatasetError,
    QueryProductRecord,
    check_unique,
    dumps,
    group_by_query,
    load_dataset,
    read_dataset,
    save_dataset,
    write_dataset,
)
from esci_rank.dataset.synthetic import build_world, generate_synthetic, synthetic_lexicon
from esci_rank.dataset.text import (
    EntitySpan,
    SpanError,
    build_input,
    clean_record,
    clean_text,
    mark_entities,
    mark_record,
    strip_markers,
    tag_entities,
)
from esci_rank.dataset.translate import (
    DictionaryTranslator,
    SkipReport,
    augment_translate,
    identity_translator,
)

__all__ = [
    "COLUMNS",
    "LOCALES",
    "DatasetError",
    "DictionaryTranslator",
    "EntitySpan",
    "QueryProductRecord",
    "SkipReport",
    "SpanError",
    "augment_translate",
    "build_input",
    "build_world",
    "check_unique",
    "clean_record",
    "clean_text",
    "dumps",
    "generate_synthetic",
    "group_by_query",
    "identity_translator",
    "load_dataset",
    "mark_entities",
    "mark_record",
    "read_dataset",
    "save_dataset",
    "strip_markers",
    "synthetic_lexicon",
    "tag_entities",
    "write_dataset",
]

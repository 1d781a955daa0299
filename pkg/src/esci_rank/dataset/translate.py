"""Translation augmentation behind a pluggable translator."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping

from esci_rank.dataset.records import LOCALES, QueryProductRecord

# (text, source_locale, target_locale) -> translated text; raise to signal failure
Translator = Callable[[str, str, str], str]


def identity_translator(text: str, source: str, target: str) -> str:
    return text


class DictionaryTranslator:
    """Word-by-word substitution from per-direction lexicons.

    Words without an entry pass through unchanged. With ``strict=True`` an
    unknown word raises ``KeyError`` instead, which the augmenter records as a skip.
    """

    def __init__(self, lexicons: Mapping[tuple[str, str], Mapping[str, str]], strict: bool = False):
        self.lexicons = {k: dict(v) for k, v in lexicons.items()}
        self.strict = strict

    def __call__(self, text: str, source: str, target: str) -> str:
        if source == target:
            return text
        lexicon = self.lexicons.get((source, target), {})
        out = []
        for word in text.split(" "):
            if word in lexicon:
                out.append(lexicon[word])
            elif self.strict and word:
                raise KeyError(f"no {source}->{target} entry for {word!r}")
            else:
                out.append(word)
        return " ".join(out)


@dataclass
class SkipReport:
    skipped: list[tuple[str, str, str, str]] = field(default_factory=list)  # (query_id, product_id, target, reason)

    @property
    def count(self) -> int:
        return len(self.skipped)


def augment_translate(
    records: Iterable[QueryProductRecord],
    translator: Translator,
    target_locales: Iterable[str],
) -> tuple[list[QueryProductRecord], SkipReport]:
    """Append a translated copy of every record for each other target locale.

    Copies keep the label and query_id; their product_id gains a ``#<locale>`` suffix.
    """
    targets = sorted(set(target_locales))
    for t in targets:
        if t not in LOCALES:
            raise ValueError(f"unknown target locale {t!r}")
    out: list[QueryProductRecord] = []
    report = SkipReport()
    for r in records:
        out.append(r)
        for target in targets:
            if target == r.locale:
                continue
            try:
                copy = replace(
                    r,
                    product_id=f"{r.product_id}#{target}",
                    query=translator(r.query, r.locale, target),
                    title=translator(r.title, r.locale, target),
                    description=translator(r.description, r.locale, target),
                    bullet_points=translator(r.bullet_points, r.locale, target),
                    locale=target,
                )
            except Exception as exc:  # any translator failure skips this copy only
                report.skipped.append((r.query_id, r.product_id, target, f"{type(exc).__name__}: {exc}"))
                continue
            out.append(copy)
    return out, report

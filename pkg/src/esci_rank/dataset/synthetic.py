"""Seeded generator of ESCI-style query-product data.

A fixed "world" of categories, nouns, modifiers, colors and brands is built once
(independently of the sampling seed, so datasets drawn with different seeds share
a vocabulary). Each locale renders every concept with its own surface form.

Label signal lives both in token overlap with the query and in the product's
own vocabulary:

- Exact products repeat the query noun, its brand, color and modifiers;
- Substitutes stay in the query's category but use one of its variant nouns
  (sometimes the query noun under another brand and color);
- Complements come from the category's accessory group and often name the query noun;
- Irrelevant products come from an unrelated shopping category or from the
  off-catalogue categories that queries never target.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from esci_rank.dataset.records import LOCALES, QueryProductRecord
from esci_rank.labels import ESCI_PRIORS, EsciLabel, check_label_vector

# Locale shares of the competition training data.
LOCALE_SHARES = {"en": 0.545, "es": 0.19, "jp": 0.265}

N_CATEGORIES = 24  # categories queries are about
N_ACCESSORY = 12  # complement groups; category c pairs with accessory group c // 2
N_OFF_CATALOGUE = 24  # categories only irrelevant products come from
NOUNS_PER_CATEGORY = 6
MODIFIERS_PER_CATEGORY = 6
N_COLORS = 12
N_BRANDS = 150
N_FILLER = 300

_WORLD_SEED = 20220722

_LATIN_C = "bcdfghklmnprstvz"
_LATIN_V = "aeiou"
_KANA = (
    "アイウエオカキクケコサシスセソタチツテトナニヌネノハヒフヘホマミムメモヤユヨラリルレロワン"
    "ガギグゲゴザジズゼゾダデドバビブベボパピプペポ"
)
_FOR = {"en": "for", "es": "para", "jp": "用"}


def _latin_word(rng: np.random.Generator, syllables: int, ending: str = "") -> str:
    return "".join(rng.choice(list(_LATIN_C)) + rng.choice(list(_LATIN_V)) for _ in range(syllables)) + ending


def _kana_word(rng: np.random.Generator, syllables: int) -> str:
    return "".join(rng.choice(list(_KANA)) for _ in range(syllables))


@dataclass(frozen=True)
class Concept:
    surfaces: dict

    def render(self, locale: str) -> str:
        return self.surfaces[locale]


@dataclass(frozen=True)
class World:
    """Category indices run over query categories, then accessory groups, then off-catalogue ones."""

    nouns: tuple  # [category][i] -> Concept
    variants: tuple  # [category][i] -> Concept; substitute nouns of query categories
    modifiers: tuple  # [category][i] -> Concept
    colors: tuple
    brands: tuple  # plain strings, shared across locales
    filler: tuple

    @staticmethod
    def complement(category: int) -> int:
        return N_CATEGORIES + category // 2


@lru_cache(maxsize=1)
def build_world() -> World:
    rng = np.random.default_rng(_WORLD_SEED)
    used: set[str] = set()

    def concept() -> Concept:
        while True:
            n = int(rng.integers(2, 4))
            en = _latin_word(rng, n)
            es = _latin_word(rng, n, ending=str(rng.choice(["o", "a", "os", "as"])))
            jp = _kana_word(rng, n + 1)
            if not {en, es, jp} & used:
                used.update((en, es, jp))
                return Concept({"en": en, "es": es, "jp": jp})

    n_all = N_CATEGORIES + N_ACCESSORY + N_OFF_CATALOGUE
    nouns = tuple(tuple(concept() for _ in range(NOUNS_PER_CATEGORY)) for _ in range(n_all))
    variants = tuple(tuple(concept() for _ in range(NOUNS_PER_CATEGORY)) for _ in range(N_CATEGORIES))
    modifiers = tuple(tuple(concept() for _ in range(MODIFIERS_PER_CATEGORY)) for _ in range(n_all))
    colors = tuple(concept() for _ in range(N_COLORS))
    filler = tuple(concept() for _ in range(N_FILLER))
    brands = []
    while len(brands) < N_BRANDS:
        b = _latin_word(rng, int(rng.integers(2, 4))).capitalize()
        if b.lower() not in used:
            used.add(b.lower())
            brands.append(b)
    return World(nouns, variants, modifiers, colors, tuple(brands), filler)


def synthetic_lexicon() -> dict[tuple[str, str], dict[str, str]]:
    """Word-level translation tables between locales for every concept of the world."""
    world = build_world()
    concepts = [c for group in world.nouns + world.variants + world.modifiers for c in group]
    concepts += list(world.colors) + list(world.filler)
    table: dict[tuple[str, str], dict[str, str]] = {}
    for src in LOCALES:
        for tgt in LOCALES:
            if src != tgt:
                d = {c.render(src): c.render(tgt) for c in concepts}
                d[_FOR[src]] = _FOR[tgt]
                table[(src, tgt)] = d
    return table


@dataclass
class _Query:
    category: int
    noun: int
    brand: Optional[int]
    color: Optional[int]
    modifiers: list


def _pick_other(rng: np.random.Generator, n: int, exclude: Sequence[int]) -> int:
    while True:
        k = int(rng.integers(n))
        if k not in exclude:
            return k


def _filler(rng: np.random.Generator, world: World, locale: str, k: int) -> list[str]:
    return [world.filler[int(i)].render(locale) for i in rng.integers(len(world.filler), size=k)]


def _category_words(rng: np.random.Generator, world: World, category: int, locale: str, k: int) -> list[str]:
    idx = rng.integers(MODIFIERS_PER_CATEGORY, size=k)
    return [world.modifiers[category][int(i)].render(locale) for i in idx]


def _product(rng, world: World, q: _Query, label: EsciLabel, locale: str) -> dict:
    noun_of = lambda cat, i: world.nouns[cat][i].render(locale)  # noqa: E731
    mods = [world.modifiers[q.category][m].render(locale) for m in q.modifiers]
    if label is EsciLabel.EXACT:
        category = q.category
        brand = q.brand if q.brand is not None else int(rng.integers(N_BRANDS))
        color = q.color if q.color is not None else int(rng.integers(N_COLORS))
        title = [world.brands[brand], *mods, noun_of(category, q.noun)]
        if rng.random() < 0.5:
            title += _category_words(rng, world, category, locale, 1)
    elif label is EsciLabel.SUBSTITUTE:
        category = q.category
        exclude = [q.brand] if q.brand is not None else []
        brand = _pick_other(rng, N_BRANDS, exclude)
        color = _pick_other(rng, N_COLORS, [q.color] if q.color is not None else [])
        if rng.random() < 0.1:
            noun = noun_of(category, q.noun)
        else:
            noun = world.variants[category][int(rng.integers(NOUNS_PER_CATEGORY))].render(locale)
        title = [world.brands[brand], *_category_words(rng, world, category, locale, 1), noun]
    elif label is EsciLabel.COMPLEMENT:
        category = world.complement(q.category)
        brand = int(rng.integers(N_BRANDS))
        color = int(rng.integers(N_COLORS))
        title = [world.brands[brand], noun_of(category, int(rng.integers(NOUNS_PER_CATEGORY)))]
        if rng.random() < 0.6:
            title += [_FOR[locale], noun_of(q.category, q.noun)]
    else:
        if rng.random() < 0.15:
            category = _pick_other(rng, N_CATEGORIES, [q.category])
        else:
            category = N_CATEGORIES + N_ACCESSORY + int(rng.integers(N_OFF_CATALOGUE))
        brand = int(rng.integers(N_BRANDS))
        color = int(rng.integers(N_COLORS))
        title = [
            world.brands[brand],
            *_category_words(rng, world, category, locale, 1),
            noun_of(category, int(rng.integers(NOUNS_PER_CATEGORY))),
        ]
    bullets = _category_words(rng, world, category, locale, int(rng.integers(2, 5))) + _filler(
        rng, world, locale, int(rng.integers(1, 4))
    )
    rng.shuffle(bullets)
    description = _filler(rng, world, locale, int(rng.integers(3, 8)))
    description.insert(int(rng.integers(len(description) + 1)), noun_of(category, int(rng.integers(NOUNS_PER_CATEGORY))))
    return {
        "title": " ".join(title),
        "bullet_points": " ".join(bullets),
        "description": " ".join(description),
        "brand": world.brands[brand],
        "color": world.colors[color].render(locale),
    }


def generate_synthetic(
    n: int,
    seed: int,
    label_priors: Sequence[float] = ESCI_PRIORS,
    label_noise: float = 0.0,
) -> list[QueryProductRecord]:
    """Draw ``n`` labeled records in query groups of 2-16 products (the last group may be smaller).

    ``label_noise`` is the probability that a product's text is built from a
    uniformly drawn label recipe while it keeps its drawn label, imitating
    crowd-sourced annotation errors.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not 0.0 <= label_noise <= 1.0:
        raise ValueError(f"label_noise must lie in [0, 1], got {label_noise}")
    priors = np.array(label_priors, dtype=np.float64)
    check_label_vector(priors)
    world = build_world()
    rng = np.random.default_rng(seed)
    locales = list(LOCALE_SHARES)
    locale_p = np.array([LOCALE_SHARES[loc] for loc in locales])

    records: list[QueryProductRecord] = []
    qi = 0
    while len(records) < n:
        size = min(int(rng.integers(2, 17)), n - len(records))
        locale = locales[int(rng.choice(len(locales), p=locale_p))]
        category = int(rng.integers(N_CATEGORIES))
        q = _Query(
            category=category,
            noun=int(rng.integers(NOUNS_PER_CATEGORY)),
            brand=int(rng.integers(N_BRANDS)) if rng.random() < 0.6 else None,
            color=int(rng.integers(N_COLORS)) if rng.random() < 0.5 else None,
            modifiers=sorted(set(int(m) for m in rng.integers(MODIFIERS_PER_CATEGORY, size=int(rng.integers(0, 3))))),
        )
        words = []
        if q.brand is not None:
            words.append(world.brands[q.brand].lower())
        if q.color is not None:
            words.append(world.colors[q.color].render(locale))
        words += [world.modifiers[category][m].render(locale) for m in q.modifiers]
        words.append(world.nouns[category][q.noun].render(locale))
        query_id = f"s{seed}-q{qi:06d}"
        for j in range(size):
            label = EsciLabel.from_index(int(rng.choice(4, p=priors)))
            recipe = label
            if label_noise > 0.0 and rng.random() < label_noise:
                recipe = EsciLabel.from_index(int(rng.integers(4)))
            fields = _product(rng, world, q, recipe, locale)
            records.append(
                QueryProductRecord(
                    query_id=query_id,
                    product_id=f"{query_id}-p{j:02d}",
                    query=" ".join(words),
                    locale=locale,
                    label=label,
                    **fields,
                )
            )
        qi += 1
    return records

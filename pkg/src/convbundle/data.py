"""Item/tag catalog, user-bundle interactions, leave-one-out split, synthetic corpus."""
from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

MAX_BUNDLE_SIZE = 20


class DataError(ValueError):
    """Raised on malformed or inconsistent input data."""


@dataclass(frozen=True)
class Bundle:
    """An unordered, duplicate-free set of items consumed together."""

    items: frozenset[int]

    def __post_init__(self) -> None:
        if not self.items:
            raise DataError("bundle must contain at least one item")
        if len(self.items) > MAX_BUNDLE_SIZE:
            raise DataError(
                f"bundle size {len(self.items)} exceeds maximum {MAX_BUNDLE_SIZE}"
            )

    @staticmethod
    def of(items: Iterable[int]) -> "Bundle":
        return Bundle(frozenset(int(i) for i in items))

    def sorted_items(self) -> list[int]:
        return sorted(self.items)

    def __len__(self) -> int:
        return len(self.items)

    def __contains__(self, item: int) -> bool:
        return item in self.items

    def __iter__(self):
        return iter(sorted(self.items))


@dataclass(frozen=True)
class Catalog:
    """Immutable item universe with tag assignments and inverted tag->item indexes.

    Item ids are dense ``0..n_items-1``. ``n_attributes`` / ``n_categories`` are
    vocabulary sizes; every referenced tag id is below them.
    """

    attributes_of: tuple[frozenset[int], ...]
    categories_of: tuple[frozenset[int], ...]
    n_attributes: int
    n_categories: int
    items_with_attribute: Mapping[int, frozenset[int]] = field(repr=False, default=None)  # type: ignore[assignment]
    items_with_category: Mapping[int, frozenset[int]] = field(repr=False, default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        for i, cats in enumerate(self.categories_of):
            if not cats:
                raise DataError(f"item {i} has no category")
        for i, attrs in enumerate(self.attributes_of):
            bad = [a for a in attrs if a < 0 or a >= self.n_attributes]
            if bad:
                raise DataError(f"item {i} references attribute {bad[0]} outside vocabulary")
        for i, cats in enumerate(self.categories_of):
            bad = [c for c in cats if c < 0 or c >= self.n_categories]
            if bad:
                raise DataError(f"item {i} references category {bad[0]} outside vocabulary")
        object.__setattr__(self, "items_with_attribute", _invert(self.attributes_of, self.n_attributes))
        object.__setattr__(self, "items_with_category", _invert(self.categories_of, self.n_categories))

    @property
    def n_items(self) -> int:
        return len(self.attributes_of)

    @property
    def items(self) -> frozenset[int]:
        return frozenset(range(self.n_items))

    def __contains__(self, item: int) -> bool:
        return 0 <= item < self.n_items


def _invert(forward: Sequence[frozenset[int]], vocab: int) -> dict[int, frozenset[int]]:
    buckets: dict[int, set[int]] = {t: set() for t in range(vocab)}
    for item, tags in enumerate(forward):
        for t in tags:
            buckets[t].add(item)
    return {t: frozenset(s) for t, s in buckets.items()}


@dataclass(frozen=True)
class UserHistory:
    """A user's bundle interactions; order carries no semantics."""

    user: int
    bundles: tuple[Bundle, ...]


class Partition(str, Enum):
    ONLINE = "ONLINE"
    VALID = "VALID"
    TEST = "TEST"


@dataclass(frozen=True)
class DatasetSplit:
    """Leave-one-out split: per user, one held-out target and the rest offline."""

    offline_histories: Mapping[int, tuple[Bundle, ...]]
    targets: Mapping[int, Bundle]
    partition: Mapping[int, Partition]

    def users(self, partition: Partition | None = None) -> list[int]:
        if partition is None:
            return sorted(self.partition)
        return sorted(u for u, p in self.partition.items() if p is partition)


# ---------------------------------------------------------------------------
# Loading / saving (line-delimited JSON records)
# ---------------------------------------------------------------------------

def load_catalog(path: str | Path) -> Catalog:
    """Load a catalog from a line-delimited file of ``{"item", "cats", "attrs"}`` records."""
    records: dict[int, tuple[frozenset[int], frozenset[int]]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                item = int(rec["item"])
                cats = frozenset(int(c) for c in rec["cats"])
                attrs = frozenset(int(a) for a in rec["attrs"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}: malformed catalog record on line {lineno}: {exc}") from exc
            if item in records:
                raise DataError(f"{path}: duplicate item id {item} on line {lineno}")
            records[item] = (cats, attrs)
    if not records:
        raise DataError(f"{path}: empty catalog")
    n = len(records)
    if set(records) != set(range(n)):
        missing = sorted(set(range(n)) - set(records))[:3]
        raise DataError(f"{path}: item ids must be dense 0..{n - 1} (missing e.g. {missing})")
    cats_of = tuple(records[i][0] for i in range(n))
    attrs_of = tuple(records[i][1] for i in range(n))
    n_attrs = max((max(a) for a in attrs_of if a), default=-1) + 1
    n_cats = max((max(c) for c in cats_of if c), default=-1) + 1
    return Catalog(
        attributes_of=attrs_of,
        categories_of=cats_of,
        n_attributes=n_attrs,
        n_categories=n_cats,
    )


def save_catalog(catalog: Catalog, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item in range(catalog.n_items):
            rec = {
                "item": item,
                "cats": sorted(catalog.categories_of[item]),
                "attrs": sorted(catalog.attributes_of[item]),
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_interactions(
    path: str | Path,
    catalog: Catalog,
    frequency_filter: int | None = None,
) -> tuple[list[UserHistory], int]:
    """Load ``{"user", "bundles"}`` records; returns histories and the dropped-user count.

    Users with fewer than two bundles are dropped. When ``frequency_filter`` is
    set, items occurring no more than that many times across all bundles are
    removed first (bundles emptied by the removal disappear).
    """
    raw: dict[int, list[list[int]]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                user = int(rec["user"])
                bundles = [[int(i) for i in b] for b in rec["bundles"]]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}: malformed interaction record on line {lineno}: {exc}") from exc
            if user in raw:
                raise DataError(f"{path}: duplicate user id {user} on line {lineno}")
            for bundle in bundles:
                for item in bundle:
                    if item not in catalog:
                        raise DataError(f"{path}: unknown item {item} (user {user}, line {lineno})")
            raw[user] = bundles
    if frequency_filter is not None:
        counts: dict[int, int] = {}
        for bundles in raw.values():
            for bundle in bundles:
                for item in set(bundle):
                    counts[item] = counts.get(item, 0) + 1
        keep = {i for i, c in counts.items() if c > frequency_filter}
        raw = {
            u: [kept for b in bundles if (kept := [i for i in b if i in keep])]
            for u, bundles in raw.items()
        }
    histories: list[UserHistory] = []
    dropped = 0
    for user in sorted(raw):
        bundles = [Bundle.of(b) for b in raw[user] if b]
        if len(bundles) < 2:
            dropped += 1
            continue
        histories.append(UserHistory(user=user, bundles=tuple(bundles)))
    return histories, dropped


def save_interactions(histories: Iterable[UserHistory], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for h in histories:
            rec = {"user": h.user, "bundles": [b.sorted_items() for b in h.bundles]}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Leave-one-out split
# ---------------------------------------------------------------------------

def split_leave_one_out(histories: Sequence[UserHistory], seed: int) -> DatasetSplit:
    """Hold out one random bundle per user; partition users 6:2:2 ONLINE/VALID/TEST."""
    if not histories:
        raise DataError("cannot split an empty interaction set")
    rng = random.Random(seed)
    offline: dict[int, tuple[Bundle, ...]] = {}
    targets: dict[int, Bundle] = {}
    for h in sorted(histories, key=lambda h: h.user):
        if len(h.bundles) < 2:
            raise DataError(f"user {h.user} has fewer than two bundles")
        idx = rng.randrange(len(h.bundles))
        targets[h.user] = h.bundles[idx]
        offline[h.user] = tuple(b for j, b in enumerate(h.bundles) if j != idx)
    users = sorted(targets)
    rng.shuffle(users)
    n = len(users)
    n_online = round(n * 0.6)
    n_valid = round(n * 0.2)
    partition: dict[int, Partition] = {}
    for i, u in enumerate(users):
        if i < n_online:
            partition[u] = Partition.ONLINE
        elif i < n_online + n_valid:
            partition[u] = Partition.VALID
        else:
            partition[u] = Partition.TEST
    return DatasetSplit(offline_histories=offline, targets=targets, partition=partition)


def save_split(split: DatasetSplit, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for user in sorted(split.partition):
            rec = {
                "user": user,
                "partition": split.partition[user].value,
                "target": split.targets[user].sorted_items(),
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_split(path: str | Path, histories: Sequence[UserHistory]) -> DatasetSplit:
    """Rebuild a split from its emitted file plus the original interactions."""
    by_user = {h.user: h for h in histories}
    offline: dict[int, tuple[Bundle, ...]] = {}
    targets: dict[int, Bundle] = {}
    partition: dict[int, Partition] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                user = int(rec["user"])
                part = Partition(rec["partition"])
                target = Bundle.of(rec["target"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}: malformed split record on line {lineno}: {exc}") from exc
            if user not in by_user:
                raise DataError(f"{path}: split references unknown user {user}")
            bundles = list(by_user[user].bundles)
            if target not in bundles:
                raise DataError(f"{path}: target for user {user} not among their bundles")
            bundles.remove(target)  # one occurrence only; duplicates stay offline
            offline[user] = tuple(bundles)
            targets[user] = target
            partition[user] = part
    if not targets:
        raise DataError(f"{path}: empty split file")
    return DatasetSplit(offline_histories=offline, targets=targets, partition=partition)


# ---------------------------------------------------------------------------
# Synthetic corpus with planted type structure
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticConfig:
    n_users: int = 50
    n_items: int = 40
    n_attrs: int = 8
    n_cats: int = 4
    n_user_types: int = 2
    bundles_per_user: int = 4
    bundle_size_range: tuple[int, int] = (2, 4)
    in_type_prob: float = 0.9


def generate_synthetic(config: SyntheticConfig, seed: int) -> tuple[Catalog, list[UserHistory]]:
    """Generate a catalog and interactions with planted per-type tag preferences.

    Each user belongs to a latent type; each type prefers the categories and
    attributes congruent to it mod ``n_user_types``. Bundle items come from the
    type-preferred item pool with probability ``in_type_prob``, else uniformly.
    """
    lo, hi = config.bundle_size_range
    if not (1 <= lo <= hi <= MAX_BUNDLE_SIZE):
        raise DataError(f"invalid bundle size range {config.bundle_size_range}")
    if config.n_items < hi * 2:
        raise DataError(f"need at least {hi * 2} items for bundles of size up to {hi}")
    if config.n_cats < config.n_user_types:
        raise DataError("need at least one category per user type")
    if config.n_items // config.n_cats < hi:
        raise DataError(
            f"not enough items per category: {config.n_items} items over "
            f"{config.n_cats} categories cannot support bundles of size {hi}"
        )
    rng = random.Random(seed)

    cats_of = []
    attrs_of = []
    for item in range(config.n_items):
        cats_of.append(frozenset({item % config.n_cats}))
        k = rng.randint(1, min(3, config.n_attrs))
        attrs_of.append(frozenset(rng.sample(range(config.n_attrs), k)))
    catalog = Catalog(
        attributes_of=tuple(attrs_of),
        categories_of=tuple(cats_of),
        n_attributes=config.n_attrs,
        n_categories=config.n_cats,
    )

    type_cats = [
        {c for c in range(config.n_cats) if c % config.n_user_types == t}
        for t in range(config.n_user_types)
    ]
    type_attrs = [
        {a for a in range(config.n_attrs) if a % config.n_user_types == t}
        for t in range(config.n_user_types)
    ]
    type_pool = []
    for t in range(config.n_user_types):
        pool = [
            i
            for i in range(config.n_items)
            if next(iter(cats_of[i])) in type_cats[t]
            and (not type_attrs[t] or attrs_of[i] & type_attrs[t])
        ]
        if len(pool) < hi:  # attribute constraint too tight; keep category-only pool
            pool = [i for i in range(config.n_items) if next(iter(cats_of[i])) in type_cats[t]]
        if len(pool) < hi:
            raise DataError(f"type {t} preferred pool holds {len(pool)} items, need {hi}")
        type_pool.append(pool)

    histories: list[UserHistory] = []
    all_items = list(range(config.n_items))
    for user in range(config.n_users):
        t = user % config.n_user_types
        bundles = []
        for _ in range(config.bundles_per_user):
            size = rng.randint(lo, hi)
            chosen: set[int] = set()
            while len(chosen) < size:
                source = type_pool[t] if rng.random() < config.in_type_prob else all_items
                chosen.add(rng.choice(source))
            bundles.append(Bundle(frozenset(chosen)))
        histories.append(UserHistory(user=user, bundles=tuple(bundles)))
    return catalog, histories

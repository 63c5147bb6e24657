"""Shared fixtures: tiny hand-built catalogs and corpora."""
from __future__ import annotations

import pytest

from convbundle.data import Bundle, Catalog, SyntheticConfig, UserHistory, generate_synthetic


def make_catalog(attrs: list[list[int]], cats: list[list[int]]) -> Catalog:
    """Build a catalog from per-item tag lists (item i gets attrs[i], cats[i])."""
    return Catalog(
        attributes_of=tuple(frozenset(a) for a in attrs),
        categories_of=tuple(frozenset(c) for c in cats),
        n_attributes=max((t for a in attrs for t in a), default=-1) + 1,
        n_categories=max((t for c in cats for t in c), default=-1) + 1,
    )


@pytest.fixture
def small_catalog() -> Catalog:
    """6 items, 4 attributes, 2 categories; varied tag overlap."""
    return make_catalog(
        attrs=[[0], [0, 1], [1, 2], [2], [3], []],
        cats=[[0], [0], [1], [1], [0, 1], [0]],
    )


@pytest.fixture
def planted_corpus() -> tuple[Catalog, list[UserHistory]]:
    cfg = SyntheticConfig()
    return generate_synthetic(cfg, seed=11)


def history(user: int, *bundles) -> UserHistory:
    return UserHistory(user=user, bundles=tuple(Bundle.of(b) for b in bundles))


def pin_manager(model, value: float) -> None:
    """Saturate both manage sub-heads so p_manage sits at sigma(value)."""
    import torch

    with torch.no_grad():
        for head in (model.pi_m_result, model.pi_m_slot):
            head[2].weight.zero_()
            head[2].bias.fill_(value)


def pin_items(model, favored, value: float = 14.0) -> None:
    """Bias the item head's output layer toward the given item ids."""
    import torch

    with torch.no_grad():
        model.pi_item[2].weight.zero_()
        model.pi_item[2].bias.fill_(-value)
        model.pi_item[2].bias[list(favored)] = value

"""Cloze sampling, tag weighting, the offline loss, and the training loop."""
from __future__ import annotations

import math
from dataclasses import replace

import pytest
import torch

from conftest import history, make_catalog
from convbundle.data import (
    Partition,
    SyntheticConfig,
    generate_synthetic,
    split_leave_one_out,
)
from convbundle.env import MASK_ITEM
from convbundle.model import BuntModel, Hyperparameters, gradients
from convbundle.pretrain import (
    ClozeInstance,
    PretrainError,
    TagWeights,
    compute_tag_weights,
    masked_item_report,
    offline_loss,
    pretrain,
    sample_cloze_instance,
)


HP = Hyperparameters(d=16, heads=2)


@pytest.fixture(scope="module")
def tiny_corpus():
    cfg = SyntheticConfig(n_users=8, n_items=20, n_attrs=6, n_cats=3,
                          bundles_per_user=4)
    catalog, histories = generate_synthetic(cfg, seed=5)
    return catalog, histories, split_leave_one_out(histories, seed=2)


# -- instance sampling --------------------------------------------------------

def test_cloze_clamps_masked_count_to_bundle_size(small_catalog):
    h = history(0, [3], [1])  # singleton bundles, k would exceed them
    for seed in range(10):
        inst = sample_cloze_instance(h, small_catalog, HP, seed)
        assert len(inst.masked_slots) == 1
        assert len(inst.state.slots) == 1
        assert inst.item_labels[inst.masked_slots[0]] in (1, 3)


def test_cloze_rho_zero_keeps_all_tags_visible(small_catalog):
    h = history(0, [0, 1, 2], [3, 4])
    hp = replace(HP, mask_ratio=0.0)
    for seed in range(10):
        inst = sample_cloze_instance(h, small_catalog, hp, seed)
        for sid in inst.masked_slots:
            item = inst.item_labels[sid]
            ctx = inst.state.slots[sid]
            assert ctx.accepted_attributes == small_catalog.attributes_of[item]
            assert ctx.accepted_categories == small_catalog.categories_of[item]
            assert inst.attr_labels[sid] == frozenset()
            assert inst.cat_labels[sid] == frozenset()


def test_cloze_rho_one_hides_all_tags(small_catalog):
    h = history(0, [0, 1, 2], [3, 4])
    hp = replace(HP, mask_ratio=1.0)
    for seed in range(10):
        inst = sample_cloze_instance(h, small_catalog, hp, seed)
        for sid, ctx in inst.state.slots.items():
            assert ctx.accepted_attributes == frozenset()
            assert ctx.accepted_categories == frozenset()
        for sid in inst.masked_slots:
            item = inst.item_labels[sid]
            assert inst.attr_labels[sid] == small_catalog.attributes_of[item]
            assert inst.cat_labels[sid] == small_catalog.categories_of[item]


def test_cloze_visible_and_hidden_tags_partition_each_item(small_catalog):
    h = history(0, [0, 1, 2], [3, 4], [1, 5])
    for seed in range(25):
        inst = sample_cloze_instance(h, small_catalog, HP, seed)
        for sid, ctx in inst.state.slots.items():
            if sid in inst.masked_slots:
                item = inst.item_labels[sid]
                assert ctx.accepted_item == MASK_ITEM
                assert ctx.accepted_attributes | inst.attr_labels[sid] == \
                    small_catalog.attributes_of[item]
                assert ctx.accepted_attributes & inst.attr_labels[sid] == frozenset()
                assert ctx.accepted_categories | inst.cat_labels[sid] == \
                    small_catalog.categories_of[item]
            else:
                item = ctx.accepted_item
                assert not ctx.active
                assert sid not in inst.item_labels
                assert ctx.accepted_attributes <= small_catalog.attributes_of[item]


def test_cloze_state_leaves_pools_unrestricted(small_catalog):
    h = history(0, [0, 1, 2], [3, 4])
    inst = sample_cloze_instance(h, small_catalog, HP, seed=3)
    assert inst.state.active_slots == inst.masked_slots
    assert len(inst.state.history) == 1  # the target bundle is withheld
    everything = frozenset(range(small_catalog.n_items))
    for sid in inst.masked_slots:
        assert inst.state.item_pool(sid) == everything


def test_cloze_needs_two_bundles(small_catalog):
    with pytest.raises(PretrainError):
        sample_cloze_instance(history(0, [0, 1]), small_catalog, HP, seed=0)


# -- tag weights --------------------------------------------------------------

def test_tag_weights_uniform_for_equal_frequencies():
    cat = make_catalog(attrs=[[0], [1]], cats=[[0], [0]])
    w = compute_tag_weights([history(0, [0, 1]), history(1, [0, 1])], cat)
    assert w.attrs == {0: 1.0, 1: 1.0}
    assert w.cats == {0: 1.0}


def test_tag_weights_are_inverse_frequency_normalized():
    # attr 0 occurs twice, attr 1 once: raw 0.5 and 1.0, mean-normalized
    cat = make_catalog(attrs=[[0], [0], [1]], cats=[[0], [0], [0]])
    w = compute_tag_weights([history(0, [0, 1, 2])], cat)
    assert w.attrs[0] == pytest.approx(2 / 3)
    assert w.attrs[1] == pytest.approx(4 / 3)
    assert sum(w.attrs.values()) / 2 == pytest.approx(1.0, abs=1e-9)


def test_tag_weights_clip_before_normalizing():
    # attr 0 appears 20 times: 1/20 clips up to 0.1 against attr 1's 1.0
    cat = make_catalog(attrs=[[0]] * 20 + [[1]], cats=[[0]] * 21)
    w = compute_tag_weights([history(0, list(range(20)), [20])], cat)
    z = (0.1 + 1.0) / 2
    assert w.attrs[0] == pytest.approx(0.1 / z)
    assert w.attrs[1] == pytest.approx(1.0 / z)


def test_tag_weights_unseen_tags_get_the_clip_ceiling():
    cat = make_catalog(attrs=[[0], [0], [1]], cats=[[0], [0], [1]])
    w = compute_tag_weights([history(0, [0, 1])], cat)  # attr 1, cat 1 unseen
    z_attr = 0.5  # only attr 0 seen, clipped weight 0.5, so Z = 0.5
    assert w.attrs[1] == pytest.approx(10.0 / z_attr)
    assert w.cats[1] == pytest.approx(10.0 / 0.5)


def test_tag_weights_empty_corpus_rejected(small_catalog):
    with pytest.raises(PretrainError):
        compute_tag_weights({}, small_catalog)


# -- offline loss -------------------------------------------------------------

def test_offline_loss_uniform_item_head_gives_log2():
    cat = make_catalog(attrs=[[], []], cats=[[0], [0]])
    torch.manual_seed(0)
    model = BuntModel(cat.n_items, cat.n_attributes, cat.n_categories, HP)
    with torch.no_grad():  # force a uniform item distribution
        model.pi_item[2].weight.zero_()
        model.pi_item[2].bias.zero_()
    inst = sample_cloze_instance(history(0, [0], [1]), cat, HP, seed=1)
    with torch.no_grad():
        parts = offline_loss(inst, model)
    assert float(parts.rec) == pytest.approx(math.log(2), abs=1e-6)
    assert float(parts.attr) == 0.0
    assert float(parts.cate) == 0.0  # one category, softmax mass 1, -log 1 = 0


def test_offline_loss_total_is_affine_in_the_tradeoff(small_catalog):
    torch.manual_seed(1)
    model = BuntModel(small_catalog.n_items, small_catalog.n_attributes,
                      small_catalog.n_categories, HP)
    inst = sample_cloze_instance(history(0, [0, 1, 2], [3, 4]), small_catalog, HP, seed=7)
    with torch.no_grad():
        base = offline_loss(inst, model)
    tags = float(base.attr + base.cate + base.conv)
    assert float(base.total) == pytest.approx(float(base.rec) + HP.loss_tradeoff * tags)
    model.hp = replace(HP, loss_tradeoff=0.37)
    with torch.no_grad():
        again = offline_loss(inst, model)
    assert float(again.rec) == pytest.approx(float(base.rec))
    assert float(again.total) == pytest.approx(float(base.rec) + 0.37 * tags, rel=1e-6)


def test_offline_loss_parts_are_nonnegative(tiny_corpus):
    catalog, histories, _ = tiny_corpus
    torch.manual_seed(2)
    model = BuntModel(catalog.n_items, catalog.n_attributes, catalog.n_categories, HP)
    weights = compute_tag_weights(histories, catalog)
    for seed in range(10):
        inst = sample_cloze_instance(histories[seed % len(histories)], catalog, HP, seed)
        with torch.no_grad():
            parts = offline_loss(inst, model, weights)
        for name in ("total", "rec", "attr", "cate", "conv"):
            assert float(getattr(parts, name)) >= -1e-9, name


def test_offline_loss_rejects_unmasked_instances(small_catalog):
    torch.manual_seed(0)
    model = BuntModel(small_catalog.n_items, small_catalog.n_attributes,
                      small_catalog.n_categories, HP)
    inst = sample_cloze_instance(history(0, [0, 1], [2, 3]), small_catalog, HP, seed=0)
    hollow = ClozeInstance(state=inst.state, masked_slots=(),
                           item_labels={}, attr_labels={}, cat_labels={})
    with pytest.raises(PretrainError):
        offline_loss(hollow, model)


def test_duplicated_instance_doubles_the_gradient(small_catalog):
    torch.manual_seed(3)
    model = BuntModel(small_catalog.n_items, small_catalog.n_attributes,
                      small_catalog.n_categories, HP)
    inst = sample_cloze_instance(history(0, [0, 1, 2], [3, 4]), small_catalog, HP, seed=4)
    single = gradients(offline_loss(inst, model).total, model)
    doubled = gradients(
        offline_loss(inst, model).total + offline_loss(inst, model).total, model
    )
    checked = 0
    for name, g in single.items():
        assert torch.allclose(doubled[name], 2 * g, atol=1e-6), name
        checked += bool((g != 0).any())
    assert checked > 0


# -- masked-item report -------------------------------------------------------

def test_masked_item_report_against_direct_count():
    cat = make_catalog(attrs=[[], []], cats=[[0], [0]])
    torch.manual_seed(0)
    model = BuntModel(cat.n_items, cat.n_attributes, cat.n_categories, HP)
    with torch.no_grad():  # uniform head: argmax is always item 0
        model.pi_item[2].weight.zero_()
        model.pi_item[2].bias.zero_()
    insts = [sample_cloze_instance(history(0, [0], [1]), cat, HP, seed=s)
             for s in range(40)]
    report = masked_item_report(model, insts)
    zeros = sum(1 for i in insts if i.item_labels[i.masked_slots[0]] == 0)
    assert report["top1"] == pytest.approx(zeros / 40)
    assert 0.0 <= report["f1"] <= 1.0


# -- training loop ------------------------------------------------------------

def test_pretrain_zero_learning_rate_changes_nothing(tiny_corpus):
    catalog, _, split = tiny_corpus
    hp = replace(HP, learning_rate=0.0)
    result = pretrain(split, catalog, hp, seed=4, epochs=2, patience=10)
    torch.manual_seed(4)
    fresh = BuntModel(catalog.n_items, catalog.n_attributes, catalog.n_categories, hp)
    for k, v in result.model.state_dict().items():
        assert torch.equal(v, fresh.state_dict()[k]), k


def test_pretrain_same_seed_is_bitwise_identical(tiny_corpus):
    catalog, _, split = tiny_corpus
    a = pretrain(split, catalog, HP, seed=9, epochs=3, patience=10)
    b = pretrain(split, catalog, HP, seed=9, epochs=3, patience=10)
    assert a.log == b.log
    for k, v in a.model.state_dict().items():
        assert torch.equal(v, b.model.state_dict()[k]), k


def test_pretrain_loss_decreases(tiny_corpus):
    catalog, _, split = tiny_corpus
    result = pretrain(split, catalog, HP, seed=0, epochs=10, patience=20)
    assert result.log[-1]["loss"] < result.log[0]["loss"]
    assert result.log[-1]["train_top1"] >= result.log[0]["train_top1"]


def test_pretrain_fixed_masks_memorize_a_small_corpus(tiny_corpus):
    catalog, _, split = tiny_corpus
    # the corpus is one default batch wide, so shrink batches to get enough steps
    hp = replace(HP, batch_size=4)
    result = pretrain(split, catalog, hp, seed=1, epochs=80, patience=80,
                      resample_masks=False, stop_at_train_top1=0.9)
    assert result.log[-1]["train_top1"] >= 0.9
    assert result.log[-1]["epoch"] < 80  # early exit once the bar is cleared


def test_pretrain_needs_a_trainable_user(small_catalog):
    from convbundle.data import Bundle, DatasetSplit
    split = DatasetSplit(
        offline_histories={0: (Bundle.of([0, 1]),)},
        targets={0: Bundle.of([2])},
        partition={0: Partition.ONLINE},
    )
    with pytest.raises(PretrainError):
        pretrain(split, small_catalog, HP, seed=0, epochs=1)

"""Network-level tests: shapes, symmetry, masking, action selection, gradients."""
from __future__ import annotations

import pytest
import torch

from conftest import history, make_catalog
from convbundle.data import Bundle
from convbundle.env import MASK_ITEM, ContractViolation, ResultId, SlotContext, init_conversation
from convbundle.model import (
    ALL_GROUPS,
    BACKBONE,
    EMPTY_LOG_INDEX,
    HEAD_A,
    HEAD_C,
    HEAD_I,
    HEAD_M,
    BuntModel,
    CheckpointError,
    EncodedState,
    Hyperparameters,
    ModelError,
    PolicyOutput,
    gradients,
    load_checkpoint,
    manager_state_vector,
    save_checkpoint,
    select_actions,
)
from convbundle.pretrain import offline_loss, sample_cloze_instance
from oracles import finite_difference_audit


HP = Hyperparameters(d=16, heads=2)


@pytest.fixture
def model(small_catalog) -> BuntModel:
    torch.manual_seed(0)
    return BuntModel(small_catalog.n_items, small_catalog.n_attributes,
                     small_catalog.n_categories, HP)


@pytest.fixture
def state(small_catalog):
    h = history(0, [0, 1], [2, 3], [1, 4])
    return init_conversation(user=0, history=h.bundles, catalog=small_catalog, k=2)


def test_encode_state_shapes(model, state):
    enc = model.encode_state(state)
    assert enc.o.shape == (2, HP.d)
    assert enc.result_vec.shape == (HP.d,)
    assert enc.slot_ids == (0, 1)
    pol = model.policies(enc, state.active_slots)
    assert pol.item_logits[0].shape == (6,)
    assert pol.attr_logits[0].shape == (4,)
    assert pol.cat_logits[0].shape == (2,)
    assert pol.p_manage.shape == ()


def test_history_encoding_is_bundle_order_equivariant(model):
    bundles = [Bundle.of([0, 1]), Bundle.of([2, 3]), Bundle.of([4])]
    base = model.encode_history(bundles)
    perm = [2, 0, 1]
    shuffled = model.encode_history([bundles[i] for i in perm])
    assert base.shape == (3, HP.d)
    for row, src in enumerate(perm):
        assert torch.allclose(shuffled[row], base[src], atol=1e-5)


def test_identical_bundles_get_identical_rows(model):
    rows = model.encode_history([Bundle.of([1, 3]), Bundle.of([1, 3])])
    assert torch.allclose(rows[0], rows[1], atol=1e-6)


def test_policy_invariant_to_history_order(model, small_catalog):
    h1 = history(0, [0, 1], [2, 3], [1, 4]).bundles
    h2 = (h1[2], h1[0], h1[1])
    s1 = init_conversation(user=0, history=h1, catalog=small_catalog, k=2)
    s2 = init_conversation(user=0, history=h2, catalog=small_catalog, k=2)
    p1 = model.policies(model.encode_state(s1), s1.active_slots)
    p2 = model.policies(model.encode_state(s2), s2.active_slots)
    assert torch.allclose(p1.p_manage, p2.p_manage, atol=1e-5)
    for sid in (0, 1):
        assert torch.allclose(p1.item_logits[sid], p2.item_logits[sid], atol=1e-4)


def test_mask_and_pad_rows_are_distinct(model):
    slots = {0: SlotContext(slot_id=0)}
    e_i, e_a, e_c, ids = model.embed_short_term(slots)
    assert ids == (0,)
    assert torch.equal(e_i[0], model.item_emb.weight[model.item_mask_id])
    assert torch.equal(e_a[0], model.attr_emb.weight[model.attr_pad_id])
    assert not torch.equal(model.item_emb.weight[model.item_mask_id],
                           model.item_emb.weight[model.item_pad_id])


def test_accepted_tags_change_the_short_term_rows(model):
    plain = {0: SlotContext(slot_id=0)}
    tagged = {0: SlotContext(slot_id=0, accepted_attributes=frozenset({1, 2}))}
    _, e_a_plain, _, _ = model.embed_short_term(plain)
    _, e_a_tagged, _, _ = model.embed_short_term(tagged)
    expect = model.attr_emb.weight[[1, 2]].mean(dim=0)
    assert torch.allclose(e_a_tagged[0], expect, atol=1e-6)
    assert not torch.allclose(e_a_plain[0], e_a_tagged[0], atol=1e-3)


def test_result_log_encoding(model):
    empty = model.encode_result_log([])
    assert torch.equal(empty, model.result_emb.weight[EMPTY_LOG_INDEX])
    one = model.encode_result_log([ResultId.REC_SUC])
    assert torch.equal(one, model.result_emb.weight[0])
    two = model.encode_result_log([ResultId.REC_SUC, ResultId.ASK_SUC])
    expect = model.result_emb.weight[[0, 2]].mean(dim=0)
    assert torch.allclose(two, expect, atol=1e-6)


def test_masked_softmax_support(model, state):
    enc = model.encode_state(state)
    o_x = enc.row(0)
    probs = torch.softmax(model.masked_item_logits(o_x, frozenset({3})), dim=-1)
    assert probs[3].item() == pytest.approx(1.0)
    assert probs.sum().item() == pytest.approx(1.0, abs=1e-6)
    sub = torch.softmax(model.masked_item_logits(o_x, frozenset({0, 2, 5})), dim=-1)
    assert sub.sum().item() == pytest.approx(1.0, abs=1e-6)
    for out in (1, 3, 4):
        assert sub[out].item() == 0.0


def test_manage_prob_and_beta_are_probabilities(model, state):
    enc = model.encode_state(state)
    with torch.no_grad():
        p, beta = model.slot_manage_prob(enc.result_vec, enc.row(0))
    assert 0.0 < float(p) < 1.0
    assert 0.0 < float(beta) < 1.0


def test_manage_aggregate_modes(small_catalog, state):
    outs = {}
    for mode in ("mean", "max", "first"):
        torch.manual_seed(0)
        hp = Hyperparameters(d=16, heads=2, manage_aggregate=mode)
        m = BuntModel(small_catalog.n_items, small_catalog.n_attributes,
                      small_catalog.n_categories, hp)
        outs[mode] = m.policies(m.encode_state(state), state.active_slots)
    per_slot = [float(outs["mean"].slot_manage[s]) for s in (0, 1)]
    assert float(outs["mean"].p_manage) == pytest.approx(sum(per_slot) / 2, abs=1e-6)
    assert float(outs["max"].p_manage) == pytest.approx(max(per_slot), abs=1e-6)
    assert float(outs["first"].p_manage) == pytest.approx(per_slot[0], abs=1e-6)


def test_policies_require_active_slots_and_tolerate_drained_item_pools(model, state):
    enc = model.encode_state(state)
    with pytest.raises(ContractViolation):
        model.policies(enc, [])
    # a drained item pool must leave the tag heads usable: only selecting
    # items from it is a contract violation
    starved = EncodedState(o=enc.o, result_vec=enc.result_vec, slot_ids=enc.slot_ids,
                           item_pools={0: frozenset()},
                           attr_pools={0: frozenset({1})},
                           cat_pools={0: frozenset({0})})
    pol = model.policies(starved, [0])
    assert torch.isinf(pol.item_logits[0]).all()
    with pytest.raises(ContractViolation):
        select_actions(pol, [0], "RECOMMEND")
    ask = select_actions(pol, [0], "ASK")
    assert dict(ask.questions) == {0: (1, 0)}


def _fake_policy(item_logits: dict[int, torch.Tensor], attr=None, cat=None) -> PolicyOutput:
    return PolicyOutput(
        p_manage=torch.tensor(0.7),
        slot_manage={}, slot_beta={},
        item_logits=item_logits,
        attr_logits=attr or {}, cat_logits=cat or {},
    )


def test_select_actions_breaks_ties_by_smallest_id():
    pol = _fake_policy({0: torch.zeros(6), 1: torch.zeros(6)})
    act = select_actions(pol, [0, 1], "RECOMMEND")
    assert dict(act.proposals) == {0: 0, 1: 1}  # second slot skips the taken item


def test_select_actions_respects_pool_mask():
    masked = torch.full((6,), float("-inf"))
    masked[2], masked[4] = 0.0, 1.0
    pol = _fake_policy({0: masked, 1: masked.clone()})
    act = select_actions(pol, [0, 1], "RECOMMEND")
    assert dict(act.proposals) == {0: 4, 1: 2}


def test_select_actions_raises_when_slots_outnumber_items():
    single = torch.full((6,), float("-inf"))
    single[2] = 0.0
    pol = _fake_policy({0: single, 1: single.clone()})
    with pytest.raises(ContractViolation):
        select_actions(pol, [0, 1], "RECOMMEND")


def test_select_actions_ask_pairs():
    attr = {0: torch.tensor([0.0, 3.0, 1.0, 0.0]), 1: torch.tensor([9.0, 0.0, 0.0, 0.0])}
    cat = {0: torch.tensor([0.0, 2.0]), 1: torch.tensor([5.0, 0.0])}
    pol = _fake_policy({}, attr=attr, cat=cat)
    act = select_actions(pol, [0, 1], "ASK")
    assert dict(act.questions) == {0: (1, 1), 1: (0, 0)}


def test_select_actions_ask_guards_drained_tag_pools():
    drained = torch.full((4,), float("-inf"))
    pol = _fake_policy({}, attr={0: drained}, cat={0: torch.zeros(2)})
    with pytest.raises(ContractViolation):
        select_actions(pol, [0], "ASK")


def test_select_actions_rejects_unknown_modes():
    pol = _fake_policy({0: torch.zeros(6)})
    with pytest.raises(ModelError):
        select_actions(pol, [0], "PONDER")
    with pytest.raises(ModelError):
        select_actions(pol, [0], "RECOMMEND", sampling="LUCKY")


def test_sampling_is_deterministic_under_a_seeded_generator():
    logits = torch.tensor([0.0, 1.0, float("-inf"), 0.5, float("-inf"), 2.0])
    pol = _fake_policy({0: logits, 1: logits.clone()})
    g1 = torch.Generator().manual_seed(9)
    g2 = torch.Generator().manual_seed(9)
    a1 = select_actions(pol, [0, 1], "RECOMMEND", sampling="SAMPLE", generator=g1)
    a2 = select_actions(pol, [0, 1], "RECOMMEND", sampling="SAMPLE", generator=g2)
    assert dict(a1.proposals) == dict(a2.proposals)
    for _ in range(25):  # zero-probability entries must never surface
        g = torch.Generator().manual_seed(torch.seed() % (2**31))
        act = select_actions(pol, [0, 1], "RECOMMEND", sampling="SAMPLE", generator=g)
        assert set(act.proposals.values()) <= {0, 1, 3, 5}


def test_parameter_groups_partition_the_model(model):
    names = [n for n, _ in model.named_parameters()]
    by_group = {g: set() for g in ALL_GROUPS}
    for n in names:
        by_group[model.group_of(n)].add(n)
    assert sum(len(v) for v in by_group.values()) == len(names)
    assert all(by_group[g] for g in ALL_GROUPS)
    total = sum(len(model.group_parameters(g)) for g in ALL_GROUPS)
    assert total == len(names)
    with pytest.raises(ModelError):
        model.group_of("nonexistent.weight")


def test_frozen_parameters_get_exact_zero_gradients(model, state):
    model.set_trainable({HEAD_I})
    enc = model.encode_state(state)
    pol = model.policies(enc, state.active_slots)
    loss = pol.item_logits[0].logsumexp(-1) + pol.item_logits[1].logsumexp(-1)
    grads = gradients(loss, model)
    model.set_trainable(ALL_GROUPS)
    assert set(grads) == {n for n, _ in model.named_parameters()}
    saw_nonzero = False
    for name, g in grads.items():
        group = model.group_of(name)
        if group == HEAD_I and name.startswith("pi_item"):
            saw_nonzero = saw_nonzero or bool((g != 0).any())
        else:
            assert torch.equal(g, torch.zeros_like(g)), name
    assert saw_nonzero


def test_finite_difference_gradients(small_catalog):
    hp = Hyperparameters(d=8, heads=1, fusion_layers=1, item_layers=1, bundle_layers=1)
    torch.manual_seed(2)
    model = BuntModel(small_catalog.n_items, small_catalog.n_attributes,
                      small_catalog.n_categories, hp).double()
    h = history(0, [0, 1, 4], [2, 3], [1, 5])
    inst = sample_cloze_instance(h, small_catalog, hp, seed=5)
    active = inst.state.active_slots

    def loss_fn():
        parts = offline_loss(inst, model)
        enc = model.encode_state(inst.state)
        pol = model.policies(enc, active)
        extra = pol.p_manage + model.manager_value(enc, active)
        for sid in active:  # pull every value head into the graph
            row = enc.row(sid)
            extra = extra + model.v_i(row).squeeze(-1)
            extra = extra + model.v_a(row).squeeze(-1) + model.v_c(row).squeeze(-1)
        return parts.total + extra

    max_rel, n_checked, failures = finite_difference_audit(model, loss_fn)
    assert n_checked > 200
    assert not failures, failures[:5]
    assert max_rel <= 1e-4


def test_gradients_returns_every_parameter(model, state):
    enc = model.encode_state(state)
    loss = model.manager_value(enc, state.active_slots)
    grads = gradients(loss, model)
    assert set(grads) == {n for n, _ in model.named_parameters()}
    vm_grads = [g for n, g in grads.items() if n.startswith("v_m")]
    assert any(bool((g != 0).any()) for g in vm_grads)


def test_manager_state_vector_concatenates_log_and_mean_row(model, state):
    enc = model.encode_state(state)
    vec = manager_state_vector(enc, state.active_slots)
    assert vec.shape == (2 * HP.d,)
    assert torch.equal(vec[: HP.d], enc.result_vec)
    assert torch.allclose(vec[HP.d:], enc.o.mean(dim=0), atol=1e-6)


def test_checkpoint_roundtrip(model, tmp_path):
    path = tmp_path / "model.pt"
    save_checkpoint(model, path, extra={"note": "roundtrip"})
    clone = load_checkpoint(path)
    assert clone.hp == model.hp
    ours, theirs = model.state_dict(), clone.state_dict()
    assert set(ours) == set(theirs)
    for k in ours:
        assert torch.equal(ours[k], theirs[k]), k


def test_checkpoint_shape_mismatch_fails_loudly(model, tmp_path):
    path = tmp_path / "model.pt"
    save_checkpoint(model, path)
    payload = torch.load(path, weights_only=False)
    payload["vocab"]["n_items"] += 3
    broken = tmp_path / "broken.pt"
    torch.save(payload, broken)
    with pytest.raises(CheckpointError):
        load_checkpoint(broken)


def test_checkpoint_rejects_foreign_files(tmp_path):
    junk = tmp_path / "junk.pt"
    junk.write_text("not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(junk)
    other = tmp_path / "other.pt"
    torch.save({"format": "something-else"}, other)
    with pytest.raises(CheckpointError):
        load_checkpoint(other)


def test_same_seed_same_model(small_catalog, state):
    torch.manual_seed(7)
    m1 = BuntModel(small_catalog.n_items, small_catalog.n_attributes,
                   small_catalog.n_categories, HP)
    torch.manual_seed(7)
    m2 = BuntModel(small_catalog.n_items, small_catalog.n_attributes,
                   small_catalog.n_categories, HP)
    for k, v in m1.state_dict().items():
        assert torch.equal(v, m2.state_dict()[k]), k
    p1 = m1.policies(m1.encode_state(state), state.active_slots)
    p2 = m2.policies(m2.encode_state(state), state.active_slots)
    assert torch.equal(p1.p_manage, p2.p_manage)


def test_large_bundle_history_truncates_deterministically(model):
    big = Bundle.of(range(6))  # cap below bundle size to force sampling
    hp_small_cap = Hyperparameters(d=16, heads=2, max_bundle_size=4)
    torch.manual_seed(0)
    m = BuntModel(6, 4, 2, hp_small_cap)
    a = m.encode_history([big])
    b = m.encode_history([big])
    assert torch.equal(a, b)
    assert a.shape == (1, 16)
    assert model.encode_history([big]).shape == (1, 16)


def test_hyperparameter_validation():
    with pytest.raises(ModelError):
        Hyperparameters(d=10, heads=4)
    with pytest.raises(ModelError):
        Hyperparameters(fusion_layers=3)
    with pytest.raises(ModelError):
        Hyperparameters(manage_aggregate="median")
    with pytest.raises(ModelError):
        Hyperparameters(mask_ratio=1.5)


def test_mask_item_slot_context_is_what_policies_consume(model, small_catalog):
    closed = {0: SlotContext(slot_id=0, accepted_item=2, active=False),
              1: SlotContext(slot_id=1)}
    e_i, _, _, ids = model.embed_short_term(closed)
    assert ids == (0, 1)
    assert torch.equal(e_i[0], model.item_emb.weight[2])
    assert torch.equal(e_i[1], model.item_emb.weight[model.item_mask_id])
    assert SlotContext(slot_id=1).accepted_item == MASK_ITEM

"""Offline cloze pre-training: masked partial bundles and the multi-task loss.

Each instance hides k items of a sampled partial bundle behind MASK slots and
drops each tag from the visible context with probability rho; the model learns
to recover the hidden items and tags and to judge, per slot, whether
recommending would beat asking (the manage label).
"""
from __future__ import annotations

import copy
import math
import random
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Callable, Mapping, Sequence

import torch
from torch import Tensor

from .data import Bundle, Catalog, DatasetSplit, Partition, UserHistory
from .env import ConversationState, MASK_ITEM, SlotContext
from .model import BuntModel, Hyperparameters


class PretrainError(RuntimeError):
    pass


@dataclass(frozen=True)
class ClozeInstance:
    """A masked partial bundle posed as a mid-conversation state.

    Visible items sit in closed slots, masked ones in active MASK slots; both
    kinds carry their surviving (un-dropped) tags as accepted context. Pools
    stay at full universes, so head softmaxes are unmasked during training.
    """

    state: ConversationState
    masked_slots: tuple[int, ...]
    item_labels: Mapping[int, int]
    attr_labels: Mapping[int, frozenset[int]]
    cat_labels: Mapping[int, frozenset[int]]


def sample_cloze_instance(
    history: UserHistory,
    catalog: Catalog,
    hp: Hyperparameters,
    seed: int | random.Random,
) -> ClozeInstance:
    """Draw one training instance from a user's offline bundles."""
    rng = seed if isinstance(seed, random.Random) else random.Random(seed)
    if len(history.bundles) < 2:
        raise PretrainError(f"user {history.user} needs >= 2 bundles for a cloze instance")
    target_idx = rng.randrange(len(history.bundles))
    target = history.bundles[target_idx]
    encoder_input = tuple(
        b for j, b in enumerate(history.bundles) if j != target_idx
    )
    k = min(rng.randint(1, hp.k), len(target))
    l_hi = min(len(target), hp.max_bundle_size)
    l = rng.randint(k, l_hi)
    partial = rng.sample(target.sorted_items(), l)
    masked_positions = set(rng.sample(range(l), k))

    slots: dict[int, SlotContext] = {}
    item_labels: dict[int, int] = {}
    attr_labels: dict[int, frozenset[int]] = {}
    cat_labels: dict[int, frozenset[int]] = {}
    for pos, item in enumerate(partial):
        vis_attrs, hid_attrs = _drop_tags(catalog.attributes_of[item], hp.mask_ratio, rng)
        vis_cats, hid_cats = _drop_tags(catalog.categories_of[item], hp.mask_ratio, rng)
        if pos in masked_positions:
            slots[pos] = SlotContext(
                slot_id=pos,
                accepted_item=MASK_ITEM,
                accepted_attributes=vis_attrs,
                accepted_categories=vis_cats,
            )
            item_labels[pos] = item
            attr_labels[pos] = hid_attrs
            cat_labels[pos] = hid_cats
        else:
            slots[pos] = SlotContext(
                slot_id=pos,
                accepted_item=item,
                accepted_attributes=vis_attrs,
                accepted_categories=vis_cats,
                active=False,
            )
    state = ConversationState(
        user=history.user,
        history=encoder_input,
        catalog=catalog,
        k=hp.k,
        max_rounds=hp.max_rounds,
        round=1,
        slots=MappingProxyType(slots),
        active_slots=tuple(sorted(masked_positions)),
        result_log=(),
        proposed_items=frozenset(),
        killed_items=frozenset(),
        rejected_attributes=frozenset(),
        rejected_categories=frozenset(),
        asked_attributes=MappingProxyType({}),
        asked_categories=MappingProxyType({}),
    )
    return ClozeInstance(
        state=state,
        masked_slots=tuple(sorted(masked_positions)),
        item_labels=item_labels,
        attr_labels=attr_labels,
        cat_labels=cat_labels,
    )


def _drop_tags(
    tags: frozenset[int], rho: float, rng: random.Random
) -> tuple[frozenset[int], frozenset[int]]:
    hidden = {t for t in sorted(tags) if rng.random() < rho}
    return frozenset(tags - hidden), frozenset(hidden)


# ---------------------------------------------------------------------------
# Tag weights
# ---------------------------------------------------------------------------

WEIGHT_CLIP = (0.1, 10.0)


@dataclass(frozen=True)
class TagWeights:
    attrs: Mapping[int, float]
    cats: Mapping[int, float]

    @staticmethod
    def uniform(catalog: Catalog) -> "TagWeights":
        return TagWeights(
            attrs={a: 1.0 for a in range(catalog.n_attributes)},
            cats={c: 1.0 for c in range(catalog.n_categories)},
        )


def compute_tag_weights(
    histories: Mapping[int, Sequence[Bundle]] | Sequence[UserHistory],
    catalog: Catalog,
) -> TagWeights:
    """Clipped inverse-frequency weights, normalized to mean 1 over seen tags;
    never-observed tags get the clip ceiling over the same normalizer."""
    if isinstance(histories, Mapping):
        bundle_lists = list(histories.values())
    else:
        bundle_lists = [h.bundles for h in histories]
    if not any(bundle_lists):
        raise PretrainError("cannot compute tag weights on an empty corpus")
    attr_freq: dict[int, int] = {}
    cat_freq: dict[int, int] = {}
    for bundles in bundle_lists:
        for bundle in bundles:
            for item in bundle:
                for a in catalog.attributes_of[item]:
                    attr_freq[a] = attr_freq.get(a, 0) + 1
                for c in catalog.categories_of[item]:
                    cat_freq[c] = cat_freq.get(c, 0) + 1
    return TagWeights(
        attrs=_weights_from(attr_freq, catalog.n_attributes),
        cats=_weights_from(cat_freq, catalog.n_categories),
    )


def _weights_from(freq: dict[int, int], vocab: int) -> dict[int, float]:
    lo, hi = WEIGHT_CLIP
    if not freq:
        return {g: 1.0 for g in range(vocab)}
    clipped = {g: min(max(1.0 / f, lo), hi) for g, f in freq.items()}
    z = sum(clipped.values()) / len(clipped)
    out = {g: w / z for g, w in clipped.items()}
    for g in range(vocab):
        out.setdefault(g, hi / z)
    return out


# ---------------------------------------------------------------------------
# Offline loss
# ---------------------------------------------------------------------------

@dataclass
class LossParts:
    total: Tensor
    rec: Tensor
    attr: Tensor
    cate: Tensor
    conv: Tensor


def offline_loss(
    instance: ClozeInstance,
    model: BuntModel,
    weights: TagWeights | None = None,
) -> LossParts:
    """Sum-formulated multi-task loss for one instance.

    Manage labels are recomputed from the current model's argmaxes without
    gradient flow: 1 when the item head already hits the hidden item, 0 when a
    tag head hits a hidden tag instead, -1 (excluded) otherwise.
    """
    if not instance.masked_slots:
        raise PretrainError("cloze instance has no masked slots")
    if weights is None:
        weights = TagWeights.uniform(instance.state.catalog)
    encoded = model.encode_state(instance.state)
    dtype = encoded.o.dtype
    zero = torch.zeros((), dtype=dtype)
    l_rec, l_attr, l_cate, l_conv = zero, zero.clone(), zero.clone(), zero.clone()
    for sid in instance.masked_slots:
        o_x = encoded.row(sid)
        item_logp = torch.log_softmax(model.pi_item(o_x), dim=-1)
        l_rec = l_rec - item_logp[instance.item_labels[sid]]
        attr_logp = torch.log_softmax(model.pi_attr(o_x), dim=-1) if model.n_attrs else None
        for a in sorted(instance.attr_labels[sid]):
            l_attr = l_attr - weights.attrs[a] * attr_logp[a]
        cat_logp = torch.log_softmax(model.pi_cat(o_x), dim=-1)
        for c in sorted(instance.cat_labels[sid]):
            l_cate = l_cate - weights.cats[c] * cat_logp[c]
        label = _manage_label(instance, sid, item_logp, attr_logp, cat_logp)
        if label >= 0:
            p = torch.sigmoid(model.pi_m_slot(o_x)).squeeze(-1)
            p = p.clamp(1e-7, 1 - 1e-7)
            target = torch.tensor(float(label), dtype=dtype)
            l_conv = l_conv - (
                target * torch.log(p) + (1 - target) * torch.log(1 - p)
            )
    lam = model.hp.loss_tradeoff
    total = l_rec + lam * (l_attr + l_cate + l_conv)
    return LossParts(total=total, rec=l_rec, attr=l_attr, cate=l_cate, conv=l_conv)


def _manage_label(
    instance: ClozeInstance, sid: int, item_logp: Tensor, attr_logp, cat_logp
) -> int:
    with torch.no_grad():
        if int(item_logp.argmax()) == instance.item_labels[sid]:
            return 1
        attr_hit = (
            attr_logp is not None
            and instance.attr_labels[sid]
            and int(attr_logp.argmax()) in instance.attr_labels[sid]
        )
        cat_hit = (
            instance.cat_labels[sid]
            and int(cat_logp.argmax()) in instance.cat_labels[sid]
        )
        if attr_hit or cat_hit:
            return 0
    return -1


# ---------------------------------------------------------------------------
# Evaluation of cloze instances (masked-item recovery)
# ---------------------------------------------------------------------------

def masked_item_report(model: BuntModel, instances: Sequence[ClozeInstance]) -> dict[str, float]:
    """One-shot recovery quality: per-slot top-1 accuracy and per-instance F1
    of the predicted masked-item set against the hidden one."""
    hits = 0
    total = 0
    f1_sum = 0.0
    with torch.no_grad():
        for inst in instances:
            encoded = model.encode_state(inst.state)
            predicted = set()
            truth = set(inst.item_labels.values())
            for sid in inst.masked_slots:
                guess = int(model.pi_item(encoded.row(sid)).argmax())
                predicted.add(guess)
                hits += int(guess == inst.item_labels[sid])
                total += 1
            inter = len(predicted & truth)
            if inter:
                p = inter / len(predicted)
                r = inter / len(truth)
                f1_sum += 2 * p * r / (p + r)
    n = len(instances)
    return {"top1": hits / max(total, 1), "f1": f1_sum / max(n, 1)}


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class PretrainResult:
    model: BuntModel
    log: list[dict] = field(default_factory=list)


def pretrain(
    split: DatasetSplit,
    catalog: Catalog,
    hp: Hyperparameters,
    seed: int,
    epochs: int = 200,
    patience: int = 30,
    instances_per_user: int = 4,
    eval_instances_per_user: int = 2,
    resample_masks: bool = True,
    stop_at_train_top1: float | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> PretrainResult:
    """Adam training over sampled cloze minibatches with early stopping on the
    held-out-user masked-item F1; returns the best checkpoint by that metric.

    ``resample_masks=True`` draws fresh instances every epoch (masks vary);
    ``False`` fixes one instance set up front and reuses it, which makes the
    train metrics a pure memorization probe of the exact instances trained on.
    """
    users = split.users()
    histories = {
        u: UserHistory(user=u, bundles=tuple(split.offline_histories[u])) for u in users
    }
    trainable = [u for u in users if len(histories[u].bundles) >= 2]
    if not trainable:
        raise PretrainError("no user has enough offline bundles to pre-train on")
    valid_users = [u for u in split.users(Partition.VALID) if u in set(trainable)]

    torch.manual_seed(seed)
    model = BuntModel(catalog.n_items, catalog.n_attributes, catalog.n_categories, hp)
    weights = compute_tag_weights(
        {u: histories[u].bundles for u in trainable}, catalog
    )
    optimizer = torch.optim.Adam(model.parameters(), lr=hp.learning_rate)
    rng = random.Random(seed)

    eval_rng = random.Random(seed + 1)
    fixed_set: list[ClozeInstance] | None = None
    if resample_masks:
        train_probe = _instance_set(
            [histories[u] for u in trainable], catalog, hp, eval_rng, eval_instances_per_user
        )
    else:
        fixed_set = _instance_set(
            [histories[u] for u in trainable], catalog, hp, rng, instances_per_user
        )
        train_probe = fixed_set
    valid_probe = _instance_set(
        [histories[u] for u in valid_users], catalog, hp, eval_rng, eval_instances_per_user
    )

    best_metric = -math.inf
    best_state = copy.deepcopy(model.state_dict())
    best_epoch = 0
    log: list[dict] = []
    for epoch in range(1, epochs + 1):
        if fixed_set is None:
            pool: list[ClozeInstance] = []
            order = trainable[:]
            rng.shuffle(order)
            for u in order:
                for _ in range(instances_per_user):
                    pool.append(sample_cloze_instance(histories[u], catalog, hp, rng))
        else:
            pool = fixed_set[:]
            rng.shuffle(pool)
        epoch_loss = 0.0
        n_instances = 0
        for start in range(0, len(pool), hp.batch_size):
            batch = pool[start : start + hp.batch_size]
            epoch_loss += _train_batch(model, batch, weights, optimizer)
            n_instances += len(batch)

        train_report = masked_item_report(model, train_probe)
        valid_report = masked_item_report(model, valid_probe) if valid_probe else train_report
        entry = {
            "epoch": epoch,
            "loss": epoch_loss / max(n_instances, 1),
            "train_top1": train_report["top1"],
            "train_f1": train_report["f1"],
            "valid_top1": valid_report["top1"],
            "valid_f1": valid_report["f1"],
        }
        log.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
        if valid_report["f1"] > best_metric:
            best_metric = valid_report["f1"]
            best_state = copy.deepcopy(model.state_dict())
            best_epoch = epoch
        if stop_at_train_top1 is not None and train_report["top1"] >= stop_at_train_top1:
            best_state = copy.deepcopy(model.state_dict())
            break
        if epoch - best_epoch >= patience:
            break
    model.load_state_dict(best_state)
    return PretrainResult(model=model, log=log)


def _instance_set(histories, catalog, hp, rng, per_user) -> list[ClozeInstance]:
    out = []
    for h in histories:
        if len(h.bundles) < 2:
            continue
        for _ in range(per_user):
            out.append(sample_cloze_instance(h, catalog, hp, rng))
    return out


def _train_batch(model, batch, weights, optimizer) -> float:
    optimizer.zero_grad()
    total = None
    for inst in batch:
        parts = offline_loss(inst, model, weights)
        total = parts.total if total is None else total + parts.total
    if not torch.isfinite(total):
        raise PretrainError(f"offline loss diverged to {float(total)}")
    total.backward()
    optimizer.step()
    return float(total.detach())

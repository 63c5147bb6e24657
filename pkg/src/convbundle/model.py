"""Hierarchical encoder, slot-fusion decoder, and the five policy heads.

Long-term preferences come from a two-level transformer over history bundles
(items -> bundle vectors -> user matrix E_u, no positional embeddings).
Short-term slot contexts are embedded per slot, fused with E_u through
self-attention + cross-attention layers, and read out by policy heads:
manage (recommend-vs-ask), item, attribute, category, plus value heads.
"""
from __future__ import annotations

import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import torch
from torch import Tensor, nn

from .data import MAX_BUNDLE_SIZE, Bundle
from .env import (
    MASK_ITEM,
    Ask,
    ConversationState,
    ContractViolation,
    Recommend,
    ResultId,
    SlotContext,
)

RESULT_VOCAB = (
    ResultId.REC_SUC,
    ResultId.REC_FAIL,
    ResultId.ASK_SUC,
    ResultId.ASK_FAIL,
    ResultId.BUNDLE_SUC,
)
RESULT_INDEX = {r: i for i, r in enumerate(RESULT_VOCAB)}
EMPTY_LOG_INDEX = len(RESULT_VOCAB)

BACKBONE = "backbone"
HEAD_M = "manager"
HEAD_I = "item"
HEAD_A = "attribute"
HEAD_C = "category"
ALL_GROUPS = (BACKBONE, HEAD_M, HEAD_I, HEAD_A, HEAD_C)


class ModelError(ValueError):
    """Configuration or checkpoint problem."""


@dataclass(frozen=True)
class Hyperparameters:
    d: int = 32
    fusion_layers: int = 1
    heads: int = 1
    item_layers: int = 1
    bundle_layers: int = 1
    k: int = 2
    max_rounds: int = 10
    mask_ratio: float = 0.5
    loss_tradeoff: float = 0.1
    max_bundle_size: int = MAX_BUNDLE_SIZE
    learning_rate: float = 1e-3
    batch_size: int = 32
    history_limit: int = 50
    manage_aggregate: str = "mean"  # mean | max | first

    def __post_init__(self) -> None:
        if self.d % self.heads:
            raise ModelError(f"hidden size {self.d} not divisible by {self.heads} heads")
        for name in ("fusion_layers", "heads", "item_layers", "bundle_layers"):
            if getattr(self, name) not in (1, 2, 4):
                raise ModelError(f"{name} must be one of 1, 2, 4")
        if self.manage_aggregate not in ("mean", "max", "first"):
            raise ModelError(f"unknown manage aggregate {self.manage_aggregate!r}")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ModelError("mask ratio must lie in [0, 1]")


def _mlp(d_in: int, d_hidden: int, d_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, d_hidden), nn.ReLU(), nn.Linear(d_hidden, d_out))


class EncoderLayer(nn.Module):
    """Post-LN self-attention block; no positional information anywhere."""

    def __init__(self, d: int, heads: int):
        super().__init__()
        self.attn = nn.MultiheadAttention(d, heads, batch_first=True)
        self.ln1 = nn.LayerNorm(d)
        self.ff = nn.Sequential(nn.Linear(d, 2 * d), nn.GELU(), nn.Linear(2 * d, d))
        self.ln2 = nn.LayerNorm(d)

    def forward(self, x: Tensor, key_padding_mask: Tensor | None = None) -> Tensor:
        h, _ = self.attn(
            x, x, x, key_padding_mask=key_padding_mask, need_weights=False
        )
        x = self.ln1(x + h)
        return self.ln2(x + self.ff(x))


class FusionLayer(nn.Module):
    """Tag injection + LayerNorm, slot self-attention, cross-attention to E_u."""

    def __init__(self, d: int, heads: int):
        super().__init__()
        self.w_attr = nn.Linear(d, d, bias=False)
        self.w_cat = nn.Linear(d, d, bias=False)
        self.inject_ln = nn.LayerNorm(d)
        self.self_attn = nn.MultiheadAttention(d, heads, batch_first=True)
        self.ln1 = nn.LayerNorm(d)
        self.cross_attn = nn.MultiheadAttention(d, heads, batch_first=True)
        self.ln2 = nn.LayerNorm(d)
        self.ff = nn.Sequential(nn.Linear(d, 2 * d), nn.GELU(), nn.Linear(2 * d, d))
        self.ln3 = nn.LayerNorm(d)

    def forward(self, o: Tensor, e_attr: Tensor, e_cat: Tensor, e_u: Tensor) -> Tensor:
        o = self.inject_ln(o + self.w_attr(e_attr) + self.w_cat(e_cat))
        h, _ = self.self_attn(o, o, o, need_weights=False)
        o = self.ln1(o + h)
        h, _ = self.cross_attn(o, e_u, e_u, need_weights=False)
        o = self.ln2(o + h)
        return self.ln3(o + self.ff(o))


@dataclass
class EncodedState:
    """Fused slot rows plus the result-log vector and the pools for masking."""

    o: Tensor  # (n_slots, d), rows in slot_id order
    result_vec: Tensor  # (d,)
    slot_ids: tuple[int, ...]
    item_pools: Mapping[int, frozenset[int]] = field(default_factory=dict)
    attr_pools: Mapping[int, frozenset[int]] = field(default_factory=dict)
    cat_pools: Mapping[int, frozenset[int]] = field(default_factory=dict)

    def row(self, slot_id: int) -> Tensor:
        return self.o[self.slot_ids.index(slot_id)]

    def detached(self) -> "EncodedState":
        return EncodedState(
            o=self.o.detach().clone(),
            result_vec=self.result_vec.detach().clone(),
            slot_ids=self.slot_ids,
            item_pools=dict(self.item_pools),
            attr_pools=dict(self.attr_pools),
            cat_pools=dict(self.cat_pools),
        )


@dataclass
class PolicyOutput:
    """Round-level manage probability plus per-active-slot head distributions.

    Logit tensors cover the full vocabulary with out-of-pool entries at -inf,
    so softmax puts exactly zero mass outside the candidate pools.
    """

    p_manage: Tensor  # scalar in (0,1): probability of RECOMMEND
    slot_manage: dict[int, Tensor]
    slot_beta: dict[int, Tensor]
    item_logits: dict[int, Tensor]
    attr_logits: dict[int, Tensor]
    cat_logits: dict[int, Tensor]

    def item_probs(self, slot_id: int) -> Tensor:
        return torch.softmax(self.item_logits[slot_id], dim=-1)

    def attr_probs(self, slot_id: int) -> Tensor:
        return torch.softmax(self.attr_logits[slot_id], dim=-1)

    def cat_probs(self, slot_id: int) -> Tensor:
        return torch.softmax(self.cat_logits[slot_id], dim=-1)


class BuntModel(nn.Module):
    """The full network; parameters partition into a backbone plus four heads."""

    def __init__(self, n_items: int, n_attrs: int, n_cats: int, hp: Hyperparameters):
        super().__init__()
        if n_items < 1:
            raise ModelError("need at least one item")
        self.hp = hp
        self.n_items = n_items
        self.n_attrs = n_attrs
        self.n_cats = n_cats
        d = hp.d
        # reserved rows: items get MASK then PAD, tags get PAD
        self.item_mask_id = n_items
        self.item_pad_id = n_items + 1
        self.attr_pad_id = n_attrs
        self.cat_pad_id = n_cats
        self.item_emb = nn.Embedding(n_items + 2, d)
        self.attr_emb = nn.Embedding(n_attrs + 1, d)
        self.cat_emb = nn.Embedding(n_cats + 1, d)
        self.result_emb = nn.Embedding(len(RESULT_VOCAB) + 1, d)
        self.item_encoder = nn.ModuleList(EncoderLayer(d, hp.heads) for _ in range(hp.item_layers))
        self.bundle_encoder = nn.ModuleList(
            EncoderLayer(d, hp.heads) for _ in range(hp.bundle_layers)
        )
        self.fusion = nn.ModuleList(FusionLayer(d, hp.heads) for _ in range(hp.fusion_layers))
        # heads: all 2-layer ReLU perceptrons with hidden size d
        self.pi_m_result = _mlp(d, d, 1)
        self.pi_m_slot = _mlp(d, d, 1)
        self.gate = _mlp(2 * d, d, 1)
        self.v_m = _mlp(2 * d, d, 1)
        self.pi_item = _mlp(d, d, n_items)
        self.v_i = _mlp(d, d, 1)
        self.pi_attr = _mlp(d, d, n_attrs)
        self.v_a = _mlp(d, d, 1)
        self.pi_cat = _mlp(d, d, n_cats)
        self.v_c = _mlp(d, d, 1)

    # -- parameter partition ------------------------------------------------

    _GROUP_PREFIXES = {
        BACKBONE: (
            "item_emb", "attr_emb", "cat_emb", "result_emb",
            "item_encoder", "bundle_encoder", "fusion",
        ),
        HEAD_M: ("pi_m_result", "pi_m_slot", "gate", "v_m"),
        HEAD_I: ("pi_item", "v_i"),
        HEAD_A: ("pi_attr", "v_a"),
        HEAD_C: ("pi_cat", "v_c"),
    }

    def group_of(self, param_name: str) -> str:
        prefix = param_name.split(".", 1)[0]
        for group, prefixes in self._GROUP_PREFIXES.items():
            if prefix in prefixes:
                return group
        raise ModelError(f"parameter {param_name} belongs to no group")

    def group_parameters(self, group: str) -> list[nn.Parameter]:
        return [p for n, p in self.named_parameters() if self.group_of(n) == group]

    def set_trainable(self, groups: Iterable[str]) -> None:
        """Freeze everything outside ``groups`` (requires_grad=False)."""
        wanted = set(groups)
        unknown = wanted - set(ALL_GROUPS)
        if unknown:
            raise ModelError(f"unknown parameter groups {sorted(unknown)}")
        for name, p in self.named_parameters():
            p.requires_grad_(self.group_of(name) in wanted)

    # -- encoding -----------------------------------------------------------

    def encode_history(self, bundles: Sequence[Bundle]) -> Tensor:
        """Hierarchical encoding of history bundles into E_u (N_u x d)."""
        if not bundles:
            raise ModelError("history must contain at least one bundle")
        bundles = list(bundles)[-self.hp.history_limit:]
        cap = self.hp.max_bundle_size
        rng = random.Random(0)
        rows = []
        for b in bundles:
            items = b.sorted_items()
            if len(items) > cap:
                items = sorted(rng.sample(items, cap))
            rows.append(items)
        width = max(len(r) for r in rows)
        device = self.item_emb.weight.device
        ids = torch.full((len(rows), width), self.item_pad_id, dtype=torch.long, device=device)
        pad = torch.ones((len(rows), width), dtype=torch.bool, device=device)
        for i, r in enumerate(rows):
            ids[i, : len(r)] = torch.tensor(r, dtype=torch.long, device=device)
            pad[i, : len(r)] = False
        x = self.item_emb(ids)
        for layer in self.item_encoder:
            x = layer(x, key_padding_mask=pad)
        keep = (~pad).unsqueeze(-1).to(x.dtype)
        pooled = (x * keep).sum(dim=1) / keep.sum(dim=1)
        y = pooled.unsqueeze(0)
        for layer in self.bundle_encoder:
            y = layer(y)
        return y.squeeze(0)

    def embed_short_term(
        self, slots: Mapping[int, SlotContext]
    ) -> tuple[Tensor, Tensor, Tensor, tuple[int, ...]]:
        """Per-slot item/attribute/category rows, in slot_id order."""
        slot_ids = tuple(sorted(slots))
        device = self.item_emb.weight.device
        item_ids = []
        for sid in slot_ids:
            ctx = slots[sid]
            item_ids.append(self.item_mask_id if ctx.accepted_item == MASK_ITEM else ctx.accepted_item)
        e_i = self.item_emb(torch.tensor(item_ids, dtype=torch.long, device=device))
        e_a = torch.stack(
            [self._mean_tag(self.attr_emb, slots[s].accepted_attributes, self.attr_pad_id)
             for s in slot_ids]
        )
        e_c = torch.stack(
            [self._mean_tag(self.cat_emb, slots[s].accepted_categories, self.cat_pad_id)
             for s in slot_ids]
        )
        return e_i, e_a, e_c, slot_ids

    def _mean_tag(self, table: nn.Embedding, tags: frozenset[int], pad_id: int) -> Tensor:
        device = table.weight.device
        if not tags:
            return table(torch.tensor(pad_id, device=device))
        ids = torch.tensor(sorted(tags), dtype=torch.long, device=device)
        return table(ids).mean(dim=0)

    def fuse(self, e_u: Tensor, e_i: Tensor, e_a: Tensor, e_c: Tensor) -> Tensor:
        """Run the fusion stack; returns O^L with one row per slot."""
        o = e_i.unsqueeze(0)
        e_a = e_a.unsqueeze(0)
        e_c = e_c.unsqueeze(0)
        e_u = e_u.unsqueeze(0)
        for layer in self.fusion:
            o = layer(o, e_a, e_c, e_u)
        return o.squeeze(0)

    def encode_result_log(self, log: Sequence[ResultId]) -> Tensor:
        device = self.result_emb.weight.device
        if not log:
            return self.result_emb(torch.tensor(EMPTY_LOG_INDEX, device=device))
        ids = torch.tensor([RESULT_INDEX[r] for r in log], dtype=torch.long, device=device)
        return self.result_emb(ids).mean(dim=0)

    def encode_state(self, state: ConversationState) -> EncodedState:
        e_u = self.encode_history(state.history)
        e_i, e_a, e_c, slot_ids = self.embed_short_term(state.slots)
        o = self.fuse(e_u, e_i, e_a, e_c)
        return EncodedState(
            o=o,
            result_vec=self.encode_result_log(state.result_log),
            slot_ids=slot_ids,
            item_pools={s: state.item_pool(s) for s in state.active_slots},
            attr_pools={s: state.attr_pool(s) for s in state.active_slots},
            cat_pools={s: state.cat_pool(s) for s in state.active_slots},
        )

    # -- policy heads ---------------------------------------------------------

    def slot_manage_prob(self, result_vec: Tensor, o_x: Tensor) -> tuple[Tensor, Tensor]:
        """Gated per-slot P(recommend): beta * head(result log) + (1-beta) * head(slot)."""
        beta = torch.sigmoid(self.gate(torch.cat([result_vec, o_x]))).squeeze(-1)
        p_result = torch.sigmoid(self.pi_m_result(result_vec)).squeeze(-1)
        p_slot = torch.sigmoid(self.pi_m_slot(o_x)).squeeze(-1)
        return beta * p_result + (1 - beta) * p_slot, beta

    def masked_item_logits(self, o_x: Tensor, pool: frozenset[int]) -> Tensor:
        return _mask_logits(self.pi_item(o_x), pool, self.n_items)

    def masked_attr_logits(self, o_x: Tensor, pool: frozenset[int]) -> Tensor:
        return _mask_logits(self.pi_attr(o_x), pool, self.n_attrs)

    def masked_cat_logits(self, o_x: Tensor, pool: frozenset[int]) -> Tensor:
        return _mask_logits(self.pi_cat(o_x), pool, self.n_cats)

    def policies(self, encoded: EncodedState, active_slots: Sequence[int]) -> PolicyOutput:
        if not active_slots:
            raise ContractViolation("no active slots to act on")
        slot_manage: dict[int, Tensor] = {}
        slot_beta: dict[int, Tensor] = {}
        item_logits: dict[int, Tensor] = {}
        attr_logits: dict[int, Tensor] = {}
        cat_logits: dict[int, Tensor] = {}
        for sid in active_slots:
            o_x = encoded.row(sid)
            p, beta = self.slot_manage_prob(encoded.result_vec, o_x)
            slot_manage[sid] = p
            slot_beta[sid] = beta
            # an empty pool yields an all -inf row; selection guards against
            # actually drawing from one, so the other heads stay usable
            item_logits[sid] = self.masked_item_logits(o_x, encoded.item_pools.get(sid))
            attr_logits[sid] = self.masked_attr_logits(o_x, encoded.attr_pools.get(sid))
            cat_logits[sid] = self.masked_cat_logits(o_x, encoded.cat_pools.get(sid))
        probs = torch.stack([slot_manage[s] for s in active_slots])
        if self.hp.manage_aggregate == "mean":
            p_manage = probs.mean()
        elif self.hp.manage_aggregate == "max":
            p_manage = probs.max()
        else:
            p_manage = probs[0]
        return PolicyOutput(
            p_manage=p_manage,
            slot_manage=slot_manage,
            slot_beta=slot_beta,
            item_logits=item_logits,
            attr_logits=attr_logits,
            cat_logits=cat_logits,
        )

    def manager_value(self, encoded: EncodedState, active_slots: Sequence[int]) -> Tensor:
        return self.v_m(manager_state_vector(encoded, active_slots)).squeeze(-1)


def manager_state_vector(encoded: EncodedState, active_slots: Sequence[int]) -> Tensor:
    rows = torch.stack([encoded.row(s) for s in active_slots])
    return torch.cat([encoded.result_vec, rows.mean(dim=0)])


def _mask_logits(logits: Tensor, pool: frozenset[int] | None, vocab: int) -> Tensor:
    """Force out-of-pool logits to -inf; None means the full vocabulary."""
    if pool is None or len(pool) == vocab:
        return logits
    mask = torch.zeros(vocab, dtype=torch.bool, device=logits.device)
    if pool:
        mask[sorted(pool)] = True
    return logits.masked_fill(~mask, float("-inf"))


# ---------------------------------------------------------------------------
# Action selection
# ---------------------------------------------------------------------------

def select_actions(
    policy: PolicyOutput,
    active_slots: Sequence[int],
    mode: str,
    sampling: str = "GREEDY",
    generator: torch.Generator | None = None,
) -> Recommend | Ask:
    """Turn head distributions into a valid round action.

    RECOMMEND picks per slot in order, excluding items already chosen this
    round; GREEDY breaks ties by smallest id, SAMPLE draws from the
    renormalized masked distribution.
    """
    if mode not in ("RECOMMEND", "ASK"):
        raise ModelError(f"unknown action mode {mode!r}")
    if sampling not in ("GREEDY", "SAMPLE"):
        raise ModelError(f"unknown sampling mode {sampling!r}")
    if mode == "RECOMMEND":
        chosen: dict[int, int] = {}
        used: set[int] = set()
        for sid in active_slots:
            logits = policy.item_logits[sid].clone()
            if used:
                logits[sorted(used)] = float("-inf")
            if torch.isinf(logits).all():
                raise ContractViolation(
                    f"slot {sid}: fewer distinct in-pool items than active slots"
                )
            chosen[sid] = _pick(logits, sampling, generator)
            used.add(chosen[sid])
        return Recommend(chosen)
    questions: dict[int, tuple[int, int]] = {}
    for sid in active_slots:
        for name, logits in (("attribute", policy.attr_logits[sid]),
                             ("category", policy.cat_logits[sid])):
            if torch.isinf(logits).all():
                raise ContractViolation(f"slot {sid} has an empty {name} pool")
        questions[sid] = (
            _pick(policy.attr_logits[sid], sampling, generator),
            _pick(policy.cat_logits[sid], sampling, generator),
        )
    return Ask(questions)


def _pick(logits: Tensor, sampling: str, generator: torch.Generator | None) -> int:
    if sampling == "GREEDY":
        return int(torch.argmax(logits).item())  # argmax returns the first max: smallest id
    probs = torch.softmax(logits, dim=-1)
    return int(torch.multinomial(probs, 1, generator=generator).item())


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

def gradients(loss: Tensor, model: BuntModel) -> dict[str, Tensor]:
    """Exact per-parameter gradients of a scalar loss; frozen parameters get
    exact zeros."""
    named = list(model.named_parameters())
    trainable = [(n, p) for n, p in named if p.requires_grad]
    if trainable:
        grads = torch.autograd.grad(
            loss, [p for _, p in trainable], allow_unused=True, retain_graph=False
        )
    else:
        grads = ()
    by_name = {n: g for (n, _), g in zip(trainable, grads)}
    out: dict[str, Tensor] = {}
    for n, p in named:
        g = by_name.get(n)
        out[n] = torch.zeros_like(p) if g is None else g
    return out


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

class CheckpointError(RuntimeError):
    pass


def save_checkpoint(model: BuntModel, path: str | Path, extra: dict | None = None) -> None:
    payload = {
        "format": "convbundle-checkpoint-v1",
        "hyperparameters": asdict(model.hp),
        "vocab": {"n_items": model.n_items, "n_attrs": model.n_attrs, "n_cats": model.n_cats},
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> BuntModel:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != "convbundle-checkpoint-v1":
        raise CheckpointError(f"{path} is not a recognized checkpoint")
    hp = Hyperparameters(**payload["hyperparameters"])
    vocab = payload["vocab"]
    model = BuntModel(vocab["n_items"], vocab["n_attrs"], vocab["n_cats"], hp)
    try:
        model.load_state_dict(payload["state_dict"], strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint {path} does not fit its declared shapes: {exc}") from exc
    return model

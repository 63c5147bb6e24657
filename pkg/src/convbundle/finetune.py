"""Online fine-tuning: simulator episodes, per-agent buffers, clipped PPO.

The backbone stays frozen; only the manage/item/attribute/category heads and
their value heads move. Episode collection stores detached state vectors, so
ratios are exact against the collection-time distributions.
"""
from __future__ import annotations

import copy
import math
import random
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
from torch import Tensor

from .data import Bundle, Catalog, DatasetSplit, Partition
from .env import (
    Recommend,
    TrajectoryRound,
    high_level_reward,
    init_conversation,
    record_round,
    step_ask,
    step_recommend,
)
from .model import (
    ALL_GROUPS,
    BACKBONE,
    HEAD_A,
    HEAD_C,
    HEAD_I,
    HEAD_M,
    BuntModel,
    manager_state_vector,
    select_actions,
)
from .simulator import SimulatedUser, respond


class FinetuneError(RuntimeError):
    pass


@dataclass(frozen=True)
class PpoConfig:
    clip: float = 0.2
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    epochs: int = 4
    buffer_threshold: int = 512
    gamma: float = 1.0
    learning_rate: float = 1e-3


@dataclass
class TransitionRecord:
    """One agent decision: enough detached context to recompute its policy."""

    state_vec: Tensor  # manager: (2d,) result::mean-slot; others: slot row (d,)
    action: int  # manager: 1=RECOMMEND 0=ASK; others: chosen vocab id
    reward: float
    log_prob: float
    value: float
    done: bool
    candidates: tuple[int, ...] = ()  # in-pool vocab ids at decision time (non-manager)
    result_vec: Tensor | None = None  # manager only: the gate reads both parts
    slot_vec: Tensor | None = None  # manager only
    forced: bool = False  # manager only: the other mode was infeasible
    return_to_go: float = 0.0


@dataclass
class Buffers:
    manager: list[TransitionRecord] = field(default_factory=list)
    item: list[TransitionRecord] = field(default_factory=list)
    attribute: list[TransitionRecord] = field(default_factory=list)
    category: list[TransitionRecord] = field(default_factory=list)

    def named(self) -> dict[str, list[TransitionRecord]]:
        return {
            HEAD_M: self.manager,
            HEAD_I: self.item,
            HEAD_A: self.attribute,
            HEAD_C: self.category,
        }


@dataclass
class EpisodeResult:
    trajectory: list[TrajectoryRound]
    final_reward: float
    rounds: int
    accepted: frozenset[int]


def collect_episode(
    model: BuntModel,
    catalog: Catalog,
    history: Sequence[Bundle],
    sim: SimulatedUser,
    buffers: Buffers,
    generator: torch.Generator,
    user: int = 0,
    reward_metric: str = "f1",
    gamma: float = 1.0,
) -> EpisodeResult:
    """Play one conversation with sampled actions, appending per-agent records.

    When only one of recommend/ask is feasible (too few distinct items, or an
    exhausted tag pool), the manager is forced to the feasible one; forced
    records keep the reward bookkeeping but are excluded from policy updates.
    If neither is feasible the episode ends early with the terminal reward.
    """
    state = init_conversation(
        user=user, history=list(history), catalog=catalog, k=model.hp.k,
        max_rounds=model.hp.max_rounds,
    )
    trajectory: list[TrajectoryRound] = []
    episode: dict[str, list[TransitionRecord]] = {
        g: [] for g in (HEAD_M, HEAD_I, HEAD_A, HEAD_C)
    }
    done = False
    with torch.no_grad():
        while not done:
            encoded = model.encode_state(state).detached()
            active = state.active_slots
            can_rec = len(encoded.item_pools[active[0]]) >= len(active)
            can_ask = all(
                encoded.attr_pools[s] and encoded.cat_pools[s] for s in active
            )
            if not can_rec and not can_ask:
                break
            policy = model.policies(encoded, active)
            p_rec = min(max(float(policy.p_manage), 1e-7), 1 - 1e-7)
            recommend = _bernoulli(p_rec, generator)
            forced = False
            if recommend and not can_rec:
                recommend, forced = False, True
            elif not recommend and not can_ask:
                recommend, forced = True, True
            manager_record = TransitionRecord(
                state_vec=manager_state_vector(encoded, active),
                action=int(recommend),
                reward=0.0,
                log_prob=math.log(p_rec if recommend else 1.0 - p_rec),
                value=float(model.manager_value(encoded, active)),
                done=False,
                result_vec=encoded.result_vec,
                slot_vec=torch.stack([encoded.row(s) for s in active]).mean(dim=0),
                forced=forced,
            )
            mode = "RECOMMEND" if recommend else "ASK"
            action = select_actions(policy, active, mode, "SAMPLE", generator)
            feedback = respond(state, action, sim)
            if isinstance(action, Recommend):
                outcome = step_recommend(state, action, feedback)
                rewards = {"item": dict(outcome.rewards)}
                for sid in active:
                    episode[HEAD_I].append(_slot_record(
                        encoded, sid, action.proposals[sid],
                        policy.item_logits[sid], outcome.rewards[sid],
                        encoded.item_pools[sid], model.v_i,
                    ))
            else:
                outcome = step_ask(state, action, feedback)
                rewards = {
                    "attr": dict(outcome.attr_rewards),
                    "cat": dict(outcome.cat_rewards),
                }
                for sid in active:
                    attr, cat = action.questions[sid]
                    episode[HEAD_A].append(_slot_record(
                        encoded, sid, attr, policy.attr_logits[sid],
                        outcome.attr_rewards[sid], encoded.attr_pools[sid], model.v_a,
                    ))
                    episode[HEAD_C].append(_slot_record(
                        encoded, sid, cat, policy.cat_logits[sid],
                        outcome.cat_rewards[sid], encoded.cat_pools[sid], model.v_c,
                    ))
            trajectory.append(
                record_round(state.round, action, feedback, outcome.result, rewards)
            )
            episode[HEAD_M].append(manager_record)
            state, done = outcome.state, outcome.done

    final_reward = high_level_reward(state, True, sim.target, reward_metric)
    if episode[HEAD_M]:
        episode[HEAD_M][-1].reward = final_reward
        episode[HEAD_M][-1].done = True
    _fill_returns(episode, gamma=gamma)
    buffers.manager.extend(episode[HEAD_M])
    buffers.item.extend(episode[HEAD_I])
    buffers.attribute.extend(episode[HEAD_A])
    buffers.category.extend(episode[HEAD_C])
    return EpisodeResult(
        trajectory=trajectory,
        final_reward=final_reward,
        rounds=state.round - 1,
        accepted=state.accepted_bundle,
    )


def _slot_record(encoded, sid, chosen, logits, reward, pool, value_head) -> TransitionRecord:
    log_probs = torch.log_softmax(logits, dim=-1)
    o_x = encoded.row(sid)
    return TransitionRecord(
        state_vec=o_x,
        action=int(chosen),
        reward=float(reward),
        log_prob=float(log_probs[chosen]),
        value=float(value_head(o_x)),
        done=False,
        candidates=tuple(sorted(pool)),
    )


def _bernoulli(p: float, generator: torch.Generator) -> bool:
    return bool(torch.rand((), generator=generator) < p)


def _fill_returns(episode: dict[str, list[TransitionRecord]], gamma: float) -> None:
    """Within-episode return-to-go per agent stream (default undiscounted)."""
    for records in episode.values():
        running = 0.0
        for rec in reversed(records):
            running = rec.reward + gamma * running
            rec.return_to_go = running


# ---------------------------------------------------------------------------
# PPO update
# ---------------------------------------------------------------------------

_VALUE_HEADS = {HEAD_M: "v_m", HEAD_I: "v_i", HEAD_A: "v_a", HEAD_C: "v_c"}


def _policy_log_prob_and_entropy(
    model: BuntModel, group: str, rec: TransitionRecord
) -> tuple[Tensor, Tensor]:
    if group == HEAD_M:
        p, _ = model.slot_manage_prob(rec.result_vec, rec.slot_vec)
        p = p.clamp(1e-7, 1 - 1e-7)
        log_prob = torch.log(p) if rec.action == 1 else torch.log(1 - p)
        entropy = -(p * torch.log(p) + (1 - p) * torch.log(1 - p))
        return log_prob, entropy
    head = {HEAD_I: model.pi_item, HEAD_A: model.pi_attr, HEAD_C: model.pi_cat}[group]
    vocab = {HEAD_I: model.n_items, HEAD_A: model.n_attrs, HEAD_C: model.n_cats}[group]
    logits = head(rec.state_vec)
    if len(rec.candidates) != vocab:
        mask = torch.ones(vocab, dtype=torch.bool)
        mask[list(rec.candidates)] = False
        logits = logits.masked_fill(mask, float("-inf"))
    log_probs = torch.log_softmax(logits, dim=-1)
    probs = torch.softmax(logits, dim=-1)
    finite = torch.isfinite(log_probs)
    entropy = -(probs[finite] * log_probs[finite]).sum()
    return log_probs[rec.action], entropy


def ppo_update(
    model: BuntModel,
    group: str,
    buffer: list[TransitionRecord],
    cfg: PpoConfig,
    optimizer: torch.optim.Optimizer,
) -> dict[str, float]:
    """Clipped-surrogate update of one head (+ its value head) over a buffer.

    Advantages are return-to-go minus collection-time values, normalized over
    the buffer; the buffer must be cleared by the caller afterwards.
    """
    if not buffer:
        raise FinetuneError("ppo_update called with an empty buffer")
    usable = [r for r in buffer if not r.forced]
    stats = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0, "skipped": 0.0}
    if not usable:
        return stats
    value_head = getattr(model, _VALUE_HEADS[group])
    advantages = torch.tensor([r.return_to_go - r.value for r in usable])
    std = advantages.std(unbiased=False)
    advantages = advantages - advantages.mean()
    if float(std) > 1e-8:
        advantages = advantages / std
    for _ in range(cfg.epochs):
        policy_terms = []
        value_terms = []
        entropy_terms = []
        for rec, adv in zip(usable, advantages):
            log_prob, entropy = _policy_log_prob_and_entropy(model, group, rec)
            ratio = torch.exp(log_prob - rec.log_prob)
            if not torch.isfinite(ratio):
                stats["skipped"] += 1
                continue
            surrogate = torch.minimum(
                ratio * adv, ratio.clamp(1 - cfg.clip, 1 + cfg.clip) * adv
            )
            value = value_head(rec.state_vec).squeeze(-1)
            policy_terms.append(-surrogate)
            value_terms.append((value - rec.return_to_go) ** 2)
            entropy_terms.append(entropy)
        if not policy_terms:
            raise FinetuneError("every PPO sample had a non-finite ratio")
        policy_loss = torch.stack(policy_terms).mean()
        value_loss = torch.stack(value_terms).mean()
        entropy_bonus = torch.stack(entropy_terms).mean()
        loss = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy_bonus
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        stats["policy_loss"] = float(policy_loss.detach())
        stats["value_loss"] = float(value_loss.detach())
        stats["entropy"] = float(entropy_bonus.detach())
    return stats


# ---------------------------------------------------------------------------
# Outer loop
# ---------------------------------------------------------------------------

@dataclass
class FinetuneResult:
    model: BuntModel
    log: list[dict] = field(default_factory=list)


def finetune(
    model: BuntModel,
    split: DatasetSplit,
    catalog: Catalog,
    seed: int,
    episodes: int = 400,
    cfg: PpoConfig | None = None,
    train_groups: Sequence[str] = (HEAD_M, HEAD_I, HEAD_A, HEAD_C),
    eval_every: int = 100,
    evaluator: Callable[[BuntModel], dict[str, float]] | None = None,
    on_log: Callable[[dict], None] | None = None,
) -> FinetuneResult:
    """Alternate episode collection on ONLINE users with per-buffer PPO updates.

    ``train_groups`` restricts which heads move (the backbone never does).
    With an ``evaluator``, the best checkpoint by its "f1" key is returned,
    otherwise the final parameters.
    """
    cfg = cfg or PpoConfig()
    bad = set(train_groups) - (set(ALL_GROUPS) - {BACKBONE})
    if bad:
        raise FinetuneError(f"cannot fine-tune parameter groups {sorted(bad)}")
    model.set_trainable(train_groups)
    backbone_before = {
        n: p.detach().clone() for n, p in model.named_parameters()
        if model.group_of(n) == BACKBONE
    }
    optimizers = {
        g: torch.optim.Adam(model.group_parameters(g), lr=cfg.learning_rate)
        for g in train_groups
    }
    online_users = split.users(Partition.ONLINE)
    if not online_users:
        raise FinetuneError("ONLINE partition is empty")
    rng = random.Random(seed)
    generator = torch.Generator().manual_seed(seed)
    buffers = Buffers()
    log: list[dict] = []
    best = (-math.inf, None)

    for episode_no in range(1, episodes + 1):
        user = rng.choice(online_users)
        history = split.offline_histories[user]
        sim = SimulatedUser(split.targets[user], catalog)
        collect_episode(model, catalog, history, sim, buffers, generator, user=user)
        for group, buffer in buffers.named().items():
            if len(buffer) < cfg.buffer_threshold:
                continue
            if group in train_groups:
                ppo_update(model, group, buffer, cfg, optimizers[group])
            buffer.clear()
        if evaluator is not None and episode_no % eval_every == 0:
            report = evaluator(model)
            entry = {"episodes": episode_no, **report}
            log.append(entry)
            if on_log is not None:
                on_log(entry)
            if report.get("f1", -math.inf) > best[0]:
                best = (report["f1"], copy.deepcopy(model.state_dict()))

    for name, p in model.named_parameters():
        if model.group_of(name) == BACKBONE:
            if not torch.equal(p.detach(), backbone_before[name]):
                raise FinetuneError(f"backbone parameter {name} moved during fine-tuning")
    if best[1] is not None:
        model.load_state_dict(best[1])
    model.set_trainable(ALL_GROUPS)
    return FinetuneResult(model=model, log=log)


# ---------------------------------------------------------------------------
# Degenerate bandit sanity check
# ---------------------------------------------------------------------------

def bandit_sanity(
    model: BuntModel,
    catalog: Catalog,
    history: Sequence[Bundle],
    seed: int,
    steps: int = 5000,
    cfg: PpoConfig | None = None,
) -> float:
    """Two-action bandit: RECOMMEND always pays 1, ASK pays 0. Trains only the
    manager head on one-step episodes; returns the final P(RECOMMEND)."""
    cfg = cfg or PpoConfig(buffer_threshold=64)
    model.set_trainable([HEAD_M])
    optimizer = torch.optim.Adam(model.group_parameters(HEAD_M), lr=cfg.learning_rate)
    generator = torch.Generator().manual_seed(seed)
    state = init_conversation(0, list(history), catalog, k=model.hp.k)
    with torch.no_grad():
        encoded = model.encode_state(state).detached()
    active = state.active_slots
    slot_vec = torch.stack([encoded.row(s) for s in active]).mean(dim=0)
    state_vec = manager_state_vector(encoded, active)
    buffer: list[TransitionRecord] = []
    p_rec = 0.5
    for _ in range(steps):
        with torch.no_grad():
            p, _ = model.slot_manage_prob(encoded.result_vec, slot_vec)
            p_rec = min(max(float(p), 1e-7), 1 - 1e-7)
            value = float(model.manager_value(encoded, active))
        act = _bernoulli(p_rec, generator)
        reward = 1.0 if act else 0.0
        buffer.append(
            TransitionRecord(
                state_vec=state_vec,
                action=int(act),
                reward=reward,
                log_prob=math.log(p_rec if act else 1.0 - p_rec),
                value=value,
                done=True,
                result_vec=encoded.result_vec,
                slot_vec=slot_vec,
                return_to_go=reward,
            )
        )
        if len(buffer) >= cfg.buffer_threshold:
            ppo_update(model, HEAD_M, buffer, cfg, optimizer)
            buffer.clear()
    model.set_trainable(ALL_GROUPS)
    return p_rec

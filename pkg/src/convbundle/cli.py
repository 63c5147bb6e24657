"""Pipeline driver: synth -> split -> pretrain -> finetune -> eval, plus a
trajectory printer and the HTTP server.

Every subcommand takes --seed, --config <json file>, and --out <dir>. Stages
that consume earlier outputs read them from --data (default: the same
directory synth writes to). Exit status is 0 on success, 1 with a diagnostic
on stderr otherwise; argparse usage errors exit 2.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .data import (
    DataError,
    SyntheticConfig,
    generate_synthetic,
    load_catalog,
    load_interactions,
    load_split,
    save_catalog,
    save_interactions,
    save_split,
    split_leave_one_out,
    Partition,
)
from .env import init_conversation, record_round, step_ask, step_recommend, Recommend
from .evaluation import (
    METRIC_KEYS,
    BuntAllPolicy,
    BuntLearnPolicy,
    FmAllPolicy,
    FmLearnPolicy,
    FreqPolicy,
    OraclePolicy,
    RandomPolicy,
    bundle_metrics,
    choose_action,
    evaluate_one_shot,
    evaluate_policy,
    train_fm,
)
from .model import CheckpointError, Hyperparameters, load_checkpoint, save_checkpoint
from .pretrain import PretrainError, pretrain
from .finetune import FinetuneError, PpoConfig, finetune
from .simulator import SimulatedUser, respond

EVAL_POLICIES = (
    "random", "freq", "oracle", "fm-all", "fm-learn",
    "bunt-all", "bunt-learn", "bunt-one-shot",
)


class CliError(Exception):
    """User-facing failure: printed to stderr, exit status 1."""


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------

def _read_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise CliError(f"missing config file: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"{p}: not valid JSON ({exc})") from exc
    if not isinstance(cfg, dict):
        raise CliError(f"{p}: config must be a JSON object")
    return cfg


def _build(cls, overrides: dict, what: str):
    """Construct a config dataclass from JSON overrides, rejecting unknown keys."""
    known = {f.name for f in dataclasses.fields(cls)}
    bad = set(overrides) - known
    if bad:
        raise CliError(
            f"unknown {what} option(s) {sorted(bad)}; valid: {sorted(known)}"
        )
    return cls(**overrides)


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise CliError(f"missing {what} file: {path}")
    return path


def _load_dataset(data_dir: Path):
    catalog = load_catalog(_require(data_dir / "catalog.jsonl", "catalog"))
    histories, _ = load_interactions(
        _require(data_dir / "interactions.jsonl", "interactions"), catalog
    )
    split = load_split(_require(data_dir / "split.jsonl", "split"), histories)
    return catalog, histories, split


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_network(path: str | Path):
    p = _require(Path(path), "checkpoint")
    try:
        return load_checkpoint(p)
    except CheckpointError as exc:
        raise CliError(str(exc)) from exc


def _build_eval_policy(name: str, args, catalog, split, seed: int):
    """Returns (policy_or_factory, model_or_None). One-shot is handled apart."""
    if name == "random":
        return (lambda s: RandomPolicy(seed=s)), None
    if name == "freq":
        return FreqPolicy(split, catalog), None
    if name == "oracle":
        return OraclePolicy(split.targets), None
    if name in ("fm-all", "fm-learn"):
        fm = train_fm(split, catalog, seed=seed)
        if name == "fm-all":
            return FmAllPolicy(fm), None
        model = _load_network(_need_ckpt(args))
        return FmLearnPolicy(fm, model), model
    model = _load_network(_need_ckpt(args))
    if name == "bunt-all":
        return BuntAllPolicy(model), model
    return BuntLearnPolicy(model), model


def _need_ckpt(args) -> str:
    if not args.ckpt:
        raise CliError(f"policy {args.policy!r} needs --ckpt")
    return args.ckpt


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _build(SyntheticConfig, _read_config(args.config), "synth")
    catalog, histories = generate_synthetic(cfg, seed=args.seed)
    out = _out_dir(args)
    save_catalog(catalog, out / "catalog.jsonl")
    save_interactions(histories, out / "interactions.jsonl")
    print(f"wrote {catalog.n_items} items and {len(histories)} users to {out}")
    return 0


def cmd_split(args) -> int:
    data = Path(args.data)
    catalog = load_catalog(_require(data / "catalog.jsonl", "catalog"))
    histories, dropped = load_interactions(
        _require(data / "interactions.jsonl", "interactions"), catalog
    )
    split = split_leave_one_out(histories, seed=args.seed)
    out = _out_dir(args)
    save_split(split, out / "split.jsonl")
    sizes = {p.value: len(split.users(p)) for p in Partition}
    print(f"split {len(histories)} users ({dropped} dropped): {sizes}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _read_config(args.config)
    hp = _build(Hyperparameters, cfg.get("hyperparameters", {}), "hyperparameter")
    catalog, _, split = _load_dataset(Path(args.data))
    out = _out_dir(args)
    log_path = out / "pretrain_log.jsonl"
    with open(log_path, "w", encoding="utf-8") as fh:
        result = pretrain(
            split, catalog, hp, seed=args.seed,
            epochs=cfg.get("epochs", args.epochs),
            patience=cfg.get("patience", 30),
            instances_per_user=cfg.get("instances_per_user", 4),
            resample_masks=cfg.get("resample_masks", True),
            on_epoch=lambda entry: fh.write(json.dumps(entry) + "\n"),
        )
    ckpt = out / "pretrained.pt"
    save_checkpoint(result.model, ckpt)
    last = result.log[-1] if result.log else {}
    print(f"saved {ckpt} (epochs run: {len(result.log)}, "
          f"last valid_f1: {last.get('valid_f1', float('nan')):.4f}); "
          f"log: {log_path}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _read_config(args.config)
    ppo = _build(PpoConfig, cfg.get("ppo", {}), "ppo")
    catalog, _, split = _load_dataset(Path(args.data))
    model = _load_network(args.ckpt or Path(args.data) / "pretrained.pt")
    out = _out_dir(args)

    def valid_metrics(m) -> dict:
        report = evaluate_policy(
            BuntLearnPolicy(m), split, catalog,
            partition=Partition.VALID, seeds=(args.seed,), k=m.hp.k,
        )
        return {
            "f1": report.mean("f1"),
            "valid_f1": report.mean("f1"),
            "valid_acc": report.mean("accuracy"),
            "avg_rounds": report.mean("avg_rounds"),
        }

    log_path = out / "metrics.jsonl"
    with open(log_path, "w", encoding="utf-8") as fh:
        def on_log(entry: dict) -> None:
            row = {k: entry[k] for k in ("episodes", "valid_f1", "valid_acc", "avg_rounds")}
            fh.write(json.dumps(row) + "\n")
            fh.flush()
            print(f"episodes={row['episodes']} valid_f1={row['valid_f1']:.4f} "
                  f"valid_acc={row['valid_acc']:.4f} avg_rounds={row['avg_rounds']:.2f}")

        result = finetune(
            model, split, catalog, seed=args.seed,
            episodes=cfg.get("episodes", args.episodes),
            cfg=ppo,
            train_groups=tuple(cfg.get("train_groups", ("manager", "item", "attribute", "category"))),
            eval_every=cfg.get("eval_every", 50),
            evaluator=valid_metrics,
            on_log=on_log,
        )
    ckpt = out / "finetuned.pt"
    save_checkpoint(result.model, ckpt)
    print(f"saved {ckpt}; metrics log: {log_path}")
    return 0


def cmd_eval(args) -> int:
    catalog, _, split = _load_dataset(Path(args.data))
    partition = Partition(args.split.upper())
    seeds = tuple(int(s) for s in args.seeds.split(","))
    if args.policy == "bunt-one-shot":
        model = _load_network(_need_ckpt(args))
        report = evaluate_one_shot(model, split, catalog, partition=partition,
                                   seeds=seeds)
    else:
        policy, _ = _build_eval_policy(args.policy, args, catalog, split, args.seed)
        report = evaluate_policy(policy, split, catalog, partition=partition,
                                 seeds=seeds)
    print(f"policy={args.policy} partition={partition.value} "
          f"users={len(split.users(partition))} seeds={list(seeds)}")
    for key, stats in report.summary().items():
        print(f"{key:<12} {stats['mean']:.4f} ± {stats['stderr']:.4f}")
    out = _out_dir(args)
    curve_path = out / f"curve_{args.policy}.csv"
    curve_path.write_text(report.curve_csv())
    print(f"cumulative-accuracy curve: {curve_path}")
    return 0


def cmd_simulate(args) -> int:
    catalog, _, split = _load_dataset(Path(args.data))
    partition = Partition(args.split.upper())
    users = split.users(partition)[: args.users]
    if not users:
        raise CliError(f"partition {partition.value} has no users")
    policy, _ = _build_eval_policy(args.policy, args, catalog, split, args.seed)
    factory = policy if not callable(policy) else policy(args.seed)
    for user in users:
        state = init_conversation(user, list(split.offline_histories[user]),
                                  catalog, k=args.k)
        sim = SimulatedUser(split.targets[user], catalog)
        factory.begin(state)
        print(f"# user {user} target={split.targets[user].sorted_items()}")
        done = False
        while not done:
            action = choose_action(factory, state)
            if action is None:
                break
            feedback = respond(state, action, sim)
            if isinstance(action, Recommend):
                outcome = step_recommend(state, action, feedback)
                rewards = {"item": dict(outcome.rewards)}
            else:
                outcome = step_ask(state, action, feedback)
                rewards = {"attr": dict(outcome.attr_rewards),
                           "cat": dict(outcome.cat_rewards)}
            row = record_round(state.round, action, feedback, outcome.result, rewards)
            print(json.dumps(row.to_json()))
            state, done = outcome.state, outcome.done
        metrics = bundle_metrics(state.accepted_bundle, sim.target)
        print(f"# rounds={state.round - 1} accepted={sorted(state.accepted_bundle)} "
              f"f1={metrics.f1:.4f}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    catalog, _, split = _load_dataset(Path(args.data))
    labels = None
    if args.labels:
        raw = _read_config(args.labels)
        labels = {
            kind: {int(i): str(name) for i, name in table.items()}
            for kind, table in raw.items()
        }
    app = create_app(
        catalog, split,
        checkpoint_path=args.ckpt,
        ttl_seconds=args.ttl,
        trajectory_dir=args.trajectories,
        labels=labels,
    )
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="convbundle",
        description="conversational bundle recommendation workbench",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, needs_data: bool = True) -> None:
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", help="JSON file with stage options")
        p.add_argument("--out", default="data", help="output directory")
        if needs_data:
            p.add_argument("--data", default="data",
                           help="directory holding catalog/interactions/split files")

    p = sub.add_parser("synth", help="generate a synthetic catalog and interactions")
    common(p, needs_data=False)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("split", help="hold one bundle out per user and partition users")
    common(p)
    p.set_defaults(fn=cmd_split)

    p = sub.add_parser("pretrain", help="offline cloze pre-training")
    common(p)
    p.add_argument("--epochs", type=int, default=200)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("finetune", help="online policy-gradient fine-tuning")
    common(p)
    p.add_argument("--ckpt", help="starting checkpoint (default: <data>/pretrained.pt)")
    p.add_argument("--episodes", type=int, default=400)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("eval", help="play a policy against the simulated user")
    common(p)
    p.add_argument("--policy", choices=EVAL_POLICIES, default="bunt-learn")
    p.add_argument("--ckpt", help="checkpoint for network-backed policies")
    p.add_argument("--split", dest="split", default="test",
                   choices=["online", "valid", "test"])
    p.add_argument("--seeds", default="0,1,2", help="comma-separated run seeds")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("simulate", help="print per-round trajectories")
    common(p)
    p.add_argument("--policy", choices=EVAL_POLICIES, default="freq")
    p.add_argument("--ckpt")
    p.add_argument("--split", dest="split", default="test",
                   choices=["online", "valid", "test"])
    p.add_argument("--users", type=int, default=3)
    p.add_argument("--k", type=int, default=2)
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("serve", help="run the HTTP session service")
    common(p)
    p.add_argument("--ckpt", help="default checkpoint for network policies")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--ttl", type=float, default=1800.0, help="session TTL seconds")
    p.add_argument("--trajectories", help="directory for finished-session dumps")
    p.add_argument("--labels", help="JSON file of display names per id table")
    p.set_defaults(fn=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (CliError, DataError, CheckpointError, PretrainError, FinetuneError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

import argparse
import logging
from pathlib import Path

from cli.kg import print_kg_stats
from services.checkpoint import load_checkpoint
from services.config import GradcheckConfig, TrainConfig
from services.dialogue_store import load_dialogues
from services.errors import NumericError
from services.gradcheck import run_gradcheck
from services.kg_store import load_knowledge_graph
from services.trainer import train_loop

logger = logging.getLogger(__name__)


def cmd_train(args: argparse.Namespace) -> int:
    cfg = TrainConfig.load(args.config, seed=args.seed, max_epochs=args.max_epochs, mode=args.mode,
                           workers=args.workers)
    graph = load_knowledge_graph(args.kg)
    print_kg_stats(graph)

    data = Path(args.data)
    train = load_dialogues(data / "train.jsonl", graph.relations)
    valid = load_dialogues(data / "valid.jsonl", graph.relations)
    model = load_checkpoint(args.out, graph) if args.resume else None

    result = train_loop(cfg, train, valid, graph, out_dir=args.out, model=model)
    print(f"best_{result.metric_name}\t{result.best_metric}")
    print(f"best_epoch\t{result.best_epoch}")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    cfg = GradcheckConfig.load(args.config, seed=args.seed, step=args.step, mode=args.mode)
    errors = run_gradcheck(cfg)
    failed = []
    for name, error in errors.items():
        status = "ok" if error < cfg.tolerance else "FAIL"
        if status == "FAIL":
            failed.append(name)
        print(f"{name}\t{error:.3e}\t{status}")
    print(f"max\t{max(errors.values()):.3e}")
    if failed:
        raise NumericError(f"Gradient check failed for: {', '.join(failed)}")
    return 0


def register(subparsers) -> None:
    parser = subparsers.add_parser("train", help="Train end to end and keep the best checkpoint")
    parser.add_argument("--data", required=True, help="Directory with train.jsonl and valid.jsonl")
    parser.add_argument("--kg", required=True, help="Triple TSV")
    parser.add_argument("--config", help="Flat key=value training config")
    parser.add_argument("--out", required=True, help="Checkpoint directory (also receives metrics.tsv)")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--max-epochs", type=int)
    parser.add_argument("--mode", choices=["full", "walk-only"])
    parser.add_argument("--workers", type=int, help="Gradient worker processes; the result does not depend on it")
    parser.add_argument("--resume", action="store_true", help="Start from the checkpoint already in --out")
    parser.set_defaults(handler=cmd_train)

    parser = subparsers.add_parser("gradcheck", help="Finite-difference check of every parameter block")
    parser.add_argument("--config", help="Flat key=value gradcheck config")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--step", type=float, help="Central-difference step h")
    parser.add_argument("--mode", choices=["full", "walk-only"])
    parser.set_defaults(handler=cmd_gradcheck)

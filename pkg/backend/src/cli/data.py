import argparse
import logging
from pathlib import Path

from services.config import SyntheticConfig
from services.dialogue_store import save_dialogues
from services.kg_store import TripleStore
from services.synthetic import gen_synthetic

logger = logging.getLogger(__name__)

TRIPLES_FILE = "triples.tsv"


def cmd_gen(args: argparse.Namespace) -> int:
    cfg = SyntheticConfig.load(args.config, seed=args.seed, response_form=args.response_form)
    dataset = gen_synthetic(cfg, workers=args.workers)
    out = Path(args.out)
    TripleStore(out / TRIPLES_FILE).write(dataset.triples)
    for name, examples in dataset.splits.items():
        save_dialogues(out / f"{name}.jsonl", examples)

    print(f"triples\t{len(dataset.triples)}")
    for name, examples in dataset.splits.items():
        print(f"{name}\t{len(examples)}")
    for kind, count in dataset.counts.items():
        print(f"{kind}\t{count}")
    return 0


def register(subparsers) -> None:
    parser = subparsers.add_parser("gen", help="Generate a synthetic KG and dialogue splits")
    parser.add_argument("--config", help="Flat key=value generator config")
    parser.add_argument("--seed", type=int, help="Overrides the config seed")
    parser.add_argument("--response-form", choices=["semantic", "natural"], help="Overrides response_form")
    parser.add_argument("--out", required=True, help="Output directory")
    parser.add_argument("--workers", type=int, default=1, help="Generation threads; the output does not depend on it")
    parser.set_defaults(handler=cmd_gen)

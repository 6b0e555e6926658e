import argparse
import json
import logging
from pathlib import Path

from models.dialogue import DialogueExample
from services import storage
from services.checkpoint import load_checkpoint
from services.dialogue_store import load_dialogues
from services.evaluation import evaluate
from services.kg_store import load_knowledge_graph
from services.reasoner import format_trace, trace_to_dict

logger = logging.getLogger(__name__)


def cmd_eval(args: argparse.Namespace) -> int:
    graph = load_knowledge_graph(args.kg)
    model = load_checkpoint(args.ckpt, graph)
    examples = load_dialogues(args.data, graph.relations)
    report, _ = evaluate(model, examples, workers=args.workers, shuffle_seed=args.shuffle_triples)

    print(report.to_tsv(), end="")
    if args.report:
        base = Path(args.report)
        storage.write_json(base.with_suffix(".json"), report.model_dump(mode="json"))
        storage.write_text(base.with_suffix(".tsv"), report.to_tsv())
    return 0


def cmd_trace(args: argparse.Namespace) -> int:
    graph = load_knowledge_graph(args.kg)
    model = load_checkpoint(args.ckpt, graph)
    entities = [name.strip() for name in args.entities.split(",") if name.strip()]
    example = DialogueExample(history=[args.history], response="-", initial_entities=entities)
    prediction = model.infer(example)

    if args.json:
        payload = trace_to_dict(prediction.trace, graph.entities, graph.relations)
        payload["paths"] = [{"relations": model.path_names(p), "score": p.score} for p in prediction.paths]
        payload["response"] = prediction.text
        print(json.dumps(payload, indent=2))
        return 0

    print(format_trace(prediction.trace, graph.entities, graph.relations))
    if prediction.paths:
        best = prediction.paths[0]
        print(f"path\t{' -> '.join(model.path_names(best)) or '(stay)'}\t{best.score:.4f}")
    print(f"response\t{prediction.text}")
    return 0


def register(subparsers) -> None:
    parser = subparsers.add_parser("eval", help="Score a checkpoint on a dialogue file")
    parser.add_argument("--ckpt", required=True, help="Checkpoint directory")
    parser.add_argument("--data", required=True, help="Dialogue JSON-lines file")
    parser.add_argument("--kg", required=True, help="Triple TSV")
    parser.add_argument("--shuffle-triples", type=int, metavar="SEED", help="Evaluate on permuted triple rows")
    parser.add_argument("--workers", type=int, default=1, help="Parallel inference processes")
    parser.add_argument("--report", help="Write REPORT.json and REPORT.tsv as well")
    parser.set_defaults(handler=cmd_eval)

    parser = subparsers.add_parser("trace", help="Print the hop-by-hop reasoning path for one history")
    parser.add_argument("--ckpt", required=True, help="Checkpoint directory")
    parser.add_argument("--kg", required=True, help="Triple TSV")
    parser.add_argument("--history", required=True, help="Dialogue history text")
    parser.add_argument("--entities", required=True, help="Comma-separated initial entities")
    parser.add_argument("--json", action="store_true", help="Emit the trace as JSON")
    parser.set_defaults(handler=cmd_trace)

import argparse
import logging

from services.errors import DataError, UsageError
from services.kg_store import KnowledgeGraph, TripleStore, build_knowledge_graph, dedup_triples
from services.smd_kg import build_smd_kg, load_tables

logger = logging.getLogger(__name__)


def print_kg_stats(graph: KnowledgeGraph, label: str = "KG") -> None:
    stats = graph.stats()
    print(f"{label}: N_E={stats['n_entities']} N_R={stats['n_relations']} N_T={stats['n_triples']} "
          f"nnz={stats['nnz']} bytes={stats['bytes']}")


def cmd_build_kg(args: argparse.Namespace) -> int:
    if bool(args.tables) == bool(args.triples):
        raise UsageError("build-kg needs exactly one of --tables or --triples")
    if args.tables:
        triples = build_smd_kg(load_tables(args.tables))
    else:
        triples = TripleStore(args.triples).read()
    if not triples:
        raise DataError("No triples to write")
    unique = dedup_triples(triples)
    TripleStore(args.out).write(unique)
    print_kg_stats(build_knowledge_graph(unique, augment=False))
    return 0


def register(subparsers) -> None:
    parser = subparsers.add_parser("build-kg", help="Build a triple file from SMD-style tables or raw triples")
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--tables", help="JSON-lines file of SMD table records")
    source.add_argument("--triples", help="Existing triple TSV to dedup and pass through")
    parser.add_argument("--out", required=True, help="Output triple TSV")
    parser.set_defaults(handler=cmd_build_kg)

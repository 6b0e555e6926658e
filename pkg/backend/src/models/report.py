from typing import Dict, List, Optional

from pydantic import BaseModel, Field

PATH_KS = (1, 3, 5, 10, 25)


class MetricSummary(BaseModel):
    count: int = 0
    exact_match: float = Field(0.0, ge=0, le=1)
    token_f1: float = Field(0.0, ge=0, le=1)
    entity_f1: float = Field(0.0, ge=0, le=1)
    path_count: int = 0
    path_at_1: Optional[float] = Field(None, ge=0, le=1)


class EvalReport(BaseModel):
    n_examples: int
    exact_match: float = Field(..., ge=0, le=1)
    token_f1: float = Field(..., ge=0, le=1)
    entity_f1: float = Field(..., ge=0, le=1)
    bleu1: float = Field(..., ge=0, le=1)
    bleu2: float = Field(..., ge=0, le=1)
    bleu4: float = Field(..., ge=0, le=1)
    n_path_examples: int = 0
    path_at: Dict[int, float] = Field(default_factory=dict)
    by_reasoning_type: Dict[str, MetricSummary] = Field(default_factory=dict)
    by_domain: Dict[str, MetricSummary] = Field(default_factory=dict)
    shuffle_seed: Optional[int] = None

    def headline(self) -> Dict[str, float]:
        values = {
            "em": self.exact_match,
            "f1": self.token_f1,
            "entity_f1": self.entity_f1,
            "bleu1": self.bleu1 * 100,
            "bleu2": self.bleu2 * 100,
            "bleu4": self.bleu4 * 100,
        }
        for k, value in sorted(self.path_at.items()):
            values[f"path@{k}"] = value
        return values

    def to_tsv(self) -> str:
        """Overall metrics, then one row per breakdown group; BLEU shown ×100."""
        lines: List[str] = ["metric\tvalue"]
        lines.append(f"n_examples\t{self.n_examples}")
        lines.extend(f"{name}\t{value:.4f}" for name, value in self.headline().items())
        for label, groups in (("reasoning_type", self.by_reasoning_type), ("domain", self.by_domain)):
            if not groups:
                continue
            lines.append("")
            lines.append(f"{label}\tcount\tem\tf1\tentity_f1\tpath@1")
            for name, summary in sorted(groups.items()):
                path1 = "-" if summary.path_at_1 is None else f"{summary.path_at_1:.4f}"
                lines.append(f"{name}\t{summary.count}\t{summary.exact_match:.4f}\t{summary.token_f1:.4f}"
                             f"\t{summary.entity_f1:.4f}\t{path1}")
        return "\n".join(lines) + "\n"

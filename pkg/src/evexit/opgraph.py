"""Uncertainty lowered to a DAG of primitive operators.

The graph uses only ops available in minimal embedded inference runtimes:
relu, add_const, squeeze, reduce_sum and divide. Evaluating it on a head's
two logits reproduces the closed form u = 2 / (alpha + beta).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["OpNode", "OpGraph", "OpGraphError", "build_uncertainty_opgraph", "eval_opgraph"]

SUPPORTED_OPS = ("input", "const", "relu", "add_const", "squeeze", "reduce_sum", "divide")


class OpGraphError(ValueError):
    pass


@dataclass(frozen=True)
class OpNode:
    id: int
    op: str
    inputs: tuple[int, ...] = ()
    value: float | None = None  # const payload or add_const addend


@dataclass
class OpGraph:
    nodes: list[OpNode] = field(default_factory=list)
    output: int = -1

    def validate(self) -> None:
        seen: set[int] = set()
        for node in self.nodes:
            if node.op not in SUPPORTED_OPS:
                raise OpGraphError(f"node {node.id}: unsupported op {node.op!r}")
            if node.id in seen:
                raise OpGraphError(f"duplicate node id {node.id}")
            for inp in node.inputs:
                if inp not in seen:
                    raise OpGraphError(
                        f"node {node.id} ({node.op}) consumes node {inp} that does not precede it"
                    )
            seen.add(node.id)
        if self.output not in seen:
            raise OpGraphError(f"output node {self.output} not in graph")

    def op_multiset(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for node in self.nodes:
            counts[node.op] = counts.get(node.op, 0) + 1
        return counts


def build_uncertainty_opgraph() -> OpGraph:
    """relu -> +1 -> squeeze -> sum -> 2/S over a head's (1, 2) logit tensor."""
    nodes = [
        OpNode(0, "input"),
        OpNode(1, "relu", (0,)),
        OpNode(2, "add_const", (1,), value=1.0),
        OpNode(3, "squeeze", (2,)),
        OpNode(4, "reduce_sum", (3,)),
        OpNode(5, "const", value=2.0),
        OpNode(6, "divide", (5, 4)),
    ]
    graph = OpGraph(nodes=nodes, output=6)
    graph.validate()
    return graph


def eval_opgraph(graph: OpGraph, logits: np.ndarray) -> float:
    """Topological evaluation; logits feed the single input node."""
    graph.validate()
    values: dict[int, np.ndarray] = {}
    logits = np.asarray(logits, dtype=np.float64)
    for node in graph.nodes:
        if node.op == "input":
            values[node.id] = logits
        elif node.op == "const":
            values[node.id] = np.asarray(node.value, dtype=np.float64)
        elif node.op == "relu":
            values[node.id] = np.maximum(values[node.inputs[0]], 0.0)
        elif node.op == "add_const":
            values[node.id] = values[node.inputs[0]] + node.value
        elif node.op == "squeeze":
            values[node.id] = np.squeeze(values[node.inputs[0]])
        elif node.op == "reduce_sum":
            values[node.id] = np.sum(values[node.inputs[0]])
        elif node.op == "divide":
            values[node.id] = values[node.inputs[0]] / values[node.inputs[1]]
    out = values[graph.output]
    return float(out)

"""Three-column flow graph (raw features -> concepts -> model) and its SVG rendering."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

from .modeling import CONCEPT_PREFIX
from .pu_concepts import ConceptModel
from .survival import CoxFit

RAW, CONCEPT, MODEL = 0, 1, 2
COLORS = {"anchor": "#000000", "pos": "#2e6fd8", "neg": "#d83a2e"}


@dataclass(frozen=True)
class SankeyNode:
    id: str
    label: str
    column: int


@dataclass(frozen=True)
class SankeyEdge:
    source: str
    target: str
    weight: float
    sign: int
    is_anchor: bool = False

    @property
    def css_class(self) -> str:
        if self.is_anchor:
            return "anchor"
        return "pos" if self.sign >= 0 else "neg"


@dataclass(frozen=True)
class SankeyGraph:
    nodes: tuple[SankeyNode, ...]
    edges: tuple[SankeyEdge, ...]

    def node(self, node_id: str) -> SankeyNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def to_dict(self) -> dict:
        return {
            "nodes": [{"id": n.id, "label": n.label, "column": n.column} for n in self.nodes],
            "edges": [
                {
                    "source": e.source,
                    "target": e.target,
                    "weight": e.weight,
                    "sign": e.sign,
                    "is_anchor": e.is_anchor,
                }
                for e in self.edges
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _sign(x: float) -> int:
    return 1 if x >= 0 else -1


def export_sankey(
    concept_models: Sequence[ConceptModel],
    cox_fit: CoxFit,
    top_k: int = 10,
    model_label: str = "risk model",
) -> SankeyGraph:
    """Flow graph of a fitted model.

    Concept nodes appear only for concepts the Cox fit uses.  Each concept
    receives its ``top_k`` largest classifier coefficients plus one flagged
    edge per anchor column; anchors are not classifier inputs, so their edge
    weight is set to the largest coefficient shown for that concept.
    """
    by_name = {m.name: m for m in concept_models}
    model_id = "model:" + model_label
    raw_ids: dict[str, None] = {}
    concept_nodes, edges = [], []
    direct = []
    for name, b in zip(cox_fit.feature_names, cox_fit.beta):
        if b == 0:
            continue
        if name.startswith(CONCEPT_PREFIX):
            cname = name[len(CONCEPT_PREFIX):]
            if cname not in by_name:
                raise KeyError(f"Cox fit uses concept {cname!r} but no such concept model was given")
            concept_nodes.append(cname)
        else:
            direct.append((name, float(b)))

    for cname in concept_nodes:
        m = by_name[cname]
        order = sorted(range(m.weights.size), key=lambda j: (-abs(m.weights[j]), m.feature_names[j]))
        shown = [j for j in order[:top_k] if m.weights[j] != 0]
        for j in shown:
            raw_ids.setdefault(m.feature_names[j])
            edges.append(
                SankeyEdge("raw:" + m.feature_names[j], "concept:" + cname, abs(float(m.weights[j])), _sign(m.weights[j]))
            )
        anchor_w = max([abs(float(m.weights[j])) for j in shown], default=1.0)
        for a in m.spec.anchor_columns:
            raw_ids.setdefault(a)
            edges.append(SankeyEdge("raw:" + a, "concept:" + cname, anchor_w, 1, is_anchor=True))

    for cname in concept_nodes:
        b = float(cox_fit.beta[cox_fit.feature_names.index(CONCEPT_PREFIX + cname)])
        edges.append(SankeyEdge("concept:" + cname, model_id, abs(b), _sign(b)))
    for name, b in direct:
        raw_ids.setdefault(name)
        edges.append(SankeyEdge("raw:" + name, model_id, abs(b), _sign(b)))

    nodes = [SankeyNode("raw:" + r, r, RAW) for r in raw_ids]
    nodes += [SankeyNode("concept:" + c, c, CONCEPT) for c in concept_nodes]
    nodes.append(SankeyNode(model_id, model_label, MODEL))
    return SankeyGraph(tuple(nodes), tuple(edges))


def sankey_svg(graph: SankeyGraph, width: int = 900, min_height: int = 300) -> str:
    """Static SVG: flow thickness from edge weight, colour from sign, anchors in black."""
    pad, node_w, gap = 20, 12, 6
    # a node's drawn height is the larger of its in-flow and out-flow
    inflow = {n.id: 0.0 for n in graph.nodes}
    outflow = {n.id: 0.0 for n in graph.nodes}
    for e in graph.edges:
        outflow[e.source] += e.weight
        inflow[e.target] += e.weight
    size = {k: max(inflow[k], outflow[k]) for k in inflow}
    columns = [[n for n in graph.nodes if n.column == c] for c in (RAW, CONCEPT, MODEL)]
    columns = [col for col in columns if col]
    total = max([sum(size[n.id] for n in col) for col in columns] + [1e-12])
    tallest = max(len(col) for col in columns)
    height = max(min_height, 18 * tallest + 2 * pad)
    scale = (height - 2 * pad - gap * tallest) / total

    x_of = {}
    label_w = 170
    span = width - 2 * label_w
    for c, col in enumerate(columns):
        x = label_w + (span - node_w) * (c / max(len(columns) - 1, 1))
        for n in col:
            x_of[n.id] = x
    y_of, h_of = {}, {}
    for col in columns:
        y = pad
        for n in col:
            h_of[n.id] = max(size[n.id] * scale, 2.0)
            y_of[n.id] = y
            y += h_of[n.id] + gap

    out_cursor = dict(y_of)
    in_cursor = dict(y_of)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height:.0f}" '
        f'viewBox="0 0 {width} {height:.0f}" font-family="sans-serif" font-size="11">',
        "<style>"
        + "".join(f".{k}{{stroke:{v};fill:none;stroke-opacity:0.55}}" for k, v in COLORS.items())
        + ".node{fill:#444}</style>",
    ]
    for e in graph.edges:
        th = max(e.weight * scale, 0.75)
        y0 = out_cursor[e.source] + th / 2
        y1 = in_cursor[e.target] + th / 2
        out_cursor[e.source] += e.weight * scale
        in_cursor[e.target] += e.weight * scale
        x0 = x_of[e.source] + node_w
        x1 = x_of[e.target]
        mid = (x0 + x1) / 2
        parts.append(
            f'<path class="{e.css_class}" stroke-width="{th:.2f}" '
            f'd="M{x0:.1f},{y0:.1f} C{mid:.1f},{y0:.1f} {mid:.1f},{y1:.1f} {x1:.1f},{y1:.1f}">'
            f"<title>{escape(e.source)} to {escape(e.target)}: {e.sign * e.weight:.3f}</title></path>"
        )
    last_col = max(n.column for n in graph.nodes)
    for n in graph.nodes:
        x, y, h = x_of[n.id], y_of[n.id], h_of[n.id]
        parts.append(f'<rect class="node" x="{x:.1f}" y="{y:.1f}" width="{node_w}" height="{h:.1f}"/>')
        if n.column == last_col and n.column != RAW:
            tx, anchor = x + node_w + 4, "start"
        else:
            tx, anchor = x - 4, "end"
        parts.append(f'<text x="{tx:.1f}" y="{y + h / 2 + 4:.1f}" text-anchor="{anchor}">{escape(n.label)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_sankey(graph: SankeyGraph, out_dir: str | Path, stem: str = "sankey") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    js, svg = out_dir / f"{stem}.json", out_dir / f"{stem}.svg"
    js.write_text(graph.to_json())
    svg.write_text(sankey_svg(graph))
    return js, svg

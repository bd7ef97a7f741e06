"""Declarative tree definitions (JSON) and tick tracing.

A tree file is a nested object: composites carry ``kind`` (sequence /
selector / parallel), ``name`` and ``children``; leaves carry ``kind``
(condition / action / subtree), ``name`` and a ``binding`` resolved against a
registry of node factories.  A ``subtree`` binding may expand into a whole
prebuilt branch.
"""

from __future__ import annotations

import json
from typing import Callable, Mapping

from .engine import Action, BTNode, Composite, Condition, Parallel, Selector, Sequence

_COMPOSITES = {"sequence": Sequence, "selector": Selector, "parallel": Parallel}

LeafFactory = Callable[[str], BTNode]


def tree_from_dict(data: dict, bindings: Mapping[str, LeafFactory]) -> BTNode:
    kind = data.get("kind")
    name = data.get("name", kind or "node")
    if kind in _COMPOSITES:
        children = [tree_from_dict(c, bindings) for c in data.get("children", ())]
        return _COMPOSITES[kind](name, children)
    if kind in ("condition", "action", "subtree"):
        binding = data.get("binding")
        if binding not in bindings:
            raise ValueError(f"unknown leaf binding {binding!r} for node {name!r}")
        return bindings[binding](name)
    raise ValueError(f"unknown node kind {kind!r}")


def tree_to_dict(node: BTNode, binding_names: Mapping[int, str] | None = None) -> dict:
    d: dict = {"kind": node.kind, "name": node.name}
    if isinstance(node, Composite):
        d["children"] = [tree_to_dict(c, binding_names) for c in node.children]
    elif binding_names is not None and node.node_id in binding_names:
        d["binding"] = binding_names[node.node_id]
    return d


def load_tree(path, bindings: Mapping[str, LeafFactory]) -> BTNode:
    with open(path, encoding="utf-8") as fh:
        return tree_from_dict(json.load(fh), bindings)


class TraceWriter:
    """JSON-lines tick trace: one row per visited node."""

    def __init__(self, fh):
        self._fh = fh

    def __call__(self, tick_index: int, node_id: int, name: str, status) -> None:
        self._fh.write(json.dumps(
            {"tick_index": tick_index, "node_id": node_id, "node": name,
             "status": status.value}, sort_keys=True) + "\n")

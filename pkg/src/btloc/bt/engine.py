"""Minimal reactive behavior-tree engine.

Composites are memoryless: every tick restarts evaluation at the first child,
so higher-priority subtrees preempt as soon as they can run.  The blackboard
takes a snapshot of its inbox at the start of every tick; all reads during the
traversal see that frozen view.  Structural edits (insert / prune / reorder)
requested at any time are queued and applied only between ticks.
"""

from __future__ import annotations

import logging
import queue
from enum import Enum
from typing import Callable, Iterable, Optional

_log = logging.getLogger(__name__)


class NodeStatus(Enum):
    SUCCESS = "SUCCESS"
    FAILURE = "FAILURE"
    RUNNING = "RUNNING"


class Blackboard:
    """Per-tick snapshot view over a thread-safe inbox of (topic, value) posts."""

    def __init__(self):
        self._inbox: queue.SimpleQueue = queue.SimpleQueue()
        self._latest: dict[str, object] = {}
        self.snapshot: dict[str, object] = {}

    def post(self, topic: str, value: object) -> None:
        """Publish a value; visible from the next tick on.  Thread safe."""
        self._inbox.put((topic, value))

    def begin_tick(self) -> None:
        """Drain the inbox and freeze the snapshot used by this traversal."""
        while True:
            try:
                topic, value = self._inbox.get_nowait()
            except queue.Empty:
                break
            self._latest[topic] = value
        self.snapshot = dict(self._latest)

    def get(self, topic: str, default: object = None) -> object:
        return self.snapshot.get(topic, default)

    def set_derived(self, topic: str, value: object) -> None:
        """Write a tick-scoped derived value (stable for the rest of the tick)."""
        self.snapshot[topic] = value

    def consume(self, topic: str) -> object:
        """Read-and-remove, for one-shot commands."""
        value = self.snapshot.pop(topic, None)
        self._latest.pop(topic, None)
        return value

    def clear_prefix(self, prefix: str) -> None:
        for store in (self._latest, self.snapshot):
            for key in [k for k in store if k.startswith(prefix)]:
                del store[key]


class BTNode:
    """Base node; ids are assigned when the node joins a tree."""

    kind = "node"

    def __init__(self, name: str):
        self.name = name
        self.node_id: Optional[int] = None
        self.parent: Optional["BTNode"] = None
        self.children: list["BTNode"] = []

    def tick(self, bb: Blackboard, visit) -> NodeStatus:
        raise NotImplementedError

    def iter_subtree(self) -> Iterable["BTNode"]:
        yield self
        for child in self.children:
            yield from child.iter_subtree()

    def __repr__(self):
        return f"<{type(self).__name__} {self.name!r} id={self.node_id}>"


class Composite(BTNode):
    def __init__(self, name: str, children: Iterable[BTNode] = ()):
        super().__init__(name)
        for child in children:
            self.add_child(child)

    def add_child(self, child: BTNode, index: Optional[int] = None) -> None:
        if child.parent is not None:
            raise ValueError(f"{child!r} already has a parent")
        child.parent = self
        if index is None:
            self.children.append(child)
        else:
            self.children.insert(index, child)


class Sequence(Composite):
    """Ticks children left to right; fails/yields on the first non-success."""

    kind = "sequence"

    def tick(self, bb, visit):
        for child in self.children:
            status = visit(child, bb)
            if status is not NodeStatus.SUCCESS:
                return status
        return NodeStatus.SUCCESS


class Selector(Composite):
    """Ticks children left to right; succeeds/yields on the first non-failure."""

    kind = "selector"

    def tick(self, bb, visit):
        for child in self.children:
            status = visit(child, bb)
            if status is not NodeStatus.FAILURE:
                return status
        return NodeStatus.FAILURE


class Parallel(Composite):
    """Ticks every child each tick; success only when all succeed, failure if any fails."""

    kind = "parallel"

    def tick(self, bb, visit):
        statuses = [visit(child, bb) for child in self.children]
        if any(s is NodeStatus.FAILURE for s in statuses):
            return NodeStatus.FAILURE
        if all(s is NodeStatus.SUCCESS for s in statuses):
            return NodeStatus.SUCCESS
        return NodeStatus.RUNNING


class Leaf(BTNode):
    """Callback leaf.  A raising callback is logged and mapped to FAILURE."""

    def __init__(self, name: str, fn: Callable[[Blackboard], NodeStatus],
                 on_halt: Optional[Callable[[Blackboard], None]] = None,
                 on_prune: Optional[Callable[[], None]] = None):
        super().__init__(name)
        self.fn = fn
        self.on_halt = on_halt
        self.on_prune = on_prune

    def tick(self, bb, visit):
        try:
            status = self.fn(bb)
        except Exception:
            _log.exception("leaf %r raised; returning FAILURE", self.name)
            return NodeStatus.FAILURE
        if not isinstance(status, NodeStatus):
            _log.error("leaf %r returned %r; treating as FAILURE", self.name, status)
            return NodeStatus.FAILURE
        return status


class Condition(Leaf):
    kind = "condition"


class Action(Leaf):
    kind = "action"


class BehaviorTree:
    """Owns the node ids, the tick loop bookkeeping and queued structural edits."""

    def __init__(self, root: BTNode, trace: Optional[Callable[[int, int, str, NodeStatus], None]] = None):
        self._next_id = 0
        self._nodes: dict[int, BTNode] = {}
        self.root = root
        self.tick_index = 0
        self.trace = trace
        self._pending_edits: list[tuple] = []
        self._running_leaves: set[int] = set()
        self._adopt(root)

    # -- structure ------------------------------------------------------

    def _adopt(self, node: BTNode) -> None:
        for n in node.iter_subtree():
            if n.node_id is not None and n.node_id in self._nodes:
                raise ValueError(f"duplicate node id {n.node_id}")
            if n.node_id is None:
                n.node_id = self._next_id
                self._next_id += 1
            else:
                self._next_id = max(self._next_id, n.node_id + 1)
            self._nodes[n.node_id] = n

    def node(self, node_id: int) -> BTNode:
        try:
            return self._nodes[node_id]
        except KeyError:
            raise KeyError(f"unknown node id {node_id}") from None

    def find(self, name: str) -> BTNode:
        for n in self._nodes.values():
            if n.name == name:
                return n
        raise KeyError(f"no node named {name!r}")

    def insert_subtree(self, parent_id: int, index: int, subtree: BTNode) -> None:
        """Queue an insert; takes effect at the next tick boundary."""
        parent = self.node(parent_id)
        if not isinstance(parent, Composite):
            raise ValueError(f"cannot insert under leaf {parent!r}")
        if index < 0 or index > len(parent.children):
            raise ValueError(f"insert index {index} out of range")
        for n in subtree.iter_subtree():
            if n.node_id is not None and n.node_id in self._nodes:
                raise ValueError(f"duplicate node id {n.node_id}")
        self._pending_edits.append(("insert", parent_id, index, subtree))

    def prune_subtree(self, node_id: int) -> None:
        """Queue a prune; teardown hooks fire when the edit is applied."""
        node = self.node(node_id)
        if node is self.root:
            raise ValueError("cannot prune the root")
        self._pending_edits.append(("prune", node_id))

    def reorder_children(self, parent_id: int, permutation: list[int]) -> None:
        """Queue a child reorder; ``permutation[i]`` is the old index moved to slot i."""
        parent = self.node(parent_id)
        if not isinstance(parent, Composite):
            raise ValueError("reorder target must be a composite")
        if sorted(permutation) != list(range(len(parent.children))):
            raise ValueError(f"invalid permutation {permutation}")
        self._pending_edits.append(("reorder", parent_id, list(permutation)))

    def apply_pending_edits(self) -> None:
        edits, self._pending_edits = self._pending_edits, []
        for edit in edits:
            op = edit[0]
            if op == "insert":
                _, parent_id, index, subtree = edit
                parent = self.node(parent_id)  # re-validate: parent may be gone
                index = min(index, len(parent.children))
                parent.add_child(subtree, index)
                self._adopt(subtree)
            elif op == "prune":
                _, node_id = edit
                node = self._nodes.get(node_id)
                if node is None:
                    continue  # already removed by an earlier edit
                node.parent.children.remove(node)
                node.parent = None
                for n in node.iter_subtree():
                    del self._nodes[n.node_id]
                    self._running_leaves.discard(n.node_id)
                    if isinstance(n, Leaf) and n.on_prune is not None:
                        try:
                            n.on_prune()
                        except Exception:
                            _log.exception("teardown of %r raised", n.name)
            elif op == "reorder":
                _, parent_id, perm = edit
                parent = self.node(parent_id)
                parent.children = [parent.children[i] for i in perm]

    def structure(self) -> dict:
        """Structural dump (kind/name/children), usable for equality checks."""
        def conv(node: BTNode) -> dict:
            d = {"kind": node.kind, "name": node.name}
            if node.children:
                d["children"] = [conv(c) for c in node.children]
            return d
        return conv(self.root)

    # -- ticking --------------------------------------------------------

    def tick(self, bb: Blackboard) -> NodeStatus:
        """Apply queued edits, refresh the snapshot and traverse once."""
        self.apply_pending_edits()
        bb.begin_tick()
        visited: dict[int, NodeStatus] = {}

        def visit(node: BTNode, board: Blackboard) -> NodeStatus:
            status = node.tick(board, visit)
            visited[node.node_id] = status
            if self.trace is not None:
                self.trace(self.tick_index, node.node_id, node.name, status)
            return status

        visit(self.root, bb)
        root_status = visited[self.root.node_id]

        # leaves that were RUNNING last tick but were preempted this tick
        for node_id in self._running_leaves - set(visited):
            node = self._nodes.get(node_id)
            if node is not None and isinstance(node, Leaf) and node.on_halt is not None:
                try:
                    node.on_halt(bb)
                except Exception:
                    _log.exception("halt hook of %r raised", node.name)
        self._running_leaves = {
            nid for nid, status in visited.items()
            if status is NodeStatus.RUNNING and isinstance(self._nodes.get(nid), Leaf)
        }
        self.tick_index += 1
        return root_status

from .engine import (
    Action,
    BehaviorTree,
    Blackboard,
    BTNode,
    Composite,
    Condition,
    Leaf,
    NodeStatus,
    Parallel,
    Selector,
    Sequence,
)
from .io import TraceWriter, load_tree, tree_from_dict, tree_to_dict

__all__ = [
    "Action", "BehaviorTree", "Blackboard", "BTNode", "Composite", "Condition",
    "Leaf", "NodeStatus", "Parallel", "Selector", "Sequence",
    "TraceWriter", "load_tree", "tree_from_dict", "tree_to_dict",
]

"""Reconfigurable localisation pipeline: a 4-layer graph of typed modules.

Modules live in one of four layers (source interface, sensor/motion models,
localisation kernels, destination interface) and expose named, typed ports.
Connections bind an output port to a same-typed input port of the next layer
(motion inputs may skip from source straight to a kernel) and can be made and
broken at runtime.  A dispatch propagates a payload depth first through the
connected subgraph, so every subscriber chain finishes before the next sibling
subscriber is served.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Callable, Optional

_log = logging.getLogger(__name__)


class PortType(Enum):
    RAW_MEASUREMENT = "RAW_MEASUREMENT"
    MOTION_INPUT = "MOTION_INPUT"
    OBSERVATION = "OBSERVATION"
    STATE_ESTIMATE = "STATE_ESTIMATE"
    UPDATE_STATS = "UPDATE_STATS"


class Layer(IntEnum):
    SOURCE = 0
    MODEL = 1
    KERNEL = 2
    SINK = 3


@dataclass(frozen=True, slots=True)
class Connection:
    src_module: str
    src_port: str
    dst_module: str
    dst_port: str


class PipelineError(Exception):
    pass


class PipelineModule:
    """Base processing module.  Subclasses override :meth:`on_input`.

    ``emit(port, payload)`` inside :meth:`on_input` forwards a result to the
    subscribers of one of this module's output ports.
    """

    def __init__(self, name: str, layer: Layer,
                 inputs: dict[str, PortType], outputs: dict[str, PortType]):
        self.name = name
        self.layer = layer
        self.inputs = dict(inputs)
        self.outputs = dict(outputs)

    def on_input(self, port: str, payload, emit: Callable[[str, object], None]) -> None:
        raise NotImplementedError

    def __repr__(self):
        return f"<{type(self).__name__} {self.name!r} {self.layer.name}>"


class PipelineGraph:
    """Owns modules and edges; all mutation and dispatch on one thread."""

    def __init__(self):
        self._modules: dict[str, PipelineModule] = {}
        # (src_module, src_port) -> ordered list of (dst_module, dst_port)
        self._edges: dict[tuple[str, str], list[tuple[str, str]]] = {}

    # -- construction ---------------------------------------------------

    def add_module(self, module: PipelineModule) -> PipelineModule:
        if module.name in self._modules:
            raise PipelineError(f"duplicate module name {module.name!r}")
        self._modules[module.name] = module
        for port in module.outputs:
            self._edges.setdefault((module.name, port), [])
        return module

    def module(self, name: str) -> PipelineModule:
        try:
            return self._modules[name]
        except KeyError:
            raise PipelineError(f"unknown module {name!r}") from None

    def _check_layer_rule(self, src: PipelineModule, dst: PipelineModule,
                          port_type: PortType) -> None:
        if dst.layer == src.layer + 1:
            return
        if (src.layer is Layer.SOURCE and dst.layer is Layer.KERNEL
                and port_type is PortType.MOTION_INPUT):
            return
        raise PipelineError(
            f"illegal layer hop {src.layer.name}->{dst.layer.name} for {port_type.name}")

    def _would_cycle(self, src_name: str, dst_name: str) -> bool:
        # is src reachable from dst along existing edges?
        stack = [dst_name]
        seen = set()
        while stack:
            cur = stack.pop()
            if cur == src_name:
                return True
            if cur in seen:
                continue
            seen.add(cur)
            for (mod, _port), subs in self._edges.items():
                if mod == cur:
                    stack.extend(dst for dst, _ in subs)
        return False

    def connect(self, conn: Connection) -> None:
        src = self.module(conn.src_module)
        dst = self.module(conn.dst_module)
        if conn.src_port not in src.outputs:
            raise PipelineError(f"{src.name!r} has no output port {conn.src_port!r}")
        if conn.dst_port not in dst.inputs:
            raise PipelineError(f"{dst.name!r} has no input port {conn.dst_port!r}")
        out_type = src.outputs[conn.src_port]
        in_type = dst.inputs[conn.dst_port]
        if out_type is not in_type:
            raise PipelineError(
                f"port type mismatch {out_type.name} -> {in_type.name} "
                f"({conn.src_module}.{conn.src_port} -> {conn.dst_module}.{conn.dst_port})")
        self._check_layer_rule(src, dst, out_type)
        subs = self._edges[(conn.src_module, conn.src_port)]
        target = (conn.dst_module, conn.dst_port)
        if target in subs:
            _log.warning("duplicate connection %s ignored", conn)
            return
        if self._would_cycle(conn.src_module, conn.dst_module):
            raise PipelineError(f"connection {conn} would create a cycle")
        subs.append(target)

    def disconnect(self, conn: Connection) -> None:
        subs = self._edges.get((conn.src_module, conn.src_port))
        target = (conn.dst_module, conn.dst_port)
        if subs is None or target not in subs:
            raise PipelineError(f"no such connection {conn}")
        subs.remove(target)

    def is_connected(self, conn: Connection) -> bool:
        subs = self._edges.get((conn.src_module, conn.src_port), ())
        return (conn.dst_module, conn.dst_port) in subs

    def connections(self) -> list[Connection]:
        out = []
        for (src, port), subs in self._edges.items():
            for dst, dport in subs:
                out.append(Connection(src, port, dst, dport))
        return out

    # -- dispatch -------------------------------------------------------

    def inject(self, module_name: str, port: str, payload) -> None:
        """Feed an external payload into a module input (source entry point)."""
        module = self.module(module_name)
        self._deliver_to(module, port, payload)

    def _deliver_to(self, module: PipelineModule, port: str, payload) -> None:
        def emit(out_port: str, out_payload) -> None:
            self._fan_out(module, out_port, out_payload)

        try:
            module.on_input(port, payload, emit)
        except Exception:
            # kernels convert their own failures into stats records; anything
            # escaping to here is logged and dropped so siblings still run
            _log.exception("module %r failed processing input on %r", module.name, port)

    def _fan_out(self, module: PipelineModule, out_port: str, payload) -> None:
        if out_port not in module.outputs:
            raise PipelineError(f"{module.name!r} has no output port {out_port!r}")
        subs = self._edges.get((module.name, out_port), [])
        # iterate over a copy: a disconnect during dispatch affects the next
        # emission, not the in-flight one
        for dst_name, dst_port in list(subs):
            self._deliver_to(self._modules[dst_name], dst_port, payload)

    # -- persistence ----------------------------------------------------

    def dump_topology(self) -> dict:
        return {
            "modules": [
                {
                    "name": m.name,
                    "layer": m.layer.name,
                    "inputs": {p: t.name for p, t in m.inputs.items()},
                    "outputs": {p: t.name for p, t in m.outputs.items()},
                }
                for m in self._modules.values()
            ],
            "edges": [
                {"from": [c.src_module, c.src_port], "to": [c.dst_module, c.dst_port]}
                for c in self.connections()
            ],
        }

    def save_topology(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.dump_topology(), fh, sort_keys=True, indent=1)
            fh.write("\n")

    @classmethod
    def from_topology(cls, data: dict,
                      factory: Callable[[str, Layer, dict, dict], PipelineModule]) -> "PipelineGraph":
        """Rebuild a graph from a topology dump via a module factory."""
        graph = cls()
        for row in data["modules"]:
            module = factory(
                row["name"], Layer[row["layer"]],
                {p: PortType[t] for p, t in row["inputs"].items()},
                {p: PortType[t] for p, t in row["outputs"].items()})
            graph.add_module(module)
        for edge in data["edges"]:
            graph.connect(Connection(edge["from"][0], edge["from"][1],
                                     edge["to"][0], edge["to"][1]))
        return graph

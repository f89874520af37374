"""Static enterprise model: nodes, connected networks, links and next-hop routing.

Configuration documents are line oriented::

    # two branches in separate connected networks
    [node] name=C  role=CENTRAL cn=hq,north,south port=7100
    [node] name=B1 role=BRANCH  cn=north port=7101
    [node] name=B2 role=BRANCH  cn=south port=7102
    [link] a=B1 b=C
    [link] a=B2 b=C
    [enterprise] mail_key=<64 hex digits>

A node may list several connected networks separated by commas.
"""

from __future__ import annotations

import re
import shlex
from dataclasses import dataclass, field
from enum import Enum

from qsync.errors import ParseError, UnknownNode, ValidationError

NODE_ID_RE = re.compile(r"[A-Za-z0-9_-]{1,32}")


class Role(str, Enum):
    BRANCH = "BRANCH"
    CENTRAL = "CENTRAL"


@dataclass(frozen=True)
class NodeSpec:
    name: str
    role: Role
    cns: tuple[str, ...]
    host: str = "127.0.0.1"
    port: int | None = None


@dataclass(frozen=True)
class TopologyConfig:
    nodes: tuple[NodeSpec, ...]
    connected_networks: dict[str, frozenset[str]]
    central: str
    links: frozenset[frozenset[str]]
    mail_key: bytes | None = None
    _by_name: dict[str, NodeSpec] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not self._by_name:
            self._by_name.update({n.name: n for n in self.nodes})

    @property
    def names(self) -> list[str]:
        return [n.name for n in self.nodes]

    @property
    def branches(self) -> list[str]:
        return [n.name for n in self.nodes if n.role is Role.BRANCH]

    def node(self, name: str) -> NodeSpec:
        try:
            return self._by_name[name]
        except KeyError:
            raise UnknownNode(name) from None

    def role(self, name: str) -> Role:
        return self.node(name).role

    def has_link(self, a: str, b: str) -> bool:
        return frozenset((a, b)) in self.links

    def neighbours(self, name: str) -> list[str]:
        self.node(name)
        return [n for n in self.names if n != name and self.has_link(name, n)]

    def share_cn(self, a: str, b: str) -> bool:
        return bool(set(self.node(a).cns) & set(self.node(b).cns))


def validate_node_id(name: str) -> str:
    if not NODE_ID_RE.fullmatch(name or ""):
        raise ValidationError(f"invalid node id {name!r}")
    return name


def _kv(tokens: list[str], lineno: int) -> dict[str, str]:
    out = {}
    for tok in tokens:
        key, sep, value = tok.partition("=")
        if not sep or not key:
            raise ParseError(f"expected key=value, got {tok!r}", lineno)
        if key in out:
            raise ParseError(f"repeated key {key!r}", lineno)
        out[key] = value
    return out


def load_topology(text: str) -> TopologyConfig:
    """Parse and validate a configuration document."""
    nodes: list[NodeSpec] = []
    links: list[tuple[str, str]] = []
    mail_key = None
    for lineno, raw in enumerate(text.split("\n"), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            tokens = shlex.split(line)
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        section, rest = tokens[0], tokens[1:]
        kv = _kv(rest, lineno)
        if section == "[node]":
            missing = {"name", "role", "cn"} - kv.keys()
            if missing:
                raise ParseError(f"node missing {sorted(missing)}", lineno)
            unknown = kv.keys() - {"name", "role", "cn", "port", "host"}
            if unknown:
                raise ParseError(f"unknown node keys {sorted(unknown)}", lineno)
            try:
                role = Role(kv["role"])
            except ValueError:
                raise ParseError(f"bad role {kv['role']!r}", lineno) from None
            cns = tuple(c for c in kv["cn"].split(",") if c)
            port = None
            if "port" in kv:
                if not kv["port"].isdigit() or not 0 < int(kv["port"]) < 65536:
                    raise ParseError(f"bad port {kv['port']!r}", lineno)
                port = int(kv["port"])
            nodes.append(NodeSpec(kv["name"], role, cns, kv.get("host", "127.0.0.1"), port))
        elif section == "[link]":
            if set(kv) != {"a", "b"}:
                raise ParseError("link needs exactly a= and b=", lineno)
            links.append((kv["a"], kv["b"]))
        elif section == "[enterprise]":
            if "mail_key" in kv:
                try:
                    mail_key = bytes.fromhex(kv["mail_key"])
                except ValueError:
                    raise ParseError("mail_key must be hex", lineno) from None
                if len(mail_key) != 32:
                    raise ParseError("mail_key must be 256 bits", lineno)
        else:
            raise ParseError(f"unknown section {section!r}", lineno)
    return build_topology(nodes, links, mail_key)


def build_topology(nodes, links, mail_key: bytes | None = None) -> TopologyConfig:
    seen: set[str] = set()
    for n in nodes:
        validate_node_id(n.name)
        if n.name in seen:
            raise ValidationError(f"duplicate node {n.name}")
        seen.add(n.name)
        if not n.cns:
            raise ValidationError(f"node {n.name} belongs to no connected network")
    centrals = [n.name for n in nodes if n.role is Role.CENTRAL]
    if len(centrals) != 1:
        raise ValidationError(f"expected exactly one CENTRAL node, found {len(centrals)}")
    central = centrals[0]

    link_set = set()
    for a, b in links:
        for x in (a, b):
            if x not in seen:
                raise ValidationError(f"link references unknown node {x}")
        if a == b:
            raise ValidationError(f"self link on {a}")
        link_set.add(frozenset((a, b)))

    # reachability from central, then the stricter one-hop rule routing relies on
    adj: dict[str, set[str]] = {n: set() for n in seen}
    for pair in link_set:
        a, b = tuple(pair)
        adj[a].add(b)
        adj[b].add(a)
    reached, stack = {central}, [central]
    while stack:
        for nxt in adj[stack.pop()]:
            if nxt not in reached:
                reached.add(nxt)
                stack.append(nxt)
    unreachable = sorted(seen - reached)
    if unreachable:
        raise ValidationError(f"unreachable from central: {', '.join(unreachable)}")
    for n in nodes:
        if n.name != central and central not in adj[n.name]:
            raise ValidationError(f"node {n.name} has no direct link to central {central}")

    cn_map: dict[str, set[str]] = {}
    for n in nodes:
        for cn in n.cns:
            cn_map.setdefault(cn, set()).add(n.name)
    return TopologyConfig(
        nodes=tuple(nodes),
        connected_networks={k: frozenset(v) for k, v in cn_map.items()},
        central=central,
        links=frozenset(link_set),
        mail_key=mail_key,
    )


def route_next_hop(topo: TopologyConfig, src: str, dst: str) -> str:
    """Next node a message from ``src`` to ``dst`` should be handed to."""
    topo.node(src)
    topo.node(dst)
    if src == dst:
        raise ValueError("source and destination are the same node")
    if topo.has_link(src, dst) and (src == topo.central or topo.share_cn(src, dst)):
        # the routing node delivers over its own links regardless of network
        return dst
    return topo.central


def generate_topology(
    n_branches: int,
    *,
    central: str = "C",
    prefix: str = "B",
    shared_cn: bool = False,
    base_port: int | None = None,
    mail_key: bytes | None = None,
) -> str:
    """Config text for a hub-and-spoke enterprise.

    Each branch gets its own connected network unless ``shared_cn``.
    """
    lines = ["# generated hub-and-spoke enterprise"]
    names = [f"{prefix}{i}" for i in range(1, n_branches + 1)]
    cns = ["lan"] if shared_cn else [f"cn_{n}" for n in names]
    port = f" port={base_port}" if base_port is not None else ""
    lines.append(f"[node] name={central} role=CENTRAL cn={','.join(['hq', *cns]) if not shared_cn else 'lan'}{port}")
    for i, name in enumerate(names, start=1):
        cn = "lan" if shared_cn else f"cn_{name}"
        port = f" port={base_port + i}" if base_port is not None else ""
        lines.append(f"[node] name={name} role=BRANCH cn={cn}{port}")
    for name in names:
        lines.append(f"[link] a={name} b={central}")
    if mail_key is not None:
        lines.append(f"[enterprise] mail_key={mail_key.hex()}")
    return "\n".join(lines) + "\n"

"""Permission strings: parsing, canonical form, and implication.

A permission is a colon-separated list of parts. Each part is either the
wildcard ``*`` or a comma-separated set of literals, e.g.::

    systems:tacc:read:stampede2
    systems:cyverse:*:frontera
    systems:a2cps:read,modify:corral

A schema registry maps the leading part (the schema, e.g. ``files``) to an
optional part index at which a hierarchical path tail begins. Everything
from that index onward is consumed verbatim as a single absolute path, so
paths may legally contain ``:``. A granted path covers the whole subtree
rooted at it, with prefixing decided at ``/`` boundaries only::

    files:tacc:read:sys1:/home/bud/data

grants read on every file below ``/home/bud/data`` on ``sys1`` but nothing
under ``/home/budget``.

Matching rules, all case-sensitive:

* a ``*`` part matches anything at that position;
* a granted permission with fewer parts than the request implies it
  (omitted trailing parts match anything);
* a granted permission with *more* parts than the request implies it only
  if every extra part is ``*``;
* path tails compare as directory prefixes, never as string prefixes.

``**`` and regex-style parts are rejected as malformed. All functions here
are pure and operate on immutable values; they are safe for unrestricted
concurrent use.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import MalformedPermission, SchemaMismatch, UnknownSchema

WILDCARD = "*"

# A part is either the WILDCARD string or a frozenset of literals.
PartSet = "frozenset[str] | str"


@dataclass(frozen=True)
class SchemaRule:
    """Registry entry: where (if anywhere) a schema's path tail starts."""

    schema: str
    path_part_index: int | None = None

    def __post_init__(self):
        if self.path_part_index is not None and self.path_part_index < 2:
            raise ValueError("path_part_index must be >= 2 (schema and tenant parts are never paths)")


class SchemaRegistry:
    """Lookup table of SchemaRules keyed by leading-part literal.

    In strict mode, parsing a permission whose schema has no rule raises
    UnknownSchema; otherwise unknown schemas parse with no path tail.
    """

    def __init__(self, rules=(), strict: bool = False):
        self._rules = {r.schema: r for r in rules}
        self.strict = strict

    def rule_for(self, schema: str) -> SchemaRule | None:
        return self._rules.get(schema)

    def add(self, rule: SchemaRule) -> None:
        self._rules[rule.schema] = rule

    @classmethod
    def from_config(cls, entries, strict: bool = False) -> "SchemaRegistry":
        """Build from configuration dicts: [{"schema": ..., "path_part_index": ...}, ...]."""
        rules = [SchemaRule(e["schema"], e.get("path_part_index")) for e in entries]
        return cls(rules, strict=strict)


#: Default registry: the files schema carries a path in part 4
#: (service:tenant:operation:systemId:path).
DEFAULT_REGISTRY = SchemaRegistry([SchemaRule("files", 4)])


@dataclass(frozen=True)
class PermissionSpec:
    """Parsed permission. Equality ignores the raw input string."""

    raw: str = field(compare=False)
    parts: tuple = ()
    path_tail: str | None = None

    def is_concrete(self) -> bool:
        """True when every part is a single literal (a valid request)."""
        return all(p is not WILDCARD and isinstance(p, frozenset) and len(p) == 1 for p in self.parts)

    def canonical(self) -> str:
        return canonicalize(self)


def _parse_part(chunk: str) -> "frozenset[str] | str":
    if chunk == "":
        raise MalformedPermission("empty part")
    subs = chunk.split(",")
    if any(s == "" for s in subs):
        raise MalformedPermission(f"empty sub-part in {chunk!r}")
    if WILDCARD in subs:
        if len(subs) != 1:
            raise MalformedPermission(f"wildcard mixed with literals in {chunk!r}")
        return WILDCARD
    for s in subs:
        if "*" in s:
            raise MalformedPermission(f"partial wildcard {s!r} is not supported")
    return frozenset(subs)


def _normalize_path(raw_path: str) -> str:
    if not raw_path.startswith("/"):
        raise MalformedPermission(f"path tail must be absolute: {raw_path!r}")
    segments = [s for s in raw_path.split("/") if s != ""]
    if any(s in (".", "..") for s in segments):
        raise MalformedPermission(f"path tail may not contain . or .. segments: {raw_path!r}")
    return "/" + "/".join(segments) if segments else "/"


def _path_index_for(first_part, registry: SchemaRegistry) -> int | None:
    """Resolve a parsed leading part to its schema path index, if any."""
    if first_part is WILDCARD:
        return None
    indexes = set()
    for literal in first_part:
        rule = registry.rule_for(literal)
        if rule is None and registry.strict:
            raise UnknownSchema(f"no schema rule for {literal!r}")
        indexes.add(rule.path_part_index if rule else None)
    if len(indexes) > 1:
        raise SchemaMismatch(f"leading part {sorted(first_part)} mixes schemas with different path semantics")
    return indexes.pop()


def parse_permission(raw: str, registry: SchemaRegistry = DEFAULT_REGISTRY) -> PermissionSpec:
    """Parse a permission string under the given schema registry."""
    if not raw:
        raise MalformedPermission("empty permission string")
    first_chunk = raw.split(":", 1)[0]
    first_part = _parse_part(first_chunk)
    path_index = _path_index_for(first_part, registry)

    path_tail = None
    if path_index is not None and raw.count(":") >= path_index:
        chunks = raw.split(":", path_index)
        path_tail = _normalize_path(chunks.pop())
    else:
        chunks = raw.split(":")

    parts = tuple(_parse_part(c) for c in chunks)
    return PermissionSpec(raw=raw, parts=parts, path_tail=path_tail)


def canonicalize(spec: PermissionSpec) -> str:
    """Deterministic rendering: sub-part literals sorted, path normalized.

    parse(canonicalize(s)) equals s whenever s was parsed under the same
    registry.
    """
    rendered = []
    for part in spec.parts:
        if part is WILDCARD or part == WILDCARD:
            rendered.append(WILDCARD)
        else:
            rendered.append(",".join(sorted(part)))
    out = ":".join(rendered)
    if spec.path_tail is not None:
        out += ":" + spec.path_tail
    return out


def path_implied(granted_path: str, required_path: str) -> bool:
    """Directory-prefix check at / boundaries; the root path implies all."""
    if granted_path == required_path:
        return True
    if granted_path == "/":
        return True
    return required_path.startswith(granted_path + "/")


def _require_concrete(required: PermissionSpec) -> None:
    if not required.is_concrete():
        raise MalformedPermission(f"required permission must be concrete: {required.raw!r}")


def implies(granted: PermissionSpec, required: PermissionSpec) -> bool:
    """Decide whether ``granted`` covers the concrete request ``required``.

    Both specs must come from the same registry; a granted and required
    pair whose path tails sit at different part positions indicates mixed
    registries and raises SchemaMismatch.
    """
    _require_concrete(required)

    if granted.path_tail is not None and required.path_tail is not None:
        if len(granted.parts) != len(required.parts):
            raise SchemaMismatch("path tails at different part positions; specs parsed under different registries")
    if granted.path_tail is not None and len(granted.parts) < len(required.parts):
        raise SchemaMismatch("granted path tail overlaps required parts; specs parsed under different registries")

    for i, req_part in enumerate(required.parts):
        if i >= len(granted.parts):
            # Granted is a proper prefix: omitted trailing parts match anything.
            return True
        g = granted.parts[i]
        if g is WILDCARD or g == WILDCARD:
            continue
        (literal,) = req_part
        if literal not in g:
            return False

    # Granted has extra parts beyond the request: they must all be wildcards.
    extra = granted.parts[len(required.parts):]
    if required.path_tail is not None and len(extra) > 0:
        # Granted (path-less, from a different or wildcard schema) has a part
        # at the request's path position; only * matches a path component.
        if not all(p is WILDCARD or p == WILDCARD for p in extra):
            return False
        return True
    if not all(p is WILDCARD or p == WILDCARD for p in extra):
        return False

    if granted.path_tail is None:
        return True
    if required.path_tail is None:
        # A path-scoped grant is narrower than the abstract request.
        return False
    return path_implied(granted.path_tail, required.path_tail)


def implies_str(granted: str, required: str, registry: SchemaRegistry = DEFAULT_REGISTRY) -> bool:
    """Convenience wrapper parsing both sides under one registry."""
    return implies(parse_permission(granted, registry), parse_permission(required, registry))

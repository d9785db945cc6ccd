"""Roles, role nesting, user assignments, and permission queries.

Roles are tenant-scoped and may contain child roles; the child relation
forms a forest of DAGs (a role can have many parents, never a cycle).
Assigning a role implicitly assigns every role reachable through child
edges. Roles also carry permission strings; ``is_permitted`` asks whether
any permission attached to any role in the user's effective closure
implies a concrete request.

Two storage backends implement one contract: an in-memory store for the
simulator and tests, and a SQLite-backed store for durable deployments.
The service layer on top handles cycle rejection, closure memoization,
and per-tenant write serialization, so queries never observe a partially
applied graph mutation.
"""

from __future__ import annotations

import sqlite3
import threading
import time
from dataclasses import dataclass, field

from .errors import CycleDetected, MalformedPermission, NotAuthorized, RoleExists, UnknownRole
from .identity import Caller, UserIdentity
from .permissions import (
    DEFAULT_REGISTRY,
    PermissionSpec,
    SchemaRegistry,
    canonicalize,
    implies,
    parse_permission,
)

# Reserved naming: "$$<username>" is the per-user default role; "$!" marks
# platform roles created at tenant creation. User-supplied names may use
# neither prefix.
DEFAULT_ROLE_PREFIX = "$$"
RESERVED_PREFIX = "$!"
TENANT_ADMIN_ROLE = "$!tenant_admin"
TOKEN_GENERATOR_ROLE = "$!token_generator"


@dataclass
class Role:
    name: str
    tenant: str
    owner: str
    description: str = ""
    children: set = field(default_factory=set)


def default_role_name(username: str) -> str:
    return DEFAULT_ROLE_PREFIX + username


class MemoryRbacStore:
    """Dict-backed store; tables mirror the relational layout."""

    def __init__(self):
        self._roles = {}         # (tenant, name) -> (owner, description)
        self._edges = {}         # tenant -> {parent: set(children)}
        self._assignments = {}   # tenant -> {subject: {role: grantor}}
        self._perms = {}         # (tenant, role) -> list[str]
        self.audit_log = []

    def get_role(self, tenant, name):
        return self._roles.get((tenant, name))

    def put_role(self, tenant, name, owner, description):
        self._roles[(tenant, name)] = (owner, description)

    def delete_role(self, tenant, name):
        self._roles.pop((tenant, name), None)
        edges = self._edges.get(tenant, {})
        edges.pop(name, None)
        for children in edges.values():
            children.discard(name)
        for by_subject in self._assignments.get(tenant, {}).values():
            by_subject.pop(name, None)
        self._perms.pop((tenant, name), None)

    def role_names(self, tenant):
        return [name for (t, name) in self._roles if t == tenant]

    def add_edge(self, tenant, parent, child):
        self._edges.setdefault(tenant, {}).setdefault(parent, set()).add(child)

    def edges(self, tenant):
        return {p: set(cs) for p, cs in self._edges.get(tenant, {}).items()}

    def add_assignment(self, tenant, subject, role, grantor):
        self._assignments.setdefault(tenant, {}).setdefault(subject, {})[role] = grantor

    def remove_assignment(self, tenant, subject, role):
        self._assignments.get(tenant, {}).get(subject, {}).pop(role, None)

    def assignments_of(self, tenant, subject):
        return set(self._assignments.get(tenant, {}).get(subject, {}))

    def add_permission(self, tenant, role, permission):
        perms = self._perms.setdefault((tenant, role), [])
        if permission not in perms:
            perms.append(permission)

    def remove_permission(self, tenant, role, permission):
        perms = self._perms.get((tenant, role), [])
        if permission in perms:
            perms.remove(permission)

    def permissions_of(self, tenant, role):
        return list(self._perms.get((tenant, role), ()))

    def audit(self, tenant, action, detail):
        self.audit_log.append((time.time(), tenant, action, detail))


class SqliteRbacStore:
    """SQLite-backed store with the same contract as MemoryRbacStore."""

    def __init__(self, path=":memory:"):
        self._conn = sqlite3.connect(path, check_same_thread=False)
        self._lock = threading.RLock()
        with self._lock:
            self._conn.executescript(
                """
                CREATE TABLE IF NOT EXISTS roles (
                    tenant TEXT NOT NULL, name TEXT NOT NULL,
                    owner TEXT NOT NULL, description TEXT NOT NULL DEFAULT '',
                    PRIMARY KEY (tenant, name));
                CREATE TABLE IF NOT EXISTS role_edges (
                    tenant TEXT NOT NULL, parent TEXT NOT NULL, child TEXT NOT NULL,
                    PRIMARY KEY (tenant, parent, child));
                CREATE TABLE IF NOT EXISTS assignments (
                    tenant TEXT NOT NULL, subject TEXT NOT NULL,
                    role TEXT NOT NULL, grantor TEXT NOT NULL,
                    PRIMARY KEY (tenant, subject, role));
                CREATE TABLE IF NOT EXISTS role_permissions (
                    tenant TEXT NOT NULL, role TEXT NOT NULL, permission TEXT NOT NULL,
                    PRIMARY KEY (tenant, role, permission));
                CREATE TABLE IF NOT EXISTS audit_log (
                    seq INTEGER PRIMARY KEY AUTOINCREMENT,
                    at REAL, tenant TEXT, action TEXT, detail TEXT);
                """
            )
            self._conn.commit()

    def get_role(self, tenant, name):
        with self._lock:
            row = self._conn.execute(
                "SELECT owner, description FROM roles WHERE tenant=? AND name=?", (tenant, name)
            ).fetchone()
        return row

    def put_role(self, tenant, name, owner, description):
        with self._lock:
            self._conn.execute(
                "INSERT OR REPLACE INTO roles VALUES (?,?,?,?)", (tenant, name, owner, description)
            )
            self._conn.commit()

    def delete_role(self, tenant, name):
        with self._lock:
            self._conn.execute("DELETE FROM roles WHERE tenant=? AND name=?", (tenant, name))
            self._conn.execute(
                "DELETE FROM role_edges WHERE tenant=? AND (parent=? OR child=?)", (tenant, name, name)
            )
            self._conn.execute("DELETE FROM assignments WHERE tenant=? AND role=?", (tenant, name))
            self._conn.execute("DELETE FROM role_permissions WHERE tenant=? AND role=?", (tenant, name))
            self._conn.commit()

    def role_names(self, tenant):
        with self._lock:
            rows = self._conn.execute("SELECT name FROM roles WHERE tenant=?", (tenant,)).fetchall()
        return [r[0] for r in rows]

    def add_edge(self, tenant, parent, child):
        with self._lock:
            self._conn.execute("INSERT OR IGNORE INTO role_edges VALUES (?,?,?)", (tenant, parent, child))
            self._conn.commit()

    def edges(self, tenant):
        with self._lock:
            rows = self._conn.execute(
                "SELECT parent, child FROM role_edges WHERE tenant=?", (tenant,)
            ).fetchall()
        out = {}
        for parent, child in rows:
            out.setdefault(parent, set()).add(child)
        return out

    def add_assignment(self, tenant, subject, role, grantor):
        with self._lock:
            self._conn.execute("INSERT OR REPLACE INTO assignments VALUES (?,?,?,?)",
                               (tenant, subject, role, grantor))
            self._conn.commit()

    def remove_assignment(self, tenant, subject, role):
        with self._lock:
            self._conn.execute("DELETE FROM assignments WHERE tenant=? AND subject=? AND role=?",
                               (tenant, subject, role))
            self._conn.commit()

    def assignments_of(self, tenant, subject):
        with self._lock:
            rows = self._conn.execute(
                "SELECT role FROM assignments WHERE tenant=? AND subject=?", (tenant, subject)
            ).fetchall()
        return {r[0] for r in rows}

    def add_permission(self, tenant, role, permission):
        with self._lock:
            self._conn.execute("INSERT OR IGNORE INTO role_permissions VALUES (?,?,?)",
                               (tenant, role, permission))
            self._conn.commit()

    def remove_permission(self, tenant, role, permission):
        with self._lock:
            self._conn.execute(
                "DELETE FROM role_permissions WHERE tenant=? AND role=? AND permission=?",
                (tenant, role, permission))
            self._conn.commit()

    def permissions_of(self, tenant, role):
        with self._lock:
            rows = self._conn.execute(
                "SELECT permission FROM role_permissions WHERE tenant=? AND role=?", (tenant, role)
            ).fetchall()
        return [r[0] for r in rows]

    def audit(self, tenant, action, detail):
        with self._lock:
            self._conn.execute("INSERT INTO audit_log (at, tenant, action, detail) VALUES (?,?,?,?)",
                               (time.time(), tenant, action, detail))
            self._conn.commit()

    @property
    def audit_log(self):
        with self._lock:
            return self._conn.execute("SELECT at, tenant, action, detail FROM audit_log").fetchall()


class _CompiledGrants:
    """Pre-rendered matcher for one role's concrete grants.

    A concrete grant g implies a concrete canonical request r exactly when
    r == g, r extends g at a part boundary (r startswith g + ":"), or g is
    a path grant and r extends it at a directory boundary (g + "/"; the
    root path grant covers every path so its prefix is g itself). Grants
    carrying wildcards or comma sets fall back to the general matcher.
    """

    __slots__ = ("exact", "prefixes", "general")

    def __init__(self, specs):
        exact = set()
        prefixes = []
        general = []
        for spec in specs:
            canon = canonicalize(spec)
            if spec.is_concrete():
                exact.add(canon)
                if spec.path_tail is None:
                    prefixes.append(canon + ":")
                elif spec.path_tail == "/":
                    prefixes.append(canon)
                else:
                    prefixes.append(canon + "/")
            else:
                general.append(spec)
        self.exact = frozenset(exact)
        self.prefixes = tuple(prefixes)
        self.general = tuple(general)

    def permits(self, canonical_required: str, required: PermissionSpec) -> bool:
        if canonical_required in self.exact:
            return True
        if any(canonical_required.startswith(p) for p in self.prefixes):
            return True
        return any(implies(g, required) for g in self.general)


class RbacService:
    """Role and permission decisions over a pluggable store."""

    def __init__(self, store=None, registry: SchemaRegistry = DEFAULT_REGISTRY):
        self.store = store if store is not None else MemoryRbacStore()
        self.registry = registry
        self._tenant_locks = {}
        self._locks_guard = threading.Lock()
        self._closures = {}   # tenant -> {role: frozenset(reachable incl. self)}
        self._compiled = {}   # (tenant, role) -> _CompiledGrants

    def _lock(self, tenant) -> threading.RLock:
        with self._locks_guard:
            lock = self._tenant_locks.get(tenant)
            if lock is None:
                lock = self._tenant_locks[tenant] = threading.RLock()
            return lock

    def _invalidate_graph(self, tenant):
        self._closures.pop(tenant, None)

    def _invalidate_grants(self, tenant, role):
        self._compiled.pop((tenant, role), None)

    # -- authorization helper --

    def _authorize_admin(self, tenant: str, caller: Caller | None):
        """Tenant admins, services, and internal paths may manage roles."""
        if caller is None or caller.kind in ("service", "sk", "bootstrap"):
            return
        if caller.kind == "user" and caller.tenant == tenant:
            admin = self.store.get_role(tenant, TENANT_ADMIN_ROLE)
            if admin is not None and self.has_role(UserIdentity(caller.name, tenant), TENANT_ADMIN_ROLE):
                return
        raise NotAuthorized(f"{caller.subject()} may not administer roles in tenant {tenant!r}")

    # -- role CRUD --

    def create_role(self, tenant, name, owner, description="", caller=None, _reserved_ok=False) -> Role:
        if not name:
            raise MalformedPermission("role name must be non-empty")
        if not _reserved_ok and (name.startswith(DEFAULT_ROLE_PREFIX) or name.startswith(RESERVED_PREFIX)):
            raise RoleExists(f"role name prefix {name[:2]!r} is reserved")
        self._authorize_admin(tenant, caller)
        with self._lock(tenant):
            existing = self.store.get_role(tenant, name)
            if existing is not None:
                if existing == (owner, description):
                    return self.get_role(tenant, name)
                raise RoleExists(f"role {name!r} already exists in {tenant!r} with different fields")
            self.store.put_role(tenant, name, owner, description)
            self._invalidate_graph(tenant)
        return Role(name=name, tenant=tenant, owner=owner, description=description)

    def get_role(self, tenant, name) -> Role:
        row = self.store.get_role(tenant, name)
        if row is None:
            raise UnknownRole(f"no role {name!r} in tenant {tenant!r}")
        owner, description = row
        children = self.store.edges(tenant).get(name, set())
        return Role(name=name, tenant=tenant, owner=owner, description=description, children=children)

    def delete_role(self, tenant, name, caller=None):
        self._authorize_admin(tenant, caller)
        with self._lock(tenant):
            if self.store.get_role(tenant, name) is None:
                raise UnknownRole(f"no role {name!r} in tenant {tenant!r}")
            self.store.delete_role(tenant, name)
            self.store.audit(tenant, "delete_role_cascade", name)
            self._invalidate_graph(tenant)
            self._invalidate_grants(tenant, name)

    def create_tenant_defaults(self, tenant):
        """Reserved roles every tenant carries from creation."""
        self.create_role(tenant, TENANT_ADMIN_ROLE, "security-kernel",
                         "tenant administration", _reserved_ok=True)
        self.create_role(tenant, TOKEN_GENERATOR_ROLE, "security-kernel",
                         "may mint user tokens in this tenant", _reserved_ok=True)

    # -- nesting --

    def add_child_role(self, tenant, parent, child, caller=None):
        self._authorize_admin(tenant, caller)
        with self._lock(tenant):
            for name in (parent, child):
                if self.store.get_role(tenant, name) is None:
                    raise UnknownRole(f"no role {name!r} in tenant {tenant!r}")
            if parent == child or self._reachable(tenant, child, parent):
                raise CycleDetected(f"edge {parent!r} -> {child!r} would close a cycle")
            self.store.add_edge(tenant, parent, child)
            self._invalidate_graph(tenant)

    def _reachable(self, tenant, start, target) -> bool:
        edges = self.store.edges(tenant)
        frontier = [start]
        seen = set()
        while frontier:
            node = frontier.pop()
            if node == target:
                return True
            if node in seen:
                continue
            seen.add(node)
            frontier.extend(edges.get(node, ()))
        return False

    def _closure_map(self, tenant):
        cache = self._closures.get(tenant)
        if cache is None:
            edges = self.store.edges(tenant)
            cache = {}

            def close(role):
                if role in cache:
                    return cache[role]
                acc = {role}
                cache[role] = frozenset(acc)  # provisional; DAG means no real recursion into self
                for child in edges.get(role, ()):
                    acc |= close(child)
                cache[role] = frozenset(acc)
                return cache[role]

            for name in self.store.role_names(tenant):
                close(name)
            self._closures[tenant] = cache
        return cache

    # -- assignments --

    def ensure_default_role(self, user: UserIdentity) -> Role:
        name = default_role_name(user.username)
        with self._lock(user.tenant):
            if self.store.get_role(user.tenant, name) is None:
                self.store.put_role(user.tenant, name, user.username, "default role")
                self._invalidate_graph(user.tenant)
            self.store.add_assignment(user.tenant, user.username, name, "system")
        return self.get_role(user.tenant, name)

    def grant_role(self, user: UserIdentity, role_name, grantor, caller=None):
        self._authorize_admin(user.tenant, caller)
        with self._lock(user.tenant):
            if self.store.get_role(user.tenant, role_name) is None:
                raise UnknownRole(f"no role {role_name!r} in tenant {user.tenant!r}")
            self.store.add_assignment(user.tenant, user.username, role_name, grantor)

    def grant_role_to_subject(self, tenant, subject, role_name, grantor):
        """Assignment keyed by an arbitrary subject string (service principals
        are granted tenant roles under their qualified name@tenant form)."""
        with self._lock(tenant):
            if self.store.get_role(tenant, role_name) is None:
                raise UnknownRole(f"no role {role_name!r} in tenant {tenant!r}")
            self.store.add_assignment(tenant, subject, role_name, grantor)

    def revoke_role(self, user: UserIdentity, role_name, caller=None):
        self._authorize_admin(user.tenant, caller)
        with self._lock(user.tenant):
            if self.store.get_role(user.tenant, role_name) is None:
                raise UnknownRole(f"no role {role_name!r} in tenant {user.tenant!r}")
            self.store.remove_assignment(user.tenant, user.username, role_name)

    # -- queries --

    def has_role(self, user: UserIdentity, role_name) -> bool:
        return self.subject_has_role(user.tenant, user.username, role_name)

    def subject_has_role(self, tenant, subject, role_name) -> bool:
        if self.store.get_role(tenant, role_name) is None:
            raise UnknownRole(f"no role {role_name!r} in tenant {tenant!r}")
        direct = self.store.assignments_of(tenant, subject)
        if role_name in direct:
            return True
        closures = self._closure_map(tenant)
        return any(role_name in closures.get(r, ()) for r in direct)

    def effective_roles(self, tenant, subject) -> frozenset:
        direct = self.store.assignments_of(tenant, subject)
        closures = self._closure_map(tenant)
        out = set()
        for r in direct:
            out |= closures.get(r, frozenset({r}))
        return frozenset(out)

    # -- permissions --

    def grant_permission(self, role_name, tenant, permission: str, caller=None):
        self._authorize_admin(tenant, caller)
        spec = parse_permission(permission, self.registry)
        with self._lock(tenant):
            if self.store.get_role(tenant, role_name) is None:
                raise UnknownRole(f"no role {role_name!r} in tenant {tenant!r}")
            self.store.add_permission(tenant, role_name, canonicalize(spec))
            self._invalidate_grants(tenant, role_name)

    def revoke_permission(self, role_name, tenant, permission: str, caller=None):
        self._authorize_admin(tenant, caller)
        spec = parse_permission(permission, self.registry)
        with self._lock(tenant):
            if self.store.get_role(tenant, role_name) is None:
                raise UnknownRole(f"no role {role_name!r} in tenant {tenant!r}")
            self.store.remove_permission(tenant, role_name, canonicalize(spec))
            self._invalidate_grants(tenant, role_name)

    def _compiled_for(self, tenant, role) -> _CompiledGrants:
        key = (tenant, role)
        compiled = self._compiled.get(key)
        if compiled is None:
            specs = [parse_permission(p, self.registry) for p in self.store.permissions_of(tenant, role)]
            compiled = self._compiled[key] = _CompiledGrants(specs)
        return compiled

    def is_permitted(self, user: UserIdentity, required_permission: str) -> bool:
        return self.subject_is_permitted(user.tenant, user.username, required_permission)

    def subject_is_permitted(self, tenant, subject, required_permission: str) -> bool:
        required = parse_permission(required_permission, self.registry)
        if not required.is_concrete():
            raise MalformedPermission(f"required permission must be concrete: {required_permission!r}")
        canonical = canonicalize(required)
        for role in self.effective_roles(tenant, subject):
            if self._compiled_for(tenant, role).permits(canonical, required):
                return True
        return False

    def list_permissions(self, tenant, role_name):
        if self.store.get_role(tenant, role_name) is None:
            raise UnknownRole(f"no role {role_name!r} in tenant {tenant!r}")
        return self.store.permissions_of(tenant, role_name)

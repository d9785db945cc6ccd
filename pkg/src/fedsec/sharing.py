"""Share grants and shared application contexts (SACs).

A share lets a grantor extend access to one resource; the distinguished
grantees ``~public`` (every user in the tenant) and ``~public-no-authn``
(unauthenticated URL access, honored only by specially flagged routes)
widen the audience. Shares on applications are checked at share time:
the grantor must currently hold access to every system the application
definition references, closing the privilege-escalation hole where a
grantee would inherit access the grantor never had.

A SAC is the runtime form of an application share: while a job runs,
the resources named in the application definition resolve through the
grantor's authorizations. The grantor's access is re-checked at every
resolution; when it has lapsed, the requester's own access (ownership,
a direct share, or a permission) decides, and with neither the access
is denied. Resources absent from the application definition never
resolve through the SAC path.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from enum import Enum

from .errors import NotAuthorized, NotFound, ResourceNotInSac, ShareTimeCheckFailed
from .identity import Caller

PUBLIC_TENANT = "~public"
NO_AUTHN = "~public-no-authn"

PRIVILEGES = ("READ", "EXECUTE", "MODIFY")
RESOURCE_TYPES = ("application", "system", "path")

SAC_GRANTOR_HEADER = "X-Tapis-Sac-Grantor"
SAC_APP_HEADER = "X-Tapis-Sac-App"


@dataclass(frozen=True)
class ShareGrant:
    tenant: str
    grantor: str
    grantee: str
    resource_type: str
    resource_id: str
    privilege: str

    def __post_init__(self):
        if self.grantor == self.grantee:
            raise NotAuthorized("grantor and grantee must differ")
        if self.privilege not in PRIVILEGES:
            raise NotFound(f"unknown privilege {self.privilege!r}")
        if self.resource_type not in RESOURCE_TYPES:
            raise NotFound(f"unknown resource type {self.resource_type!r}")


@dataclass(frozen=True)
class SacDescriptor:
    grantor: str
    app_id: str
    tenant: str
    shared_resources: frozenset  # of (resource_type, resource_id, path-or-None)

    def contains(self, resource_type: str, resource_id: str) -> bool:
        return any(rt == resource_type and rid == resource_id
                   for rt, rid, _ in self.shared_resources)


class AccessOutcome(str, Enum):
    GRANTOR_AUTHORIZED = "grantor-authorized"
    GRANTEE_AUTHORIZED = "grantee-authorized"
    DENIED = "denied"


class SharingService:
    """Grant storage plus SAC resolution; mutations serialize per tenant."""

    def __init__(self):
        self._grants = []      # ordered, so the earliest grantor wins ties
        self._lock = threading.RLock()

    # -- grants --

    def create_share(self, grant: ShareGrant, caller: Caller,
                     referenced_systems=(), access_checker=None):
        """Record a grant; application shares re-check the grantor's access
        to every referenced system first and name the failing one."""
        if not (caller.name == grant.grantor and caller.tenant == grant.tenant):
            raise NotAuthorized("only the grantor may create a share")
        if grant.resource_type == "application" and access_checker is not None:
            for system_id in referenced_systems:
                if not access_checker(grant.grantor, "system", system_id):
                    raise ShareTimeCheckFailed(
                        f"grantor lacks access to system {system_id!r}", failing_system=system_id)
        with self._lock:
            if grant not in self._grants:
                self._grants.append(grant)

    def revoke_share(self, grant: ShareGrant, caller: Caller, is_tenant_admin=lambda c: False):
        if caller.kind == "user" and caller.name != grant.grantor and not is_tenant_admin(caller):
            raise NotAuthorized("only the grantor or a tenant admin may revoke")
        with self._lock:
            if grant not in self._grants:
                raise NotFound("no such share grant")
            self._grants.remove(grant)

    def list_shares(self, tenant: str):
        with self._lock:
            return [g for g in self._grants if g.tenant == tenant]

    # -- queries --

    def is_shared_with(self, tenant, resource_type, resource_id, user, privilege):
        """(shared, grantor) for a direct or tenant-public grant."""
        with self._lock:
            for g in self._grants:
                if (g.tenant, g.resource_type, g.resource_id, g.privilege) != (
                        tenant, resource_type, resource_id, privilege):
                    continue
                if g.grantee == user or g.grantee == PUBLIC_TENANT:
                    return True, g.grantor
        return False, None

    def is_no_authn_shared(self, tenant, resource_type, resource_id, privilege) -> bool:
        """Only routes flagged for unauthenticated access consult this."""
        with self._lock:
            return any(
                g.grantee == NO_AUTHN
                and (g.tenant, g.resource_type, g.resource_id, g.privilege)
                == (tenant, resource_type, resource_id, privilege)
                for g in self._grants
            )

    # -- SAC resolution --

    def resolve_sac_access(self, sac: SacDescriptor, requesting_user: str,
                           resource, privilege: str, authorized) -> AccessOutcome:
        """Runtime SAC check for one resource (a (type, id) pair).

        ``authorized(user, resource_type, resource_id, privilege)`` decides
        ownership/permission-based access; share grants recorded here are
        consulted on top of it. Nothing is cached: every call reflects the
        grant and permission state at this instant.
        """
        resource_type, resource_id = resource[0], resource[1]
        if not sac.contains(resource_type, resource_id):
            raise ResourceNotInSac(
                f"{resource_type} {resource_id!r} is not named in application {sac.app_id!r}")

        def has_access(user):
            if authorized(user, resource_type, resource_id, privilege):
                return True
            shared, _ = self.is_shared_with(sac.tenant, resource_type, resource_id, user, privilege)
            return shared

        if has_access(sac.grantor):
            return AccessOutcome.GRANTOR_AUTHORIZED
        if has_access(requesting_user):
            return AccessOutcome.GRANTEE_AUTHORIZED
        return AccessOutcome.DENIED

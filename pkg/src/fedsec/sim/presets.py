"""Canonical topology documents used by the CLI, tests, and scenarios."""

from __future__ import annotations

ALL_SERVICES = ["security-kernel", "tokens", "authenticator", "tenants",
                "systems", "apps", "files", "jobs"]
ASSOCIATE_BASE = ["security-kernel", "tokens", "authenticator"]


def two_site_topology(assoc_services=("systems",), link_ms=None, users=None,
                      host_acl=None, no_authn_routes=(), service_token_ttl=None) -> dict:
    """One primary (prime) and one associate (assoc1); tenant1 lives at the
    primary, tenant2 at the associate."""
    doc = {
        "sites": [
            {"site_id": "prime", "is_primary": True, "admin_tenant": "admin.prime",
             "base_host": "prime.sim", "services": list(ALL_SERVICES)},
            {"site_id": "assoc1", "is_primary": False, "admin_tenant": "admin.assoc1",
             "base_host": "assoc1.sim",
             "services": ASSOCIATE_BASE + [s for s in assoc_services if s not in ASSOCIATE_BASE]},
        ],
        "tenants": [
            {"tenant_id": "admin.prime", "owning_site": "prime", "is_admin_tenant": True},
            {"tenant_id": "admin.assoc1", "owning_site": "assoc1", "is_admin_tenant": True},
            {"tenant_id": "tenant1", "owning_site": "prime", "admin_user": "root1",
             "users": dict(users or {}).get("tenant1",
                                            {"alice": "pw-alice", "bob": "pw-bob",
                                             "root1": "pw-root1"})},
            {"tenant_id": "tenant2", "owning_site": "assoc1", "admin_user": "root2",
             "users": dict(users or {}).get("tenant2",
                                            {"carol": "pw-carol", "root2": "pw-root2"})},
        ],
        "host_acl": host_acl or {},
        "no_authn_routes": list(no_authn_routes),
    }
    if link_ms:
        doc["link_latency_ms"] = {"prime:assoc1": link_ms}
    if service_token_ttl:
        doc["service_token_ttl_seconds"] = service_token_ttl
    return doc


def walkthrough_topology() -> dict:
    """Shared-application-context walkthrough: everything the job needs runs
    at the primary; host allow-tables model the POSIX side."""
    return two_site_topology(
        host_acl={
            "execSys": {"bob": ["READ", "EXECUTE", "MODIFY"],
                        "alice": ["READ", "EXECUTE", "MODIFY"]},
            "storeSys": {"storeAdmin": ["READ", "MODIFY"]},
            "arcSys": {"bob": ["READ", "MODIFY"]},
        },
        no_authn_routes=["files-content"],
    )


def penalty_topology(link_ms: float = 132.5) -> dict:
    """Systems runs only at the primary, so associate-tenant requests pay
    one forwarded round trip."""
    return two_site_topology(assoc_services=(), link_ms=link_ms)


def load_topology() -> dict:
    """Single-tenant primary used by the load harness."""
    return two_site_topology()

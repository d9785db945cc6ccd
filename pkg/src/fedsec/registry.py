"""Authoritative model of sites, tenants, base URLs, and signing keys.

The registry is loaded from a declarative JSON document with top-level
``sites`` and ``tenants`` arrays. It is read-mostly: runtime mutation is
limited to tenant registration and public-key replacement, and every
mutation swaps a fully validated immutable snapshot, so readers never see
partial updates.

Associate sites do not own a registry; they cache the primary's through
``CachedRegistryView`` with a fixed refresh interval.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, replace

from .errors import DuplicateTenant, NotAuthorized, TopologyInvalid, UnknownSite, UnknownTenant
from .identity import Caller

REQUIRED_SITE_SERVICES = frozenset({"tokens", "authenticator", "security-kernel"})
TENANTS_SERVICE = "tenants"

#: Associate caches refresh on this fixed interval (seconds).
REGISTRY_REFRESH_SECONDS = 300.0


@dataclass(frozen=True)
class SiteConfig:
    site_id: str
    is_primary: bool
    admin_tenant: str
    services: frozenset
    base_host: str

    @classmethod
    def from_dict(cls, d) -> "SiteConfig":
        return cls(
            site_id=d["site_id"],
            is_primary=bool(d.get("is_primary", False)),
            admin_tenant=d["admin_tenant"],
            services=frozenset(d.get("services", ())),
            base_host=d.get("base_host", d["site_id"] + ".sim"),
        )

    def to_dict(self) -> dict:
        return {
            "site_id": self.site_id,
            "is_primary": self.is_primary,
            "admin_tenant": self.admin_tenant,
            "services": sorted(self.services),
            "base_host": self.base_host,
        }


@dataclass(frozen=True)
class TenantRecord:
    tenant_id: str
    owning_site: str
    base_url: str
    public_key: str = ""
    token_service_url: str = ""
    is_admin_tenant: bool = False

    @classmethod
    def from_dict(cls, d) -> "TenantRecord":
        base_url = d.get("base_url") or f"http://{d['tenant_id']}.sim"
        return cls(
            tenant_id=d["tenant_id"],
            owning_site=d["owning_site"],
            base_url=base_url,
            public_key=d.get("public_key", ""),
            token_service_url=d.get("token_service_url", base_url.rstrip("/") + "/v3/tokens"),
            is_admin_tenant=bool(d.get("is_admin_tenant", False)),
        )

    def to_dict(self) -> dict:
        return {
            "tenant_id": self.tenant_id,
            "owning_site": self.owning_site,
            "base_url": self.base_url,
            "public_key": self.public_key,
            "token_service_url": self.token_service_url,
            "is_admin_tenant": self.is_admin_tenant,
        }

    @property
    def host(self) -> str:
        return self.base_url.split("//", 1)[-1].split("/", 1)[0]


class RegistrySnapshot:
    """Immutable, validated view of the whole federation topology."""

    def __init__(self, sites, tenants):
        self.sites = {s.site_id: s for s in sites}
        self.tenants = {t.tenant_id: t for t in tenants}
        self._validate()

    def _validate(self):
        primaries = [s for s in self.sites.values() if s.is_primary]
        if len(primaries) != 1:
            raise TopologyInvalid(f"exactly one primary site required, found {len(primaries)}")
        primary = primaries[0]

        known_services = set(REQUIRED_SITE_SERVICES) | {TENANTS_SERVICE}
        for site in self.sites.values():
            known_services |= site.services
        for site in self.sites.values():
            missing = REQUIRED_SITE_SERVICES - site.services
            if missing:
                raise TopologyInvalid(f"site {site.site_id!r} must run {sorted(missing)}")
            if not site.is_primary and TENANTS_SERVICE in site.services:
                raise TopologyInvalid(f"associate site {site.site_id!r} may not run the tenants service")
        if known_services - primary.services:
            raise TopologyInvalid(
                f"primary site must run every known service, missing {sorted(known_services - primary.services)}"
            )

        base_urls = {}
        for t in self.tenants.values():
            if t.owning_site not in self.sites:
                raise TopologyInvalid(f"tenant {t.tenant_id!r} owned by unknown site {t.owning_site!r}")
            if t.base_url in base_urls:
                raise TopologyInvalid(f"tenants {base_urls[t.base_url]!r} and {t.tenant_id!r} share a base URL")
            base_urls[t.base_url] = t.tenant_id

        admin_tenants = {s.admin_tenant for s in self.sites.values()}
        for site in self.sites.values():
            rec = self.tenants.get(site.admin_tenant)
            if rec is None or not rec.is_admin_tenant:
                raise TopologyInvalid(f"admin tenant {site.admin_tenant!r} of site {site.site_id!r} missing")
            if rec.owning_site != site.site_id:
                raise TopologyInvalid(f"admin tenant {site.admin_tenant!r} must be owned by {site.site_id!r}")
        for t in self.tenants.values():
            if t.is_admin_tenant and t.tenant_id not in admin_tenants:
                raise TopologyInvalid(f"tenant {t.tenant_id!r} flagged administrative but no site claims it")

    def primary_site(self) -> SiteConfig:
        return next(s for s in self.sites.values() if s.is_primary)

    def is_admin_tenant(self, tenant_id: str) -> bool:
        rec = self.tenants.get(tenant_id)
        return rec is not None and rec.is_admin_tenant


def load_config(doc: dict) -> RegistrySnapshot:
    """Build a snapshot from the configuration document's sites/tenants arrays."""
    sites = [SiteConfig.from_dict(d) for d in doc.get("sites", ())]
    tenants = [TenantRecord.from_dict(d) for d in doc.get("tenants", ())]
    return RegistrySnapshot(sites, tenants)


class Registry:
    """Mutable holder over immutable snapshots; swaps are atomic."""

    def __init__(self, snapshot: RegistrySnapshot):
        self._snapshot = snapshot
        self._lock = threading.Lock()

    @classmethod
    def from_config(cls, doc: dict) -> "Registry":
        return cls(load_config(doc))

    @property
    def snapshot(self) -> RegistrySnapshot:
        return self._snapshot

    # -- queries --

    def get_tenant(self, tenant_id: str) -> TenantRecord:
        rec = self._snapshot.tenants.get(tenant_id)
        if rec is None:
            raise UnknownTenant(f"no tenant {tenant_id!r}")
        return rec

    def list_tenants(self):
        return sorted(self._snapshot.tenants.values(), key=lambda t: t.tenant_id)

    def get_public_key(self, tenant_id: str) -> str:
        return self.get_tenant(tenant_id).public_key

    def resolve_site_for_tenant(self, tenant_id: str) -> SiteConfig:
        return self._snapshot.sites[self.get_tenant(tenant_id).owning_site]

    def site(self, site_id: str) -> SiteConfig:
        cfg = self._snapshot.sites.get(site_id)
        if cfg is None:
            raise UnknownSite(f"no site {site_id!r}")
        return cfg

    def service_runs_at(self, service: str, site_id: str) -> bool:
        return service in self.site(site_id).services

    def primary_site(self) -> SiteConfig:
        return self._snapshot.primary_site()

    def admin_tenant_of(self, site_id: str) -> str:
        return self.site(site_id).admin_tenant

    def is_admin_tenant(self, tenant_id: str) -> bool:
        return self._snapshot.is_admin_tenant(tenant_id)

    # -- mutation --

    def register_tenant(self, record: TenantRecord, caller: Caller):
        if record.is_admin_tenant and caller.kind != "bootstrap":
            raise NotAuthorized("administrative tenants enter only through the bootstrap key exchange")
        if caller.kind == "operator":
            allowed_sites = {self.primary_site().site_id, record.owning_site}
            if caller.name not in allowed_sites:
                raise NotAuthorized(f"operator of {caller.name!r} may not register tenants for {record.owning_site!r}")
        elif caller.kind != "bootstrap":
            raise NotAuthorized("tenant registration requires a site operator or the bootstrap path")
        with self._lock:
            snap = self._snapshot
            if record.tenant_id in snap.tenants:
                raise DuplicateTenant(f"tenant {record.tenant_id!r} already registered")
            if record.owning_site not in snap.sites:
                raise UnknownSite(f"no site {record.owning_site!r}")
            self._snapshot = RegistrySnapshot(snap.sites.values(), list(snap.tenants.values()) + [record])

    def replace_public_key(self, tenant_id: str, public_key: str):
        with self._lock:
            snap = self._snapshot
            rec = snap.tenants.get(tenant_id)
            if rec is None:
                raise UnknownTenant(f"no tenant {tenant_id!r}")
            updated = replace(rec, public_key=public_key)
            tenants = [updated if t.tenant_id == tenant_id else t for t in snap.tenants.values()]
            self._snapshot = RegistrySnapshot(snap.sites.values(), tenants)

    def reload(self, snapshot: RegistrySnapshot):
        with self._lock:
            self._snapshot = snapshot


class CachedRegistryView:
    """An associate site's cached copy of the primary registry.

    ``fetch`` returns a fresh RegistrySnapshot; the cache refreshes it
    after ``refresh_seconds`` and reports its age so health checks can
    flag staleness.
    """

    def __init__(self, fetch, refresh_seconds: float = REGISTRY_REFRESH_SECONDS, clock=time.time):
        self._fetch = fetch
        self.refresh_seconds = refresh_seconds
        self._clock = clock
        self._lock = threading.Lock()
        self._snapshot = None
        self._fetched_at = None

    def _registry(self) -> Registry:
        with self._lock:
            now = self._clock()
            if self._snapshot is None or now - self._fetched_at >= self.refresh_seconds:
                try:
                    self._snapshot = self._fetch()
                    self._fetched_at = now
                except Exception:
                    if self._snapshot is None:
                        raise
            return Registry(self._snapshot)

    def age(self) -> float:
        if self._fetched_at is None:
            return float("inf")
        return self._clock() - self._fetched_at

    def invalidate(self):
        with self._lock:
            self._snapshot = None
            self._fetched_at = None

    def __getattr__(self, name):
        return getattr(self._registry(), name)

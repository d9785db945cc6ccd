"""Build and drive a running multi-site federation on localhost.

Each site gets its own secrets store, RBAC store, sharing store, token
forge, and HTTP listener; DNS is a host table mapping every tenant's base
URL host to the owning site's listener. Site bring-up follows the
deployment order: secrets first, bootstrap, registry (primary) or key
handoff (associates), kernel, tokens, authenticator, then stubs.

The federation owns a transcript recorder shared by every service, a
per-service token cache (one access/refresh pair per target site,
refreshed near expiry), and the cross-site transports that inject
configured link latency on forwarded hops.
"""

from __future__ import annotations

import json
import threading
import time

import requests

from ..errors import StartupError, TopologyInvalid
from ..gatekeeper import OBO_TENANT_HEADER, OBO_USER_HEADER, TOKEN_HEADER
from ..identity import BOOTSTRAP, Caller
from ..rbac import TOKEN_GENERATOR_ROLE, TENANT_ADMIN_ROLE, MemoryRbacStore, RbacService
from ..registry import CachedRegistryView, Registry, RegistrySnapshot, TenantRecord
from ..secrets import MemoryKvBackend, SecretCategory, SecretPath, SecretsService
from ..service import SiteRuntime, serve_site
from ..sharing import SharingService
from ..skadmin import BootstrapConfig, run_bootstrap
from ..tokens import TokenForge, peek_claims
from ..wire import Response
from .stubs import STUB_APPS
from .topology import Topology

_thread_local = threading.local()


def _session() -> requests.Session:
    session = getattr(_thread_local, "session", None)
    if session is None:
        session = requests.Session()
        session.trust_env = False
        _thread_local.session = session
    return session


class Transcript:
    """Thread-safe ordered record of everything the federation did."""

    def __init__(self):
        self._entries = []
        self._lock = threading.Lock()

    def record(self, actor, action, target=None, sac=False, **detail):
        with self._lock:
            self._entries.append({
                "seq": len(self._entries),
                "actor": actor,
                "action": action,
                "target": target,
                "sac": sac,
                "detail": detail,
            })

    def snapshot(self):
        with self._lock:
            return [dict(e) for e in self._entries]

    def clear(self):
        with self._lock:
            self._entries.clear()

    def find(self, action=None, actor=None):
        return [e for e in self.snapshot()
                if (action is None or e["action"] == action)
                and (actor is None or e["actor"] == actor)]


class _TokenCache:
    """Per-service access/refresh pairs keyed by target site."""

    REFRESH_MARGIN = 60.0

    def __init__(self, federation, site_id, service):
        self.federation = federation
        self.site_id = site_id
        self.service = service
        self._pairs = {}
        self._lock = threading.Lock()

    def access_token(self, target_site: str) -> str:
        with self._lock:
            pair = self._pairs.get(target_site)
            if pair is not None:
                claims = peek_claims(pair["access"])
                if claims.exp - time.time() > self.REFRESH_MARGIN:
                    return pair["access"]
                refreshed = self.federation._refresh_service_token(self.site_id, pair["refresh"])
                if refreshed is not None:
                    self._pairs[target_site] = refreshed
                    return refreshed["access"]
            pair = self.federation._acquire_service_tokens(self.site_id, self.service, target_site)
            self._pairs[target_site] = pair
            return pair["access"]


class Federation:
    def __init__(self, topology: Topology):
        self.topo = topology
        self.transcript = Transcript()
        self.primary_id = topology.primary_site_id()
        self.secrets = {}        # site -> SecretsService
        self.reports = {}        # site -> BootstrapReport
        self.runtimes = {}       # site -> SiteRuntime
        self.handles = {}        # site -> SiteHandle
        self.dns = {}            # host -> site_id
        self.ports = {}          # site -> port
        self.registry = None     # authoritative (primary) registry
        self._token_caches = {}
        self._started = False

    # ------------------------------------------------------------------
    # bring-up

    def start(self) -> "Federation":
        if self._started:
            return self
        self._bootstrap_sites()
        self._build_primary_registry()
        for site in self._sites_in_start_order():
            self._start_site(site)
        self._provision_authorization()
        self._started = True
        return self

    def _sites_in_start_order(self):
        ordered = [s for s in self.topo.sites if s.is_primary]
        ordered += [s for s in self.topo.sites if not s.is_primary]
        return ordered

    def _bootstrap_sites(self):
        """Step 1-3 of the deployment sequence for every site."""
        for site in self.topo.sites:
            owned = [t.tenant_id for t in self.topo.tenants_owned_by(site.site_id)]
            config = BootstrapConfig(
                site_id=site.site_id,
                is_primary=site.is_primary,
                admin_tenant=site.admin_tenant,
                tenants=owned,
                services=sorted(site.services),
            )
            store = SecretsService(backend=MemoryKvBackend(), site_id=site.site_id,
                                   admin_tenant=site.admin_tenant)
            self.secrets[site.site_id] = store
            self.reports[site.site_id] = run_bootstrap(config, store)
            self.transcript.record(f"sk-admin@{site.site_id}", "bootstrap",
                                   created=len(self.reports[site.site_id].created))
        for site in self.topo.sites:
            if not site.is_primary:
                # Associate operators hand their admin public key to the primary.
                self.transcript.record(f"operator@{site.site_id}", "send-admin-key",
                                       target=self.primary_id)

    def _build_primary_registry(self):
        tenants = []
        for record in self.topo.tenants:
            report = self.reports[record.owning_site]
            pem = report.public_keys.get(record.tenant_id, record.public_key)
            tenants.append(TenantRecord(
                tenant_id=record.tenant_id, owning_site=record.owning_site,
                base_url=record.base_url, public_key=pem,
                token_service_url=record.token_service_url,
                is_admin_tenant=record.is_admin_tenant))
        self.registry = Registry(RegistrySnapshot(self.topo.sites, tenants))

    def _associate_registry_view(self, refresh_seconds=300.0):
        primary_admin_host = self.registry.get_tenant(
            self.registry.primary_site().admin_tenant).host

        def fetch():
            response = self.request("GET", primary_admin_host, "/v3/tenants")
            records = [TenantRecord.from_dict(d) for d in response.json()["result"]]
            return RegistrySnapshot(self.topo.sites, records)

        return CachedRegistryView(fetch, refresh_seconds=refresh_seconds)

    def _start_site(self, site):
        site_id = site.site_id
        secrets = self.secrets[site_id]
        registry = self.registry if site.is_primary else self._associate_registry_view()
        rbac = RbacService(MemoryRbacStore(), registry=self.topo.schema_registry)
        sharing = SharingService()
        key_cache = self._tokens_startup(site, secrets)
        forge = TokenForge(
            site_id=site_id, admin_tenant=site.admin_tenant,
            private_key_provider=key_cache, rbac=rbac,
            registry=registry if not site.is_primary else self.registry,
            secrets=secrets, default_ttl=self.topo.service_token_ttl)

        runtime = SiteRuntime(
            site, registry, rbac=rbac, secrets=secrets, sharing=sharing, forge=forge,
            operator_credential=self.topo.operator_credentials.get(site_id, f"operator-{site_id}"),
            user_credentials=self.topo.tenant_users,
            forward_transport=None if site.is_primary else self._make_forward_transport(site_id),
            extra_apps=STUB_APPS)
        runtime.transcript = self.transcript
        runtime.service_request_fn = self._service_request
        runtime.host_acl_fn = self.topo.host_allows
        runtime.no_authn_routes = self.topo.no_authn_routes

        handle = serve_site(runtime)
        self.runtimes[site_id] = runtime
        self.handles[site_id] = handle
        self.ports[site_id] = handle.port
        self.dns[site.base_host] = site_id
        for record in self.topo.tenants_owned_by(site_id):
            self.dns[record.host] = site_id
        self.transcript.record(f"site@{site_id}", "site-started", port=handle.port)

    def _tokens_startup(self, site, secrets):
        """The token service's chicken-and-egg bootstrap: the admin tenant's
        private key is injected directly; a self-signed token then stands in
        for its identity while it loads the remaining tenants' keys."""
        site_id = site.site_id
        admin = site.admin_tenant
        injected = secrets.read_secret(
            SecretPath(admin, SecretCategory.SIGNING_KEY, "sk", "keypair"), BOOTSTRAP)
        keys = {admin: json.loads(injected.payload)["private"]}
        self.transcript.record(f"tokens@{site_id}", "startup-self-signed-token", tenant=admin)
        tokens_caller = Caller(name="tokens", tenant=admin, kind="service")
        for record in self.topo.tenants_owned_by(site_id):
            if record.tenant_id == admin:
                continue
            value = secrets.read_secret(
                SecretPath(record.tenant_id, SecretCategory.SIGNING_KEY, "sk", "keypair"),
                tokens_caller)
            keys[record.tenant_id] = json.loads(value.payload)["private"]
            self.transcript.record(f"tokens@{site_id}", "startup-key-loaded",
                                   tenant=record.tenant_id)

        def provider(tenant_id):
            if tenant_id not in keys:
                from ..errors import UnknownTenant
                raise UnknownTenant(f"site {site_id} holds no key for {tenant_id!r}")
            return keys[tenant_id]

        return provider

    def _provision_authorization(self):
        """Reserved roles, token_generator grants, and user default roles."""
        from ..identity import UserIdentity

        for site in self.topo.sites:
            rbac = self.runtimes[site.site_id].rbac
            authenticator_subject = f"authenticator@{site.admin_tenant}"
            for record in self.topo.tenants_owned_by(site.site_id):
                tenant = record.tenant_id
                rbac.create_tenant_defaults(tenant)
                rbac.grant_role_to_subject(tenant, authenticator_subject,
                                           TOKEN_GENERATOR_ROLE, "bootstrap")
                admin_user = self.topo.tenant_admins.get(tenant)
                if admin_user:
                    rbac.ensure_default_role(UserIdentity(admin_user, tenant))
                    rbac.grant_role(UserIdentity(admin_user, tenant), TENANT_ADMIN_ROLE, "bootstrap")
                for username in self.topo.tenant_users.get(tenant, {}):
                    rbac.ensure_default_role(UserIdentity(username, tenant))

    def close(self):
        for handle in self.handles.values():
            handle.close()
        self._started = False

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.close()

    # ------------------------------------------------------------------
    # transports and clients

    def _make_forward_transport(self, from_site):
        delay = self.topo.one_way_seconds(from_site, self.primary_id)

        def transport(req):
            if delay:
                time.sleep(delay)
            hop_headers = {k: v for k, v in req.headers.items()
                           if k.lower().startswith("x-tapis") or k.lower().startswith("x-sim")
                           or k.lower() in ("content-type", "authorization")}
            hop_headers["Host"] = req.host
            hop_headers["Connection"] = "close"
            # One connection per hop: a pooled connection can outlive the
            # primary's listener and mask an unreachable site.
            with requests.Session() as hop:
                hop.trust_env = False
                response = hop.request(
                    req.method, f"http://127.0.0.1:{self.ports[self.primary_id]}{req.path}",
                    params=req.query, headers=hop_headers, data=req.body or None, timeout=60)
            if delay:
                time.sleep(delay)
            self.transcript.record(f"router@{from_site}", "forwarded-to-primary",
                                   target=req.path)
            return Response(status=response.status_code, body=response.json())

        return transport

    def request(self, method, host, path, headers=None, json_body=None,
                query=None, token=None, timeout=60):
        site_id = self.dns.get(host)
        if site_id is None:
            raise TopologyInvalid(f"no DNS entry for host {host!r}")
        return self.request_at_site(site_id, host, method, path, headers=headers,
                                    json_body=json_body, query=query, token=token,
                                    timeout=timeout)

    def request_at_site(self, site_id, host, method, path, headers=None, json_body=None,
                        query=None, token=None, timeout=60):
        """Send to a specific site's listener regardless of DNS (misdirected
        and forwarded-equivalence probes)."""
        final_headers = {"Host": host}
        if token:
            final_headers[TOKEN_HEADER] = token
        if headers:
            final_headers.update(headers)
        return _session().request(
            method, f"http://127.0.0.1:{self.ports[site_id]}{path}",
            params=query, headers=final_headers, json=json_body, timeout=timeout)

    def login(self, tenant, username, password=None) -> str:
        password = password or self.topo.tenant_users.get(tenant, {}).get(username)
        host = self.registry.get_tenant(tenant).host
        response = self.request("POST", host, "/v3/authenticator/tokens",
                                json_body={"tenant": tenant, "username": username,
                                           "password": password})
        if response.status_code != 201:
            raise StartupError(f"login failed for {username}@{tenant}: {response.text}")
        return response.json()["result"]["accessToken"]

    def service_password(self, site_id, service) -> str:
        store = self.secrets[site_id]
        admin = self.registry.site(site_id).admin_tenant
        value = store.read_secret(
            SecretPath(admin, SecretCategory.SERVICE_PASSWORD, service, "password"), BOOTSTRAP)
        return value.payload.decode()

    def _admin_host(self, site_id) -> str:
        return self.registry.get_tenant(self.registry.site(site_id).admin_tenant).host

    def _acquire_service_tokens(self, site_id, service, target_site) -> dict:
        import base64
        password = self.service_password(site_id, service)
        basic = base64.b64encode(f"{service}:{password}".encode()).decode()
        response = self.request(
            "POST", self._admin_host(site_id), "/v3/tokens/service",
            headers={"Authorization": f"Basic {basic}"},
            json_body={"targetSites": [target_site]})
        if response.status_code != 201:
            raise StartupError(f"service token acquisition failed for {service}@{site_id}: "
                               f"{response.text}")
        pair = response.json()["result"][target_site]
        return {"access": pair["accessToken"], "refresh": pair["refreshToken"]}

    def _refresh_service_token(self, site_id, refresh_token):
        response = self.request("POST", self._admin_host(site_id), "/v3/tokens/refresh",
                                json_body={"refreshToken": refresh_token})
        if response.status_code != 201:
            return None
        result = response.json()["result"]
        return {"access": result["accessToken"], "refresh": result["refreshToken"]}

    def service_token(self, site_id, service, target_site) -> str:
        key = (site_id, service)
        cache = self._token_caches.get(key)
        if cache is None:
            cache = self._token_caches[key] = _TokenCache(self, site_id, service)
        return cache.access_token(target_site)

    def receiving_site_for(self, tenant_id, service) -> str:
        owning = self.registry.resolve_site_for_tenant(tenant_id)
        if service in owning.services:
            return owning.site_id
        return self.primary_id

    def _service_request(self, from_site, from_service, method, tenant, path,
                         obo=None, json_body=None, query=None, headers=None):
        """A service at from_site calls another service in some tenant."""
        from ..router import extract_service

        target_service = extract_service(path) or ""
        receiving = self.receiving_site_for(tenant, target_service)
        token = self.service_token(from_site, from_service, receiving)
        record = self.registry.get_tenant(tenant)
        final_headers = dict(headers or {})
        if obo is not None:
            final_headers[OBO_USER_HEADER] = obo.username
            final_headers[OBO_TENANT_HEADER] = obo.tenant
        self.transcript.record(
            f"{from_service}@{from_site}", "service-call",
            target=f"{target_service}@{receiving}{path}",
            sac=any(h.lower().startswith("x-tapis-sac") for h in final_headers),
            obo=obo.subject() if obo else None)
        return self.request(method, record.host, path, headers=final_headers,
                            json_body=json_body, query=query, token=token)


def build_federation(topology) -> Federation:
    """Validate a topology and return a running federation handle."""
    if isinstance(topology, dict):
        topology = Topology.from_dict(topology)
    return Federation(topology).start()

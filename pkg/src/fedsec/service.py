"""HTTP bindings: the security kernel plus the token, tenant, and
authenticator services, and the per-site runtime tying them to the router.

One ``SiteRuntime`` exists per site. It receives every inbound request,
applies the routing decision (serve locally, forward to the primary, or
reject), and hands local requests to the addressed service app. Apps mark
each route with an auth mode; ``token`` routes run the request-validation
gatekeeper first and surface rejections as 401/403 envelopes carrying the
violated rule number.

Exactly one security-kernel app runs per site; it refuses tokens from
tenants owned elsewhere (validation rule 3) before any handler runs.
"""

from __future__ import annotations

import base64
import binascii
import re
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .errors import SecurityError, StartupError
from .gatekeeper import InboundRequest, validate_request
from .identity import Caller, UserIdentity
from .rbac import TENANT_ADMIN_ROLE
from .router import RouteKind, extract_service, forward, route
from .secrets import SecretCategory, SecretPath, SecretValue
from .sharing import ShareGrant
from .wire import BadRequestBody, Request, Response, fail, ok


def rejection_response(verdict) -> Response:
    status = 401 if verdict.rule_violated == "1" else 403
    return fail(status, "REQUEST_VALIDATION_FAILED",
                f"request rejected by validation rule {verdict.rule_violated}",
                rule=verdict.rule_violated, detail=verdict.message)


def caller_from(verdict) -> Caller:
    kind = "service" if verdict.claims.account_type == "service" else "user"
    return Caller(name=verdict.claims.username, tenant=verdict.claims.tenant_id, kind=kind)


class ServiceApp:
    """Base: route table dispatch plus per-route authentication."""

    name = "service"
    ROUTES = ()  # (method, pattern, auth, handler_name); auth: token|open

    def __init__(self, runtime: "SiteRuntime"):
        self.rt = runtime
        self._compiled = []
        for method, pattern, auth, handler_name in self.ROUTES:
            # {name} matches one segment; {name:path} spans segments.
            regex = re.sub(r"\{(\w+):path\}", r"(?P<\1>.+)", pattern)
            regex = re.compile("^" + re.sub(r"\{(\w+)\}", r"(?P<\1>[^/]+)", regex) + "$")
            self._compiled.append((method, regex, auth, getattr(self, handler_name)))

    def dispatch(self, req: Request) -> Response:
        for method, regex, auth, handler in self._compiled:
            if req.method != method:
                continue
            match = regex.match(req.path)
            if not match:
                continue
            verdict = None
            if auth == "token":
                verdict = self.rt.validate(req, self.name)
                if not verdict.accepted:
                    return rejection_response(verdict)
            try:
                return handler(req, verdict, **match.groupdict())
            except BadRequestBody as exc:
                return fail(400, "BAD_REQUEST", str(exc))
            except SecurityError as exc:
                return fail(exc.http_status, exc.code, exc.message)
        return fail(404, "NO_ROUTE", f"{self.name} has no route for {req.method} {req.path}")


class SecurityKernelApp(ServiceApp):
    name = "security-kernel"

    ROUTES = (
        ("GET", "/v3/security/healthcheck", "open", "healthcheck"),
        ("POST", "/v3/security/roles", "token", "create_role"),
        ("GET", "/v3/security/roles/hasRole", "token", "has_role"),
        ("GET", "/v3/security/roles/{name}", "token", "get_role"),
        ("DELETE", "/v3/security/roles/{name}", "token", "delete_role"),
        ("POST", "/v3/security/roles/{name}/children", "token", "add_child"),
        ("POST", "/v3/security/roles/{name}/grants", "token", "grant_role"),
        ("POST", "/v3/security/roles/{name}/revocations", "token", "revoke_role"),
        ("POST", "/v3/security/roles/{name}/permissions", "token", "grant_permission"),
        ("POST", "/v3/security/roles/{name}/permissions/remove", "token", "revoke_permission"),
        ("POST", "/v3/security/perms/isPermitted", "token", "is_permitted"),
        ("POST", "/v3/security/shares", "token", "create_share"),
        ("GET", "/v3/security/shares/isSharedWith", "token", "is_shared_with"),
        ("POST", "/v3/security/shares/revoke", "token", "revoke_share"),
        ("POST", "/v3/security/vault/secret/{category}/{tenant}/{owner}/{secret_name}", "token", "write_secret"),
        ("GET", "/v3/security/vault/secret/{category}/{tenant}/{owner}/{secret_name}", "token", "read_secret"),
        ("POST", "/v3/security/vault/servicePassword/{service}/validate", "token", "validate_password"),
        ("POST", "/v3/security/vault/export", "open", "export_vault"),
    )

    # -- roles --

    def create_role(self, req, verdict):
        body = req.json()
        user = verdict.effective_user
        role = self.rt.rbac.create_role(
            user.tenant, body["roleName"], body.get("owner", user.username),
            body.get("description", ""), caller=caller_from(verdict))
        return ok({"roleName": role.name, "tenant": role.tenant, "owner": role.owner},
                  message="role created", status=201)

    def get_role(self, req, verdict, name):
        role = self.rt.rbac.get_role(verdict.effective_user.tenant, name)
        return ok({"roleName": role.name, "tenant": role.tenant, "owner": role.owner,
                   "description": role.description, "children": sorted(role.children)})

    def delete_role(self, req, verdict, name):
        self.rt.rbac.delete_role(verdict.effective_user.tenant, name, caller=caller_from(verdict))
        return ok(message="role deleted")

    def add_child(self, req, verdict, name):
        child = req.json()["childRoleName"]
        self.rt.rbac.add_child_role(verdict.effective_user.tenant, name, child,
                                    caller=caller_from(verdict))
        return ok(message="child role attached")

    def grant_role(self, req, verdict, name):
        body = req.json()
        user = verdict.effective_user
        self.rt.rbac.grant_role(UserIdentity(body["username"], user.tenant), name,
                                grantor=user.username, caller=caller_from(verdict))
        return ok(message="role granted")

    def revoke_role(self, req, verdict, name):
        body = req.json()
        user = verdict.effective_user
        self.rt.rbac.revoke_role(UserIdentity(body["username"], user.tenant), name,
                                 caller=caller_from(verdict))
        return ok(message="role revoked")

    def grant_permission(self, req, verdict, name):
        self.rt.rbac.grant_permission(name, verdict.effective_user.tenant,
                                      req.json()["permission"], caller=caller_from(verdict))
        return ok(message="permission granted")

    def revoke_permission(self, req, verdict, name):
        self.rt.rbac.revoke_permission(name, verdict.effective_user.tenant,
                                       req.json()["permission"], caller=caller_from(verdict))
        return ok(message="permission revoked")

    def _may_query(self, verdict, tenant, username) -> bool:
        user = verdict.effective_user
        if verdict.claims.account_type == "service":
            return True
        if user.tenant != tenant:
            return False
        if user.username == username:
            return True
        return self.rt.rbac.has_role(user, TENANT_ADMIN_ROLE)

    def has_role(self, req, verdict):
        user = verdict.effective_user
        tenant = req.query.get("tenant", user.tenant)
        username = req.query.get("username", user.username)
        role = req.query["roleName"]
        if not self._may_query(verdict, tenant, username):
            return fail(403, "NOT_AUTHORIZED", "may not query other users")
        return ok({"hasRole": self.rt.rbac.subject_has_role(tenant, username, role)})

    def is_permitted(self, req, verdict):
        body = req.json()
        tenant = body.get("tenant", verdict.effective_user.tenant)
        username = body.get("username", verdict.effective_user.username)
        if not self._may_query(verdict, tenant, username):
            return fail(403, "NOT_AUTHORIZED", "may not query other users")
        allowed = self.rt.rbac.subject_is_permitted(tenant, username, body["permission"])
        return ok({"isPermitted": allowed})

    # -- shares --

    def create_share(self, req, verdict):
        body = req.json()
        user = verdict.effective_user
        grant = ShareGrant(tenant=user.tenant, grantor=user.username, grantee=body["grantee"],
                           resource_type=body["resourceType"], resource_id=body["resourceId"],
                           privilege=body["privilege"])
        self.rt.sharing.create_share(grant, Caller(user.username, user.tenant, "user"))
        return ok(message="share created", status=201)

    def is_shared_with(self, req, verdict):
        user = verdict.effective_user
        q = req.query
        shared, grantor = self.rt.sharing.is_shared_with(
            user.tenant, q["resourceType"], q["resourceId"],
            q.get("username", user.username), q["privilege"])
        return ok({"shared": shared, "grantor": grantor})

    def revoke_share(self, req, verdict):
        body = req.json()
        user = verdict.effective_user
        grant = ShareGrant(tenant=user.tenant, grantor=body.get("grantor", user.username),
                           grantee=body["grantee"], resource_type=body["resourceType"],
                           resource_id=body["resourceId"], privilege=body["privilege"])
        is_admin = lambda c: self.rt.rbac.has_role(UserIdentity(c.name, c.tenant), TENANT_ADMIN_ROLE)
        self.rt.sharing.revoke_share(grant, Caller(user.username, user.tenant, "user"),
                                     is_tenant_admin=is_admin)
        return ok(message="share revoked")

    # -- vault --

    def write_secret(self, req, verdict, category, tenant, owner, secret_name):
        body = req.json()
        path = SecretPath(tenant, SecretCategory(category), owner, secret_name)
        payload = base64.b64decode(body["payloadB64"])
        version = self.rt.secrets.write_secret(
            path, SecretValue(payload, metadata=body.get("metadata", {})), caller_from(verdict))
        return ok({"version": version}, message="secret written", status=201)

    def read_secret(self, req, verdict, category, tenant, owner, secret_name):
        path = SecretPath(tenant, SecretCategory(category), owner, secret_name)
        version = int(req.query["version"]) if "version" in req.query else None
        value = self.rt.secrets.read_secret(path, caller_from(verdict), version=version)
        return ok({"payloadB64": base64.b64encode(value.payload).decode(),
                   "metadata": value.metadata})

    def validate_password(self, req, verdict, service):
        candidate = base64.b64decode(req.json()["passwordB64"])
        valid = self.rt.secrets.validate_service_password(
            service, self.rt.site_id, candidate, caller_from(verdict))
        return ok({"valid": valid})

    def export_vault(self, req, verdict):
        credential = req.header("X-Operator-Credential", "")
        if not self.rt.check_operator(credential):
            return fail(403, "NOT_AUTHORIZED", "operator credential required")
        body = req.json()
        archive = self.rt.secrets.export_backup(
            body.get("scope", "site"), body.get("scopeId", self.rt.site_id),
            Caller("operator", "-", "operator"))
        return ok({"archiveB64": base64.b64encode(archive).decode()})

    # -- health --

    def healthcheck(self, req, verdict):
        components = {"secrets": "ok" if self.rt.secrets.ping() else "down"}
        status = "ready" if components["secrets"] == "ok" else "not-ready"
        age = self.rt.registry_age()
        if age is not None:
            components["registrySnapshotAgeSeconds"] = round(age, 3)
            if age > 2 * self.rt.registry_refresh_seconds:
                status = "degraded" if status == "ready" else status
        return ok({"siteId": self.rt.site_id, "status": status, "components": components})


class TokensApp(ServiceApp):
    name = "tokens"

    ROUTES = (
        ("POST", "/v3/tokens", "token", "issue_user"),
        ("POST", "/v3/tokens/service", "open", "issue_service"),
        ("POST", "/v3/tokens/refresh", "open", "refresh"),
    )

    def issue_user(self, req, verdict):
        body = req.json()
        token = self.rt.forge.issue_user_token(
            caller_from(verdict), body["tenant"], body["username"], ttl=body.get("ttl"))
        return ok({"accessToken": token}, message="token issued", status=201)

    def issue_service(self, req, verdict):
        header = req.header("Authorization", "")
        if not header.startswith("Basic "):
            return fail(401, "BAD_CREDENTIALS", "basic authentication required")
        try:
            decoded = base64.b64decode(header[len("Basic "):]).decode()
            service_name, _, password = decoded.partition(":")
        except (binascii.Error, UnicodeDecodeError):
            return fail(401, "BAD_CREDENTIALS", "undecodable basic credentials")
        body = req.json()
        targets = body.get("targetSites", [self.rt.site_id])
        pairs = self.rt.forge.issue_service_tokens(
            service_name, password.encode(), self.rt.site_id, targets)
        return ok({site: {"accessToken": p.access, "refreshToken": p.refresh}
                   for site, p in pairs.items()}, message="service tokens issued", status=201)

    def refresh(self, req, verdict):
        pair = self.rt.forge.refresh(req.json()["refreshToken"])
        return ok({"accessToken": pair.access, "refreshToken": pair.refresh},
                  message="token refreshed", status=201)


class TenantsApp(ServiceApp):
    """Unauthenticated key distribution; deployed only at the primary."""

    name = "tenants"

    ROUTES = (
        ("GET", "/v3/tenants", "open", "list_tenants"),
        ("GET", "/v3/tenants/{tenant_id}", "open", "get_tenant"),
    )

    def list_tenants(self, req, verdict):
        return ok([t.to_dict() for t in self.rt.registry.list_tenants()])

    def get_tenant(self, req, verdict, tenant_id):
        return ok(self.rt.registry.get_tenant(tenant_id).to_dict())


class AuthenticatorApp(ServiceApp):
    """Static credential table standing in for an identity provider."""

    name = "authenticator"

    ROUTES = (
        ("POST", "/v3/authenticator/tokens", "open", "login"),
    )

    def login(self, req, verdict):
        body = req.json()
        tenant, username = body["tenant"], body["username"]
        expected = self.rt.user_credentials.get(tenant, {}).get(username)
        if expected is None or expected != body.get("password"):
            return fail(401, "BAD_CREDENTIALS", "unknown user or wrong password")
        requester = Caller(name="authenticator", tenant=self.rt.config.admin_tenant, kind="service")
        token = self.rt.forge.issue_user_token(requester, tenant, username)
        return ok({"accessToken": token}, message="authenticated", status=201)


APP_CLASSES = {
    cls.name: cls
    for cls in (SecurityKernelApp, TokensApp, TenantsApp, AuthenticatorApp)
}


class SiteRuntime:
    """Everything one site needs to answer requests."""

    def __init__(self, site_config, registry, *, rbac, secrets, sharing, forge=None,
                 clock=time.time, operator_credential="", user_credentials=None,
                 forward_transport=None, registry_refresh_seconds=300.0,
                 extra_apps=()):
        self.config = site_config
        self.site_id = site_config.site_id
        self.registry = registry
        self.rbac = rbac
        self.secrets = secrets
        self.sharing = sharing
        self.forge = forge
        self.clock = clock
        self.operator_credential = operator_credential
        self.user_credentials = user_credentials or {}
        self.forward_transport = forward_transport
        self.registry_refresh_seconds = registry_refresh_seconds
        # Simulator hooks; a bare runtime works without them.
        self.transcript = None
        self.service_request_fn = None
        self.host_acl_fn = None
        self.no_authn_routes = frozenset()
        self.apps = {}
        for name, cls in APP_CLASSES.items():
            if name in site_config.services:
                self.apps[name] = cls(self)
        for app_cls in extra_apps:
            if app_cls.name in site_config.services:
                self.apps[app_cls.name] = app_cls(self)

    # -- helpers used by apps --

    def validate(self, req: Request, service_name: str):
        inbound = InboundRequest(
            token=req.header("x-tapis-token", ""),
            target_service=service_name,
            receiving_site=self.site_id,
            obo_user=req.header("x-tapis-user"),
            obo_tenant=req.header("x-tapis-tenant"),
        )
        return validate_request(inbound, self.registry, clock=self.clock)

    def check_operator(self, credential: str) -> bool:
        return bool(self.operator_credential) and credential == self.operator_credential

    def registry_age(self):
        age = getattr(self.registry, "age", None)
        return age() if callable(age) else None

    def record(self, actor, action, target=None, sac=False, **detail):
        if self.transcript is not None:
            self.transcript.record(actor, action, target=target, sac=sac, **detail)

    def service_request(self, from_service, method, tenant, path, obo=None,
                        json_body=None, query=None, headers=None):
        """Outbound service-to-service call; wired in by the federation."""
        if self.service_request_fn is None:
            return None
        return self.service_request_fn(self.site_id, from_service, method, tenant, path,
                                       obo=obo, json_body=json_body, query=query,
                                       headers=headers)

    def systems_identity(self) -> Caller:
        return Caller(name="systems", tenant=self.config.admin_tenant, kind="service")

    def host_allows(self, system_id, username, privilege) -> bool:
        if self.host_acl_fn is None:
            return False
        return self.host_acl_fn(system_id, username, privilege)

    # -- request entry point --

    def handle(self, method, host, target, headers, body) -> Response:
        req = Request.from_wire(method, target, headers, body, host=host)
        if req.header("x-sim-direct"):
            return self._direct_probe(req)
        decision = route(host, req.path, self.registry, at_site=self.site_id)
        if decision.kind is RouteKind.REJECT:
            return fail(404, "ROUTE_REJECTED", decision.reason or "rejected")
        if decision.kind is RouteKind.FORWARD_TO_PRIMARY:
            if self.forward_transport is None:
                return fail(502, "PRIMARY_UNREACHABLE", "no route to the primary site")
            try:
                return forward(req, decision, self.forward_transport)
            except SecurityError as exc:
                return fail(exc.http_status, exc.code, exc.message)
        app = self.apps.get(decision.service)
        if app is None:
            return fail(503, "STARTUP_ERROR", f"{decision.service} is not running at {self.site_id}")
        return app.dispatch(req)

    def _direct_probe(self, req: Request) -> Response:
        """Simulator-only: validate against this site without routing."""
        service = extract_service(req.path)
        if service is None:
            return fail(404, "NO_ROUTE", "no service in path")
        verdict = self.validate(req, service)
        if not verdict.accepted:
            return rejection_response(verdict)
        return ok({"accepted": True,
                   "effectiveUser": verdict.effective_user.subject(),
                   "targetService": service})


class _SiteHTTPHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    # Nagle + delayed ACK stalls small request/response pairs by ~40ms on
    # loopback, swamping every latency the harness measures.
    disable_nagle_algorithm = True

    def log_message(self, fmt, *args):
        pass

    def _handle(self, method):
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length) if length else b""
        host = (self.headers.get("Host") or "").split(":")[0]
        try:
            response = self.server.runtime.handle(method, host, self.path,
                                                  dict(self.headers), body)
        except Exception as exc:  # last-resort guard; handlers map their own errors
            response = fail(500, "INTERNAL_ERROR", f"{type(exc).__name__}: {exc}")
        payload = response.encoded()
        self.send_response(response.status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        for key, value in response.headers.items():
            self.send_header(key, value)
        self.end_headers()
        self.wfile.write(payload)

    def do_GET(self):
        self._handle("GET")

    def do_POST(self):
        self._handle("POST")

    def do_PUT(self):
        self._handle("PUT")

    def do_DELETE(self):
        self._handle("DELETE")


class SiteServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True
    # Default backlog (5) overflows when a load run's virtual users connect
    # at once, surfacing as ~1s SYN-retransmit latency spikes.
    request_queue_size = 128


class SiteHandle:
    def __init__(self, runtime: SiteRuntime, server: SiteServer, thread: threading.Thread):
        self.runtime = runtime
        self.server = server
        self.thread = thread

    @property
    def port(self) -> int:
        return self.server.server_address[1]

    def close(self):
        self.server.shutdown()
        self.server.server_close()
        self.thread.join(timeout=5)


def serve_site(runtime: SiteRuntime, host="127.0.0.1", port=0) -> SiteHandle:
    """Bind the site's listener and serve it on a daemon thread."""
    if runtime.secrets is not None and not runtime.secrets.ping():
        raise StartupError(f"secrets store unreachable for site {runtime.site_id}")
    server = SiteServer((host, port), _SiteHTTPHandler)
    server.runtime = runtime
    thread = threading.Thread(target=server.serve_forever, name=f"site-{runtime.site_id}", daemon=True)
    thread.start()
    return SiteHandle(runtime, server, thread)

"""Stub data/compute services: systems, apps, files, and jobs.

These implement only what federation scenarios exercise: application and
system definitions with credential templating, shared-application-context
resolution with runtime grantor checks and grantee fallback, file
transfers gated by host allow-tables, and a job lifecycle that stages
inputs, runs, and archives outputs.

Every inter-service hop is a real HTTP service request carrying the
caller's service token for the receiving site plus on-behalf-of headers,
and lands in the federation transcript.
"""

from __future__ import annotations

import base64

from ..errors import NotFound, SecurityError
from ..secrets import SecretCategory, SecretPath, SecretValue
from ..service import ServiceApp, rejection_response
from ..sharing import SAC_APP_HEADER, SAC_GRANTOR_HEADER, AccessOutcome, SacDescriptor
from ..wire import fail, ok

TEMPLATE_REQUESTER = "${requester}"


def _sac_headers_of(req):
    grantor = req.header(SAC_GRANTOR_HEADER.lower())
    app_id = req.header(SAC_APP_HEADER.lower())
    if grantor and app_id:
        return {"grantor": grantor, "app": app_id}
    return None


class SystemsApp(ServiceApp):
    name = "systems"

    ROUTES = (
        ("POST", "/v3/systems", "token", "create_system"),
        ("GET", "/v3/systems/{sys_id}", "token", "get_system"),
        ("POST", "/v3/systems/{sys_id}/credentials", "token", "store_credentials"),
    )

    def __init__(self, runtime):
        super().__init__(runtime)
        self.defs = {}  # (tenant, id) -> definition dict

    def create_system(self, req, verdict):
        body = req.json()
        user = verdict.effective_user
        definition = {
            "id": body["id"],
            "tenant": user.tenant,
            "owner": body.get("owner", user.username),
            "kind": body.get("kind", "storage"),
            "credentialUser": body.get("credentialUser", TEMPLATE_REQUESTER),
        }
        self.defs[(user.tenant, body["id"])] = definition
        self.rt.record(f"systems@{self.rt.site_id}", "system-defined",
                       target=body["id"], tenant=user.tenant)
        return ok(definition, message="system defined", status=201)

    def store_credentials(self, req, verdict, sys_id):
        body = req.json()
        user = verdict.effective_user
        username = body.get("username", user.username)
        if verdict.claims.account_type == "user" and username != user.username:
            return fail(403, "NOT_AUTHORIZED", "users store only their own credentials")
        path = SecretPath(user.tenant, SecretCategory.SYSTEM_CREDENTIAL, username, sys_id)
        writer = self.rt.systems_identity()
        payload = base64.b64decode(body["payloadB64"])
        version = self.rt.secrets.write_secret(path, SecretValue(payload), writer)
        self.rt.record(f"systems@{self.rt.site_id}", "credentials-stored",
                       target=sys_id, user=username)
        return ok({"version": version}, message="credentials stored", status=201)

    # -- retrieval with SAC participation --

    def get_system(self, req, verdict, sys_id):
        user = verdict.effective_user
        privilege = req.query.get("privilege", "READ")
        definition = self.defs.get((user.tenant, sys_id))
        if definition is None:
            raise NotFound(f"no system {sys_id!r} in tenant {user.tenant!r}")

        sac = _sac_headers_of(req)
        if sac and verdict.claims.account_type == "user":
            return fail(403, "SAC_ON_USER_REQUEST",
                        "shared-context headers are honored on service requests only")

        sac_outcome = None
        if sac:
            descriptor = self._sac_descriptor(req, verdict, sac)
            if descriptor is None:
                return fail(403, "SAC_UNRESOLVED", "shared application context could not be loaded")
            # Context access is judged at the level the application declared
            # the system for: execution systems at EXECUTE, storage at READ.
            # The per-operation privilege still gates the host allow-table.
            sac_privilege = "EXECUTE" if definition["kind"] == "execution" else "READ"
            try:
                outcome = self.rt.sharing.resolve_sac_access(
                    descriptor, user.username, ("system", sys_id), sac_privilege,
                    self._authorized_checker(req, verdict))
            except SecurityError as exc:
                if exc.code == "RESOURCE_NOT_IN_SAC":
                    self.rt.record(f"systems@{self.rt.site_id}", "sac-miss", target=sys_id,
                                   sac=True, detail="standard authorization required")
                    outcome = None
                else:
                    raise
            if outcome is AccessOutcome.DENIED:
                self.rt.record(f"systems@{self.rt.site_id}", "sac-denied", target=sys_id, sac=True)
                return fail(403, "SAC_DENIED",
                            "neither the context grantor nor the requester is authorized")
            if outcome is not None:
                sac_outcome = outcome.value
                self.rt.record(f"systems@{self.rt.site_id}", "sac-authorized", target=sys_id,
                               sac=True, outcome=sac_outcome, grantor=sac["grantor"])

        if sac_outcome is None:
            # Standard authorization: owner, direct share, or permission.
            if not self._standard_authorized(req, verdict, definition, sys_id, privilege):
                return fail(403, "NOT_AUTHORIZED",
                            f"{user.username} lacks {privilege} on {sys_id}")

        credential_user = definition["credentialUser"]
        if credential_user == TEMPLATE_REQUESTER:
            credential_user = user.username
        cred_path = SecretPath(user.tenant, SecretCategory.SYSTEM_CREDENTIAL,
                               credential_user, sys_id)
        try:
            secret = self.rt.secrets.read_secret(cred_path, self.rt.systems_identity())
            credential_present = True
            credential_b64 = base64.b64encode(secret.payload).decode()
        except SecurityError:
            credential_present = False
            credential_b64 = None
        self.rt.record(f"systems@{self.rt.site_id}", "credential-resolved", target=sys_id,
                       sac=sac is not None, credential_user=credential_user,
                       present=credential_present,
                       templated=definition["credentialUser"] == TEMPLATE_REQUESTER)
        return ok({
            "definition": definition,
            "credentialUser": credential_user,
            "credentialPresent": credential_present,
            "credentialB64": credential_b64,
            "sac": sac_outcome or ("not-in-sac" if sac else None),
        })

    def _sac_descriptor(self, req, verdict, sac):
        """Rebuild the shared context from the application definition."""
        user = verdict.effective_user
        response = self.rt.service_request(
            "systems", "GET", user.tenant, f"/v3/apps/{sac['app']}", obo=user)
        if response is None or response.status_code != 200:
            return None
        app = response.json()["result"]["definition"]
        resources = {("system", app["execSystem"], None)}
        for entry in app.get("storage", ()):
            resources.add(("system", entry["system"], None))
            resources.add(("path", f"{entry['system']}:{entry['path']}", entry["path"]))
        return SacDescriptor(grantor=sac["grantor"], app_id=sac["app"],
                             tenant=user.tenant, shared_resources=frozenset(resources))

    def _authorized_checker(self, req, verdict):
        user = verdict.effective_user

        def authorized(username, resource_type, resource_id, privilege):
            definition = self.defs.get((user.tenant, resource_id))
            if definition is not None and definition["owner"] == username:
                return True
            permission = f"systems:{user.tenant}:{privilege.lower()}:{resource_id}"
            response = self.rt.service_request(
                "systems", "POST", user.tenant, "/v3/security/perms/isPermitted",
                obo=user, json_body={"tenant": user.tenant, "username": username,
                                     "permission": permission})
            return bool(response is not None and response.status_code == 200
                        and response.json()["result"]["isPermitted"])

        return authorized

    def _standard_authorized(self, req, verdict, definition, sys_id, privilege):
        user = verdict.effective_user
        if definition["owner"] == user.username:
            return True
        shared, _ = self.rt.sharing.is_shared_with(user.tenant, "system", sys_id,
                                                   user.username, privilege)
        if shared:
            return True
        return self._authorized_checker(req, verdict)(user.username, "system", sys_id, privilege)


class AppsApp(ServiceApp):
    name = "apps"

    ROUTES = (
        ("POST", "/v3/apps", "token", "create_app"),
        ("GET", "/v3/apps/{app_id}", "token", "get_app"),
        ("POST", "/v3/apps/{app_id}/share", "token", "share_app"),
    )

    def __init__(self, runtime):
        super().__init__(runtime)
        self.defs = {}

    def create_app(self, req, verdict):
        body = req.json()
        user = verdict.effective_user
        definition = {
            "id": body["id"],
            "tenant": user.tenant,
            "owner": body.get("owner", user.username),
            "execSystem": body["execSystem"],
            "storage": body.get("storage", []),
            "runAsSac": bool(body.get("runAsSac", True)),
        }
        self.defs[(user.tenant, body["id"])] = definition
        self.rt.record(f"apps@{self.rt.site_id}", "app-defined", target=body["id"])
        return ok(definition, message="application defined", status=201)

    def get_app(self, req, verdict, app_id):
        user = verdict.effective_user
        definition = self.defs.get((user.tenant, app_id))
        if definition is None:
            raise NotFound(f"no application {app_id!r} in tenant {user.tenant!r}")
        if definition["owner"] == user.username:
            return ok({"definition": definition, "sacGrantor": None})
        response = self.rt.service_request(
            "apps", "GET", user.tenant, "/v3/security/shares/isSharedWith", obo=user,
            query={"resourceType": "application", "resourceId": app_id,
                   "username": user.username, "privilege": "EXECUTE"})
        shared = (response is not None and response.status_code == 200
                  and response.json()["result"]["shared"])
        if not shared:
            self.rt.record(f"apps@{self.rt.site_id}", "share-check", target=app_id,
                           user=user.username, shared=False)
            return fail(403, "NOT_AUTHORIZED", f"{app_id} is not shared with {user.username}")
        grantor = response.json()["result"]["grantor"]
        self.rt.record(f"apps@{self.rt.site_id}", "share-check", target=app_id,
                       user=user.username, shared=True, grantor=grantor)
        return ok({"definition": definition, "sacGrantor": grantor})

    def share_app(self, req, verdict, app_id):
        """Share with share-time access checks over every referenced system."""
        body = req.json()
        user = verdict.effective_user
        definition = self.defs.get((user.tenant, app_id))
        if definition is None:
            raise NotFound(f"no application {app_id!r} in tenant {user.tenant!r}")
        if definition["owner"] != user.username:
            return fail(403, "NOT_AUTHORIZED", "only the owner shares an application")
        referenced = [(definition["execSystem"], "EXECUTE")]
        referenced += [(e["system"], "READ") for e in definition.get("storage", ())]
        for system_id, privilege in referenced:
            response = self.rt.service_request(
                "apps", "GET", user.tenant, f"/v3/systems/{system_id}", obo=user,
                query={"privilege": privilege})
            granted = response is not None and response.status_code == 200
            self.rt.record(f"apps@{self.rt.site_id}", "share-time-check", target=system_id,
                           grantor=user.username, ok=granted)
            if not granted:
                return fail(403, "SHARE_TIME_CHECK_FAILED",
                            f"grantor lacks access to system {system_id!r}",
                            failingSystem=system_id)
        response = self.rt.service_request(
            "apps", "POST", user.tenant, "/v3/security/shares", obo=user,
            json_body={"grantee": body["grantee"], "resourceType": "application",
                       "resourceId": app_id, "privilege": body.get("privilege", "EXECUTE")})
        if response is None or response.status_code != 201:
            return fail(502, "SHARE_FAILED", "share grant could not be recorded")
        self.rt.record(f"apps@{self.rt.site_id}", "app-shared", target=app_id,
                       grantee=body["grantee"])
        return ok(message="application shared", status=201)


class FilesApp(ServiceApp):
    name = "files"

    ROUTES = (
        ("POST", "/v3/files/transfers", "token", "transfer"),
        ("GET", "/v3/files/content/{system}/{file_path:path}", "open", "content"),
    )

    def _fetch_system(self, req, verdict, system_id, privilege, sac):
        user = verdict.effective_user
        headers = {}
        if sac:
            headers = {SAC_GRANTOR_HEADER: sac["grantor"], SAC_APP_HEADER: sac["app"]}
        return self.rt.service_request(
            "files", "GET", user.tenant, f"/v3/systems/{system_id}", obo=user,
            query={"privilege": privilege}, headers=headers)

    def transfer(self, req, verdict):
        body = req.json()
        user = verdict.effective_user
        sac = _sac_headers_of(req)
        if sac and verdict.claims.account_type == "user":
            return fail(403, "SAC_ON_USER_REQUEST",
                        "shared-context headers are honored on service requests only")
        legs = (
            (body["srcSystem"], body["srcPath"], "READ"),
            (body["dstSystem"], body["dstPath"], "MODIFY"),
        )
        resolved = []
        for system_id, path, privilege in legs:
            response = self._fetch_system(req, verdict, system_id, privilege, sac)
            if response is None or response.status_code != 200:
                detail = response.json()["result"] if response is not None else {}
                return fail(403, "TRANSFER_DENIED",
                            f"system {system_id!r} refused {privilege}",
                            system=system_id, cause=detail.get("code"))
            result = response.json()["result"]
            in_sac = result["sac"] in ("grantor-authorized", "grantee-authorized")
            if not in_sac:
                # Outside the shared context the requester needs a file permission.
                permission = f"files:{user.tenant}:{privilege.lower()}:{system_id}:{path}"
                check = self.rt.service_request(
                    "files", "POST", user.tenant, "/v3/security/perms/isPermitted", obo=user,
                    json_body={"tenant": user.tenant, "username": user.username,
                               "permission": permission})
                permitted = (check is not None and check.status_code == 200
                             and check.json()["result"]["isPermitted"])
                self.rt.record(f"files@{self.rt.site_id}", "file-permission-check",
                               target=f"{system_id}:{path}", user=user.username,
                               permission=permission, permitted=permitted)
                if not permitted:
                    return fail(403, "NOT_AUTHORIZED",
                                f"{user.username} lacks {privilege} on {system_id}:{path}")
            if not result["credentialPresent"]:
                return fail(403, "HOST_LOGIN_FAILED",
                            f"no credentials for {result['credentialUser']} on {system_id}",
                            system=system_id)
            if not self.rt.host_allows(system_id, result["credentialUser"], privilege):
                self.rt.record(f"files@{self.rt.site_id}", "host-acl-denied", target=system_id,
                               user=result["credentialUser"], privilege=privilege)
                return fail(403, "HOST_DENIED",
                            f"host {system_id} refuses {privilege} to {result['credentialUser']}",
                            system=system_id)
            resolved.append({"system": system_id, "path": path,
                             "credentialUser": result["credentialUser"], "sac": result["sac"]})
        self.rt.record(f"files@{self.rt.site_id}", "transfer", sac=sac is not None,
                       src=f"{legs[0][0]}:{legs[0][1]}", dst=f"{legs[1][0]}:{legs[1][1]}")
        return ok({"transferred": True, "legs": resolved}, message="transfer complete", status=201)

    def content(self, req, verdict, system, file_path):
        """Flagged route: serves no-authn shares when no token is presented."""
        token = req.header("x-tapis-token")
        path = "/" + file_path.lstrip("/")
        if token:
            verdict = self.rt.validate(req, self.name)
            if not verdict.accepted:
                return rejection_response(verdict)
            user = verdict.effective_user
            permission = f"files:{user.tenant}:read:{system}:{path}"
            if not self.rt.rbac.subject_is_permitted(user.tenant, user.username, permission):
                return fail(403, "NOT_AUTHORIZED", "no read permission")
            return ok({"system": system, "path": path, "content": "simulated-bytes"})
        if "files-content" not in self.rt.no_authn_routes:
            return fail(401, "REQUEST_VALIDATION_FAILED", "token required on this route")
        try:
            from ..router import resolve_tenant_by_host
            tenant = resolve_tenant_by_host(self.rt.registry, req.host).tenant_id
        except SecurityError:
            return fail(404, "UNKNOWN_TENANT", "cannot resolve tenant from host")
        if not self.rt.sharing.is_no_authn_shared(tenant, "path", f"{system}:{path}", "READ"):
            return fail(401, "REQUEST_VALIDATION_FAILED", "resource is not shared for URL access")
        self.rt.record(f"files@{self.rt.site_id}", "no-authn-read", target=f"{system}:{path}")
        return ok({"system": system, "path": path, "content": "simulated-bytes"})


class JobsApp(ServiceApp):
    name = "jobs"

    ROUTES = (
        ("POST", "/v3/jobs", "token", "submit"),
    )

    def __init__(self, runtime):
        super().__init__(runtime)
        self._counter = 0

    def submit(self, req, verdict):
        body = req.json()
        user = verdict.effective_user
        self._counter += 1
        job_id = f"job-{self.rt.site_id}-{self._counter}"
        steps = []

        def step(name, **detail):
            steps.append({"step": name, **detail})
            self.rt.record(f"jobs@{self.rt.site_id}", name, **detail)

        def failed(reason):
            step("job-failed", reason=reason)
            return ok({"jobId": job_id, "status": "FAILED", "reason": reason, "steps": steps})

        app_response = self.rt.service_request(
            "jobs", "GET", user.tenant, f"/v3/apps/{body['appId']}", obo=user)
        if app_response is None or app_response.status_code != 200:
            return failed("application not accessible")
        app_result = app_response.json()["result"]
        app = app_result["definition"]
        grantor = app_result["sacGrantor"]
        sac = {"grantor": grantor, "app": app["id"]} if (grantor and app["runAsSac"]) else None
        step("application-retrieved", app=app["id"], sacGrantor=grantor)

        sac_headers = {}
        if sac:
            sac_headers = {SAC_GRANTOR_HEADER: sac["grantor"], SAC_APP_HEADER: sac["app"]}
            step("sac-established", grantor=sac["grantor"], app=sac["app"])

        exec_response = self.rt.service_request(
            "jobs", "GET", user.tenant, f"/v3/systems/{app['execSystem']}", obo=user,
            query={"privilege": "EXECUTE"}, headers=sac_headers)
        if exec_response is None or exec_response.status_code != 200:
            return failed("execution system authorization failed")
        exec_result = exec_response.json()["result"]
        if not exec_result["credentialPresent"]:
            return failed(f"no credentials for {exec_result['credentialUser']} "
                          f"on {app['execSystem']}")
        step("execution-system-resolved", system=app["execSystem"],
             credentialUser=exec_result["credentialUser"], sac=exec_result["sac"])

        for entry in app.get("storage", ()):
            stage = self.rt.service_request(
                "jobs", "POST", user.tenant, "/v3/files/transfers", obo=user,
                headers=sac_headers,
                json_body={"srcSystem": entry["system"], "srcPath": entry["path"],
                           "dstSystem": app["execSystem"],
                           "dstPath": f"/scratch/{job_id}/input"})
            if stage is None or stage.status_code != 201:
                return failed(f"stage-in from {entry['system']} failed")
            step("input-staged", src=entry["system"], path=entry["path"])

        if not self.rt.host_allows(app["execSystem"], exec_result["credentialUser"], "EXECUTE"):
            return failed(f"host {app['execSystem']} refuses execution "
                          f"to {exec_result['credentialUser']}")
        step("executed", system=app["execSystem"], runAs=exec_result["credentialUser"])

        if body.get("archiveSystem"):
            archive = self.rt.service_request(
                "jobs", "POST", user.tenant, "/v3/files/transfers", obo=user,
                headers=sac_headers,
                json_body={"srcSystem": app["execSystem"],
                           "srcPath": f"/scratch/{job_id}/output.csv",
                           "dstSystem": body["archiveSystem"],
                           "dstPath": f"{body.get('archiveDir', '/archive')}/output.csv"})
            if archive is None or archive.status_code != 201:
                return failed(f"archive to {body['archiveSystem']} failed")
            step("archived", system=body["archiveSystem"], dir=body.get("archiveDir"))

        step("job-finished")
        return ok({"jobId": job_id, "status": "FINISHED", "steps": steps},
                  message="job complete", status=201)


STUB_APPS = (SystemsApp, AppsApp, FilesApp, JobsApp)

"""Federation integration: walkthrough branches, routing, startup flows."""

import json

import pytest

from fedsec.sim.federation import build_federation
from fedsec.sim.presets import penalty_topology, two_site_topology
from fedsec.sim.scenario import (
    run_sac_walkthrough,
    run_scenario,
    walkthrough_steps,
    walkthrough_topology_doc,
)


@pytest.fixture()
def walkthrough_fed():
    federation = build_federation(walkthrough_topology_doc())
    yield federation
    federation.close()


def _entries(result, action):
    return [e for e in result["transcript"] if e["action"] == action]


def test_walkthrough_nominal(walkthrough_fed):
    result = run_sac_walkthrough(walkthrough_fed, "nominal")
    assert result["job"]["status"] == "FINISHED"
    resolved = {(e["target"], e["detail"]["credential_user"], e["detail"]["templated"])
                for e in _entries(result, "credential-resolved")}
    # Dynamic template resolution hands back the requester's credentials;
    # the statically defined store system always resolves to storeAdmin.
    assert ("execSys", "bob", True) in resolved
    assert ("storeSys", "storeAdmin", False) in resolved
    outcomes = {(e["target"], e["detail"]["outcome"]) for e in _entries(result, "sac-authorized")}
    assert ("execSys", "grantor-authorized") in outcomes
    assert ("storeSys", "grantor-authorized") in outcomes


def test_walkthrough_archive_system_uses_standard_path(walkthrough_fed):
    result = run_sac_walkthrough(walkthrough_fed, "nominal")
    # arcSys is absent from the application definition: never authorized
    # through the shared context, always through a permission check.
    assert any(e["target"] == "arcSys" for e in _entries(result, "sac-miss"))
    assert all(e["target"] != "arcSys" for e in _entries(result, "sac-authorized"))
    checks = _entries(result, "file-permission-check")
    arc_checks = [e for e in checks if e["target"].startswith("arcSys:")]
    assert arc_checks and arc_checks[0]["detail"]["permitted"] is True
    assert "/archives/bob" in arc_checks[0]["detail"]["permission"]


def test_walkthrough_missing_grantee_credentials(walkthrough_fed):
    result = run_sac_walkthrough(walkthrough_fed, "missing-grantee-credentials")
    assert result["job"]["status"] == "FAILED"
    assert "no credentials for bob" in result["job"]["reason"]


def test_walkthrough_grantor_revoked_fallback(walkthrough_fed):
    result = run_sac_walkthrough(walkthrough_fed, "grantor-revoked-fallback")
    assert result["job"]["status"] == "FINISHED"
    exec_outcomes = [e["detail"]["outcome"] for e in _entries(result, "sac-authorized")
                     if e["target"] == "execSys"]
    assert exec_outcomes and all(o == "grantee-authorized" for o in exec_outcomes)


def test_walkthrough_both_unauthorized_aborts(walkthrough_fed):
    result = run_sac_walkthrough(walkthrough_fed, "both-unauthorized")
    assert result["job"]["status"] == "FAILED"
    assert "authorization" in result["job"]["reason"]
    assert _entries(result, "sac-denied")


def test_share_time_check_blocks_unauthorized_grantor(walkthrough_fed):
    steps = walkthrough_steps("nominal")
    # Drop alice's execSys grant: sharing must fail naming the system.
    steps = [s for s in steps
             if not (s["action"] == "grant_user_permission"
                     and s["params"]["permission"] == "systems:tenant1:execute:execSys")]
    share_index = next(i for i, s in enumerate(steps) if s["action"] == "share_app")
    steps[share_index]["expect"] = {"status_code": 403, "error_code": "SHARE_TIME_CHECK_FAILED"}
    result = run_scenario(walkthrough_fed, steps[: share_index + 1])
    assert result["outcomes"][-1]["result"]["failingSystem"] == "execSys"


def test_transcript_determinism():
    transcripts = []
    for _ in range(2):
        federation = build_federation(walkthrough_topology_doc())
        try:
            result = run_sac_walkthrough(federation, "nominal")
        finally:
            federation.close()
        stripped = [(e["actor"], e["action"], e["target"], json.dumps(e["detail"], sort_keys=True))
                    for e in result["transcript"]]
        transcripts.append(stripped)
    assert transcripts[0] == transcripts[1]


def test_tokens_startup_self_signing_flow():
    federation = build_federation(two_site_topology())
    try:
        started = federation.transcript.find(action="startup-self-signed-token")
        assert {e["actor"] for e in started} == {"tokens@prime", "tokens@assoc1"}
        loaded = federation.transcript.find(action="startup-key-loaded")
        assert {(e["actor"], e["detail"]["tenant"]) for e in loaded} == {
            ("tokens@prime", "tenant1"), ("tokens@assoc1", "tenant2")}
    finally:
        federation.close()


def test_forwarded_request_headers_and_payload_identical():
    federation = build_federation(two_site_topology())
    try:
        carol = federation.login("tenant2", "carol")
        # apps runs only at the primary: tenant2 requests are forwarded.
        forwarded = federation.request("GET", "tenant2.sim", "/v3/apps/ghost", token=carol)
        hops = federation.transcript.find(action="forwarded-to-primary")
        assert any(e["target"] == "/v3/apps/ghost" for e in hops)
        # The same request sent straight to the primary's router answers
        # byte-identically.
        direct = federation.request_at_site("prime", "tenant2.sim", "GET", "/v3/apps/ghost",
                                            token=carol)
        assert forwarded.status_code == direct.status_code
        assert forwarded.json() == direct.json()
    finally:
        federation.close()


def test_forwarded_service_request_preserves_obo_headers():
    from fedsec.gatekeeper import OBO_TENANT_HEADER, OBO_USER_HEADER

    federation = build_federation(two_site_topology())
    try:
        # A service token targeting the primary, sent through the associate's
        # router: acceptance at the far end requires every X-Tapis-* header
        # to survive the hop (a dropped OBO header fails rule 7a).
        token = federation.service_token("prime", "jobs", "prime")
        response = federation.request_at_site(
            "assoc1", "tenant2.sim", "GET", "/v3/apps/ghost", token=token,
            headers={OBO_USER_HEADER: "carol", OBO_TENANT_HEADER: "tenant2"})
        assert response.status_code == 404  # authorized; app simply missing
        assert response.json()["result"]["code"] == "NOT_FOUND"
    finally:
        federation.close()


def test_signing_key_replacement_reaches_registry():
    from fedsec.identity import BOOTSTRAP
    from fedsec.skadmin import BootstrapConfig, run_bootstrap
    from fedsec.secrets import MemoryKvBackend, SecretsService
    from fedsec.registry import Registry

    from .conftest import two_site_doc

    config = BootstrapConfig(
        site_id="prime", is_primary=True, admin_tenant="admin.prime",
        tenants=["admin.prime", "tenant1"],
        services=["security-kernel", "tokens", "authenticator", "tenants"])
    store = SecretsService(backend=MemoryKvBackend(), site_id="prime",
                           admin_tenant="admin.prime")
    first = run_bootstrap(config, store)
    registry = Registry.from_config(two_site_doc())
    registry.replace_public_key("tenant1", first.public_keys["tenant1"])

    replaced = run_bootstrap(config, store, replace="tenant1/signing-key/*")
    assert replaced.replaced == ["tenant1/signing-key/sk/keypair"]
    registry.replace_public_key("tenant1", replaced.public_keys["tenant1"])
    assert registry.get_public_key("tenant1") == replaced.public_keys["tenant1"]
    assert replaced.public_keys["tenant1"] != first.public_keys["tenant1"]


def test_matrix_harness_catches_a_mutated_rule_order():
    """Self-test: a deliberately wrong decision table produces pinpointed
    disagreement cells, so a silent all-pass cannot hide a broken oracle."""
    from fedsec.sim.matrix import MatrixRunner, enumerate_cells, expected_rule

    federation = build_federation(two_site_topology())
    try:
        runner = MatrixRunner(federation)
        cells = enumerate_cells(runner.table, ["tenant1", "tenant2"],
                                sorted(set(runner.table.admin_tenants.values())),
                                ["security-kernel", "systems"], ["tenant1"])

        def mutated_rule(cell, table):
            verdict = expected_rule(cell, table)
            if verdict == "3":
                return "4"
            return verdict

        disagreements = [cell.label() for cell in cells
                         if runner.probe(cell) != mutated_rule(cell, runner.table)]
        affected = [cell for cell in cells if expected_rule(cell, runner.table) == "3"]
        assert affected, "cross-product must include rule-3 cells"
        assert len(disagreements) == len(affected)
    finally:
        federation.close()


def test_wrong_site_request_rejected():
    federation = build_federation(two_site_topology())
    try:
        alice = federation.login("tenant1", "alice")
        response = federation.request_at_site("assoc1", "tenant1.sim", "GET",
                                              "/v3/systems/x", token=alice)
        assert response.status_code == 404
        assert response.json()["result"]["code"] == "ROUTE_REJECTED"
    finally:
        federation.close()


def test_primary_unreachable_surfaces_as_502():
    federation = build_federation(two_site_topology())
    try:
        carol = federation.login("tenant2", "carol")
        federation.handles["prime"].close()
        response = federation.request("POST", "tenant2.sim", "/v3/jobs", token=carol,
                                      json_body={"appId": "x"})
        assert response.status_code == 502
        assert response.json()["result"]["code"] == "PRIMARY_UNREACHABLE"
    finally:
        federation.close()


def test_service_token_cache_refreshes_near_expiry():
    # A 30s ttl sits inside the refresh margin, so every outbound call
    # rotates through the refresh endpoint; both calls must still succeed.
    federation = build_federation(two_site_topology(service_token_ttl=30))
    try:
        carol = federation.login("tenant2", "carol")
        first = federation.request("POST", "tenant2.sim", "/v3/jobs", token=carol,
                                   json_body={"appId": "ghost"})
        second = federation.request("POST", "tenant2.sim", "/v3/jobs", token=carol,
                                    json_body={"appId": "ghost"})
        assert first.status_code == second.status_code == 200
        assert first.json()["result"]["status"] == "FAILED"  # no such app, but authorized
    finally:
        federation.close()


def test_no_authn_route_serves_url_shares():
    federation = build_federation(walkthrough_topology_doc())
    try:
        bob = federation.login("tenant1", "bob")
        response = federation.request("POST", "tenant1.sim", "/v3/security/shares", token=bob,
                                      json_body={"grantee": "~public-no-authn",
                                                 "resourceType": "path",
                                                 "resourceId": "arcSys:/pub/data.csv",
                                                 "privilege": "READ"})
        assert response.status_code == 201
        opened = federation.request("GET", "tenant1.sim", "/v3/files/content/arcSys/pub/data.csv")
        assert opened.status_code == 200
        assert opened.json()["result"]["content"] == "simulated-bytes"
        closed = federation.request("GET", "tenant1.sim", "/v3/files/content/arcSys/private.csv")
        assert closed.status_code == 401
    finally:
        federation.close()


def test_no_authn_route_disabled_without_flag():
    federation = build_federation(two_site_topology())  # no flagged routes
    try:
        response = federation.request("GET", "tenant1.sim", "/v3/files/content/arcSys/pub/x")
        assert response.status_code == 401
    finally:
        federation.close()


def test_stale_registry_degrades_healthcheck():
    federation = build_federation(two_site_topology())
    try:
        federation.login("tenant2", "carol")  # populates the associate's cache
        view = federation.runtimes["assoc1"].registry
        # Refreshes fail from here on; the view keeps serving its last
        # snapshot, whose age keeps growing past 2x the refresh interval.
        def refusing_fetch():
            raise ConnectionError("primary down")

        view._fetch = refusing_fetch
        view._fetched_at -= 700
        response = federation.request("GET", "tenant2.sim", "/v3/security/healthcheck")
        body = response.json()["result"]
        assert body["status"] == "degraded"
        assert body["components"]["registrySnapshotAgeSeconds"] > 600
    finally:
        federation.close()


def test_penalty_scales_with_link_latency():
    from fedsec.sim.loadgen import measure_cross_site_penalty

    federation = build_federation(penalty_topology(link_ms=40))
    try:
        result = measure_cross_site_penalty(federation, samples=5)
        assert 64 <= result["delta_ms"] <= 104  # 2 x 40ms +/- overhead
    finally:
        federation.close()


def test_service_deployed_at_associate_routes_local():
    federation = build_federation(two_site_topology(assoc_services=("systems",)))
    try:
        carol = federation.login("tenant2", "carol")
        response = federation.request("POST", "tenant2.sim", "/v3/systems", token=carol,
                                      json_body={"id": "localSys", "kind": "storage"})
        assert response.status_code == 201
        assert not federation.transcript.find(action="forwarded-to-primary")
    finally:
        federation.close()

import copy

import pytest

from fedsec.errors import (
    DuplicateTenant,
    NotAuthorized,
    TopologyInvalid,
    UnknownSite,
    UnknownTenant,
)
from fedsec.identity import BOOTSTRAP, Caller
from fedsec.registry import CachedRegistryView, Registry, TenantRecord, load_config

from .conftest import two_site_doc


@pytest.fixture
def registry():
    return Registry.from_config(two_site_doc())


def test_load_and_query(registry):
    assert registry.primary_site().site_id == "prime"
    assert registry.resolve_site_for_tenant("tenant2").site_id == "assoc1"
    assert registry.resolve_site_for_tenant("admin.prime").site_id == "prime"
    assert registry.admin_tenant_of("assoc1") == "admin.assoc1"
    assert registry.is_admin_tenant("admin.assoc1")
    assert not registry.is_admin_tenant("tenant1")


def test_required_services_always_present(registry):
    assert registry.service_runs_at("security-kernel", "assoc1")
    assert registry.service_runs_at("systems", "assoc1")
    assert not registry.service_runs_at("jobs", "assoc1")
    assert not registry.service_runs_at("tenants", "assoc1")
    with pytest.raises(UnknownSite):
        registry.service_runs_at("jobs", "nowhere")


def test_two_primaries_rejected():
    doc = two_site_doc()
    doc["sites"][1]["is_primary"] = True
    with pytest.raises(TopologyInvalid):
        load_config(doc)


def test_associate_running_tenants_rejected():
    doc = two_site_doc()
    doc["sites"][1]["services"].append("tenants")
    with pytest.raises(TopologyInvalid):
        load_config(doc)


def test_missing_required_service_rejected():
    doc = two_site_doc()
    doc["sites"][1]["services"].remove("tokens")
    with pytest.raises(TopologyInvalid):
        load_config(doc)


def test_primary_must_run_every_known_service():
    doc = two_site_doc()
    doc["sites"][1]["services"].append("streams")
    with pytest.raises(TopologyInvalid):
        load_config(doc)
    doc["sites"][0]["services"].append("streams")
    load_config(doc)


def test_missing_admin_tenant_rejected():
    doc = two_site_doc()
    doc["tenants"] = [t for t in doc["tenants"] if t["tenant_id"] != "admin.assoc1"]
    with pytest.raises(TopologyInvalid):
        load_config(doc)


def test_duplicate_base_url_rejected():
    doc = two_site_doc()
    doc["tenants"][2]["base_url"] = "http://shared.sim"
    doc["tenants"][3]["base_url"] = "http://shared.sim"
    with pytest.raises(TopologyInvalid):
        load_config(doc)


def test_tenant_owned_by_unknown_site_rejected():
    doc = two_site_doc()
    doc["tenants"][2]["owning_site"] = "ghost"
    with pytest.raises(TopologyInvalid):
        load_config(doc)


def test_register_tenant(registry):
    rec = TenantRecord(tenant_id="t3", owning_site="assoc1", base_url="http://t3.sim")
    registry.register_tenant(rec, Caller(name="assoc1", tenant="-", kind="operator"))
    assert registry.get_tenant("t3").owning_site == "assoc1"
    with pytest.raises(DuplicateTenant):
        registry.register_tenant(rec, Caller(name="assoc1", tenant="-", kind="operator"))


def test_register_tenant_unknown_site(registry):
    rec = TenantRecord(tenant_id="t9", owning_site="ghost", base_url="http://t9.sim")
    with pytest.raises(UnknownSite):
        registry.register_tenant(rec, BOOTSTRAP)


def test_register_by_unrelated_operator_rejected(registry):
    rec = TenantRecord(tenant_id="t4", owning_site="prime", base_url="http://t4.sim")
    with pytest.raises(NotAuthorized):
        registry.register_tenant(rec, Caller(name="assoc1", tenant="-", kind="operator"))
    # The primary operator may register for any site.
    rec2 = TenantRecord(tenant_id="t5", owning_site="assoc1", base_url="http://t5.sim")
    registry.register_tenant(rec2, Caller(name="prime", tenant="-", kind="operator"))


def test_admin_tenants_only_through_bootstrap(registry):
    rec = TenantRecord(tenant_id="admin.x", owning_site="prime",
                       base_url="http://adminx.sim", is_admin_tenant=True)
    with pytest.raises(NotAuthorized):
        registry.register_tenant(rec, Caller(name="prime", tenant="-", kind="operator"))


def test_public_key_lookup_and_replacement(keyed_two_site):
    doc, keys = keyed_two_site
    registry = Registry.from_config(doc)
    assert registry.get_public_key("tenant1") == keys["tenant1"][1]
    with pytest.raises(UnknownTenant):
        registry.get_public_key("ghost")
    registry.replace_public_key("tenant1", "NEWKEY")
    assert registry.get_public_key("tenant1") == "NEWKEY"


def test_snapshot_determinism():
    doc = two_site_doc()
    a, b = Registry.from_config(copy.deepcopy(doc)), Registry.from_config(copy.deepcopy(doc))
    for tenant in ("tenant1", "tenant2", "admin.prime", "admin.assoc1"):
        assert a.get_public_key(tenant) == b.get_public_key(tenant)
        assert a.resolve_site_for_tenant(tenant).site_id == b.resolve_site_for_tenant(tenant).site_id
    for service in ("security-kernel", "jobs", "tenants"):
        for site in ("prime", "assoc1"):
            assert a.service_runs_at(service, site) == b.service_runs_at(service, site)


def test_cached_view_refreshes_on_interval():
    now = [1000.0]
    fetches = []

    def fetch():
        fetches.append(now[0])
        return load_config(two_site_doc())

    view = CachedRegistryView(fetch, refresh_seconds=300, clock=lambda: now[0])
    view.get_tenant("tenant1")
    view.get_tenant("tenant2")
    assert len(fetches) == 1
    now[0] += 299
    view.get_tenant("tenant1")
    assert len(fetches) == 1
    assert view.age() == 299
    now[0] += 2
    view.get_tenant("tenant1")
    assert len(fetches) == 2


def test_cached_view_serves_stale_if_fetch_fails():
    now = [0.0]
    state = {"fail": False}

    def fetch():
        if state["fail"]:
            raise ConnectionError("primary down")
        return load_config(two_site_doc())

    view = CachedRegistryView(fetch, refresh_seconds=10, clock=lambda: now[0])
    view.get_tenant("tenant1")
    state["fail"] = True
    now[0] += 60
    assert view.get_tenant("tenant1").tenant_id == "tenant1"

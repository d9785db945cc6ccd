import pytest

from fedsec.tokens import generate_keypair

# RSA keygen is the slowest primitive in the suite; tests draw from one
# session-scoped pool instead of generating fresh pairs everywhere.
_POOL_SIZE = 8


@pytest.fixture(scope="session")
def keypool():
    return [generate_keypair() for _ in range(_POOL_SIZE)]


def two_site_doc(keys=None):
    """Topology document: one primary, one associate running Systems locally."""
    keys = keys or {}

    def pub(tenant):
        return keys.get(tenant, ("", ""))[1]

    return {
        "sites": [
            {
                "site_id": "prime",
                "is_primary": True,
                "admin_tenant": "admin.prime",
                "base_host": "prime.sim",
                "services": [
                    "security-kernel", "tokens", "authenticator", "tenants",
                    "systems", "apps", "files", "jobs",
                ],
            },
            {
                "site_id": "assoc1",
                "is_primary": False,
                "admin_tenant": "admin.assoc1",
                "base_host": "assoc1.sim",
                "services": ["security-kernel", "tokens", "authenticator", "systems"],
            },
        ],
        "tenants": [
            {"tenant_id": "admin.prime", "owning_site": "prime",
             "is_admin_tenant": True, "public_key": pub("admin.prime")},
            {"tenant_id": "admin.assoc1", "owning_site": "assoc1",
             "is_admin_tenant": True, "public_key": pub("admin.assoc1")},
            {"tenant_id": "tenant1", "owning_site": "prime", "public_key": pub("tenant1")},
            {"tenant_id": "tenant2", "owning_site": "assoc1", "public_key": pub("tenant2")},
        ],
    }


@pytest.fixture()
def keyed_two_site(keypool):
    """(doc, keys) with real keypairs assigned to all four tenants."""
    tenants = ["admin.prime", "admin.assoc1", "tenant1", "tenant2"]
    keys = {t: keypool[i] for i, t in enumerate(tenants)}
    return two_site_doc(keys), keys

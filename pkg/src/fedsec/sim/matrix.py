"""Cross-site request validation matrix.

Enumerates the cross-product of request shapes (token kind, token tenant,
signature validity, receiving site, target service, on-behalf-of header
combinations, target-site claim, sender service) and fires each cell at a
live federation over the wire, comparing the verdict against a decision
table written as a second, independent transcription of the validation
conditions. The table deliberately shares no code with the gatekeeper:
it re-derives site ownership and service placement from a plain topology
description.
"""

from __future__ import annotations

import json
import uuid
from dataclasses import dataclass

from ..gatekeeper import OBO_TENANT_HEADER, OBO_USER_HEADER
from ..secrets import SecretCategory, SecretPath
from ..identity import BOOTSTRAP
from ..tokens import TokenClaims, encode_token


@dataclass(frozen=True)
class MatrixCell:
    token_kind: str            # "user" | "service"
    token_tenant: str
    sig_valid: bool
    receiving_site: str
    target_service: str
    obo: str                   # "none" | "user-only" | "both"
    obo_tenant: str | None = None
    target_site_claim: str | None = None   # service tokens only
    sender_service: str | None = None      # service tokens only (the sub name)

    def label(self) -> str:
        return (f"{self.token_kind}:{self.token_tenant}:sig={int(self.sig_valid)}"
                f"@{self.receiving_site}->{self.target_service}"
                f" obo={self.obo}/{self.obo_tenant} ts={self.target_site_claim}"
                f" sender={self.sender_service}")


@dataclass(frozen=True)
class TableTopology:
    """Plain-dict topology view for the oracle; no registry objects."""

    primary: str
    owners: dict       # tenant -> site
    services: dict     # site -> frozenset(service)
    admin_tenants: dict  # site -> admin tenant


def expected_rule(cell: MatrixCell, topo: TableTopology) -> str | None:
    """The validation listing, transcribed directly; None means accepted."""
    if not cell.sig_valid:
        return "1"
    recv = cell.receiving_site
    if cell.target_service not in topo.services[recv]:
        return "2"
    token_site = topo.owners[cell.token_tenant]
    if cell.target_service in ("security-kernel", "tokens") and token_site != recv:
        return "3"
    if recv == topo.primary and token_site != topo.primary:
        if cell.target_service in topo.services[token_site]:
            return "4"
    if recv != topo.primary and token_site not in (topo.primary, recv):
        return "5"
    if cell.token_kind == "user":
        if cell.obo != "none":
            return "6a"
        if cell.token_tenant in set(topo.admin_tenants.values()):
            return "6b"
        return None
    if cell.obo != "both":
        return "7a"
    if cell.target_site_claim != recv:
        return "7b"
    if topo.admin_tenants.get(token_site) != cell.token_tenant:
        return "7c"
    if cell.sender_service not in topo.services[token_site]:
        return "7c"
    obo_owner = topo.owners.get(cell.obo_tenant)
    if obo_owner is None:
        return "7c"
    if token_site != obo_owner and token_site != topo.primary:
        return "7c"
    return None


def enumerate_cells(topo: TableTopology, user_tenants, service_tenants,
                    target_services, obo_tenants) -> list:
    """The full request cross-product the acceptance matrix runs."""
    cells = []
    sites = sorted(topo.services)
    for sig_valid in (True, False):
        for recv in sites:
            for target in target_services:
                for tenant in user_tenants + service_tenants:
                    for obo in ("none", "user-only", "both"):
                        obo_choices = obo_tenants if obo == "both" else [None]
                        for obo_tenant in obo_choices:
                            cells.append(MatrixCell(
                                token_kind="user", token_tenant=tenant,
                                sig_valid=sig_valid, receiving_site=recv,
                                target_service=target, obo=obo,
                                obo_tenant=obo_tenant))
                for tenant in service_tenants:
                    for sender in ("systems", "jobs"):
                        for ts_claim in sites:
                            for obo in ("none", "user-only", "both"):
                                obo_choices = obo_tenants if obo == "both" else [None]
                                for obo_tenant in obo_choices:
                                    cells.append(MatrixCell(
                                        token_kind="service", token_tenant=tenant,
                                        sig_valid=sig_valid, receiving_site=recv,
                                        target_service=target, obo=obo,
                                        obo_tenant=obo_tenant,
                                        target_site_claim=ts_claim,
                                        sender_service=sender))
    return cells


class MatrixRunner:
    """Mints cell tokens with real tenant keys and probes sites directly."""

    def __init__(self, federation):
        self.federation = federation
        self._keys = {}
        topo = federation.topo
        snapshot = topo.snapshot()
        self.table = TableTopology(
            primary=federation.primary_id,
            owners={t.tenant_id: t.owning_site for t in topo.tenants},
            services={s.site_id: frozenset(s.services) for s in topo.sites},
            admin_tenants={s.site_id: s.admin_tenant for s in snapshot.sites.values()},
        )

    def _private_key(self, tenant: str) -> str:
        pem = self._keys.get(tenant)
        if pem is None:
            site = self.table.owners[tenant]
            value = self.federation.secrets[site].read_secret(
                SecretPath(tenant, SecretCategory.SIGNING_KEY, "sk", "keypair"), BOOTSTRAP)
            pem = self._keys[tenant] = json.loads(value.payload)["private"]
        return pem

    def _wrong_key_for(self, tenant: str) -> str:
        for other in self.table.owners:
            if other != tenant:
                return self._private_key(other)
        raise ValueError("need at least two tenants for wrong-key cells")

    def mint(self, cell: MatrixCell) -> str:
        import time
        now = time.time()
        if cell.token_kind == "user":
            sub = f"u@{cell.token_tenant}"
            target_site = None
        else:
            sub = f"{cell.sender_service}@{cell.token_tenant}"
            target_site = cell.target_site_claim
        claims = TokenClaims(jti=str(uuid.uuid4()), sub=sub, tenant_id=cell.token_tenant,
                             account_type=cell.token_kind, exp=now + 600, iat=now,
                             target_site=target_site)
        key = self._private_key(cell.token_tenant) if cell.sig_valid \
            else self._wrong_key_for(cell.token_tenant)
        return encode_token(claims, key)

    def probe(self, cell: MatrixCell):
        """Fire the cell at the receiving site's listener; returns the
        observed rule (None for accepted)."""
        path_seg = "security" if cell.target_service == "security-kernel" else cell.target_service
        headers = {"X-Sim-Direct": "1"}
        if cell.obo in ("user-only", "both"):
            headers[OBO_USER_HEADER] = "u"
        if cell.obo == "both":
            headers[OBO_TENANT_HEADER] = cell.obo_tenant
        site_host = self.federation.registry.site(cell.receiving_site).base_host
        response = self.federation.request(
            "GET", site_host, f"/v3/{path_seg}/probe", headers=headers,
            token=self.mint(cell))
        body = response.json()
        if response.status_code == 200:
            return None
        return body["result"].get("rule")


def run_validation_matrix(federation, user_tenants=("tenant1", "tenant2"),
                          target_services=("security-kernel", "tokens", "systems", "jobs"),
                          obo_tenants=("tenant1", "tenant2")) -> dict:
    """Full over-the-wire matrix; reports any cell where the observed
    verdict disagrees with the decision table."""
    runner = MatrixRunner(federation)
    service_tenants = sorted(set(runner.table.admin_tenants.values()))
    cells = enumerate_cells(runner.table, list(user_tenants), service_tenants,
                            list(target_services), list(obo_tenants))
    disagreements = []
    accepted = 0
    for cell in cells:
        want = expected_rule(cell, runner.table)
        got = runner.probe(cell)
        if want is None:
            accepted += 1
        if got != want:
            disagreements.append({"cell": cell.label(), "expected": want, "observed": got})
    return {
        "cells": len(cells),
        "accepted_expected": accepted,
        "disagreements": disagreements,
    }

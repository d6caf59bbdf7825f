"""Page-fault completion flows run by the runtime once the OS has proposed a page.

Every function here receives values read back from TaskShared, so every physical address
is hostile until checked. Checks raise `Violation`; the runtime turns that into a kill.
"""

from __future__ import annotations

import hashlib
import logging
from typing import TYPE_CHECKING

from shadow_worlds.common.errors import Violation
from shadow_worlds.common.utils import PAGE_SIZE, setup_logging
from shadow_worlds.machine.models import LABEL_SECRET, TBytes
from shadow_worlds.paging.models import FreshPageLedger, PageEntry, PageKind
from shadow_worlds.runtime.models import NO_PAGE, Hap, OpenVault
from shadow_worlds.vault.models import BODY_BLOB, AppKey
from shadow_worlds.vault.vault import vault_seal_page, vault_unseal_page

if TYPE_CHECKING:
    from shadow_worlds.machine.machine import Machine
    from shadow_worlds.runtime.runtime import Runtime

setup_logging()
logger = logging.getLogger(__name__)


def verify_fresh_zone_page(
    machine: Machine, ledger: FreshPageLedger, p: int, verify: bool = True
) -> None:
    if verify:
        if p % PAGE_SIZE or not machine.zone("ZONE_TZ_APP").contains(p, PAGE_SIZE):
            raise Violation("ZoneViolation", f"proposed page {p:#010x} is not in ZONE_TZ_APP")
        if p in ledger:
            raise Violation("NonFreshPage", f"proposed page {p:#010x} is already mapped")
    ledger.add(p)


def _normal_page(machine: Machine, n: int, length: int, verify: bool) -> None:
    if n == NO_PAGE or (verify and not machine.zone("ZONE_NORMAL").contains(n, length)):
        raise Violation("ZoneViolation", f"backing page {n:#010x} is not in ZONE_NORMAL")


def _install(
    rt: Runtime,
    hap: Hap,
    vaddr: int,
    s: int,
    perms: frozenset[str],
    kind: PageKind,
    shared: bool = False,
    n_page: int | None = None,
) -> PageEntry:
    entry = PageEntry(phys=s, perms=perms, kind=kind, shared=shared, n_page=n_page)
    hap.page_table.install(vaddr, entry)
    rt.machine.trace.append(
        "PTE_INSTALL", hap=hap.hap_id, vaddr=vaddr - vaddr % PAGE_SIZE, phys=s, kind=kind
    )
    return entry


def fault_anonymous(rt: Runtime, hap: Hap, vaddr: int, s_page: int, perms: frozenset[str]) -> None:
    if hap.page_table.lookup(vaddr) is not None:
        return
    verify_fresh_zone_page(rt.machine, rt.ledger, s_page, rt.verify)
    rt.machine.phys_zero(s_page, PAGE_SIZE, "secure")
    rt.machine.metrics.zeroizations += 1
    _install(rt, hap, vaddr, s_page, perms, "anon")


def _copy_and_hash(rt: Runtime, n: int, s: int) -> bytes:
    m = rt.machine
    m.phys_copy(n, s, PAGE_SIZE, "secure")
    m.metrics.page_copies += 1
    m.metrics.bytes_copied_cross_world += PAGE_SIZE
    m.metrics.hash_ops += 1
    return hashlib.sha256(m.phys_read(s, PAGE_SIZE, "secure")).digest()


def fault_image(
    rt: Runtime,
    hap: Hap,
    vaddr: int,
    s_page: int,
    n_page: int,
    perms: frozenset[str],
    expected: bytes | None,
    kind: PageKind = "image",
) -> None:
    """N->S copy, then check the S copy against the manifest digest."""
    if hap.page_table.lookup(vaddr) is not None:
        return
    _normal_page(rt.machine, n_page, PAGE_SIZE, rt.verify)
    verify_fresh_zone_page(rt.machine, rt.ledger, s_page, rt.verify)
    _install(rt, hap, vaddr, s_page, perms, kind)
    digest = _copy_and_hash(rt, n_page, s_page)
    if not rt.verify:
        return
    if expected is None:
        raise Violation("MissingHash", f"no digest for {kind} page {vaddr:#010x}")
    if digest != expected:
        raise Violation("IntegrityMismatch", f"{kind} page {vaddr:#010x} digest mismatch")


def record_library_base(rt: Runtime, hap: Hap, name: str, base: int) -> None:
    bases = hap.private.library_bases
    old = bases.get(name)
    if old is not None and old != base and rt.verify:
        live = any(m.path == name and m.kind == "library" for m in hap.tracker.mappings)
        if live:
            raise Violation("LibraryBase", f"{name} already based at {old:#010x}")
    bases[name] = base
    rt.machine.trace.append("LIB_BASE", hap=hap.hap_id, name=name, base=base)


def fault_library(
    rt: Runtime,
    hap: Hap,
    vaddr: int,
    name: str,
    s_page: int,
    n_page: int,
    perms: frozenset[str],
) -> None:
    base = hap.private.library_bases.get(name)
    if base is None:
        raise Violation("LibraryBase", f"fault in {name} before its base was recorded")
    page = vaddr - vaddr % PAGE_SIZE
    hashes = rt.library_list(hap, name)
    expected = hashes.lookup(page - base) if hashes is not None else None
    fault_image(rt, hap, vaddr, s_page, n_page, perms, expected, kind="library")


def fault_file_private(
    rt: Runtime, hap: Hap, vaddr: int, s_page: int, n_page: int, perms: frozenset[str]
) -> None:
    if hap.page_table.lookup(vaddr) is not None:
        return
    _normal_page(rt.machine, n_page, PAGE_SIZE, rt.verify)
    verify_fresh_zone_page(rt.machine, rt.ledger, s_page, rt.verify)
    _install(rt, hap, vaddr, s_page, perms, "file")
    m = rt.machine
    m.phys_copy(n_page, s_page, PAGE_SIZE, "secure")
    m.metrics.page_copies += 1
    m.metrics.bytes_copied_cross_world += PAGE_SIZE


def fault_shared(
    rt: Runtime, hap: Hap, vaddr: int, key: tuple[str, int], s_page: int, perms: frozenset[str]
) -> None:
    """Cross-HAP shared page: one secure page per (file, page offset)."""
    if hap.page_table.lookup(vaddr) is not None:
        return
    existing = rt.shared_pages.get(key)
    if existing is None:
        verify_fresh_zone_page(rt.machine, rt.ledger, s_page, rt.verify)
        rt.machine.phys_zero(s_page, PAGE_SIZE, "secure")
        rt.machine.metrics.zeroizations += 1
        rt.shared_pages[key] = s_page
    elif existing != s_page and rt.verify:
        raise Violation("NonFreshPage", f"shared page {key} proposed at a different frame")
    phys = s_page if existing is None or not rt.verify else existing
    rt.shared_refs[phys] = rt.shared_refs.get(phys, 0) + 1
    _install(rt, hap, vaddr, phys, perms, "shared", shared=True)


def fault_protected_file(
    rt: Runtime,
    hap: Hap,
    vaddr: int,
    s_page: int,
    n_page: int,
    perms: frozenset[str],
    vault: OpenVault,
    key: AppKey,
) -> None:
    if hap.page_table.lookup(vaddr) is not None:
        return
    m = rt.machine
    _normal_page(m, n_page, BODY_BLOB, rt.verify)
    verify_fresh_zone_page(m, rt.ledger, s_page, rt.verify)
    _install(rt, hap, vaddr, s_page, perms, "protected", n_page=n_page)
    index = (vaddr - vault.window) // PAGE_SIZE
    blob = m.phys_read(n_page, BODY_BLOB, "secure")
    m.metrics.bytes_copied_cross_world += BODY_BLOB
    m.metrics.ae_ops += 1
    m.metrics.unseals += 1
    m.metrics.hash_ops += 1
    plaintext = vault_unseal_page(vault.file, index, blob, key, verify=rt.verify)
    m.phys_write(s_page, TBytes(plaintext, bytes([LABEL_SECRET]) * PAGE_SIZE), "secure")


def release_page(rt: Runtime, hap: Hap, vaddr: int) -> PageEntry | None:
    """Drop a PTE; private frames are zeroized and leave the ledger."""
    entry = hap.page_table.remove(vaddr)
    if entry is None:
        return None
    m = rt.machine
    m.trace.append("PTE_REMOVE", hap=hap.hap_id, vaddr=vaddr - vaddr % PAGE_SIZE, phys=entry.phys)
    if entry.shared:
        left = rt.shared_refs.get(entry.phys, 1) - 1
        if left > 0:
            rt.shared_refs[entry.phys] = left
            return entry
        rt.shared_refs.pop(entry.phys, None)
        for k, v in list(rt.shared_pages.items()):
            if v == entry.phys:
                del rt.shared_pages[k]
    if entry.kind == "sigframe":
        rt.sigframe_pool.append(entry.phys)
    if m.zone("ZONE_TZ_APP").contains(entry.phys, PAGE_SIZE) or m.zone("ZONE_TZ_RT").contains(
        entry.phys, PAGE_SIZE
    ):
        m.phys_zero(entry.phys, PAGE_SIZE, "secure")
    if entry.kind != "sigframe":
        rt.ledger.release(entry.phys)
    return entry


def unmap_protected_page(rt: Runtime, hap: Hap, vaddr: int, vault: OpenVault, key: AppKey) -> None:
    """Re-hash and re-seal S into its N page, then release S."""
    entry = hap.page_table.lookup(vaddr)
    if entry is None or entry.kind != "protected":
        return
    index = (vaddr - vault.window) // PAGE_SIZE
    m = rt.machine
    if index < vault.file.meta.page_count and entry.n_page is not None:
        plaintext = m.phys_read(entry.phys, PAGE_SIZE, "secure")
        blob = vault_seal_page(vault.file, index, plaintext, key)
        m.metrics.ae_ops += 1
        m.metrics.hash_ops += 1
        m.metrics.bytes_copied_cross_world += len(blob)
        m.phys_write(entry.n_page, blob, "secure")
    release_page(rt, hap, vaddr)

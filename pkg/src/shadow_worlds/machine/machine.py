import hashlib
import logging
from collections.abc import Iterator

from shadow_worlds.common.errors import BusFault, ConfigError, PermissionFault, SimulatorError
from shadow_worlds.common.trace import Metrics, Trace
from shadow_worlds.common.utils import PAGE_SIZE, setup_logging
from shadow_worlds.machine.models import (
    RegisterFile,
    TBytes,
    World,
    Zone,
    ZoneConfig,
    ZoneName,
    default_zone_config,
)

setup_logging()
logger = logging.getLogger(__name__)

_ALLOWED_SWITCHES: frozenset[tuple[World, World]] = frozenset(
    {
        ("secure", "monitor"),
        ("monitor", "normal"),
        ("normal", "monitor"),
        ("monitor", "secure"),
    }
)


class Machine:
    """Zoned physical memory, a world flag and one banked-free register file."""

    def __init__(self, config: ZoneConfig | None = None, page_size: int = PAGE_SIZE) -> None:
        if page_size <= 0 or page_size & (page_size - 1):
            raise ConfigError(f"page_size must be a power of two, got {page_size}")
        if page_size != PAGE_SIZE:
            raise ConfigError(f"Only {PAGE_SIZE}-byte pages are modelled, got {page_size}")
        config = config if config is not None else default_zone_config()
        config.validate(page_size)

        self.page_size = page_size
        self.config = ZoneConfig(zones=list(config.zones), locked=False)
        self.world: World = "secure"
        self.regs = RegisterFile()
        self.trace = Trace()
        self.metrics = Metrics()
        self.fuses: bytes = b""
        self.zmk: bytes = b""
        self.os_visible: list[tuple[int, RegisterFile]] = []

        self._pages: dict[int, bytearray] = {}
        self._labels: dict[int, bytearray] = {}
        self._pre_monitor: World = "secure"

    # --- zone configuration -------------------------------------------------

    def zone(self, name: ZoneName) -> Zone:
        return self.config.zone(name)

    def zone_lock(self) -> None:
        if self.world != "secure":
            self.trace.append("PERM_FAULT", op="zone_lock", world=self.world)
            raise PermissionFault(f"zone_lock from {self.world} world")
        if not self.config.locked:
            logger.info("Zone configuration locked")
        self.config.locked = True
        self.trace.append("ZONE_LOCK")

    def reconfigure(self, config: ZoneConfig) -> None:
        if self.config.locked or self.world != "secure":
            self.trace.append("PERM_FAULT", op="reconfigure", world=self.world)
            raise PermissionFault("Zone configuration is locked until machine reset")
        config.validate(self.page_size)
        self.config = ZoneConfig(zones=list(config.zones), locked=False)
        self.trace.append("ZONE_CONFIG", zones=len(config.zones))

    # --- physical memory -----------------------------------------------------

    def _resolve(self, addr: int, length: int) -> Zone:
        zone = self.config.zone_of(addr)
        if zone is None or not zone.contains(addr, max(length, 1)):
            self.trace.append("BUS_FAULT", addr=addr, len=length)
            raise BusFault(addr, length)
        return zone

    def _chunks(self, addr: int, length: int) -> Iterator[tuple[int, int, int, int]]:
        """Yield (page, offset in page, offset in buffer, chunk length)."""
        done = 0
        while done < length:
            cur = addr + done
            page = cur - cur % self.page_size
            off = cur - page
            n = min(self.page_size - off, length - done)
            yield page, off, done, n
            done += n

    def phys_read_t(self, addr: int, length: int, world: World | None = None) -> TBytes:
        world = world if world is not None else self.world
        zone = self._resolve(addr, length)
        if zone.security == "secure" and world != "secure":
            return TBytes(bytes(length), bytes(length))
        data = bytearray(length)
        labels = bytearray(length)
        for page, off, pos, n in self._chunks(addr, length):
            buf = self._pages.get(page)
            if buf is not None:
                data[pos : pos + n] = buf[off : off + n]
                labels[pos : pos + n] = self._labels[page][off : off + n]
        return TBytes(bytes(data), bytes(labels))

    def phys_read(self, addr: int, length: int, world: World | None = None) -> bytes:
        return self.phys_read_t(addr, length, world).data

    def phys_write(self, addr: int, data: bytes | TBytes, world: World | None = None) -> None:
        world = world if world is not None else self.world
        tb = data if isinstance(data, TBytes) else TBytes.clean(data)
        zone = self._resolve(addr, len(tb))
        if zone.security == "secure" and world != "secure":
            return
        for page, off, pos, n in self._chunks(addr, len(tb)):
            buf = self._pages.get(page)
            if buf is None:
                buf = self._pages[page] = bytearray(self.page_size)
                self._labels[page] = bytearray(self.page_size)
            buf[off : off + n] = tb.data[pos : pos + n]
            self._labels[page][off : off + n] = tb.labels[pos : pos + n]

    def phys_zero(self, addr: int, length: int, world: World | None = None) -> None:
        self.phys_write(addr, bytes(length), world)

    def phys_copy(self, src: int, dst: int, length: int, world: World | None = None) -> None:
        self.phys_write(dst, self.phys_read_t(src, length, world), world)

    def set_labels(self, addr: int, length: int, label: int) -> None:
        """Secure-side taint marking; never changes data."""
        self._resolve(addr, length)
        for page, off, _, n in self._chunks(addr, length):
            if page not in self._pages:
                self._pages[page] = bytearray(self.page_size)
                self._labels[page] = bytearray(self.page_size)
            self._labels[page][off : off + n] = bytes([label]) * n

    def touched_pages(self, name: ZoneName) -> list[int]:
        zone = self.zone(name)
        return sorted(p for p in self._pages if zone.contains(p))

    def zone_digest(self, name: ZoneName) -> str:
        h = hashlib.sha256()
        for page in self.touched_pages(name):
            buf = self._pages[page]
            if any(buf):
                h.update(page.to_bytes(4, "little"))
                h.update(buf)
        return h.hexdigest()

    # --- worlds --------------------------------------------------------------

    def world_switch(self, target: World, reason: str) -> None:
        source = self.world
        if (source, target) not in _ALLOWED_SWITCHES:
            raise SimulatorError(f"Illegal world transition {source} -> {target} ({reason})")
        index = self.trace.append("WORLD_SWITCH", src=source, dst=target, reason=reason)
        if target == "monitor":
            self._pre_monitor = source
        elif target != self._pre_monitor:
            self.metrics.world_switches += 1
        self.world = target
        if target == "normal":
            self.os_visible.append((index, self.regs.copy()))

    def cross(self, target: World, reason: str) -> None:
        """Complete crossing through monitor mode."""
        self.world_switch("monitor", reason)
        self.world_switch(target, reason)

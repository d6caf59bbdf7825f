"""HAPI image container.

    header   : magic "HAPI" | version u32 | entry u32 | segment count u32
    segment  : vaddr u32 | length u32 | flags u32 | kind u32 | content length u32 | content
    trailer  : library count u32 | (name length u32 | utf-8 name)*

All integers little-endian. Content may be shorter than length; the rest is zero.
"""

import struct
from pathlib import Path
from typing import Final

from shadow_worlds.common.errors import ImageError
from shadow_worlds.common.layout import USER_TOP
from shadow_worlds.common.utils import PAGE_SIZE, _atomic_write_bytes, page_ceil, page_floor
from shadow_worlds.guest.models import (
    SEG_EXEC,
    SEG_READ,
    SEG_WRITE,
    GuestImage,
    GuestProgram,
    LibraryRef,
    Segment,
)
from shadow_worlds.guest.parser import assemble, encode_slot

IMAGE_MAGIC: Final = b"HAPI"
IMAGE_VERSION: Final = 1
_HEADER = struct.Struct("<4sIII")
_SEGMENT = struct.Struct("<IIIII")
_U32 = struct.Struct("<I")
_KINDS: Final = ("code", "data")


def validate_image(image: GuestImage) -> GuestImage:
    if not image.segments:
        raise ImageError("Image has no segments")
    ordered = sorted(image.segments, key=lambda s: s.vaddr)
    for seg in ordered:
        if seg.vaddr % PAGE_SIZE or seg.length % PAGE_SIZE or seg.length == 0:
            raise ImageError(f"Segment at {seg.vaddr:#x} is not page aligned")
        if seg.end > USER_TOP:
            raise ImageError(f"Segment at {seg.vaddr:#x} crosses into the kernel half")
        if len(seg.content) > seg.length:
            raise ImageError(f"Segment at {seg.vaddr:#x} content exceeds its length")
    for a, b in zip(ordered, ordered[1:], strict=False):
        if a.end > b.vaddr:
            raise ImageError(f"Segments at {a.vaddr:#x} and {b.vaddr:#x} overlap")
    entry_seg = image.segment_at(image.entry)
    if entry_seg is None or not entry_seg.flags & SEG_EXEC:
        raise ImageError(f"Entry {image.entry:#x} is not inside an executable segment")
    return image


def build_image(program: GuestProgram) -> GuestImage:
    code = b"".join(encode_slot(op) for op in program.instructions)
    if program.code_base % PAGE_SIZE:
        raise ImageError(f"Code base {program.code_base:#x} is not page aligned")
    segments = [
        Segment(
            vaddr=program.code_base,
            length=page_ceil(len(code)),
            flags=SEG_READ | SEG_EXEC,
            kind="code",
            content=code,
        )
    ]

    pages: dict[int, bytearray] = {}
    for vaddr, blob, _ in program.data:
        for i, byte in enumerate(blob):
            page = page_floor(vaddr + i)
            buf = pages.setdefault(page, bytearray(PAGE_SIZE))
            buf[vaddr + i - page] = byte
    run: list[int] = []
    for page in sorted(pages):
        if run and page != run[-1] + PAGE_SIZE:
            segments.append(_data_segment(run, pages))
            run = []
        run.append(page)
    if run:
        segments.append(_data_segment(run, pages))

    entry = program.entry if program.entry is not None else program.code_base
    libraries = tuple(LibraryRef(name) for name in program.libraries)
    return validate_image(GuestImage(entry=entry, segments=tuple(segments), libraries=libraries))


def _data_segment(run: list[int], pages: dict[int, bytearray]) -> Segment:
    content = b"".join(bytes(pages[p]) for p in run).rstrip(b"\0")
    return Segment(
        vaddr=run[0],
        length=len(run) * PAGE_SIZE,
        flags=SEG_READ | SEG_WRITE,
        kind="data",
        content=content,
    )


def encode_image(image: GuestImage) -> bytes:
    out = bytearray(_HEADER.pack(IMAGE_MAGIC, IMAGE_VERSION, image.entry, len(image.segments)))
    for seg in image.segments:
        out += _SEGMENT.pack(
            seg.vaddr, seg.length, seg.flags, _KINDS.index(seg.kind), len(seg.content)
        )
        out += seg.content
    out += _U32.pack(len(image.libraries))
    for lib in image.libraries:
        name = lib.name.encode("utf-8")
        out += _U32.pack(len(name)) + name
    return bytes(out)


def decode_image(raw: bytes) -> GuestImage:
    try:
        magic, version, entry, count = _HEADER.unpack_from(raw, 0)
        if magic != IMAGE_MAGIC:
            raise ImageError(f"Bad image magic {magic!r}")
        if version != IMAGE_VERSION:
            raise ImageError(f"Unsupported image version {version}")
        pos = _HEADER.size
        segments = []
        for _ in range(count):
            vaddr, length, flags, kind, clen = _SEGMENT.unpack_from(raw, pos)
            pos += _SEGMENT.size
            content = raw[pos : pos + clen]
            if len(content) != clen:
                raise ImageError("Truncated segment content")
            pos += clen
            segments.append(Segment(vaddr, length, flags, _KINDS[kind], content))
        (nlibs,) = _U32.unpack_from(raw, pos)
        pos += _U32.size
        libraries = []
        for _ in range(nlibs):
            (nlen,) = _U32.unpack_from(raw, pos)
            pos += _U32.size
            libraries.append(LibraryRef(raw[pos : pos + nlen].decode("utf-8")))
            pos += nlen
    except (struct.error, IndexError, UnicodeDecodeError) as e:
        raise ImageError(f"Malformed image: {e}") from e
    return validate_image(GuestImage(entry, tuple(segments), tuple(libraries)))


def image_load(path: str | Path) -> GuestImage:
    return decode_image(Path(path).read_bytes())


def image_save(image: GuestImage, path: str | Path) -> Path:
    path = Path(path)
    _atomic_write_bytes(path, encode_image(image))
    return path


def assemble_file(path: str | Path) -> GuestImage:
    return build_image(assemble(Path(path).read_text(encoding="utf-8")))


def segment_page(seg: Segment, page_vaddr: int) -> bytes:
    """Full page contents of a segment page, zero padded."""
    off = page_vaddr - seg.vaddr
    return seg.content[off : off + PAGE_SIZE].ljust(PAGE_SIZE, b"\0")

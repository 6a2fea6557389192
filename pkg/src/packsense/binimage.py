"""Container parsing: PE, ELF and raw byte streams as byte-addressable images.

A loaded image exposes named sections with file extents and absolute virtual
addresses, plus the valid memory range used by the token normalizer for
address containment checks. Buffers without a recognizable PE/ELF header fall
back to a RAW image: one synthetic section spanning the whole buffer, based at
0x400000 (fallback documented here and in load_image).

Virtual addresses are stored absolute for every format (PE RVAs are rebased by
ImageBase at parse time) so containment needs no per-format logic.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

RAW_FALLBACK_BASE = 0x400000

PE_MACHINE_I386 = 0x014C
PE_MACHINE_AMD64 = 0x8664
ELF_MACHINE_386 = 3
ELF_MACHINE_X86_64 = 62


class ImageFormat(enum.Enum):
    PE = "pe"
    ELF = "elf"
    RAW = "raw"


class Mode(enum.Enum):
    """Decode mode of the image's code."""

    X86_32 = 32
    X86_64 = 64


class MalformedHeader(ValueError):
    """Magic bytes were present but the header structure is not loadable."""


@dataclass(frozen=True)
class Section:
    """One named section; file extent may be empty (e.g. .bss)."""

    name: str
    file_offset: int
    file_size: int
    virtual_address: int  # absolute
    virtual_size: int

    @property
    def file_end(self) -> int:
        return self.file_offset + self.file_size


@dataclass(frozen=True)
class AddressRange:
    """Sorted, disjoint half-open [lo, hi) intervals of valid addresses."""

    intervals: tuple[tuple[int, int], ...]

    def __post_init__(self):
        prev_hi = None
        for lo, hi in self.intervals:
            if lo >= hi:
                raise ValueError(f"empty interval [{lo:#x}, {hi:#x})")
            if prev_hi is not None and lo < prev_hi:
                raise ValueError("intervals overlap or are unsorted")
            prev_hi = hi

    def contains(self, addr: int) -> bool:
        for lo, hi in self.intervals:
            if lo <= addr < hi:
                return True
        return False

    @property
    def span(self) -> int:
        """Distance from the lowest to the highest valid address."""
        if not self.intervals:
            return 0
        return self.intervals[-1][1] - self.intervals[0][0]


@dataclass
class BinaryImage:
    data: bytes
    format: ImageFormat
    mode: Mode
    image_base: int
    sections: list[Section] = field(default_factory=list)

    @property
    def valid_range(self) -> AddressRange:
        """Union interval [image_base, highest section end va)."""
        hi = self.image_base
        for s in self.sections:
            hi = max(hi, s.virtual_address + max(s.virtual_size, s.file_size))
        if hi == self.image_base:
            hi = self.image_base + max(len(self.data), 1)
        return AddressRange(((self.image_base, hi),))

    def section_bytes(self, section: Section) -> bytes:
        return self.data[section.file_offset:section.file_end]


def _u16(b: bytes, off: int) -> int:
    return struct.unpack_from("<H", b, off)[0]


def _u32(b: bytes, off: int) -> int:
    return struct.unpack_from("<I", b, off)[0]


def _u64(b: bytes, off: int) -> int:
    return struct.unpack_from("<Q", b, off)[0]


def _check_section_extents(data: bytes, sections: list[Section]) -> None:
    """File extents must lie in the buffer and not overlap each other."""
    spans = []
    for s in sections:
        if s.file_size == 0:
            continue
        if s.file_offset < 0 or s.file_end > len(data):
            raise MalformedHeader(
                f"section {s.name!r} file range [{s.file_offset:#x}, "
                f"{s.file_end:#x}) exceeds buffer of {len(data)} bytes")
        spans.append((s.file_offset, s.file_end, s.name))
    spans.sort()
    for (lo1, hi1, n1), (lo2, hi2, n2) in zip(spans, spans[1:]):
        if lo2 < hi1:
            raise MalformedHeader(
                f"sections {n1!r} and {n2!r} overlap in file offsets")


def _parse_pe(data: bytes) -> BinaryImage:
    if len(data) < 0x40:
        raise MalformedHeader("buffer too small for a DOS header")
    e_lfanew = _u32(data, 0x3C)
    if e_lfanew + 24 > len(data):
        raise MalformedHeader("e_lfanew points past end of buffer")
    if data[e_lfanew:e_lfanew + 4] != b"PE\x00\x00":
        raise MalformedHeader("missing PE signature")
    coff = e_lfanew + 4
    machine = _u16(data, coff)
    nsections = _u16(data, coff + 2)
    opt_size = _u16(data, coff + 16)
    opt = coff + 20
    if opt + opt_size > len(data):
        raise MalformedHeader("optional header truncated")
    if opt_size < 2:
        raise MalformedHeader("optional header too small")
    magic = _u16(data, opt)
    if magic == 0x10B:
        if opt_size < 32:
            raise MalformedHeader("PE32 optional header truncated")
        image_base = _u32(data, opt + 28)
        mode = Mode.X86_32
    elif magic == 0x20B:
        if opt_size < 32:
            raise MalformedHeader("PE32+ optional header truncated")
        image_base = _u64(data, opt + 24)
        mode = Mode.X86_64
    else:
        raise MalformedHeader(f"unknown optional header magic {magic:#x}")
    if machine == PE_MACHINE_I386:
        mode = Mode.X86_32
    elif machine == PE_MACHINE_AMD64:
        mode = Mode.X86_64

    sec_table = opt + opt_size
    if sec_table + nsections * 40 > len(data):
        raise MalformedHeader("section table truncated")
    sections = []
    for i in range(nsections):
        off = sec_table + i * 40
        raw_name = data[off:off + 8].rstrip(b"\x00")
        name = raw_name.decode("latin-1") or f"sec{i}"
        vsize = _u32(data, off + 8)
        rva = _u32(data, off + 12)
        raw_size = _u32(data, off + 16)
        raw_ptr = _u32(data, off + 20)
        if raw_size == 0:
            raw_ptr = 0
        sections.append(Section(
            name=name,
            file_offset=raw_ptr,
            file_size=raw_size,
            virtual_address=image_base + rva,
            virtual_size=vsize if vsize else raw_size,
        ))
    _check_section_extents(data, sections)
    return BinaryImage(data=data, format=ImageFormat.PE, mode=mode,
                       image_base=image_base, sections=sections)


def _parse_elf(data: bytes) -> BinaryImage:
    if len(data) < 0x34:
        raise MalformedHeader("buffer too small for an ELF header")
    ei_class = data[4]
    ei_data = data[5]
    if ei_data != 1:
        raise MalformedHeader("only little-endian ELF is supported")
    if ei_class == 1:
        mode = Mode.X86_32
        e_machine = _u16(data, 18)
        e_shoff = _u32(data, 0x20)
        e_shentsize = _u16(data, 0x2E)
        e_shnum = _u16(data, 0x30)
        e_shstrndx = _u16(data, 0x32)
        name_off, addr_off, off_off, size_off = 0, 12, 16, 20
        type_off, addr_size = 4, 4
    elif ei_class == 2:
        mode = Mode.X86_64
        e_machine = _u16(data, 18)
        e_shoff = _u64(data, 0x28)
        e_shentsize = _u16(data, 0x3A)
        e_shnum = _u16(data, 0x3C)
        e_shstrndx = _u16(data, 0x3E)
        name_off, addr_off, off_off, size_off = 0, 16, 24, 32
        type_off, addr_size = 4, 8
    else:
        raise MalformedHeader(f"unknown ELF class {ei_class}")
    if e_machine == ELF_MACHINE_386:
        mode = Mode.X86_32
    elif e_machine == ELF_MACHINE_X86_64:
        mode = Mode.X86_64
    if e_shnum == 0 or e_shoff == 0:
        raise MalformedHeader("ELF has no section header table")
    if e_shoff + e_shnum * e_shentsize > len(data):
        raise MalformedHeader("section header table truncated")

    def field_at(idx: int, rel: int, width: int) -> int:
        base = e_shoff + idx * e_shentsize + rel
        if width == 2:
            return _u16(data, base)
        if width == 4:
            return _u32(data, base)
        return _u64(data, base)

    if e_shstrndx >= e_shnum:
        raise MalformedHeader("bad shstrndx")
    str_off = field_at(e_shstrndx, off_off, addr_size)
    str_size = field_at(e_shstrndx, size_off, addr_size)
    if str_off + str_size > len(data):
        raise MalformedHeader("string table truncated")
    strtab = data[str_off:str_off + str_size]

    SHT_NOBITS = 8
    SHF_ALLOC = 0x2
    sections = []
    bases = []
    for i in range(e_shnum):
        sh_type = field_at(i, type_off, 4)
        if sh_type == 0:  # SHT_NULL
            continue
        noff = field_at(i, name_off, 4)
        end = strtab.find(b"\x00", noff)
        name = strtab[noff:end if end >= 0 else None].decode("latin-1") or f"sec{i}"
        sh_flags = field_at(i, 8, addr_size)
        sh_addr = field_at(i, addr_off, addr_size)
        sh_offset = field_at(i, off_off, addr_size)
        sh_size = field_at(i, size_off, addr_size)
        file_size = 0 if sh_type == SHT_NOBITS else sh_size
        if not (sh_flags & SHF_ALLOC):
            continue
        if sh_addr:
            bases.append(sh_addr)
        sections.append(Section(
            name=name,
            file_offset=sh_offset if file_size else 0,
            file_size=file_size,
            virtual_address=sh_addr,
            virtual_size=sh_size,
        ))
    image_base = min(bases) if bases else RAW_FALLBACK_BASE
    for i, s in enumerate(sections):
        if s.virtual_address == 0:
            sections[i] = Section(s.name, s.file_offset, s.file_size,
                                  image_base, s.virtual_size)
    _check_section_extents(data, sections)
    return BinaryImage(data=data, format=ImageFormat.ELF, mode=mode,
                       image_base=image_base, sections=sections)


def _raw_image(data: bytes, mode: Mode = Mode.X86_32) -> BinaryImage:
    section = Section(name="raw", file_offset=0, file_size=len(data),
                      virtual_address=RAW_FALLBACK_BASE,
                      virtual_size=len(data))
    return BinaryImage(data=data, format=ImageFormat.RAW, mode=mode,
                       image_base=RAW_FALLBACK_BASE, sections=[section])


def load_image(data: bytes, format_hint: ImageFormat | None = None,
               mode: Mode = Mode.X86_32) -> BinaryImage:
    """Parse a byte buffer into a BinaryImage.

    PE and ELF headers are recognized by magic; anything else becomes a RAW
    image with one synthetic section at base 0x400000. A present magic with a
    broken structure raises MalformedHeader rather than falling back, so
    corrupt containers are surfaced instead of silently rebased. format_hint
    narrows which container parsers are attempted; `mode` only applies to RAW
    buffers (PE/ELF carry their own machine field).
    """
    if format_hint in (None, ImageFormat.PE):
        if len(data) >= 2 and data[:2] == b"MZ":
            return _parse_pe(data)
    if format_hint in (None, ImageFormat.ELF):
        if len(data) >= 4 and data[:4] == b"\x7fELF":
            return _parse_elf(data)
    if format_hint not in (None, ImageFormat.RAW):
        return _raw_image(data, mode)
    return _raw_image(data, mode)


def load_path(path, format_hint: ImageFormat | None = None,
              mode: Mode = Mode.X86_32) -> BinaryImage:
    """Convenience wrapper: read a file and load_image its contents."""
    with open(path, "rb") as fh:
        return load_image(fh.read(), format_hint=format_hint, mode=mode)

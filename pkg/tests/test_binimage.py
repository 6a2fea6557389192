"""Container parsing tests.

PE and ELF fixtures are assembled by hand with struct, field by field, so the
expected offsets/addresses come from the construction itself rather than from
the code under test.
"""

import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from packsense.binimage import (RAW_FALLBACK_BASE, AddressRange, ImageFormat,
                                MalformedHeader, Mode, Section, load_image)


def build_pe32(sections, image_base=0x400000, machine=0x014C,
               file_size=None):
    """Minimal PE32: DOS stub, COFF header, optional header, section table.

    `sections` is a list of (name, rva, vsize, raw_ptr, raw_size).
    """
    e_lfanew = 0x40
    dos = b"MZ" + b"\x00" * 0x3A + struct.pack("<I", e_lfanew)
    opt_size = 224
    coff = struct.pack("<IHHIIIHH", 0x4550, machine, len(sections),
                       0, 0, 0, opt_size, 0x0102)
    opt = bytearray(opt_size)
    struct.pack_into("<H", opt, 0, 0x10B)
    struct.pack_into("<I", opt, 28, image_base)
    table = b""
    for name, rva, vsize, raw_ptr, raw_size in sections:
        table += struct.pack("<8sIIIIIIHHI", name.encode(), vsize, rva,
                             raw_size, raw_ptr, 0, 0, 0, 0, 0xE0000020)
    blob = dos + coff + bytes(opt) + table
    total = file_size if file_size is not None else max(
        [len(blob)] + [p + s for *_, p, s in sections])
    out = bytearray(total)
    out[:len(blob)] = blob
    return bytes(out)


def build_elf32(sections, shstrtab_extra=b""):
    """Minimal ELF32 with a section header table.

    `sections` is a list of (name, sh_type, sh_flags, addr, offset, size).
    """
    names = b"\x00"
    name_offs = []
    for name, *_ in sections:
        name_offs.append(len(names))
        names += name.encode() + b"\x00"
    shstr_name_off = len(names)
    names += b".shstrtab\x00" + shstrtab_extra

    ehsize, shentsize = 0x34, 40
    nsh = len(sections) + 2  # null + shstrtab
    body_off = ehsize + nsh * shentsize
    blobs, offsets = [], []
    cur = body_off
    for name, sh_type, flags, addr, _off, size in sections:
        offsets.append(cur)
        blobs.append(bytes(size) if sh_type != 8 else b"")
        cur += len(blobs[-1])
    str_off = cur

    sh = struct.pack("<10I", *([0] * 10))  # SHT_NULL
    for i, (name, sh_type, flags, addr, _off, size) in enumerate(sections):
        sh += struct.pack("<10I", name_offs[i], sh_type, flags, addr,
                          offsets[i], size, 0, 0, 0, 0)
    sh += struct.pack("<10I", shstr_name_off, 3, 0, 0, str_off, len(names),
                      0, 0, 0, 0)

    eh = bytearray(ehsize)
    eh[:7] = b"\x7fELF\x01\x01\x01"
    struct.pack_into("<HH", eh, 16, 2, 3)    # ET_EXEC, EM_386
    struct.pack_into("<I", eh, 0x20, ehsize)  # e_shoff
    struct.pack_into("<H", eh, 0x2E, shentsize)
    struct.pack_into("<H", eh, 0x30, nsh)
    struct.pack_into("<H", eh, 0x32, nsh - 1)
    return bytes(eh) + sh + b"".join(blobs) + names


class TestPE:
    def test_fields_roundtrip(self):
        data = build_pe32([(".text", 0x1000, 0x500, 0x200, 0x400),
                           (".data", 0x2000, 0x300, 0x600, 0x200)],
                          image_base=0x10000000)
        img = load_image(data)
        assert img.format is ImageFormat.PE
        assert img.mode is Mode.X86_32
        assert img.image_base == 0x10000000
        assert [s.name for s in img.sections] == [".text", ".data"]
        text = img.sections[0]
        assert text.virtual_address == 0x10001000  # base + rva
        assert text.file_offset == 0x200 and text.file_size == 0x400
        assert img.sections[1].virtual_size == 0x300

    def test_amd64_machine_selects_64bit(self):
        data = build_pe32([(".text", 0x1000, 0x100, 0x200, 0x100)],
                          machine=0x8664)
        assert load_image(data).mode is Mode.X86_64

    def test_valid_range_covers_all_sections(self):
        data = build_pe32([(".text", 0x1000, 0x4000, 0x200, 0x100)])
        img = load_image(data)
        rng = img.valid_range
        assert rng.intervals == ((0x400000, 0x400000 + 0x1000 + 0x4000),)
        assert rng.contains(0x400000)
        assert not rng.contains(0x400000 + 0x5000)

    def test_section_bytes(self):
        data = bytearray(build_pe32([(".text", 0x1000, 0x10, 0x200, 0x10)]))
        data[0x200:0x210] = bytes(range(16))
        img = load_image(bytes(data))
        assert img.section_bytes(img.sections[0]) == bytes(range(16))

    def test_truncated_section_raises(self):
        data = build_pe32([(".text", 0x1000, 0x100, 0x200, 0x100)])
        with pytest.raises(MalformedHeader):
            load_image(data[:0x240])

    def test_overlapping_file_ranges_raise(self):
        data = build_pe32([(".a", 0x1000, 0x100, 0x200, 0x100),
                           (".b", 0x2000, 0x100, 0x280, 0x100)])
        with pytest.raises(MalformedHeader):
            load_image(data)

    def test_missing_signature_raises(self):
        data = bytearray(build_pe32([(".t", 0x1000, 0x10, 0x200, 0x10)]))
        data[0x40:0x44] = b"XX\x00\x00"
        with pytest.raises(MalformedHeader):
            load_image(bytes(data))

    def test_writer_parses_back(self, small_corpus):
        root, manifest = small_corpus
        pes = [e for e in manifest.entries if e.format == "pe"]
        for e in pes:
            img = load_image((root / e.path).read_bytes())
            assert img.format is ImageFormat.PE
            assert len(img.sections) >= 1


class TestELF:
    def test_fields_roundtrip(self):
        data = build_elf32([(".text", 1, 0x6, 0x8048000, 0, 0x80),
                            (".data", 1, 0x3, 0x8049000, 0, 0x40)])
        img = load_image(data)
        assert img.format is ImageFormat.ELF
        assert img.mode is Mode.X86_32
        assert img.image_base == 0x8048000  # lowest allocated address
        assert [s.name for s in img.sections] == [".text", ".data"]
        assert img.sections[0].virtual_address == 0x8048000

    def test_nobits_has_no_file_extent(self):
        data = build_elf32([(".text", 1, 0x6, 0x8048000, 0, 0x40),
                            (".bss", 8, 0x3, 0x8049000, 0, 0x100)])
        img = load_image(data)
        bss = [s for s in img.sections if s.name == ".bss"][0]
        assert bss.file_size == 0
        assert bss.virtual_size == 0x100

    def test_non_alloc_sections_skipped(self):
        data = build_elf32([(".text", 1, 0x6, 0x8048000, 0, 0x40),
                            (".comment", 1, 0x0, 0, 0, 0x20)])
        img = load_image(data)
        assert [s.name for s in img.sections] == [".text"]

    def test_truncated_table_raises(self):
        data = build_elf32([(".text", 1, 0x6, 0x8048000, 0, 0x40)])
        with pytest.raises(MalformedHeader):
            load_image(data[:0x50])


class TestRaw:
    def test_fallback(self):
        img = load_image(b"\x90" * 64)
        assert img.format is ImageFormat.RAW
        assert img.image_base == RAW_FALLBACK_BASE
        assert len(img.sections) == 1
        s = img.sections[0]
        assert (s.file_offset, s.file_size) == (0, 64)
        assert s.virtual_address == RAW_FALLBACK_BASE

    def test_mode_honored(self):
        assert load_image(b"\x90", mode=Mode.X86_64).mode is Mode.X86_64

    @given(st.binary(min_size=0, max_size=64))
    @settings(max_examples=200, deadline=None)
    def test_non_magic_buffers_never_raise(self, data):
        if data[:2] == b"MZ" or data[:4] == b"\x7fELF":
            return
        img = load_image(data)
        assert img.format is ImageFormat.RAW
        assert img.valid_range.span >= max(len(data), 1)


class TestAddressRange:
    def test_contains_and_span(self):
        r = AddressRange(((10, 20), (30, 40)))
        assert r.contains(10) and r.contains(19) and not r.contains(20)
        assert r.contains(30) and not r.contains(29)
        assert r.span == 30

    def test_rejects_overlap_and_empty(self):
        with pytest.raises(ValueError):
            AddressRange(((10, 10),))
        with pytest.raises(ValueError):
            AddressRange(((10, 30), (20, 40)))

    def test_section_file_end(self):
        s = Section("x", 16, 32, 0x400000, 32)
        assert s.file_end == 48

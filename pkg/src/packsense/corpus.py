"""Synthetic corpus generation with byte-exact region ground truth.

Every file is assembled from labeled segments:

  Instruction  sampled encodings from the decode subset with realistic
               low-entropy immediates (small constants, stack displacements,
               in-range branch targets), landing around 5.5-6.5 bits/byte
  NativeData   C-string pools, u32 tables, zero/int3/nop padding
  PackedData   random bytes, or a low-entropy transform of sampled code
               (mono/poly substitution, transposition, encoding, padding)

Files are raw streams (one synthetic section) or minimal PE32 images. The
JSONL manifest records per file: sha256, role (pretrain/finetune/test),
program label, region extents in file offsets (tiling each section), the
transform spec if any, the draw seed, and payload lineage. split_check
verifies role disjointness by content hash and lineage closure.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .binimage import BinaryImage, load_image
from .detect import RegionLabel
from .lowentropy import Scheme, TransformSpec, random_spec, transform
from .normalizer import (TokenWindow, detection_windows_for_image,
                         token_windows_for_image)

ROLES = ("pretrain", "finetune", "test")

DEFAULT_SCHEMES = ("random", "mono_sub", "transposition", "poly_sub",
                   "encoding", "byte_padding")

FILE_ALIGN = 0x200
SECT_ALIGN = 0x1000


# ---------------------------------------------------------------------------
# minimal PE writer


def _align(x: int, a: int) -> int:
    return (x + a - 1) // a * a


def write_minimal_pe(sections: list[tuple[str, bytes]],
                     image_base: int = 0x400000
                     ) -> tuple[bytes, list[tuple[str, int, int]]]:
    """A loadable PE32 skeleton. Returns (blob, [(name, file_off, raw_size)]).

    Raw sizes are FileAlignment-padded with zeros; callers that track region
    labels should label the padding tail as data.
    """
    n = len(sections)
    headers = 0x40 + 4 + 20 + 224 + 40 * n
    size_of_headers = _align(headers, FILE_ALIGN)

    layout = []
    cursor = size_of_headers
    va = SECT_ALIGN
    sec_rows = []
    for name, data in sections:
        raw = _align(max(len(data), 1), FILE_ALIGN)
        vsize = len(data)
        sec_rows.append((name, vsize, va, raw, cursor))
        layout.append((name, cursor, raw))
        cursor += raw
        va = _align(va + max(vsize, 1), SECT_ALIGN)
    size_of_image = _align(va, SECT_ALIGN)

    blob = bytearray(cursor)
    blob[0:2] = b"MZ"
    struct.pack_into("<I", blob, 0x3C, 0x40)
    blob[0x40:0x44] = b"PE\x00\x00"
    # COFF: machine i386, n sections, no symbols, optional header 224 bytes
    struct.pack_into("<HHIIIHH", blob, 0x44, 0x014C, n, 0, 0, 0, 224, 0x0102)
    opt = 0x44 + 20
    struct.pack_into("<HBBIIIII", blob, opt, 0x10B, 14, 0, 0, 0, 0,
                     sec_rows[0][2] if sec_rows else 0, SECT_ALIGN)
    struct.pack_into("<II", blob, opt + 28, image_base, SECT_ALIGN)
    struct.pack_into("<I", blob, opt + 36, FILE_ALIGN)
    struct.pack_into("<HHHHHH", blob, opt + 40, 4, 0, 0, 0, 4, 0)
    struct.pack_into("<IIII", blob, opt + 56, size_of_image, size_of_headers,
                     0, 3)  # checksum 0, subsystem console
    struct.pack_into("<IIIIII", blob, opt + 72, 0, 0x100000, 0x1000,
                     0x100000, 0x1000, 0)
    struct.pack_into("<I", blob, opt + 92, 16)  # data directory count
    table = opt + 224
    for i, (name, vsize, va_i, raw, ptr) in enumerate(sec_rows):
        row = table + 40 * i
        blob[row:row + 8] = name.encode("ascii")[:8].ljust(8, b"\x00")
        struct.pack_into("<IIII", blob, row + 8, vsize, va_i, raw, ptr)
        struct.pack_into("<I", blob, row + 36, 0xE0000020)
    for (name, data), (_, _, _, raw, ptr) in zip(sections, sec_rows):
        blob[ptr:ptr + len(data)] = data
    return bytes(blob), layout


# ---------------------------------------------------------------------------
# instruction sampler (32-bit)


_REGS = [0, 1, 2, 3, 5, 6, 7]        # skip esp for modrm simplicity
_ARITH_RR = [0x01, 0x09, 0x21, 0x29, 0x31, 0x39]
_GRP1_OPS = [0, 4, 5, 6, 7]          # add and sub xor cmp


class CodeSampler:
    """Emits valid 32-bit encodings with compiler-flavored operand values."""

    def __init__(self, rng: np.random.Generator, region_len: int):
        self.rng = rng
        self.region_len = region_len
        self.pos = 0

    def _reg(self) -> int:
        return int(self.rng.choice(_REGS))

    def _disp8(self) -> int:
        return int(self.rng.choice([4, 8, 12, 16, 0x20, -4, -8, -12,
                                    -16, -0x20, -0x40])) & 0xFF

    def _imm8(self) -> int:
        return int(self.rng.choice([0, 1, 2, 3, 4, 8, 0x10, 0x20, 0x40]))

    def _imm32(self) -> bytes:
        kind = self.rng.random()
        if kind < 0.5:
            return struct.pack("<I", self._imm8())
        if kind < 0.8:
            return struct.pack("<I", int(self.rng.integers(0, 4096)))
        return struct.pack("<I", 0x400000 + int(self.rng.integers(0, 0x4000)))

    def _rel32(self, ilen: int) -> bytes:
        target = int(self.rng.integers(0, max(self.region_len, ilen + 1)))
        return struct.pack("<i", target - (self.pos + ilen))

    def _rel8(self) -> bytes:
        nxt = self.pos + 2
        lo = max(0, nxt - 120)
        hi = min(self.region_len, nxt + 120)
        target = int(self.rng.integers(lo, max(hi, lo + 1)))
        return struct.pack("<b", max(-128, min(127, target - nxt)))

    def emit_one(self) -> bytes:
        r = self.rng.random()
        rng = self.rng
        if r < 0.12:
            return bytes([0x50 + self._reg()])               # push reg
        if r < 0.20:
            return bytes([0x58 + self._reg()])               # pop reg
        if r < 0.30:                                         # mov r,r
            return bytes([0x89, 0xC0 | (self._reg() << 3) | self._reg()])
        if r < 0.38:                                         # arith r,r
            op = int(rng.choice(_ARITH_RR))
            return bytes([op, 0xC0 | (self._reg() << 3) | self._reg()])
        if r < 0.46:                                         # grp1 r,imm8
            op = int(rng.choice(_GRP1_OPS))
            return bytes([0x83, 0xC0 | (op << 3) | self._reg(), self._imm8()])
        if r < 0.54:                                         # mov r,[ebp+d8]
            return bytes([0x8B, 0x45 | (self._reg() << 3), self._disp8()])
        if r < 0.62:                                         # mov [ebp+d8],r
            return bytes([0x89, 0x45 | (self._reg() << 3), self._disp8()])
        if r < 0.68:                                         # mov r,imm32
            return bytes([0xB8 + self._reg()]) + self._imm32()
        if r < 0.73:
            return bytes([0xE8]) + self._rel32(5)            # call rel32
        if r < 0.79:                                         # jcc rel8
            cc = int(rng.integers(0, 16))
            return bytes([0x70 + cc]) + self._rel8()
        if r < 0.82:
            return bytes([0xEB]) + self._rel8()              # jmp rel8
        if r < 0.85:                                         # test r,r
            return bytes([0x85, 0xC0 | (self._reg() << 3) | self._reg()])
        if r < 0.88:                                         # lea r,[ebp+d8]
            return bytes([0x8D, 0x45 | (self._reg() << 3), self._disp8()])
        if r < 0.90:
            return bytes([0x40 + self._reg()])               # inc reg
        if r < 0.92:                                         # movzx r, byte [r]
            base = int(rng.choice([0, 1, 2, 3, 6, 7]))
            return bytes([0x0F, 0xB6, (self._reg() << 3) | base])
        if r < 0.94:                                         # cmp [ebp+d8],imm8
            return bytes([0x83, 0x7D, self._disp8(), self._imm8()])
        if r < 0.96:
            return bytes([0xC9, 0xC3])                       # leave; ret
        if r < 0.98:
            return b"\x90"                                   # nop
        return bytes([0x6A, self._imm8()])                   # push imm8

    def emit(self, n: int) -> bytes:
        out = bytearray()
        while len(out) < n:
            ins = self.emit_one()
            out += ins
            self.pos = len(out)
        return bytes(out)


# ---------------------------------------------------------------------------
# native data samplers

_WORDS = [b"kernel32.dll", b"user32.dll", b"advapi32.dll", b"ntdll.dll",
          b"GetProcAddress", b"LoadLibraryA", b"VirtualAlloc", b"ExitProcess",
          b"CreateFileW", b"ReadFile", b"WriteFile", b"CloseHandle",
          b"GetModuleHandleA", b"HeapAlloc", b"HeapFree", b"GetLastError",
          b"C:\\Windows\\System32", b"C:\\Program Files", b"SOFTWARE\\Classes",
          b"error: %s\n", b"usage: %s [options]", b"out of memory",
          b"invalid argument", b"file not found", b"permission denied",
          b"application/x-msdownload", b"Mozilla/5.0 (Windows NT 10.0)",
          b"Content-Type: text/html", b"abcdefghijklmnopqrstuvwxyz",
          b"0123456789", b".text", b".data", b".rdata", b"config.ini",
          b"temp.dat", b"update.log", b"SeDebugPrivilege", b"wininet.dll"]


def sample_strings(rng: np.random.Generator, n: int) -> bytes:
    out = bytearray()
    while len(out) < n:
        w = _WORDS[int(rng.integers(len(_WORDS)))]
        out += w + b"\x00"
        if rng.random() < 0.2:
            out += b"\x00" * int(rng.integers(1, 4))
    return bytes(out[:n])


def sample_table(rng: np.random.Generator, n: int) -> bytes:
    kind = rng.random()
    count = max(n // 4, 1)
    if kind < 0.4:
        vals = rng.integers(0, 1000, size=count)
    elif kind < 0.7:
        start = int(rng.integers(0, 0x1000))
        step = int(rng.choice([1, 2, 4, 8, 16]))
        vals = start + step * np.arange(count)
    else:
        vals = 0x400000 + 4 * rng.integers(0, 0x2000, size=count)
    out = b"".join(struct.pack("<I", int(v) & 0xFFFFFFFF) for v in vals)
    return out[:n].ljust(n, b"\x00")


def sample_zeropad(rng: np.random.Generator, n: int) -> bytes:
    out = bytearray(n)
    if n >= 16 and rng.random() < 0.5:
        filler = bytes([int(rng.choice([0x90, 0xCC]))])
        pos = int(rng.integers(0, n // 2))
        run = int(rng.integers(4, min(32, n - pos)))
        out[pos:pos + run] = filler * run
    return bytes(out)


_NATIVE_SAMPLERS = (sample_strings, sample_table, sample_zeropad)


def sample_native(rng: np.random.Generator, n: int) -> bytes:
    f = _NATIVE_SAMPLERS[int(rng.integers(len(_NATIVE_SAMPLERS)))]
    return f(rng, n)


# ---------------------------------------------------------------------------
# packed payloads


def sample_packed(rng: np.random.Generator, n: int, schemes
                  ) -> tuple[bytes, TransformSpec | None, str | None]:
    """Returns (payload, spec or None for random bytes, source sha or None)."""
    choice = schemes[int(rng.integers(len(schemes)))]
    if choice == "random":
        return rng.integers(0, 256, size=n, dtype=np.uint8).tobytes(), \
            None, None
    scheme = Scheme(choice)
    src = CodeSampler(rng, n).emit(n)
    spec = random_spec(scheme, rng)
    if scheme is Scheme.BYTE_PADDING:
        params = dict(spec.params)
        params["amount"] = min(int(params["amount"]), 2)
        spec = TransformSpec(scheme, params)
    out, _meta = transform(src, spec)
    return out, spec, hashlib.sha256(src).hexdigest()


# ---------------------------------------------------------------------------
# manifest


@dataclass
class ManifestEntry:
    path: str
    sha256: str
    role: str
    format: str                      # "raw" | "pe"
    size: int
    program_label: str               # "packed" | "nonpacked"
    regions: list[list]              # [start, end, label_name]
    transform: dict | None
    seed: int
    lineage: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "path": self.path, "sha256": self.sha256, "role": self.role,
            "format": self.format, "size": self.size,
            "program_label": self.program_label, "regions": self.regions,
            "transform": self.transform, "seed": self.seed,
            "lineage": self.lineage,
        }

    @staticmethod
    def from_json(obj: dict) -> "ManifestEntry":
        return ManifestEntry(**obj)


@dataclass
class CorpusManifest:
    entries: list[ManifestEntry]

    def role(self, role: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.role == role]


def write_manifest(path, manifest: CorpusManifest) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in manifest.entries:
            fh.write(json.dumps(e.to_json(), sort_keys=True) + "\n")


def read_manifest(path) -> CorpusManifest:
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                entries.append(ManifestEntry.from_json(json.loads(line)))
    return CorpusManifest(entries)


def split_check(manifest: CorpusManifest) -> list[str]:
    """Role disjointness by sha256 and lineage closure. Empty list = clean."""
    violations = []
    by_sha: dict[str, set[str]] = {}
    for e in manifest.entries:
        by_sha.setdefault(e.sha256, set()).add(e.role)
    for sha, roles in by_sha.items():
        if len(roles) > 1:
            violations.append(
                f"content {sha[:16]} appears in roles {sorted(roles)}")
    train_shas = {e.sha256 for e in manifest.entries
                  if e.role in ("pretrain", "finetune")}
    train_sources = {e.lineage.get("source_sha256")
                     for e in manifest.entries
                     if e.role in ("pretrain", "finetune")} - {None}
    for e in manifest.entries:
        if e.role != "test":
            continue
        src = e.lineage.get("source_sha256")
        if src and (src in train_shas or src in train_sources):
            violations.append(
                f"test file {e.path} derives from training content "
                f"{src[:16]}")
    return violations


# ---------------------------------------------------------------------------
# file assembly


def _segment_plan(rng: np.random.Generator, size: int, packed: bool,
                  schemes) -> list[tuple[bytes, RegionLabel,
                                         TransformSpec | None, str | None]]:
    segs = []
    if packed:
        stub = int(size * rng.uniform(0.10, 0.25))
        payload = int(size * rng.uniform(0.50, 0.75))
        tail = max(size - stub - payload, 0)
        segs.append((CodeSampler(rng, stub).emit(stub),
                     RegionLabel.INSTRUCTION, None, None))
        data, spec, src_sha = sample_packed(rng, payload, schemes)
        segs.append((data, RegionLabel.PACKED_DATA, spec, src_sha))
        if tail > 32:
            segs.append((sample_native(rng, tail), RegionLabel.NATIVE_DATA,
                         None, None))
    else:
        code1 = int(size * rng.uniform(0.35, 0.60))
        data1 = int(size * rng.uniform(0.15, 0.35))
        rest = max(size - code1 - data1, 0)
        segs.append((CodeSampler(rng, code1).emit(code1),
                     RegionLabel.INSTRUCTION, None, None))
        segs.append((sample_native(rng, data1), RegionLabel.NATIVE_DATA,
                     None, None))
        if rest > 64 and rng.random() < 0.6:
            segs.append((CodeSampler(rng, rest).emit(rest),
                         RegionLabel.INSTRUCTION, None, None))
        elif rest > 32:
            segs.append((sample_native(rng, rest), RegionLabel.NATIVE_DATA,
                         None, None))
    return segs


def generate_file(rng: np.random.Generator, size: int, packed: bool,
                  schemes, container: str
                  ) -> tuple[bytes, list[list], dict | None, dict]:
    """Returns (blob, regions, transform_json, lineage)."""
    segs = _segment_plan(rng, size, packed, schemes)
    stream = b"".join(s[0] for s in segs)
    regions = []
    off = 0
    spec_json = None
    lineage: dict = {}
    for data, label, spec, src_sha in segs:
        regions.append([off, off + len(data), label.name.lower()])
        off += len(data)
        if spec is not None:
            spec_json = spec.to_json()
        if src_sha:
            lineage["source_sha256"] = src_sha
    if container == "pe":
        blob, layout = write_minimal_pe([(".text", stream)])
        base = layout[0][1]
        regions = [[base + a, base + b, lab] for a, b, lab in regions]
        raw_end = base + layout[0][2]
        if raw_end > base + len(stream):
            regions.append([base + len(stream), raw_end,
                            RegionLabel.NATIVE_DATA.name.lower()])
        return blob, regions, spec_json, lineage
    return stream, regions, spec_json, lineage


DEFAULT_PACKED_FRACTION = {"pretrain": 0.0, "finetune": 0.5, "test": 0.5}


def generate_corpus(out_dir, counts: dict[str, int], seed: int = 0,
                    packed_schemes=DEFAULT_SCHEMES,
                    packed_fraction: dict[str, float] | None = None,
                    size_range: tuple[int, int] = (1536, 3072),
                    pe_fraction: float = 0.2) -> CorpusManifest:
    """Write a corpus + manifest.jsonl under out_dir. Deterministic in seed."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fractions = dict(DEFAULT_PACKED_FRACTION)
    if packed_fraction:
        fractions.update(packed_fraction)
    schemes = list(packed_schemes)
    entries = []
    for role_idx, role in enumerate(ROLES):
        count = int(counts.get(role, 0))
        for i in range(count):
            file_seed = int(np.random.SeedSequence(
                [seed, role_idx, i]).generate_state(1)[0])
            rng = np.random.default_rng(
                np.random.SeedSequence([seed, role_idx, i]))
            size = int(rng.integers(size_range[0], size_range[1] + 1))
            packed = bool(rng.random() < fractions[role])
            container = "pe" if rng.random() < pe_fraction else "raw"
            blob, regions, spec_json, lineage = generate_file(
                rng, size, packed, schemes, container)
            name = f"{role}_{i:05d}.bin"
            (out / name).write_bytes(blob)
            entries.append(ManifestEntry(
                path=name, sha256=hashlib.sha256(blob).hexdigest(),
                role=role, format=container, size=len(blob),
                program_label="packed" if packed else "nonpacked",
                regions=regions, transform=spec_json, seed=file_seed,
                lineage=lineage))
    manifest = CorpusManifest(entries)
    write_manifest(out / "manifest.jsonl", manifest)
    return manifest


# ---------------------------------------------------------------------------
# dataset assembly


_LABEL_FROM_NAME = {lab.name.lower(): lab for lab in RegionLabel}


def label_for_extent(regions: list[list], start: int, end: int
                     ) -> RegionLabel:
    """Majority byte-overlap label; ties prefer the more suspicious label."""
    overlap = {lab: 0 for lab in RegionLabel}
    for a, b, name in regions:
        o = min(end, b) - max(start, a)
        if o > 0:
            overlap[_LABEL_FROM_NAME[name]] += o
    best = max(overlap.values())
    if best == 0:
        return RegionLabel.NATIVE_DATA
    for lab in (RegionLabel.PACKED_DATA, RegionLabel.NATIVE_DATA,
                RegionLabel.INSTRUCTION):
        if overlap[lab] == best:
            return lab
    raise AssertionError


def load_entry_image(root, entry: ManifestEntry) -> BinaryImage:
    return load_image((Path(root) / entry.path).read_bytes())


def pretrain_windows(root, entries: list[ManifestEntry]
                     ) -> list[TokenWindow]:
    """Sectionwise 512-token windows for masked pretraining."""
    windows = []
    for e in entries:
        windows.extend(token_windows_for_image(load_entry_image(root, e)))
    return windows


def labeled_windows(root, entries: list[ManifestEntry],
                    window_units: int = 100, floor_units: int = 10
                    ) -> list[TokenWindow]:
    """Detection windows with majority-overlap region labels."""
    windows = []
    for e in entries:
        image = load_entry_image(root, e)
        ws = detection_windows_for_image(image, window_units=window_units,
                                         floor_units=floor_units)
        for w in ws:
            w.label = int(label_for_extent(e.regions, w.byte_start,
                                           w.byte_end))
        windows.extend(ws)
    return windows

"""Token normalization and window packing.

Decoded units become short token sequences: prefix tokens, mnemonic, operand
tokens, then [EOS]. Concrete values are collapsed into label tokens:

  immediates                -> [const]
  memory displacements      -> [const_normal] / [const_abnormal]
  branch targets            -> [mem_normal]   / [mem_abnormal]
  raw bytes                 -> [pad_normal]   / [pad_abnormal]

Normality: absolute addresses and resolved branch/RIP targets check
containment in the image's valid range; register-relative displacements use a
magnitude rule (|disp| <= range span). Raw bytes 0x00/0xCC/0x90 are the
normal padding idioms. Implicit operands (EFLAGS, string-op registers) are
never emitted.

The vocabulary is closed: it is enumerated from the decoder's tables at build
time, so normalization can never produce an out-of-vocabulary token. Eleven
special tokens occupy ids 0-10 in a fixed order.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .binimage import AddressRange, BinaryImage
from .disasm import (BCD_32, CC, GRP1, GRP2, GRP3, GRP8, ONE_BYTE,
                     PUSH_POP_SEG, REG8_NOREX, REG8_REX, REG16, REG32, REG64,
                     SEGREGS, STRING_OPS, TWO_BYTE, XMM, DecodedUnit,
                     OperandKind, UnitKind, linear_sweep)

SPECIALS = ("[SOS]", "[EOS]", "[MASK]", "[PAD]",
            "[const]", "[const_normal]", "[const_abnormal]",
            "[mem_normal]", "[mem_abnormal]",
            "[pad_normal]", "[pad_abnormal]")

SOS, EOS, MASK, PAD = 0, 1, 2, 3

NORMAL_PAD_BYTES = (0x00, 0xCC, 0x90)

MAX_WINDOW_TOKENS = 512
DETECT_WINDOW_UNITS = 100
DETECT_WINDOW_FLOOR = 10

CLS_STRUCTURAL = "structural"
CLS_LABEL_IMM = "label_imm"
CLS_LABEL_PAD = "label_pad"
CLS_MNEMONIC = "mnemonic"
CLS_REGISTER = "register"
CLS_SEGREG = "segreg"
CLS_XMMREG = "xmmreg"
CLS_PREFIX = "prefix"
CLS_SCALE = "scale"


class UnknownToken(KeyError):
    """A token outside the closed vocabulary; indicates a decoder/vocab skew."""


class VocabularyMismatch(ValueError):
    """A serialized vocabulary does not match the expected layout or hash."""


@dataclass(frozen=True)
class Token:
    text: str
    id: int


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    classes: tuple[str, ...]
    index: dict[str, int] = field(repr=False)
    class_members: dict[str, np.ndarray] = field(repr=False)
    sha256: str = ""

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, text: str) -> int:
        try:
            return self.index[text]
        except KeyError:
            raise UnknownToken(text) from None

    def text_of(self, token_id: int) -> str:
        return self.tokens[token_id]

    def class_of(self, token_id: int) -> str:
        return self.classes[token_id]

    def serialize(self) -> bytes:
        return ("\n".join(self.tokens) + "\n").encode("ascii")

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.serialize())


def _collect_mnemonics() -> list[str]:
    out = {mn for mn, _ in ONE_BYTE.values()}
    out |= {mn for mn, _ in TWO_BYTE.values()}
    out |= {mn for mn, _ in PUSH_POP_SEG.values()}
    out |= set(BCD_32.values())
    out |= set(STRING_OPS.values())
    out |= set(GRP1) | set(GRP2) | set(GRP3) | {m for m in GRP8 if m}
    out |= {"j" + c for c in CC} | {"set" + c for c in CC}
    out |= {"cmov" + c for c in CC}
    out |= {"inc", "dec", "nop", "xchg", "fpu", "simd", "fence",
            "bswap", "cmpxchg8b", "movsxd", "arpl"}
    return sorted(out)


def _collect_gprs() -> list[str]:
    seen = []
    for table in (REG8_NOREX, REG8_REX, REG16, REG32, REG64):
        for r in table:
            if r not in seen:
                seen.append(r)
    return seen


@lru_cache(maxsize=1)
def build_vocabulary() -> Vocabulary:
    """Enumerate the decode subset's token space. Deterministic."""
    tokens: list[str] = list(SPECIALS)
    classes: list[str] = [CLS_STRUCTURAL] * 4 + [CLS_LABEL_IMM] * 5 + \
        [CLS_LABEL_PAD] * 2
    for p in ("lock", "rep", "repne"):
        tokens.append(p)
        classes.append(CLS_PREFIX)
    for s in ("*1", "*2", "*4", "*8"):
        tokens.append(s)
        classes.append(CLS_SCALE)
    for r in _collect_gprs():
        tokens.append(r)
        classes.append(CLS_REGISTER)
    for r in SEGREGS:
        tokens.append(r)
        classes.append(CLS_SEGREG)
    for r in XMM:
        tokens.append(r)
        classes.append(CLS_XMMREG)
    for m in _collect_mnemonics():
        tokens.append(m)
        classes.append(CLS_MNEMONIC)
    assert len(tokens) == len(set(tokens)), "vocabulary has duplicates"

    index = {t: i for i, t in enumerate(tokens)}
    members: dict[str, list[int]] = {}
    for i, c in enumerate(classes):
        members.setdefault(c, []).append(i)
    class_members = {c: np.asarray(ids, dtype=np.int32)
                     for c, ids in members.items()}
    blob = ("\n".join(tokens) + "\n").encode("ascii")
    return Vocabulary(tokens=tuple(tokens), classes=tuple(classes),
                      index=index, class_members=class_members,
                      sha256=hashlib.sha256(blob).hexdigest())


def load_vocabulary(path) -> Vocabulary:
    """Load and validate a serialized vocabulary against the built-in one.

    The vocabulary is a build-time constant; a file that deviates in any way
    (order, content, specials placement) raises VocabularyMismatch.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    vocab = build_vocabulary()
    if blob != vocab.serialize():
        lines = blob.decode("ascii", errors="replace").splitlines()
        if tuple(lines[:len(SPECIALS)]) != SPECIALS:
            raise VocabularyMismatch(
                "special tokens are not at ids 0-10 in the expected order")
        raise VocabularyMismatch(
            "vocabulary file does not match the built-in token space")
    return vocab


# ---------------------------------------------------------------------------
# normalization


def _memory_tokens(op, unit: DecodedUnit, valid: AddressRange) -> list[str]:
    m = op.mem
    toks: list[str] = []
    if m.base is not None:
        toks.append(m.base)
    if m.index is not None:
        toks.append(m.index)
        toks.append(f"*{m.scale}")
    if m.disp_size:
        if m.rip_relative:
            target = unit.virtual_address + unit.length + m.disp
            normal = valid.contains(target)
        elif m.absolute:
            normal = valid.contains(m.disp)
        else:
            normal = abs(m.disp) <= valid.span
        toks.append("[const_normal]" if normal else "[const_abnormal]")
    return toks


def normalize_unit(unit: DecodedUnit, valid: AddressRange) -> list[Token]:
    """Tokenize one decoded unit; the last token is always [EOS]."""
    vocab = build_vocabulary()
    if unit.kind is UnitKind.RAW_BYTE:
        text = "[pad_normal]" if unit.raw[0] in NORMAL_PAD_BYTES \
            else "[pad_abnormal]"
        texts = [text]
    else:
        texts = list(unit.prefixes)
        texts.append(unit.mnemonic)
        for op in unit.operands:
            if op.kind is OperandKind.REGISTER:
                texts.append(op.reg)
            elif op.kind is OperandKind.IMMEDIATE:
                texts.append("[const]")
            elif op.kind is OperandKind.BRANCH:
                target = op.value if op.absolute else \
                    unit.virtual_address + unit.length + op.value
                texts.append("[mem_normal]" if valid.contains(target)
                             else "[mem_abnormal]")
            else:
                texts.extend(_memory_tokens(op, unit, valid))
    texts.append("[EOS]")
    return [Token(t, vocab.id_of(t)) for t in texts]


# ---------------------------------------------------------------------------
# windows


@dataclass
class TokenWindow:
    """A [SOS]-prefixed token window over consecutive units of one section."""

    ids: np.ndarray                     # int32 (T,)
    instr_spans: list[tuple[int, int]]  # token index spans, one per unit
    section: str | None = None
    byte_start: int = 0                 # file-offset extent of the units
    byte_end: int = 0
    va_start: int = 0
    va_end: int = 0
    label: int | None = None

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    def texts(self) -> list[str]:
        vocab = build_vocabulary()
        return [vocab.text_of(int(i)) for i in self.ids]


def _pack_window(unit_tokens: list[list[Token]], units: list[DecodedUnit],
                 max_tokens: int) -> TokenWindow:
    """[SOS] + as many whole units as fit in max_tokens. Extent covers all
    the given units even if the token view is truncated."""
    ids = [SOS]
    spans = []
    for toks in unit_tokens:
        if len(ids) + len(toks) > max_tokens:
            break
        start = len(ids)
        ids.extend(t.id for t in toks)
        spans.append((start, len(ids)))
    first, last = units[0], units[-1]
    return TokenWindow(
        ids=np.asarray(ids, dtype=np.int32),
        instr_spans=spans,
        section=first.section,
        byte_start=first.offset,
        byte_end=last.offset + last.length,
        va_start=first.virtual_address,
        va_end=last.virtual_address + last.length,
    )


def windowize_tokens(units: list[DecodedUnit], valid: AddressRange,
                     max_tokens: int = MAX_WINDOW_TOKENS) -> list[TokenWindow]:
    """Greedy token-budget packing for pretraining streams.

    Whole instructions only; every window starts with [SOS]; the remainder is
    flushed as a final (possibly short) window.
    """
    windows: list[TokenWindow] = []
    cur_tokens: list[list[Token]] = []
    cur_units: list[DecodedUnit] = []
    budget = 1
    for u in units:
        toks = normalize_unit(u, valid)
        if cur_units and budget + len(toks) > max_tokens:
            windows.append(_pack_window(cur_tokens, cur_units, max_tokens))
            cur_tokens, cur_units, budget = [], [], 1
        cur_tokens.append(toks)
        cur_units.append(u)
        budget += len(toks)
    if cur_units:
        windows.append(_pack_window(cur_tokens, cur_units, max_tokens))
    return windows


def windowize_instructions(units: list[DecodedUnit], valid: AddressRange,
                           window_units: int = DETECT_WINDOW_UNITS,
                           floor_units: int = DETECT_WINDOW_FLOOR,
                           max_tokens: int = MAX_WINDOW_TOKENS
                           ) -> list[TokenWindow]:
    """Fixed-count detection windows: window_units consecutive units each;
    a trailing chunk shorter than floor_units is dropped."""
    windows: list[TokenWindow] = []
    for lo in range(0, len(units), window_units):
        chunk = units[lo:lo + window_units]
        if len(chunk) < floor_units:
            break
        toks = [normalize_unit(u, valid) for u in chunk]
        windows.append(_pack_window(toks, chunk, max_tokens))
    return windows


def _sections_units(image: BinaryImage) -> dict[str, list[DecodedUnit]]:
    by_section: dict[str, list[DecodedUnit]] = {}
    for u in linear_sweep(image):
        by_section.setdefault(u.section, []).append(u)
    return by_section


def token_windows_for_image(image: BinaryImage,
                            max_tokens: int = MAX_WINDOW_TOKENS
                            ) -> list[TokenWindow]:
    valid = image.valid_range
    out: list[TokenWindow] = []
    for units in _sections_units(image).values():
        out.extend(windowize_tokens(units, valid, max_tokens))
    return out


def detection_windows_for_image(image: BinaryImage,
                                window_units: int = DETECT_WINDOW_UNITS,
                                floor_units: int = DETECT_WINDOW_FLOOR,
                                max_tokens: int = MAX_WINDOW_TOKENS
                                ) -> list[TokenWindow]:
    valid = image.valid_range
    out: list[TokenWindow] = []
    for units in _sections_units(image).values():
        out.extend(windowize_instructions(units, valid, window_units,
                                          floor_units, max_tokens))
    return out

"""Shannon entropy baselines and low-entropy adversarial transforms.

Entropy is the byte-histogram Shannon entropy in bits per byte, bounded by
[0, 8]. The baseline detector thresholds entropy at file / section / window
granularity (defaults 7.0 / 6.5 / 7.4; windows are 2048 bytes, non-overlapping,
tail kept when >= 256 bytes). The section rule mirrors the usual heuristic:
flag the file only when more than 20% of its sections are hot.

The five transforms re-encode a payload below such thresholds while staying
byte-exact invertible:

  BytePadding    dilute the histogram with a filler byte
  Encoding       base64/base32 without '=' padding (alphabet exactly 64/32
                 symbols, so entropy <= 6.0 / 5.0 bits), or a custom
                 16-symbol nibble table (<= 4.0 bits)
  MonoSub        byte-level bijection; preserves the histogram exactly
  Transposition  blockwise byte permutation; preserves the histogram
  PolySub        repeating-key byte addition (Vigenere-style)

transform() returns the output plus a JSON-safe inverse-metadata dict;
invert_transform() restores the original bytes exactly.
"""

from __future__ import annotations

import base64
import enum
from dataclasses import dataclass, field
from typing import Any

import numpy as np

FILE_THRESHOLD = 7.0
SECTION_THRESHOLD = 6.5
WINDOW_THRESHOLD = 7.4
WINDOW_SIZE = 2048
WINDOW_TAIL_MIN = 256
SECTION_RULE_FRACTION = 0.20


class Granularity(enum.Enum):
    FILE = "file"
    SECTION = "section"
    WINDOW = "window"


DEFAULT_THRESHOLDS = {
    Granularity.FILE: FILE_THRESHOLD,
    Granularity.SECTION: SECTION_THRESHOLD,
    Granularity.WINDOW: WINDOW_THRESHOLD,
}


def shannon_entropy(data: bytes | np.ndarray) -> float:
    """Byte-histogram entropy in bits per byte; 0.0 for empty input."""
    buf = np.frombuffer(data, dtype=np.uint8) if isinstance(data, (bytes, bytearray, memoryview)) \
        else np.asarray(data, dtype=np.uint8)
    if buf.size == 0:
        return 0.0
    counts = np.bincount(buf, minlength=256)
    p = counts[counts > 0] / buf.size
    return float(-(p * np.log2(p)).sum()) + 0.0


@dataclass(frozen=True)
class Extent:
    """A measured byte range; label is a section name or synthetic tag."""

    label: str
    start: int
    end: int


@dataclass
class EntropyProfile:
    granularity: Granularity
    values: list[float]
    extents: list[Extent]


def profile_bytes(data: bytes, granularity: Granularity,
                  sections: list[tuple[str, int, int]] | None = None,
                  window_size: int = WINDOW_SIZE,
                  tail_min: int = WINDOW_TAIL_MIN) -> EntropyProfile:
    """Entropy profile of a flat buffer.

    `sections` is a list of (name, start, end) file extents; when omitted the
    whole buffer counts as one section named "file".
    """
    if sections is None:
        sections = [("file", 0, len(data))]
    values: list[float] = []
    extents: list[Extent] = []
    if granularity is Granularity.FILE:
        values.append(shannon_entropy(data))
        extents.append(Extent("file", 0, len(data)))
    elif granularity is Granularity.SECTION:
        for name, lo, hi in sections:
            if hi <= lo:
                continue
            values.append(shannon_entropy(data[lo:hi]))
            extents.append(Extent(name, lo, hi))
    else:
        for name, lo, hi in sections:
            pos = lo
            while pos < hi:
                end = min(pos + window_size, hi)
                if end - pos < tail_min and pos != lo:
                    break
                values.append(shannon_entropy(data[pos:end]))
                extents.append(Extent(name, pos, end))
                pos = end
    return EntropyProfile(granularity=granularity, values=values,
                          extents=extents)


def profile_image(image, granularity: Granularity,
                  window_size: int = WINDOW_SIZE,
                  tail_min: int = WINDOW_TAIL_MIN) -> EntropyProfile:
    """Profile a loaded BinaryImage; sections with file bytes only."""
    sections = [(s.name, s.file_offset, s.file_end)
                for s in image.sections if s.file_size > 0]
    return profile_bytes(image.data, granularity, sections=sections,
                         window_size=window_size, tail_min=tail_min)


@dataclass
class EntropyVerdict:
    packed: bool
    granularity: Granularity
    threshold: float
    evidence: list[tuple[Extent, float]]


def entropy_detect(profile: EntropyProfile, threshold: float | None = None,
                   section_rule: bool = True) -> EntropyVerdict:
    """Threshold a profile into a packed/non-packed verdict.

    File/window: packed iff any measured value >= threshold. Section: with
    the section rule enabled, packed iff hot sections are more than 20% of
    all sections; with it disabled, any hot section flags the file.
    """
    if threshold is None:
        threshold = DEFAULT_THRESHOLDS[profile.granularity]
    hot = [(e, v) for e, v in zip(profile.extents, profile.values)
           if v >= threshold]
    if profile.granularity is Granularity.SECTION and section_rule:
        total = len(profile.values)
        packed = total > 0 and len(hot) / total > SECTION_RULE_FRACTION
    else:
        packed = bool(hot)
    return EntropyVerdict(packed=packed, granularity=profile.granularity,
                          threshold=threshold, evidence=hot)


# ---------------------------------------------------------------------------
# transforms


class Scheme(enum.Enum):
    BYTE_PADDING = "byte_padding"
    ENCODING = "encoding"
    MONO_SUB = "mono_sub"
    TRANSPOSITION = "transposition"
    POLY_SUB = "poly_sub"


class InvalidSpec(ValueError):
    """Transform parameters are malformed for the scheme."""


class CorruptMetadata(ValueError):
    """Inverse metadata is missing, inconsistent, or not invertible."""


@dataclass(frozen=True)
class TransformSpec:
    scheme: Scheme
    params: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        return {"scheme": self.scheme.value, "params": dict(self.params)}

    @staticmethod
    def from_json(obj: dict[str, Any]) -> "TransformSpec":
        return TransformSpec(Scheme(obj["scheme"]), dict(obj.get("params", {})))


def random_spec(scheme: Scheme, rng: np.random.Generator,
                block_size: int = 256, key_len: int = 16) -> TransformSpec:
    """Draw per-instance parameters for a scheme from `rng`."""
    if scheme is Scheme.BYTE_PADDING:
        return TransformSpec(scheme, {
            "byte": int(rng.integers(0, 256)),
            "amount": int(rng.integers(1, 5)),  # multiplier of payload size
            "position": str(rng.choice(["prepend", "append", "inject"])),
        })
    if scheme is Scheme.ENCODING:
        return TransformSpec(scheme, {
            "alphabet": str(rng.choice(["base64", "base32", "custom"]))})
    if scheme is Scheme.MONO_SUB:
        return TransformSpec(scheme, {
            "permutation": [int(x) for x in rng.permutation(256)]})
    if scheme is Scheme.TRANSPOSITION:
        return TransformSpec(scheme, {
            "block_size": block_size,
            "permutation": [int(x) for x in rng.permutation(block_size)]})
    if scheme is Scheme.POLY_SUB:
        return TransformSpec(scheme, {
            "key": [int(x) for x in rng.integers(0, 256, size=key_len)]})
    raise InvalidSpec(f"unknown scheme {scheme}")


_NIBBLE_TABLE = [ord(c) for c in "0123456789abcdef"]


def _check_permutation(perm, size: int) -> np.ndarray:
    arr = np.asarray(perm, dtype=np.int64)
    if arr.shape != (size,) or not np.array_equal(np.sort(arr),
                                                  np.arange(size)):
        raise InvalidSpec(f"not a permutation of range({size})")
    return arr


def _tail_order(perm: np.ndarray, tail: int) -> np.ndarray:
    """Stable compression of a block permutation to a short tail: tail
    positions are emitted in the order of their permuted destinations."""
    return np.argsort(perm[:tail], kind="stable")


def transform(data: bytes, spec: TransformSpec,
              rng: np.random.Generator | None = None
              ) -> tuple[bytes, dict[str, Any]]:
    """Apply a low-entropy transform; returns (output, inverse_metadata)."""
    p = spec.params
    if spec.scheme is Scheme.BYTE_PADDING:
        byte = int(p.get("byte", 0))
        amount = int(p.get("amount", 1))
        position = p.get("position", "append")
        if not 0 <= byte <= 255 or amount < 1:
            raise InvalidSpec("byte in 0..255 and amount >= 1 required")
        pad_len = amount * max(len(data), 1)
        filler = bytes([byte]) * pad_len
        if position == "prepend":
            out = filler + data
        elif position == "append":
            out = data + filler
        elif position == "inject":
            # one filler run after every payload byte
            run = pad_len // max(len(data), 1)
            chunk = bytes([byte]) * run
            out = b"".join(bytes([b]) + chunk for b in data) + \
                bytes([byte]) * (pad_len - run * len(data))
            return out, {"scheme": spec.scheme.value, "position": position,
                         "orig_len": len(data), "run": run}
        else:
            raise InvalidSpec(f"unknown position {position!r}")
        return out, {"scheme": spec.scheme.value, "position": position,
                     "orig_len": len(data), "pad_len": pad_len}

    if spec.scheme is Scheme.ENCODING:
        alphabet = p.get("alphabet", "base64")
        if alphabet == "base64":
            out = base64.b64encode(data).rstrip(b"=")
        elif alphabet == "base32":
            out = base64.b32encode(data).rstrip(b"=")
        elif alphabet == "custom":
            table = p.get("table", _NIBBLE_TABLE)
            tbl = np.asarray(table, dtype=np.int64)
            if tbl.shape != (16,) or len(set(tbl.tolist())) != 16 \
                    or tbl.min() < 0 or tbl.max() > 255:
                raise InvalidSpec("custom table must be 16 distinct bytes")
            buf = np.frombuffer(data, dtype=np.uint8)
            out_arr = np.empty(2 * buf.size, dtype=np.uint8)
            out_arr[0::2] = tbl[buf >> 4]
            out_arr[1::2] = tbl[buf & 0xF]
            out = out_arr.tobytes()
            return out, {"scheme": spec.scheme.value, "alphabet": alphabet,
                         "table": [int(x) for x in tbl],
                         "orig_len": len(data)}
        else:
            raise InvalidSpec(f"unknown alphabet {alphabet!r}")
        return out, {"scheme": spec.scheme.value, "alphabet": alphabet,
                     "orig_len": len(data)}

    if spec.scheme is Scheme.MONO_SUB:
        perm = _check_permutation(p.get("permutation"), 256)
        buf = np.frombuffer(data, dtype=np.uint8)
        out = perm.astype(np.uint8)[buf].tobytes()
        return out, {"scheme": spec.scheme.value,
                     "permutation": [int(x) for x in perm]}

    if spec.scheme is Scheme.TRANSPOSITION:
        bs = int(p.get("block_size", 256))
        if bs < 2:
            raise InvalidSpec("block_size >= 2 required")
        perm = _check_permutation(p.get("permutation"), bs)
        buf = np.frombuffer(data, dtype=np.uint8)
        out = np.empty_like(buf)
        full = (buf.size // bs) * bs
        if full:
            blocks = buf[:full].reshape(-1, bs)
            dest = np.empty_like(blocks)
            dest[:, perm] = blocks
            out[:full] = dest.reshape(-1)
        tail = buf.size - full
        if tail:
            out[full:] = buf[full:][_tail_order(perm, tail)]
        return out.tobytes(), {"scheme": spec.scheme.value, "block_size": bs,
                               "permutation": [int(x) for x in perm],
                               "orig_len": len(data)}

    if spec.scheme is Scheme.POLY_SUB:
        key = np.asarray(p.get("key", ()), dtype=np.int64)
        if key.size == 0 or key.min() < 0 or key.max() > 255:
            raise InvalidSpec("key must be a nonempty byte sequence")
        buf = np.frombuffer(data, dtype=np.uint8).astype(np.int64)
        ks = np.resize(key, buf.size) if buf.size else key[:0]
        out = ((buf + ks) & 0xFF).astype(np.uint8).tobytes()
        return out, {"scheme": spec.scheme.value,
                     "key": [int(x) for x in key]}

    raise InvalidSpec(f"unknown scheme {spec.scheme}")


def invert_transform(data: bytes, meta: dict[str, Any]) -> bytes:
    """Exact inverse of transform() given its metadata dict."""
    try:
        scheme = Scheme(meta["scheme"])
    except (KeyError, ValueError) as exc:
        raise CorruptMetadata(f"bad scheme field: {exc}") from exc
    try:
        if scheme is Scheme.BYTE_PADDING:
            position = meta["position"]
            orig_len = int(meta["orig_len"])
            if position == "prepend":
                out = data[int(meta["pad_len"]):]
            elif position == "append":
                out = data[:orig_len]
            elif position == "inject":
                run = int(meta["run"])
                out = data[:orig_len * (1 + run):1 + run] if run else \
                    data[:orig_len]
            else:
                raise CorruptMetadata(f"unknown position {position!r}")
            if len(out) != orig_len:
                raise CorruptMetadata("length mismatch after unpadding")
            return out

        if scheme is Scheme.ENCODING:
            alphabet = meta["alphabet"]
            orig_len = int(meta["orig_len"])
            if alphabet == "base64":
                pad = (-len(data)) % 4
                out = base64.b64decode(data + b"=" * pad)
            elif alphabet == "base32":
                pad = (-len(data)) % 8
                out = base64.b32decode(data + b"=" * pad)
            elif alphabet == "custom":
                tbl = meta["table"]
                rev = {int(v): i for i, v in enumerate(tbl)}
                if len(rev) != 16 or len(data) != 2 * orig_len:
                    raise CorruptMetadata("bad custom table or length")
                buf = np.frombuffer(data, dtype=np.uint8)
                inv = np.full(256, -1, dtype=np.int64)
                for v, i in rev.items():
                    inv[v] = i
                hi = inv[buf[0::2]]
                lo = inv[buf[1::2]]
                if (hi < 0).any() or (lo < 0).any():
                    raise CorruptMetadata("byte outside custom alphabet")
                out = ((hi << 4) | lo).astype(np.uint8).tobytes()
            else:
                raise CorruptMetadata(f"unknown alphabet {alphabet!r}")
            if len(out) != orig_len:
                raise CorruptMetadata("length mismatch after decode")
            return out

        if scheme is Scheme.MONO_SUB:
            perm = _check_permutation(meta["permutation"], 256)
            inv = np.empty(256, dtype=np.uint8)
            inv[perm] = np.arange(256, dtype=np.uint8)
            buf = np.frombuffer(data, dtype=np.uint8)
            return inv[buf].tobytes()

        if scheme is Scheme.TRANSPOSITION:
            bs = int(meta["block_size"])
            perm = _check_permutation(meta["permutation"], bs)
            orig_len = int(meta["orig_len"])
            if len(data) != orig_len:
                raise CorruptMetadata("length mismatch")
            buf = np.frombuffer(data, dtype=np.uint8)
            out = np.empty_like(buf)
            full = (buf.size // bs) * bs
            if full:
                blocks = buf[:full].reshape(-1, bs)
                out[:full] = blocks[:, perm].reshape(-1)
            tail = buf.size - full
            if tail:
                order = _tail_order(perm, tail)
                rest = np.empty(tail, dtype=np.uint8)
                rest[order] = buf[full:]
                out[full:] = rest
            return out.tobytes()

        if scheme is Scheme.POLY_SUB:
            key = np.asarray(meta["key"], dtype=np.int64)
            if key.size == 0:
                raise CorruptMetadata("empty key")
            buf = np.frombuffer(data, dtype=np.uint8).astype(np.int64)
            ks = np.resize(key, buf.size) if buf.size else key[:0]
            return ((buf - ks) & 0xFF).astype(np.uint8).tobytes()
    except InvalidSpec as exc:
        raise CorruptMetadata(str(exc)) from exc
    except KeyError as exc:
        raise CorruptMetadata(f"missing metadata key {exc}") from exc
    raise CorruptMetadata(f"unknown scheme {scheme}")

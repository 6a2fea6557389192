"""
Linear sweep, total decoding, and operand normalization
=======================================================

The tokenizer's front end disassembles every byte exactly once: undecodable
bytes become one-byte raw units instead of being skipped, so any buffer is
tiled without gaps. Operands are then collapsed into a small closed
vocabulary; immediates and addresses are classified as normal or abnormal
rather than kept verbatim, which is what lets a fixed-size model read
arbitrary programs.
"""

from packsense.binimage import AddressRange, Mode
from packsense.disasm import UnitKind, sweep_bytes
from packsense.normalizer import build_vocabulary, normalize_unit

vocab = build_vocabulary()
print("vocabulary: %d tokens, sha256 %s...\n" %
      (len(vocab), vocab.sha256[:16]))

# A handful of instructions with two byte sequences that are not valid code.
blob = bytes.fromhex(
    "55"                    # push ebp
    "89e5"                  # mov ebp, esp
    "83c001"                # add eax, 1
    "8b80e7e8d7f9"          # mov eax, [eax - 0x6281719]
    "e800000000"            # call +0
    "fff8"                  # ff /7 is undefined; f8 alone is clc
    "c3"                    # ret
    "00"                    # truncated at end of buffer
)
valid = AddressRange(((0x400000, 0x410000),))
units = sweep_bytes(blob, Mode.X86_32, base_va=0x401000)

print("%-8s %-4s %-18s %-12s %s" % ("va", "len", "bytes", "kind", "tokens"))
pos = 0
for u in units:
    tokens = [vocab.text_of(t.id) for t in normalize_unit(u, valid)]
    print("%08x %-4d %-18s %-12s %s" % (
        u.virtual_address, u.length, blob[pos:pos + u.length].hex(),
        u.kind.name, " ".join(tokens)))
    pos += u.length

# The sweep is a tiling: unit extents cover the buffer exactly.
assert pos == len(blob)
assert sum(u.length for u in units) == len(blob)
raw = sum(1 for u in units if u.kind is UnitKind.RAW_BYTE)
print("\n%d units, %d raw bytes, tiling verified" % (len(units), raw))

# Note the operand collapse above: the small immediate became [const], the
# implausible displacement [const_abnormal], and the call target [mem_normal]
# because it lands inside the valid address range.

"""
Five packing transforms that the entropy heuristic cannot see
=============================================================

An adversary does not have to compress. The transforms below hide a payload
without the near-8.0 entropy signature of compression or encryption, so a
detector thresholding on entropy alone misses most of them. All five invert
byte-exactly from their recorded metadata, which is what a real unpacking
stub would do at run time.
"""

import numpy as np

from packsense.corpus import CodeSampler
from packsense.lowentropy import (FILE_THRESHOLD, Granularity, Scheme,
                                  entropy_detect, profile_bytes, random_spec,
                                  shannon_entropy, transform,
                                  invert_transform)

rng = np.random.default_rng(2)

# The payload is native-looking code, the kind of thing a packer protects.
payload = CodeSampler(rng, region_len=6144).emit(6144)
h0 = shannon_entropy(payload)
print("payload: %d bytes, %.3f bits/byte\n" % (len(payload), h0))

print("%-14s %10s %8s  %s" % ("scheme", "out bytes", "entropy", "roundtrip"))
for scheme in Scheme:
    spec = random_spec(scheme, rng)
    out, meta = transform(payload, spec)
    back = invert_transform(out, meta)
    print("%-14s %10d %8.3f  %s" % (
        scheme.value, len(out), shannon_entropy(out),
        "exact" if back == payload else "FAILED"))

# Monoalphabetic substitution relabels byte values; transposition only moves
# them. Both leave the histogram multiset untouched, so entropy is
# mathematically identical, not merely close.
out, _ = transform(payload, random_spec(Scheme.MONO_SUB, rng))
print("\nmono_sub entropy delta: %.2e bits/byte" %
      abs(shannon_entropy(out) - h0))

# Run the baseline detector on each transformed payload. Padding and
# encodings push entropy down; substitution and transposition hold it
# constant. Polyalphabetic keys are the exception: a long random key spreads
# the histogram toward uniform, so stealth there depends on key length.
print("\nfile-level baseline verdicts (threshold %.1f):" % FILE_THRESHOLD)
for scheme in Scheme:
    out, _ = transform(payload, random_spec(scheme, rng))
    profile = profile_bytes(out, Granularity.FILE)
    verdict = entropy_detect(profile, threshold=FILE_THRESHOLD)
    print("  %-14s %.3f -> %s" % (scheme.value, profile.values[0],
                                  "PACKED" if verdict.packed else "missed"))

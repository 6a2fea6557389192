"""Packing-aware executable analysis toolkit.

Submodules:
    binimage    container parsing (PE / ELF / raw) into byte-addressable images
    disasm      total linear-sweep x86 decoder over a fixed subset
    normalizer  token normalization and window packing
    simlm       masked-token objective planning and loss
    encoder     numpy transformer encoder, manual backprop, training loops
    detect      region/program verdicts, features, KNN aggregation, metrics
    lowentropy  Shannon entropy profiles, baseline detector, transforms
    corpus      synthetic corpus generation and manifests
    cli         command-line front end
"""

__version__ = "0.1.0"

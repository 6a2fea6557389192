"""
Structure-aware masking and a short pretraining run
===================================================

Pretraining teaches the encoder instruction statistics without labels: 20%
of maskable tokens per window are selected, then masked, class-randomized,
or kept (40/50/10). Structural tokens are never selected, and a mnemonic is
never corrupted in the same instruction as one of its operands, so every
training example keeps enough context to be solvable.
"""

import numpy as np

from packsense.binimage import AddressRange, Mode
from packsense.corpus import CodeSampler
from packsense.disasm import sweep_bytes
from packsense.encoder import EncoderConfig, Hyper, train_pretrain
from packsense.normalizer import build_vocabulary, windowize_tokens
from packsense.simlm import (Action, count_maskable, derive_mask_rng,
                             plan_mask, plan_stats)

rng = np.random.default_rng(4)
vocab = build_vocabulary()
valid = AddressRange(((0x400000, 0x500000),))

code = CodeSampler(rng, region_len=40000).emit(40000)
units = sweep_bytes(code, Mode.X86_32, base_va=0x400000)
windows = windowize_tokens(units, valid)
print("%d bytes -> %d units -> %d windows of <=512 tokens\n" %
      (len(code), len(units), len(windows)))

# Plan a mask for one window and show the first few decisions. Replacements
# are drawn from the original token's class, so a register swaps with a
# register, never with a mnemonic.
plan = plan_mask(windows[0], derive_mask_rng(0, epoch=0, ordinal=0))
print("window 0: %d of %d tokens selected" %
      (plan.positions.size, len(windows[0].ids)))
for pos, act, repl, orig in list(zip(plan.positions, plan.actions,
                                     plan.replacements,
                                     plan.originals))[:10]:
    was = vocab.text_of(int(orig))
    if act is Action.RANDOMIZE:
        detail = "-> " + vocab.text_of(int(repl))
    elif act is Action.MASK:
        detail = "-> [MASK]"
    else:
        detail = "(kept)"
    print("  pos %3d  %-16s %s" % (pos, was, detail))

# Aggregate statistics over every window approach the design rates.
plans = [plan_mask(w, derive_mask_rng(0, 0, i))
         for i, w in enumerate(windows)]
stats = plan_stats(plans, [count_maskable(w) for w in windows])
print("\nselected fraction %.3f (target 0.200)" % stats["selected_fraction"])
print("action split mask/rand/keep: %.2f / %.2f / %.2f" % (
    stats["mask_fraction"], stats["random_fraction"],
    stats["keep_fraction"]))

# A short run with a deliberately small encoder. Fresh masks are drawn each
# epoch from (seed, epoch, window) so no example repeats exactly.
config = EncoderConfig(n_layers=1, n_heads=2, d_model=16, d_ffn=32)
result = train_pretrain(windows, config,
                        Hyper(epochs=3, batch_size=4, lr=3e-4, seed=4))
print("\npretraining (%d windows, 3 epochs):" % len(windows))
for row in result.history:
    print("  epoch %d  loss %.4f  masked-token acc %.3f" % (
        row["epoch"], row["loss"], row["masked_acc"]))

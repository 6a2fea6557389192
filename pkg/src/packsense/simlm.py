"""Masked-token objective over normalized instruction windows.

A plan selects 20% of a window's maskable positions (round to nearest, at
least one; fewer than five maskable positions is a DegenerateWindow and the
caller skips it). Structural tokens ([SOS], [EOS], [MASK], [PAD]) are never
maskable. Within one instruction the mnemonic and its operand positions are
mutually exclusive: a draw that would select both is discarded and redrawn,
and the exclusion wins over the 20% target if a window runs out of legal
positions.

Each selected position gets one action: 40% replace with [MASK], 50% replace
with a class-preserving random token (never the original), 10% keep. Masks
are dynamic across epochs but bit-reproducible: the per-window rng derives
from SeedSequence([global_seed, epoch, window_ordinal]) where the ordinal is
the window's stable position in the corpus.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .normalizer import (CLS_MNEMONIC, CLS_STRUCTURAL, MASK, TokenWindow,
                         build_vocabulary)

MASK_RATE = 0.2
ACTION_MASK_P = 0.4
ACTION_RANDOM_P = 0.5
ACTION_KEEP_P = 0.1
MIN_MASKABLE = 5

IGNORE_ID = -1


class Action(enum.Enum):
    MASK = "mask"
    RANDOMIZE = "randomize"
    KEEP = "keep"


class DegenerateWindow(ValueError):
    """Fewer than MIN_MASKABLE maskable positions; skip this window."""


class PlanMismatch(ValueError):
    """A plan does not belong to the window it is applied to."""


@dataclass
class MaskPlan:
    positions: np.ndarray       # int32, ascending
    actions: list[Action]
    replacements: np.ndarray    # int32; only meaningful where RANDOMIZE
    originals: np.ndarray       # int32


@dataclass
class MaskedWindow:
    input_ids: np.ndarray       # int32 (T,)
    target_ids: np.ndarray      # int32 (T,), IGNORE_ID where inactive


def derive_mask_rng(global_seed: int, epoch: int,
                    ordinal: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([global_seed, epoch, ordinal]))


def _window_structure(window: TokenWindow):
    """Per-position span id / head flag / component flag, plus maskables."""
    vocab = build_vocabulary()
    n = len(window)
    span_of = np.full(n, -1, dtype=np.int64)
    is_head = np.zeros(n, dtype=bool)
    is_comp = np.zeros(n, dtype=bool)
    for sid, (lo, hi) in enumerate(window.instr_spans):
        span_of[lo:hi] = sid
        head = -1
        for pos in range(lo, hi - 1):  # hi-1 is [EOS]
            if vocab.class_of(int(window.ids[pos])) == CLS_MNEMONIC:
                head = pos
                break
        if head >= 0:
            is_head[head] = True
            is_comp[head + 1:hi - 1] = True
    maskable = [pos for pos in range(n)
                if vocab.class_of(int(window.ids[pos])) != CLS_STRUCTURAL]
    return span_of, is_head, is_comp, maskable


def count_maskable(window: TokenWindow) -> int:
    vocab = build_vocabulary()
    return sum(1 for i in window.ids
               if vocab.class_of(int(i)) != CLS_STRUCTURAL)


def plan_mask(window: TokenWindow, rng: np.random.Generator,
              mask_rate: float = MASK_RATE) -> MaskPlan:
    vocab = build_vocabulary()
    span_of, is_head, is_comp, maskable = _window_structure(window)
    if len(maskable) < MIN_MASKABLE:
        raise DegenerateWindow(
            f"{len(maskable)} maskable tokens (< {MIN_MASKABLE})")
    k = max(1, int(mask_rate * len(maskable) + 0.5))

    candidates = list(maskable)
    head_selected: set[int] = set()
    comp_selected: set[int] = set()
    chosen: list[int] = []
    while len(chosen) < k and candidates:
        i = int(rng.integers(len(candidates)))
        pos = candidates.pop(i)
        sid = int(span_of[pos])
        if is_head[pos] and sid in comp_selected:
            continue
        if is_comp[pos] and sid in head_selected:
            continue
        chosen.append(pos)
        if is_head[pos]:
            head_selected.add(sid)
        elif is_comp[pos]:
            comp_selected.add(sid)
    chosen.sort()

    actions: list[Action] = []
    replacements = np.full(len(chosen), IGNORE_ID, dtype=np.int32)
    originals = np.empty(len(chosen), dtype=np.int32)
    for j, pos in enumerate(chosen):
        orig = int(window.ids[pos])
        originals[j] = orig
        u = float(rng.random())
        if u < ACTION_MASK_P:
            actions.append(Action.MASK)
        elif u < ACTION_MASK_P + ACTION_RANDOM_P:
            actions.append(Action.RANDOMIZE)
            members = vocab.class_members[vocab.class_of(orig)]
            assert members.size >= 2, "singleton token class"
            orig_idx = int(np.searchsorted(members, orig))
            r = int(rng.integers(members.size - 1))
            if r >= orig_idx:
                r += 1
            replacements[j] = members[r]
        else:
            actions.append(Action.KEEP)
    return MaskPlan(positions=np.asarray(chosen, dtype=np.int32),
                    actions=actions, replacements=replacements,
                    originals=originals)


def apply_mask(window: TokenWindow, plan: MaskPlan) -> MaskedWindow:
    n = len(window)
    if plan.positions.size and (plan.positions.min() < 0
                                or plan.positions.max() >= n):
        raise PlanMismatch("plan positions outside window")
    if not np.array_equal(window.ids[plan.positions], plan.originals):
        raise PlanMismatch("plan originals disagree with window tokens")
    input_ids = window.ids.copy()
    target_ids = np.full(n, IGNORE_ID, dtype=np.int32)
    for j, pos in enumerate(plan.positions):
        target_ids[pos] = plan.originals[j]
        act = plan.actions[j]
        if act is Action.MASK:
            input_ids[pos] = MASK
        elif act is Action.RANDOMIZE:
            input_ids[pos] = plan.replacements[j]
    return MaskedWindow(input_ids=input_ids, target_ids=target_ids)


def plan_stats(plans: list[MaskPlan], maskable_counts: list[int]) -> dict:
    """Aggregate selection fraction and action mix over many plans."""
    total_sel = sum(p.positions.size for p in plans)
    total_maskable = sum(maskable_counts)
    acts = {a: 0 for a in Action}
    for p in plans:
        for a in p.actions:
            acts[a] += 1
    return {
        "selected_fraction": total_sel / max(total_maskable, 1),
        "mask_fraction": acts[Action.MASK] / max(total_sel, 1),
        "random_fraction": acts[Action.RANDOMIZE] / max(total_sel, 1),
        "keep_fraction": acts[Action.KEEP] / max(total_sel, 1),
    }

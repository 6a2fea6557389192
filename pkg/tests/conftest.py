"""Shared fixtures: a small deterministic corpus and common objects."""

import numpy as np
import pytest

from packsense.binimage import AddressRange, Mode
from packsense.corpus import CodeSampler, generate_corpus, read_manifest
from packsense.normalizer import build_vocabulary


@pytest.fixture(scope="session")
def vocab():
    return build_vocabulary()


@pytest.fixture(scope="session")
def code_bytes():
    """~4 KB of sampled valid 32-bit code, fixed seed."""
    rng = np.random.default_rng(1234)
    return CodeSampler(rng, region_len=4096).emit(4096)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """12-file corpus shared by the slower integration tests."""
    root = tmp_path_factory.mktemp("corpus")
    manifest = generate_corpus(
        root, {"pretrain": 4, "finetune": 4, "test": 4}, seed=99)
    return root, manifest


@pytest.fixture()
def full_range():
    return AddressRange(((0x400000, 0x500000),))


def read_small_manifest(root):
    return read_manifest(root / "manifest.jsonl")

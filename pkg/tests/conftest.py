"""Shared fixtures: a tiny synthetic corpus and numeric-state hygiene."""

from __future__ import annotations

import numpy as np
import pytest

from wavetag.dataset import VOCAB_FILENAME, LabelVocabulary, load_manifest, make_toy_dataset


@pytest.fixture(autouse=True)
def _reset_diffops_state():
    """Keep default dtype and debug checks from leaking across tests."""
    from wavetag.diffops import set_debug_checks, set_default_dtype

    set_default_dtype(np.float32)
    set_debug_checks(False)
    yield
    set_default_dtype(np.float32)
    set_debug_checks(False)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20260823)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """16 one-second 8 kHz clips over 4 classes, shared read-only."""
    root = tmp_path_factory.mktemp("tiny-corpus")
    manifest = make_toy_dataset(root, n_classes=4, n_clips=16, clip_seconds=1.0,
                                sample_rate=8_000, seed=11)
    vocab = LabelVocabulary.load(root / VOCAB_FILENAME)
    records = load_manifest(manifest, vocab, strict=True)
    return {"dir": root, "manifest": manifest, "vocab": vocab, "records": records}

"""Checkpoint manifest + blob round trips and schema guarding."""

import numpy as np
import pytest

from groupctr.checkpoint import (
    CheckpointError,
    SchemaMismatchError,
    load_checkpoint,
    read_manifest,
    save_checkpoint,
    stored_schema_hash,
)
from groupctr.grids import ParameterStore


def build_store(seed=0):
    store = ParameterStore(seed=seed)
    store.weight("emb.item", 11, 4)
    store.weight("head.w1", 4, 3)
    store.zeros("head.b1", 1, 3)
    return store


class TestRoundTrip:
    def test_values_survive_bit_exactly(self, tmp_path):
        store = build_store(seed=5)
        # awkward values: denormals, negative zero, values with long mantissas
        store["head.w1"].grid.data[0, 0] = np.nextafter(1.0, 2.0)
        store["head.w1"].grid.data[1, 1] = -0.0
        store["head.b1"].grid.data[0, 2] = 5e-324
        stem = str(tmp_path / "ckpt")
        save_checkpoint(stem, store, schema_hash="abc123")

        fresh = build_store(seed=99)
        load_checkpoint(stem, fresh, expect_schema_hash="abc123")
        for name in store.names():
            a = store[name].grid.data
            b = fresh[name].grid.data
            assert a.tobytes() == b.tobytes(), name

    def test_manifest_lists_every_parameter_with_offsets(self, tmp_path):
        store = build_store()
        stem = str(tmp_path / "ckpt")
        save_checkpoint(stem, store)
        schema, entries = read_manifest(stem)
        assert [e[0] for e in entries] == store.names()
        offset = 0
        for name, rows, cols, off in entries:
            assert off == offset
            offset += rows * cols * 8
        assert stored_schema_hash(stem) is None

    def test_double_round_trip_identical_files(self, tmp_path):
        store = build_store(seed=8)
        stem1 = str(tmp_path / "a")
        stem2 = str(tmp_path / "b")
        save_checkpoint(stem1, store, schema_hash="h")
        fresh = build_store(seed=1)
        load_checkpoint(stem1, fresh, expect_schema_hash="h")
        save_checkpoint(stem2, fresh, schema_hash="h")
        assert open(stem1 + ".bin", "rb").read() == open(stem2 + ".bin", "rb").read()
        assert open(stem1 + ".manifest").read() == open(stem2 + ".manifest").read()


class TestRefusals:
    def test_schema_mismatch_refused(self, tmp_path):
        store = build_store()
        stem = str(tmp_path / "ckpt")
        save_checkpoint(stem, store, schema_hash="schema-one")
        with pytest.raises(SchemaMismatchError):
            load_checkpoint(stem, build_store(), expect_schema_hash="schema-two")

    def test_shape_mismatch_refused(self, tmp_path):
        store = build_store()
        stem = str(tmp_path / "ckpt")
        save_checkpoint(stem, store)
        other = ParameterStore(seed=0)
        other.weight("emb.item", 11, 4)
        other.weight("head.w1", 4, 5)  # wrong cols
        other.zeros("head.b1", 1, 3)
        with pytest.raises(CheckpointError, match="head.w1"):
            load_checkpoint(stem, other)

    def test_parameter_set_mismatch_refused(self, tmp_path):
        store = build_store()
        stem = str(tmp_path / "ckpt")
        save_checkpoint(stem, store)
        other = ParameterStore(seed=0)
        other.weight("emb.item", 11, 4)
        with pytest.raises(CheckpointError, match="extra"):
            load_checkpoint(stem, other)

    def test_missing_file_raises_checkpoint_error(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(str(tmp_path / "nope"), build_store())

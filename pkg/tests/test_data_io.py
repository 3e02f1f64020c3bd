import struct

import numpy as np
import pytest

from hoseq.data_io import (
    MMSEQ_MAGIC,
    MultimodalDataset,
    MultimodalInstance,
    read_mmseq,
    synth_generate,
    write_mmseq,
)
from hoseq.errors import ConfigError, DataError, FormatError, TruncationError


def small_dataset(n=3, t_k=2, d_l=2, d_v=3, d_a=2, seed=0):
    return synth_generate(n, t_k, d_l, d_v, d_a, 0.5, 0.1, seed)


# ---------------------------------------------------------------------------
# instance / dataset invariants


def test_instance_rejects_sequence_length_mismatch():
    with pytest.raises(DataError):
        MultimodalInstance(np.zeros((2, 2)), np.zeros((3, 2)), np.zeros((2, 2)), 0.0)


def test_instance_rejects_nonfinite_and_out_of_range_labels():
    with pytest.raises(DataError):
        MultimodalInstance(np.full((2, 2), np.nan), np.zeros((2, 2)), np.zeros((2, 2)), 0.0)
    with pytest.raises(DataError):
        MultimodalInstance(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2)), 3.5)


def test_dataset_requires_homogeneous_dims():
    a = MultimodalInstance(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2)), 0.0)
    b = MultimodalInstance(np.zeros((2, 3)), np.zeros((2, 2)), np.zeros((2, 2)), 0.0)
    with pytest.raises(DataError):
        MultimodalDataset([a, b])
    with pytest.raises(DataError):
        MultimodalDataset([])
    with pytest.raises(ConfigError):
        MultimodalDataset([a], split="dev")


def test_dataset_stacks_arrays_in_order():
    ds = small_dataset(4)
    assert ds.language.shape == (4, 2, 2)
    for i in range(4):
        assert np.array_equal(ds.language[i], ds[i].language)
        assert ds.labels[i] == ds[i].label


# ---------------------------------------------------------------------------
# MMSEQ format


def test_minimal_file_size_is_44_bytes(tmp_path):
    inst = MultimodalInstance(np.ones((1, 1)), np.ones((1, 1)), np.ones((1, 1)), 1.0)
    # t_k=1 is below the generator's minimum but valid for the container
    ds = MultimodalDataset([inst])
    path = tmp_path / "one.mmseq"
    write_mmseq(ds, path)
    assert path.stat().st_size == 8 + 5 * 4 + 4 * 4 == 44


def test_roundtrip_preserves_values_at_f32_precision(tmp_path):
    ds = small_dataset(5, seed=3)
    path = tmp_path / "data.mmseq"
    write_mmseq(ds, path)
    back = read_mmseq(path)
    assert back.dims == ds.dims
    assert len(back) == len(ds)
    for got, want in (
        (back.language, ds.language),
        (back.visual, ds.visual),
        (back.acoustic, ds.acoustic),
        (back.labels, ds.labels),
    ):
        assert np.array_equal(got, want.astype(np.float32).astype(np.float64))


def test_two_writes_are_byte_identical(tmp_path):
    ds = small_dataset(4, seed=9)
    a, b = tmp_path / "a.mmseq", tmp_path / "b.mmseq"
    write_mmseq(ds, a)
    write_mmseq(ds, b)
    assert a.read_bytes() == b.read_bytes()


def test_corrupted_magic_raises_format_error(tmp_path):
    ds = small_dataset()
    path = tmp_path / "bad.mmseq"
    write_mmseq(ds, path)
    raw = bytearray(path.read_bytes())
    raw[0] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        read_mmseq(path)


def test_truncated_file_raises_truncation_error(tmp_path):
    ds = small_dataset()
    path = tmp_path / "short.mmseq"
    write_mmseq(ds, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-4])
    with pytest.raises(TruncationError):
        read_mmseq(path)


def test_extra_bytes_also_rejected(tmp_path):
    ds = small_dataset()
    path = tmp_path / "long.mmseq"
    write_mmseq(ds, path)
    path.write_bytes(path.read_bytes() + b"\x00\x00\x00\x00")
    with pytest.raises(TruncationError):
        read_mmseq(path)


def test_nonfinite_floats_raise_data_error(tmp_path):
    ds = small_dataset()
    path = tmp_path / "nan.mmseq"
    write_mmseq(ds, path)
    raw = bytearray(path.read_bytes())
    raw[28:32] = struct.pack("<f", float("nan"))
    path.write_bytes(bytes(raw))
    with pytest.raises(DataError):
        read_mmseq(path)


def test_header_magic_constant():
    assert MMSEQ_MAGIC == b"MMSEQ1\x00\x00"
    assert len(MMSEQ_MAGIC) == 8


def test_roundtrip_property_over_random_datasets(tmp_path):
    rng = np.random.default_rng(0)
    for trial in range(100):
        n = int(rng.integers(1, 5))
        t_k = int(rng.integers(2, 5))
        dims = [int(rng.integers(2, 5)) for _ in range(3)]
        ds = synth_generate(n, t_k, *dims, 0.5, 0.5, seed=trial)
        path = tmp_path / f"t{trial}.mmseq"
        write_mmseq(ds, path)
        back = read_mmseq(path)
        assert np.array_equal(back.labels, ds.labels.astype(np.float32).astype(np.float64))
        assert np.array_equal(
            back.acoustic, ds.acoustic.astype(np.float32).astype(np.float64)
        )


# ---------------------------------------------------------------------------
# synthetic generator


def test_generator_is_deterministic():
    a = synth_generate(6, 4, 3, 3, 2, 0.5, 0.2, seed=42)
    b = synth_generate(6, 4, 3, 3, 2, 0.5, 0.2, seed=42)
    assert np.array_equal(a.language, b.language)
    assert np.array_equal(a.labels, b.labels)
    c = synth_generate(6, 4, 3, 3, 2, 0.5, 0.2, seed=43)
    assert not np.array_equal(a.labels, c.labels)


def test_zero_noise_labels_recomputable_from_features():
    ds = synth_generate(40, 5, 3, 3, 3, 0.4, 0.0, seed=7)
    for inst in ds.instances:
        s_sync = np.mean(inst.language[:, 0] * inst.visual[:, 0] * inst.acoustic[:, 0])
        candidates = [
            float(np.clip(s_sync + inst.visual[k, 1] * inst.acoustic[k, 1], -3, 3))
            for k in range(5)
        ]
        assert any(abs(inst.label - c) < 1e-12 for c in candidates)


def test_async_fraction_one_places_cue_at_final_step():
    ds = synth_generate(30, 4, 2, 2, 2, 1.0, 0.0, seed=3)
    for inst in ds.instances:
        s_sync = np.mean(inst.language[:, 0] * inst.visual[:, 0] * inst.acoustic[:, 0])
        want = float(np.clip(s_sync + inst.visual[-1, 1] * inst.acoustic[-1, 1], -3, 3))
        assert abs(inst.label - want) < 1e-12


def test_labels_always_within_range():
    ds = synth_generate(200, 3, 2, 2, 2, 0.5, 2.0, seed=1)
    assert np.all(ds.labels >= -3.0)
    assert np.all(ds.labels <= 3.0)


def test_generator_validates_arguments():
    with pytest.raises(ConfigError):
        synth_generate(0, 3, 2, 2, 2, 0.5, 0.1, 0)
    with pytest.raises(ConfigError):
        synth_generate(2, 1, 2, 2, 2, 0.5, 0.1, 0)
    with pytest.raises(ConfigError):
        synth_generate(2, 3, 1, 2, 2, 0.5, 0.1, 0)
    with pytest.raises(ConfigError):
        synth_generate(2, 3, 2, 2, 2, 1.5, 0.1, 0)
    with pytest.raises(ConfigError):
        synth_generate(2, 3, 2, 2, 2, 0.5, -0.1, 0)

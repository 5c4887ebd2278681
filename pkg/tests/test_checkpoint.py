import numpy as np
import pytest

from tinyvlm.checkpoint import load_arrays, save_arrays


def test_round_trip(tmp_path, rng):
    arrays = {
        "lm.tok_emb": rng.normal(size=(7, 3)),
        "connector.w": rng.normal(size=(4, 5)),
        "gate": np.asarray(0.25),
    }
    path = tmp_path / "ckpt.tvlm"
    save_arrays(arrays, path)
    loaded = load_arrays(path)
    assert set(loaded) == set(arrays)
    for name in arrays:
        assert loaded[name].shape == np.asarray(arrays[name]).shape
        assert np.array_equal(loaded[name], arrays[name])


def test_byte_stable_for_identical_parameters(tmp_path, rng):
    arrays = {f"p{i}": rng.normal(size=(3, 2)) for i in range(5)}
    p1, p2 = tmp_path / "a.tvlm", tmp_path / "b.tvlm"
    save_arrays(arrays, p1)
    save_arrays(dict(reversed(list(arrays.items()))), p2)  # insertion order irrelevant
    assert p1.read_bytes() == p2.read_bytes()


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.tvlm"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError, match="magic"):
        load_arrays(path)


def test_truncated_payload_rejected(tmp_path, rng):
    path = tmp_path / "trunc.tvlm"
    save_arrays({"w": rng.normal(size=(4, 4))}, path)
    data = path.read_bytes()
    path.write_bytes(data[:-16])
    with pytest.raises(ValueError, match="truncated"):
        load_arrays(path)

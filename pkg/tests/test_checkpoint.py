import numpy as np
import pytest

from cellbridge.errors import InvalidDataError
from cellbridge.nn import autodiff as ad
from cellbridge.nn.checkpoint import MAGIC, load_checkpoint, restore_parameters, save_checkpoint


def test_roundtrip_preserves_values_and_names(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "a": rng.normal(size=(3, 4)),
        "nested.bias": rng.normal(size=7),
        "scalarish": np.array([2.5]),
    }
    path = tmp_path / "model.bin"
    save_checkpoint(path, tensors)
    loaded = load_checkpoint(path)
    assert list(loaded) == list(tensors)
    for name in tensors:
        np.testing.assert_array_equal(loaded[name], tensors[name])


def test_identical_state_writes_identical_bytes(tmp_path):
    tensors = {"w": np.arange(6, dtype=float).reshape(2, 3)}
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    save_checkpoint(p1, tensors)
    save_checkpoint(p2, tensors)
    assert p1.read_bytes() == p2.read_bytes()


def test_magic_header_present_and_validated(tmp_path):
    path = tmp_path / "m.bin"
    save_checkpoint(path, {"x": np.zeros(2)})
    assert path.read_bytes()[:4] == MAGIC
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOPE" + path.read_bytes()[4:])
    with pytest.raises(InvalidDataError):
        load_checkpoint(bad)


def test_restore_parameters_validates_names_and_shapes(tmp_path):
    p = ad.param(np.zeros((2, 2)))
    path = tmp_path / "ok.bin"
    save_checkpoint(path, {"p": np.ones((2, 2))})
    restore_parameters({"p": p}, load_checkpoint(path))
    np.testing.assert_array_equal(p.data, np.ones((2, 2)))

    with pytest.raises(InvalidDataError):
        restore_parameters({"other": p}, load_checkpoint(path))
    save_checkpoint(path, {"p": np.ones(3)})
    with pytest.raises(InvalidDataError):
        restore_parameters({"p": p}, load_checkpoint(path))

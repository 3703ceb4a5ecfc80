import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfekit.network import ArchConfig, DetectorNet
from cfekit.serialization import FormatError, load_image, load_weights, save_image, save_weights


def test_weights_round_trip_through_network(tmp_path):
    net = DetectorNet(ArchConfig(variant="cfenet_full", input_size=64, widths=(8, 8, 16)))
    p = tmp_path / "w.cfew"
    save_weights(p, net.state_dict())
    other = DetectorNet(ArchConfig(variant="cfenet_full", input_size=64, widths=(8, 8, 16), init_seed=9))
    other.load_state_dict(load_weights(p))
    for k, v in net.state_dict().items():
        np.testing.assert_array_equal(other.state_dict()[k], v.astype(np.float32))


def test_weight_file_layout(tmp_path):
    p = tmp_path / "w.cfew"
    save_weights(p, {"ab": np.array([[1.5, -2.0]])})
    blob = p.read_bytes()
    assert blob == b"CFEKIT-W v1\n" + struct.pack("<I", 2) + b"ab" + struct.pack("<III", 2, 1, 2) + \
        np.array([1.5, -2.0], "<f4").tobytes()


@given(dims=st.lists(st.integers(1, 4), min_size=0, max_size=4), seed=st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_any_rank_round_trips(dims, seed, tmp_path_factory):
    arr = np.random.default_rng(seed).standard_normal(dims).astype(np.float32)
    p = tmp_path_factory.mktemp("w") / "w.cfew"
    save_weights(p, {"x": arr})
    back = load_weights(p)["x"]
    assert back.shape == arr.shape and back.tobytes() == arr.tobytes()


def test_weight_errors(tmp_path):
    p = tmp_path / "w.cfew"
    p.write_bytes(b"nope")
    with pytest.raises(FormatError):
        load_weights(p)
    save_weights(p, {"x": np.ones((3, 3))})
    p.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(FormatError):
        load_weights(p)


def test_image_round_trip_and_errors(tmp_path):
    img = np.random.default_rng(0).random((3, 8, 8)).astype(np.float32)
    p = tmp_path / "i.cfei"
    save_image(p, img)
    assert load_image(p).tobytes() == img.tobytes()
    with pytest.raises(FormatError):
        save_image(p, img[0])
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(FormatError):
        load_image(p)
    p.write_bytes(b"CFEKIT-X")
    with pytest.raises(FormatError):
        load_image(p)

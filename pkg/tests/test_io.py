import numpy as np
import pytest

from molgeom.deepencoder import synthetic_image
from molgeom.errors import SchemaError
from molgeom.io import dump_raw_image, dump_tensors, load_image, load_tensors, read_ppm, write_ppm


def test_checkpoint_round_trip(rng):
    blocks = {"w": rng.normal(size=(3, 4)).astype(np.float32), "b": np.arange(5, dtype=np.float32),
              "scalar": np.float32(2.5), "empty": np.zeros((0, 3), np.float32)}  # fmt: skip
    back = load_tensors(dump_tensors(blocks))
    assert list(back) == list(blocks)
    for name, arr in blocks.items():
        assert back[name].shape == np.shape(arr) and np.array_equal(back[name], arr)


def test_checkpoint_bytes_are_stable():
    blob = dump_tensors({"a": np.array([1.0, -2.0], np.float32)})
    assert blob == b"MGCK" + bytes([1, 0, 0, 0, 1, 0, 0, 0, 1, 0]) + b"a" + bytes([1, 2, 0, 0, 0]) + \
        np.array([1.0, -2.0], "<f4").tobytes()  # fmt: skip


@pytest.mark.parametrize("mutate", [
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:4] + b"\x02" + b[5:],
    lambda b: b[:-3],
    lambda b: b + b"\x00",
    lambda b: b[:10],
])  # fmt: skip
def test_checkpoint_corruption(mutate):
    blob = dump_tensors({"w": np.ones((2, 2), np.float32)})
    with pytest.raises(SchemaError):
        load_tensors(mutate(blob))


def test_raw_image_round_trip(tmp_path):
    img = synthetic_image(32, 1)
    path = tmp_path / "img.raw"
    path.write_bytes(dump_raw_image(img))
    assert np.array_equal(load_image(path), img)


def test_ppm_round_trip(tmp_path):
    img = np.round(synthetic_image(16, 2) * 255) / 255
    path = tmp_path / "img.ppm"
    write_ppm(path, img)
    assert np.allclose(load_image(path), img, atol=1e-6)
    commented = b"P6\n# made by hand\n2 1\n255\n" + bytes([0, 128, 255, 255, 0, 0])
    assert read_ppm(commented)[0, 0].tolist() == pytest.approx([0.0, 128 / 255, 1.0])


def test_load_image_rejects_bad_input(tmp_path):
    path = tmp_path / "x.img"
    path.write_bytes(b"GIF89a")
    with pytest.raises(SchemaError):
        load_image(path)
    path.write_bytes(dump_raw_image(np.full((2, 2, 3), 1.5, np.float32)))
    with pytest.raises(SchemaError):
        load_image(path)
    path.write_bytes(dump_raw_image(np.full((2, 2, 3), np.nan, np.float32)))
    with pytest.raises(SchemaError):
        load_image(path)
    path.write_bytes(b"P6\n4 4\n255\n" + b"\x00" * 10)
    with pytest.raises(SchemaError):
        load_image(path)

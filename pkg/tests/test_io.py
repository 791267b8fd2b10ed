import numpy as np
import pytest

from rqen import checkpoint, pnm
from rqen.checkpoint import CheckpointError
from rqen.model import RQEN, BackboneConfig, init_params
from rqen.regions import RegionLayout


def test_ppm_roundtrip(rng):
    img = rng.integers(0, 256, (5, 4, 3), dtype=np.uint8)
    data = pnm.encode(img)
    assert data.startswith(b"P6\n4 5\n255\n")
    np.testing.assert_array_equal(pnm.decode(data), img)


def test_pgm_with_comments(rng):
    img = rng.integers(0, 256, (3, 2), dtype=np.uint8)
    data = b"P5\n# made by hand\n2 3\n# another\n255\n" + img.tobytes()
    np.testing.assert_array_equal(pnm.decode(data), img)
    rgb = pnm.to_float(pnm.decode(data))
    assert rgb.shape == (3, 2, 3)
    np.testing.assert_array_equal(rgb[:, :, 0], rgb[:, :, 2])


def test_raster_may_start_with_whitespace_byte():
    img = np.full((1, 1, 3), 10, dtype=np.uint8)  # 10 is '\n'
    np.testing.assert_array_equal(pnm.decode(pnm.encode(img)), img)


@pytest.mark.parametrize(
    "data",
    [b"P3\n1 1\n255\n1 2 3", b"P6\n2 2\n255\n\x00\x00", b"P6\n1 1\n65535\n" + bytes(6), b"P6\n1", b"P6\nx 1\n255\n"],
)
def test_bad_images_rejected(data):
    with pytest.raises(pnm.ImageFormatError):
        pnm.decode(data)


def test_to_uint8_rounds_and_clips():
    np.testing.assert_array_equal(pnm.to_uint8(np.array([-0.5, 0.0, 0.5, 1.0, 2.0])), [0, 0, 128, 255, 255])


def _model(seed=0, **kw):
    cfg = BackboneConfig(widths=(4, 6), quality_hidden=5)
    rng = np.random.default_rng(seed)
    return RQEN(init_params(cfg, 3, rng), cfg, RegionLayout(0.4, 0.7), classes=("a", "b", "ç"), **kw)


def test_checkpoint_roundtrip_bytes(tmp_path):
    model = _model(quality_fixed=True)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    checkpoint.save(model, p1)
    back = checkpoint.load(p1)
    checkpoint.save(back, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert back.config == model.config
    assert back.layout == model.layout
    assert back.classes == model.classes and back.quality_fixed
    for name, arr in model.params.items():
        assert back.params.params[name].tobytes() == arr.tobytes()


def test_checkpoint_preserves_inference(rng):
    model = _model()
    frames = rng.uniform(size=(4, 16, 8, 3))
    back = checkpoint.loads(checkpoint.dumps(model))
    assert back.encode(frames).tobytes() == model.encode(frames).tobytes()


def test_checkpoint_starts_with_magic():
    assert checkpoint.dumps(_model())[:8] == b"RQENCKPT"


def test_checkpoint_errors():
    data = checkpoint.dumps(_model())
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint.loads(b"NOTACKPT" + data[8:])
    with pytest.raises(CheckpointError, match="truncated"):
        checkpoint.loads(data[:-3])
    with pytest.raises(CheckpointError, match="trailing"):
        checkpoint.loads(data + b"\x00")
    with pytest.raises(CheckpointError, match="version"):
        checkpoint.loads(data[:8] + (99).to_bytes(4, "little") + data[12:])

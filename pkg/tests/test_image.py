import numpy as np
import pytest

from echostyle import image


def test_check_image_accepts_valid():
    img = np.linspace(0, 1, 64).reshape(8, 8)
    out = image.check_image(img)
    assert out.dtype == np.float64


@pytest.mark.parametrize("bad,msg", [
    (np.zeros((4, 12)), "minimum"),
    (np.zeros((12, 4)), "minimum"),
    (np.full((8, 8), 1.5), "outside"),
    (np.full((8, 8), -0.1), "outside"),
    (np.full((8, 8), np.nan), "finite"),
    (np.zeros((8, 8, 3)), "2-D"),
])
def test_check_image_rejects(bad, msg):
    with pytest.raises(ValueError, match=msg):
        image.check_image(bad)


def test_pgm_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 1, size=(12, 9))
    p = tmp_path / "a.pgm"
    image.write_pgm(p, img)
    back = image.read_pgm(p)
    assert back.shape == (12, 9)
    # quantized to 8 bits: within half a level
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12


def test_pgm_comment_header(tmp_path):
    p = tmp_path / "c.pgm"
    payload = bytes(range(16))
    p.write_bytes(b"P5\n# a comment\n4 4\n255\n" + payload)
    img = image.read_pgm(p)
    np.testing.assert_allclose(img.ravel() * 255, list(range(16)))


def test_png_gray_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    img = rng.uniform(0, 1, size=(10, 14))
    p = tmp_path / "g.png"
    image.write_png(p, img)
    back = image.read_png(p)
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12


def test_png_rgb_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    rgb = rng.integers(0, 256, size=(7, 5, 3)).astype(np.uint8)
    p = tmp_path / "c.png"
    image.write_png(p, rgb)
    np.testing.assert_array_equal(image.read_png(p), rgb)


def test_png_filtered_scanlines(tmp_path):
    # decoder must undo Sub/Up/Average/Paeth filters, not just filter 0
    import struct, zlib
    rows = np.arange(24, dtype=np.uint8).reshape(4, 6)
    raw = b""
    prev = np.zeros(6, dtype=int)
    for y, ftype in enumerate((1, 2, 3, 4)):
        line = rows[y].astype(int)
        enc = line.copy()
        if ftype == 1:
            enc[1:] = (line[1:] - line[:-1]) % 256
        elif ftype == 2:
            enc = (line - prev) % 256
        elif ftype == 3:
            for i in range(6):
                left = line[i - 1] if i else 0
                enc[i] = (line[i] - ((left + prev[i]) >> 1)) % 256
        elif ftype == 4:
            for i in range(6):
                left = line[i - 1] if i else 0
                ul = prev[i - 1] if i else 0
                enc[i] = (line[i] - image._paeth(left, int(prev[i]), int(ul))) % 256
        raw += bytes([ftype]) + bytes(enc.astype(np.uint8))
        prev = line
    ihdr = struct.pack(">IIBBBBB", 6, 4, 8, 0, 0, 0, 0)
    blob = image._PNG_SIG + image._chunk(b"IHDR", ihdr) \
        + image._chunk(b"IDAT", zlib.compress(raw)) + image._chunk(b"IEND", b"")
    p = tmp_path / "f.png"
    p.write_bytes(blob)
    np.testing.assert_array_equal(image.to_bytes(image.read_png(p)), rows)


def test_ppm_write(tmp_path):
    rgb = np.zeros((4, 4, 3))
    rgb[..., 0] = 1.0
    p = tmp_path / "x.ppm"
    image.write_ppm(p, rgb)
    data = p.read_bytes()
    assert data.startswith(b"P6\n4 4\n255\n")
    assert data[-48:] == bytes([255, 0, 0]) * 16


def test_dispatch_by_extension(tmp_path):
    img = np.full((8, 8), 0.25)
    for name in ("d.pgm", "d.png"):
        p = tmp_path / name
        image.write_image(p, img)
        back = image.read_image(p)
        assert np.abs(back - img).max() <= 0.5 / 255

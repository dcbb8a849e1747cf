import numpy as np
import pytest
from conftest import make_model

from idf import codec
from idf.codec import CompressedImage, CorruptContainer, HashMismatch


def smooth_image(shape, seed=0):
    rng = np.random.default_rng(seed)
    c, h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    base = 100 + 4 * yy + 3 * xx
    return np.clip(base[None] + rng.integers(-2, 3, size=shape), 0, 255).astype(np.int64)


def test_round_trip_coded_path(toy_model, toy_images):
    for x in toy_images:
        c = codec.compress(x, toy_model)
        assert not c.escape
        assert len(c.substreams) == 2
        assert np.array_equal(codec.decompress(c.to_bytes(), toy_model), x)
        assert np.array_equal(codec.decompress(c, toy_model), x)


def test_round_trip_rgb_ltc(rgb_model):
    for seed in range(3):
        x = smooth_image((3, 8, 8), seed)
        data = codec.compress(x, rgb_model).to_bytes()
        assert np.array_equal(codec.decompress(data, rgb_model), x)


def test_edge_cases(small_model):
    for x in [np.zeros((1, 8, 8), np.int64), np.full((1, 8, 8), 255, np.int64),
              np.random.default_rng(0).integers(0, 256, size=(1, 8, 8))]:
        data = codec.compress(x, small_model).to_bytes()
        assert np.array_equal(codec.decompress(data, small_model), x)


def test_uint8_input_accepted(small_model):
    x = smooth_image((1, 8, 8)).astype(np.uint8)
    out = codec.decompress(codec.compress(x, small_model).to_bytes(), small_model)
    assert np.array_equal(out, x)


def test_escape_bound(small_model):
    rng = np.random.default_rng(1)
    for _ in range(5):
        x = rng.integers(0, 256, size=(1, 8, 8))
        c = codec.compress(x, small_model)
        assert len(c.to_bytes()) <= x.size + codec._HEAD.size + 1


def test_forced_escape_stores_raw(small_model):
    x = np.random.default_rng(2).integers(0, 256, size=(1, 8, 8))
    c = CompressedImage(small_model.hash(), x.shape, True, raw=x.astype(np.uint8).tobytes())
    data = c.to_bytes()
    assert len(data) == codec._HEAD.size + x.size
    assert np.array_equal(codec.decompress(data, small_model), x)


def test_header_layout(toy_model, toy_images):
    data = codec.compress(toy_images[0], toy_model, precision=14).to_bytes()
    assert data[:4] == b"IDFC" and data[4] == codec.VERSION
    assert data[5:37] == toy_model.hash()
    c = CompressedImage.from_bytes(data)
    assert c.shape == (1, 16, 16) and c.precision == 14 and not c.escape
    assert np.array_equal(codec.decompress(data, toy_model), toy_images[0])


def test_hash_mismatch(small_model):
    other = make_model(seed=11)
    data = codec.compress(smooth_image((1, 8, 8)), small_model).to_bytes()
    with pytest.raises(HashMismatch):
        codec.decompress(data, other)


def test_corruption_detected(toy_model, toy_images):
    c = codec.compress(toy_images[0], toy_model)
    assert not c.escape
    data = c.to_bytes()
    for bad in [data[:-3], data + b"\0", b"JUNK" + data[4:], data[:10], data[:-4]]:
        with pytest.raises(CorruptContainer):
            codec.decompress(bad, toy_model)
    # a flipped payload bit either fails the end-state check or changes the output
    flipped = bytearray(data)
    flipped[-1] ^= 0x10
    try:
        out = codec.decompress(bytes(flipped), toy_model)
    except CorruptContainer:
        pass
    else:
        assert not np.array_equal(out, toy_images[0])


def test_input_validation(small_model):
    with pytest.raises(ValueError):
        codec.compress(np.full((1, 8, 8), 256), small_model)
    with pytest.raises(ValueError):
        codec.compress(np.zeros((1, 4, 4), np.int64), small_model)
    with pytest.raises(TypeError):
        codec.compress(np.zeros((1, 8, 8)), small_model)
    with pytest.raises(ValueError):
        codec.compress(smooth_image((1, 8, 8)), small_model, precision=30)


def test_stats_and_gap(toy_model, toy_images):
    c, st = codec.compress_with_stats(toy_images[1], toy_model)
    assert not c.escape
    assert st.coded_bits == 8 * len(c.to_bytes())
    assert st.rate == pytest.approx(8 / st.bpd)
    rec = st.record()
    assert set(rec) == {"images", "dims", "coded_bits", "header_bits", "escapes", "bpd",
                        "bpd_without_header", "nll_bpd", "rate"}
    gap = st.bpd - st.nll_bpd
    assert 0 <= gap <= 0.05 + st.header_bits / st.dims
    assert st.header_bits == 8 * (44 + 1 + 2 * 4) + 2 * 64


def test_stats_rate_example():
    st = codec.CodecStats(images=1, coded_bits=400, dims=100)
    assert st.bpd == 4.0 and st.rate == 2.0


def test_batch_independent_of_parallelism(small_model):
    imgs = [smooth_image((1, 8, 8), s) for s in range(6)]
    a, sa = codec.compress_batch(imgs, small_model, parallelism=1)
    b, sb = codec.compress_batch(imgs, small_model, parallelism=3)
    assert [u.to_bytes() for u in a] == [v.to_bytes() for v in b]
    assert sa.record() == sb.record()
    with pytest.raises(codec.CodecError, match="image 1"):
        codec.compress_batch([imgs[0], np.zeros((1, 2, 2), np.int64)], small_model)


def test_progressive_full_equals_decompress(toy_model, toy_images):
    data = codec.compress(toy_images[2], toy_model).to_bytes()
    assert codec.levels_for_fraction(data, 1.0) == 2
    full = codec.progressive_decode(data, toy_model, 2)
    assert np.array_equal(full, codec.decompress(data, toy_model))
    assert np.array_equal(codec.progressive_decode(data, toy_model), full)


def test_progressive_top_level_only(toy_model, toy_images):
    x = toy_images[3]
    data = codec.compress(x, toy_model).to_bytes()
    r1 = codec.progressive_decode(data, toy_model, 1, np.random.default_rng(0))
    r2 = codec.progressive_decode(data, toy_model, 1, np.random.default_rng(0))
    assert np.array_equal(r1, r2)
    zs_true, _ = toy_model.forward(x)
    zs_render, _ = toy_model.forward(r1)
    assert np.array_equal(zs_render[-1], zs_true[-1])
    with pytest.raises(ValueError):
        codec.progressive_decode(data, toy_model, 1)


def test_progressive_from_prefix(toy_model, toy_images):
    c = codec.compress(toy_images[4], toy_model)
    data = c.to_bytes()
    cut = c.framing_bytes + len(c.substreams[0])
    assert codec.levels_for_fraction(c, cut / len(data)) == 1
    assert codec.levels_for_fraction(c, (cut - 1) / len(data)) == 0
    r = codec.progressive_decode(data[:cut], toy_model, rng=np.random.default_rng(0))
    assert r.shape == (1, 16, 16)
    assert codec.levels_for_fraction(c, 0.0) == 0


def test_overshoot_code_round_trip():
    from idf.rans import RansDecoder, RansEncoder
    values = [0, 1, 2, 3, 17, 65535, 65536, 2**20 + 5, 2**39 + 12345]
    enc = RansEncoder()
    for e in reversed(values):
        codec._push_excess(enc, e)
    dec = RansDecoder(enc.to_bytes())
    assert [codec._pop_excess(dec) for _ in values] == values
    dec.finish()


def test_out_of_window_latents_are_coded_exactly():
    from idf.priors import DLogisticParams
    p = DLogisticParams(np.zeros((1, 2, 4)), np.ones((1, 2, 4)))
    z = np.array([[[0, 16, -16, 17], [-17, 500, -123456, 3]]])
    stream = codec._encode_level(z, p, 16)
    assert stream is not None
    assert np.array_equal(codec._decode_level(stream, p, z.shape, 16), z)


def test_forced_coding_of_noise(small_model):
    x = np.random.default_rng(3).integers(0, 256, size=(1, 8, 8))
    assert codec.compress(x, small_model).escape
    c = codec.compress(x, small_model, allow_escape=False)
    assert not c.escape and len(c.to_bytes()) > x.size
    assert np.array_equal(codec.decompress(c.to_bytes(), small_model), x)

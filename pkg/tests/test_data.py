import numpy as np
import numpy.testing as npt
import pytest

from ymwml.data import (
    Sample,
    batch_iter,
    generate_dataset,
    generate_phantom,
    load_dataset,
    read_pgm,
    resize_nearest,
    select_samples,
    split_counts,
    write_pgm,
)
from ymwml.errors import ConfigError, DataError, FormatError
from ymwml.tensor import Rng


# --- PGM round trip ------------------------------------------------------------------


def test_pgm_round_trip(tmp_path):
    rng = Rng(2)
    values = np.floor(rng.uniforms(6 * 9) * 256).astype(np.int64).reshape(6, 9)
    path = tmp_path / "x.pgm"
    write_pgm(values, path)
    got = read_pgm(path)
    assert got.shape == (6, 9)
    npt.assert_array_equal(got, values)


def test_pgm_write_validation(tmp_path):
    with pytest.raises(FormatError):
        write_pgm(np.zeros((2, 2, 2)), tmp_path / "a.pgm")
    with pytest.raises(FormatError):
        write_pgm(np.full((2, 2), 300), tmp_path / "b.pgm")


def test_pgm_read_error_kinds(tmp_path):
    good = tmp_path / "good.pgm"
    write_pgm(np.arange(12).reshape(3, 4), good)
    raw = good.read_bytes()

    bad = tmp_path / "bad.pgm"
    bad.write_bytes(b"P2" + raw[2:])
    with pytest.raises(FormatError, match="P5"):
        read_pgm(bad)

    trunc = tmp_path / "trunc.pgm"
    trunc.write_bytes(raw[:-3])
    with pytest.raises(FormatError, match="truncated"):
        read_pgm(trunc)

    trail = tmp_path / "trail.pgm"
    trail.write_bytes(raw + b"\x00\x00")
    with pytest.raises(FormatError, match="trailing"):
        read_pgm(trail)

    badmax = tmp_path / "badmax.pgm"
    badmax.write_bytes(b"P5\n4 3\n65535\n" + bytes(12))
    with pytest.raises(FormatError, match="maxval"):
        read_pgm(badmax)

    badhdr = tmp_path / "badhdr.pgm"
    badhdr.write_bytes(b"P5\nfour 3\n255\n" + bytes(12))
    with pytest.raises(FormatError, match="header"):
        read_pgm(badhdr)


# --- phantoms -------------------------------------------------------------------------


def test_phantom_is_deterministic():
    a = generate_phantom(Rng(7), 64)
    b = generate_phantom(Rng(7), 64)
    npt.assert_array_equal(a.image, b.image)
    npt.assert_array_equal(a.mask, b.mask)


def test_phantom_geometry_and_ranges():
    s = generate_phantom(Rng(11), 96, sample_id="p")
    assert s.image.shape == (96, 96) and s.mask.shape == (96, 96)
    assert s.image.min() >= 0.0 and s.image.max() <= 1.0
    present = set(np.unique(s.mask))
    assert present == {0, 1, 2, 3}  # background, crescent, ring, core all present
    # the core sits strictly inside the ring: dilating the core by one pixel
    # only reaches core or ring pixels
    core = s.mask == 3
    ring_or_core = (s.mask == 2) | core
    grown = core.copy()
    grown[1:, :] |= core[:-1, :]
    grown[:-1, :] |= core[1:, :]
    grown[:, 1:] |= core[:, :-1]
    grown[:, :-1] |= core[:, 1:]
    assert np.all(ring_or_core[grown])
    # class sizes are ordered: background dominates, crescent is smallest foreground
    counts = np.bincount(s.mask.ravel(), minlength=4)
    assert counts[0] > counts.sum() / 2


def test_phantom_intensity_contrast():
    s = generate_phantom(Rng(13), 128)
    means = [s.image[s.mask == k].mean() for k in range(4)]
    assert means[3] > means[1] > means[2] > means[0]  # core > crescent > ring > background


def test_phantom_validation():
    with pytest.raises(ConfigError):
        generate_phantom(Rng(1), 32)
    with pytest.raises(ConfigError):
        generate_phantom(Rng(1), 64, num_classes=3)


# --- split apportionment ----------------------------------------------------------------


def test_split_counts_largest_remainder():
    assert split_counts(10, (0.6, 0.1, 0.3)) == (6, 1, 3)
    assert split_counts(16, (1.0, 0.0, 0.0)) == (16, 0, 0)
    # floors [3,1,1], remainders [0.5, 0.75, 0.75]: the two spare samples go to
    # the larger remainders, the val/test tie resolving left first
    assert split_counts(7, (0.5, 0.25, 0.25)) == (3, 2, 2)
    assert split_counts(5, (0.4, 0.3, 0.3)) == (2, 2, 1)  # exact tie goes to val
    for n in (1, 5, 16, 99):
        assert sum(split_counts(n, (0.6, 0.1, 0.3))) == n


def test_split_counts_validation():
    with pytest.raises(ConfigError):
        split_counts(10, (0.5, 0.2, 0.2))
    with pytest.raises(ConfigError):
        split_counts(10, (-0.1, 0.6, 0.5))


# --- dataset round trip -------------------------------------------------------------------


def test_generate_then_load_round_trip(tmp_path):
    split = generate_dataset(tmp_path, n=6, size=64, seed=9, fracs=(0.5, 0.25, 0.25))
    assert (len(split.train), len(split.val), len(split.test)) == (3, 2, 1)
    samples, loaded_split = load_dataset(tmp_path, 4)
    assert len(samples) == 6
    assert loaded_split.train == split.train
    assert loaded_split.val == split.val
    assert loaded_split.test == split.test
    # masks survive the file round trip exactly; images within quantization
    rng = Rng(9)
    first = generate_phantom(rng, 64, sample_id="ph0000")
    got = samples[0]
    npt.assert_array_equal(got.mask, first.mask)
    assert np.abs(got.image - first.image).max() <= 0.5 / 255.0 + 1e-12
    assert select_samples(samples, split.val)[0].id == split.val[0]


def test_load_dataset_error_cases(tmp_path):
    with pytest.raises(DataError, match="manifest"):
        load_dataset(tmp_path, 4)

    generate_dataset(tmp_path, n=2, size=64, seed=1, fracs=(1.0, 0.0, 0.0))
    manifest = tmp_path / "split.txt"

    manifest.write_text("train ph0000\nbogus ph0001\n")
    with pytest.raises(DataError, match="malformed"):
        load_dataset(tmp_path, 4)

    manifest.write_text("train ph0000\ntrain ph0000\n")
    with pytest.raises(DataError, match="duplicate"):
        load_dataset(tmp_path, 4)

    manifest.write_text("train ph0000\ntrain missing\n")
    with pytest.raises(DataError, match="missing image"):
        load_dataset(tmp_path, 4)

    manifest.write_text("train ph0000\n")
    with pytest.raises(DataError, match="outside"):
        load_dataset(tmp_path, 2)  # phantom masks hold classes up to 3

    manifest.write_text("\n\n")
    with pytest.raises(DataError, match="no samples"):
        load_dataset(tmp_path, 4)


# --- batching --------------------------------------------------------------------------


def _tiny_samples(n=5, size=64):
    return [generate_phantom(Rng(100 + i), size, sample_id=f"s{i}") for i in range(n)]


def test_batch_iter_is_deterministic_and_a_permutation():
    samples = _tiny_samples()
    batches1 = list(batch_iter(samples, 2, seed=3, epoch=0))
    batches2 = list(batch_iter(samples, 2, seed=3, epoch=0))
    assert [b[0].shape for b in batches1] == [(2, 1, 64, 64), (2, 1, 64, 64), (1, 1, 64, 64)]
    for (i1, m1), (i2, m2) in zip(batches1, batches2):
        npt.assert_array_equal(i1, i2)
        npt.assert_array_equal(m1, m2)
    # each sample appears exactly once per epoch
    seen = np.concatenate([m for _, m in batches1])
    assert seen.shape[0] == len(samples)
    firsts = sorted(float(im[0, 0, 0, 0]) for im, _ in batches1 for i in range(1))
    assert len(set(firsts)) >= 1


def test_batch_iter_order_changes_with_epoch_and_seed():
    samples = _tiny_samples()

    def order(seed, epoch):
        ids = []
        for images, _ in batch_iter(samples, 1, seed, epoch):
            for s in samples:
                if np.array_equal(s.image[None, None], images):
                    ids.append(s.id)
        return ids

    assert sorted(order(3, 0)) == [s.id for s in samples]
    assert order(3, 0) != order(3, 1) or order(3, 0) != order(3, 2)
    assert order(3, 0) != order(4, 0) or order(3, 1) != order(4, 1)


def test_batch_iter_validation():
    with pytest.raises(DataError):
        list(batch_iter([], 2, 0, 0))
    with pytest.raises(ConfigError):
        list(batch_iter(_tiny_samples(2), 0, 0, 0))


# --- resizing --------------------------------------------------------------------------


def test_resize_floor_law():
    s = _tiny_samples(1, size=64)[0]
    up = resize_nearest(s, 96)
    idx = (np.arange(96) * 64) // 96
    npt.assert_array_equal(up.image, s.image[np.ix_(idx, idx)])
    npt.assert_array_equal(up.mask, s.mask[np.ix_(idx, idx)])


def test_resize_same_size_is_identity_object():
    s = _tiny_samples(1)[0]
    assert resize_nearest(s, 64) is s


def test_resize_doubling_replicates_pixels():
    s = _tiny_samples(1, size=64)[0]
    up = resize_nearest(s, 128)
    npt.assert_array_equal(up.mask[::2, ::2], s.mask)
    npt.assert_array_equal(up.mask[1::2, 1::2], s.mask)


def test_resize_validation():
    s = _tiny_samples(1)[0]
    with pytest.raises(ConfigError):
        resize_nearest(s, 100)
    with pytest.raises(ConfigError):
        resize_nearest(s, 0)
    bad = Sample(id="r", image=np.zeros((4, 6)), mask=np.zeros((4, 6), dtype=np.int64))
    with pytest.raises(DataError):
        resize_nearest(bad, 32)

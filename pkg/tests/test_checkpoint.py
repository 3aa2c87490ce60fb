import numpy as np
import pytest

import fedbasis as fb
from fedbasis.checkpoint import checkpoint_read, checkpoint_write
from fedbasis.errors import DataError


@pytest.fixture
def basis_set(rng):
    spec = fb.MlpSpec((3, 4, 2))
    bases = tuple(fb.init_params(spec, k) for k in range(3))
    return fb.BasisSet(bases, major=fb.init_params(spec, 99))


def test_param_vector_roundtrip(tmp_path, rng):
    spec = fb.MlpSpec((5, 7, 3))
    p = fb.init_params(spec, 3)
    path = tmp_path / "p.fbas"
    checkpoint_write(path, p)
    q = checkpoint_read(path)
    assert isinstance(q, fb.ParamVector)
    assert np.array_equal(p.values, q.values)
    assert p.block_spec == q.block_spec


def test_basis_set_roundtrip_with_major(tmp_path, basis_set):
    path = tmp_path / "b.fbas"
    checkpoint_write(path, basis_set)
    out = checkpoint_read(path)
    assert isinstance(out, fb.BasisSet)
    assert out.k == 3 and out.major is not None
    for a, b in zip(basis_set.bases, out.bases):
        assert np.array_equal(a.values, b.values)
    assert np.array_equal(basis_set.major.values, out.major.values)
    assert basis_set.block_spec == out.block_spec


def test_basis_set_roundtrip_without_major(tmp_path, basis_set):
    bs = fb.BasisSet(basis_set.bases, None)
    path = tmp_path / "b.fbas"
    checkpoint_write(path, bs)
    out = checkpoint_read(path)
    assert out.major is None and out.k == 3


def test_file_size_is_header_plus_payload(tmp_path, basis_set):
    path = tmp_path / "b.fbas"
    checkpoint_write(path, basis_set)
    size = path.stat().st_size
    total = len(basis_set.bases[0])
    arrays = basis_set.k + 1
    header = (
        4 + 4 + 1 + 1 + 4
        + sum(4 + len(b.name.encode()) + 16 for b in basis_set.block_spec)
        + 4
    )
    assert size == header + 8 * total * arrays


def test_truncated_file_gives_clean_error(tmp_path, basis_set):
    path = tmp_path / "b.fbas"
    checkpoint_write(path, basis_set)
    raw = path.read_bytes()
    for cut in (2, 8, 20, len(raw) - 5):
        short = tmp_path / "short.fbas"
        short.write_bytes(raw[:cut])
        with pytest.raises(DataError):
            checkpoint_read(short)


def test_bad_magic_and_version_rejected(tmp_path, basis_set):
    path = tmp_path / "b.fbas"
    checkpoint_write(path, basis_set)
    raw = bytearray(path.read_bytes())

    bad_magic = tmp_path / "m.fbas"
    bad_magic.write_bytes(b"NOPE" + bytes(raw[4:]))
    with pytest.raises(DataError, match="magic"):
        checkpoint_read(bad_magic)

    raw[4] = 250  # version byte
    bad_version = tmp_path / "v.fbas"
    bad_version.write_bytes(bytes(raw))
    with pytest.raises(DataError, match="version"):
        checkpoint_read(bad_version)


def test_trailing_bytes_rejected(tmp_path, basis_set):
    path = tmp_path / "b.fbas"
    checkpoint_write(path, basis_set)
    path.write_bytes(path.read_bytes() + b"extra")
    with pytest.raises(DataError, match="trailing"):
        checkpoint_read(path)

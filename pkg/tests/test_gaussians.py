from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splatloc.gaussians import (FormatError, GaussianMap, GaussianPrimitive, VersionError, covariance_3d,
                                from_ply_bytes, load_map, logit, map_summary, prune, save_map, to_ply_bytes)

from conftest import random_map, rz


def prim(q=(1, 0, 0, 0), scales=(0.1, 0.1, 0.1), opacity=0.5):
    return GaussianPrimitive(np.zeros(3), q, np.log(scales), float(logit(opacity)), (0.5, 0.5, 0.5))


def test_covariance_isotropic():
    cov = covariance_3d(prim(scales=(0.1, 0.1, 0.1)))
    assert np.allclose(cov, np.diag([0.01, 0.01, 0.01]), atol=1e-15)


def test_covariance_rotated_hand_computed():
    cov = covariance_3d(prim(q=rz(90), scales=(0.2, 0.1, 0.1)))
    assert np.allclose(cov, np.diag([0.01, 0.04, 0.01]), atol=1e-15)


@settings(max_examples=100)
@given(st.integers(0, 2**31 - 1))
def test_covariance_symmetric_positive_definite(seed):
    r = np.random.default_rng(seed)
    q = r.normal(size=4)
    g = prim(q=q, scales=np.exp(r.uniform(np.log(1e-3), np.log(10.0), 3)))
    cov = covariance_3d(g)
    assert np.array_equal(cov, cov.T)
    assert np.all(np.linalg.eigvalsh(cov) > 0)


def test_prune_examples(rng):
    m = GaussianMap.from_primitives([prim(opacity=0.001), prim(opacity=0.5)])
    assert len(prune(m, 0.01)) == 1
    assert prune(m, 0.0).identical_to(m)
    big = random_map(rng, 500)
    big.opacity_logits = logit(rng.uniform(0.001, 0.999, 500))
    out = prune(big, 0.3)
    keep = [i for i in range(len(big)) if big[i].opacity >= 0.3]
    assert len(out) == len(keep)
    assert np.array_equal(out.positions, big.positions[keep])
    with pytest.raises(ValueError):
        prune(big, 1.0)


def test_empty_map_round_trip(tmp_path):
    m = GaussianMap.empty(background=(0.1, 0.2, 0.3), metadata={"seed": "7"})
    save_map(m, tmp_path / "e.ply")
    back = load_map(tmp_path / "e.ply")
    assert len(back) == 0
    assert np.array_equal(back.background, m.background)
    assert back.metadata == {"seed": "7"}


def test_random_map_round_trip_bit_exact(rng, tmp_path):
    m = random_map(rng, 1000)
    m.background = np.array([0.25, 1 / 3, np.nextafter(1.0, 0)])
    m.metadata = {"seed": "3", "dataset": "synthetic", "config": "c"}
    save_map(m, tmp_path / "m.ply")
    back = load_map(tmp_path / "m.ply")
    assert back.identical_to(m)
    for name in ("positions", "rotations", "log_scales", "opacity_logits", "colors", "background"):
        assert getattr(back, name).tobytes() == getattr(m, name).tobytes()


def test_truncated_file_raises_with_offset(rng):
    data = to_ply_bytes(random_map(rng, 10))
    with pytest.raises(FormatError) as info:
        from_ply_bytes(data[:-5])
    assert info.value.offset > 0 and "byte" in str(info.value)
    with pytest.raises(FormatError):
        from_ply_bytes(data[:20])
    with pytest.raises(FormatError):
        from_ply_bytes(b"not a ply\n")
    with pytest.raises(FormatError):
        from_ply_bytes(data + b"\0")


def test_unknown_version_raises(rng):
    data = to_ply_bytes(random_map(rng, 2)).replace(b"splatloc_format 1", b"splatloc_format 9")
    with pytest.raises(VersionError):
        from_ply_bytes(data)


def test_ply_header_is_inspectable(rng):
    header = to_ply_bytes(random_map(rng, 3)).split(b"end_header\n")[0].decode()
    assert "element vertex 3" in header
    assert "property double rot_w" in header and "property double opacity_logit" in header


def test_map_summary_lists_count_and_histogram(rng):
    text = map_summary(random_map(rng, 50))
    assert text.startswith("count 50\n")
    assert "opacity_histogram" in text

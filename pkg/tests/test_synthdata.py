from __future__ import annotations

from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from revtlab.synthdata import (DomainSpec, SegSample, default_domains, dump_split, gen_domain, load_split,
                               make_benchmark, photometric_target, source_domain, split, with_shift)


def _bytes(samples):
    return b"".join(s.image.tobytes() + s.labels.tobytes() for s in samples)


def test_generation_is_deterministic():
    spec = source_domain()
    assert _bytes(gen_domain(spec, 5, 3)) == _bytes(gen_domain(spec, 5, 3))
    assert _bytes(gen_domain(spec, 5, 3)) != _bytes(gen_domain(spec, 5, 4))


def test_sample_types_and_ranges():
    for s in gen_domain(photometric_target(), 4, 0):
        assert s.image.dtype == np.uint8 and s.image.shape == (64, 64, 3)
        assert s.labels.dtype == np.uint8 and s.labels.shape == (64, 64)
        assert set(np.unique(s.labels)) <= set(range(5))


def test_two_class_spec_has_two_labels():
    spec = DomainSpec("binary", num_classes=2, height=32, width=32)
    labels = np.concatenate([s.labels.ravel() for s in gen_domain(spec, 20, 1)])
    assert set(np.unique(labels)) <= {0, 1}


def test_gamma_only_shift_preserves_class_histograms():
    src = source_domain(height=32, width=32)
    tgt = with_shift(src, name="gamma", gamma=0.5)
    a, b = gen_domain(src, 10, 7), gen_domain(tgt, 10, 7)
    for sa, sb in zip(a, b):
        assert np.bincount(sa.labels.ravel(), minlength=5).tolist() == np.bincount(sb.labels.ravel(), minlength=5).tolist()
        assert not np.array_equal(sa.image, sb.image)


@pytest.mark.parametrize("spec", default_domains(size=32))
def test_paired_generation_shares_labels(spec):
    ref = gen_domain(source_domain(height=32, width=32), 6, 11)
    for r, s in zip(ref, gen_domain(spec, 6, 11)):
        np.testing.assert_array_equal(r.labels, s.labels)


def test_domains_differ_in_appearance():
    imgs = {spec.name: np.stack([s.image for s in gen_domain(spec, 8, 2)]).astype(float)
            for spec in default_domains()}
    src = imgs["source"]
    assert abs(imgs["target_photo"].mean() - src.mean()) > 5
    assert imgs["target_texture"].std() > src.std()


def test_invalid_specs():
    with pytest.raises(ValueError):
        DomainSpec("x", num_classes=1)
    with pytest.raises(ValueError):
        DomainSpec("x", gamma=float("nan"))
    with pytest.raises(ValueError):
        gen_domain(source_domain(), 0, 0)
    with pytest.raises(ValueError):
        SegSample(np.zeros((4, 4, 3), np.uint8), np.zeros((4, 5), np.uint8), "x")


def test_split_examples():
    items = list(range(10))
    assert split(items, (1, 0, 0)) == (items, [], [])
    train, dev, test = split(items, (0.5, 0.25, 0.25))
    assert (len(train), len(dev), len(test)) == (5, 2, 3)
    with pytest.raises(ValueError):
        split(items, (0.5, 0.5, 0.5))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 60), st.floats(0, 1), st.floats(0, 1))
def test_split_is_a_partition(n, a, b):
    a, b = min(a, 1.0), min(b, 1.0 - a)
    fr = (a, b, 1.0 - a - b)
    items = list(range(n))
    train, dev, test = split(items, fr)
    assert Counter(train + dev + test) == Counter(items)
    assert len(train) == int(np.floor(n * a + 1e-9)) and len(dev) == int(np.floor(n * b + 1e-9))


def test_benchmark_layout():
    bench = make_benchmark(0, n_train=6, n_dev=3, n_test=2, size=32)
    assert list(bench) == ["source", "target_photo", "target_texture"]
    for d in bench.values():
        assert (len(d.train), len(d.dev), len(d.test)) == (6, 3, 2)
        assert all(s.domain == d.spec.name for s in d.train + d.dev + d.test)


def test_dump_round_trip(tmp_path):
    samples = gen_domain(source_domain(height=16, width=24), 3, 5)
    path = tmp_path / "split.bin"
    dump_split(path, samples)
    data = path.read_bytes()
    assert len(data) == 4 + 3 * (4 + 16 * 24 * 4)
    back = load_split(path, "source")
    assert _bytes(back) == _bytes(samples)
    path.write_bytes(data[:-1])
    with pytest.raises(ValueError):
        load_split(path)

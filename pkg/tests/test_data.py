"""Benchmark generation, batching, and CSV round-trip tests."""
import dataclasses

import numpy as np
import pytest

from funcreg.data import (GRID_SIDE, INPUT_DIM, Dataset, DomainSpec,
                          ShiftBenchmark, batches, benchmark_from_dict,
                          benchmark_to_dict, build_templates,
                          default_benchmark, domain_pattern,
                          generate_benchmark, load_benchmark_dir, load_csv,
                          save_benchmark_dir, save_csv)
from funcreg.errors import ConfigError, DataError, ParseError, StateError


def small_bench(seed=0, n=48):
    return dataclasses.replace(default_benchmark(seed=seed), n_per_split=n)


def test_labels_are_balanced_in_every_split():
    data = generate_benchmark(small_bench(n=50))
    for name, ds in {**data.eval_splits(), "pretrain": data.pretrain,
                     "id_train": data.id_train}.items():
        counts = np.bincount(ds.labels, minlength=8)
        assert counts.max() - counts.min() <= 1, name


def test_generation_is_deterministic():
    a = generate_benchmark(small_bench())
    b = generate_benchmark(small_bench())
    assert a.id_train.features.tobytes() == b.id_train.features.tobytes()
    assert a.pretrain.labels.tobytes() == b.pretrain.labels.tobytes()
    c = generate_benchmark(small_bench(seed=1))
    assert a.id_train.features.tobytes() != c.id_train.features.tobytes()


def test_noiseless_split_is_nearest_template_separable():
    # with sigma=0 every example sits exactly on its (domain, class) pattern
    spec = default_benchmark()
    quiet = dataclasses.replace(
        spec, n_per_split=32,
        pretrain_domains=[dataclasses.replace(d, noise_sigma=0.0)
                          for d in spec.pretrain_domains])
    data = generate_benchmark(quiet)
    temps = quiet.resolved_templates()
    patterns = np.stack([
        domain_pattern(quiet, dom, c, temps).ravel()
        for dom in quiet.pretrain_domains for c in range(quiet.n_classes)])
    pattern_labels = np.tile(np.arange(quiet.n_classes),
                             len(quiet.pretrain_domains))
    d2 = ((data.pretrain.features[:, None, :] - patterns[None]) ** 2).sum(axis=2)
    preds = pattern_labels[np.argmin(d2, axis=1)]
    assert np.array_equal(preds, data.pretrain.labels)


def test_templates_are_clipped_and_distinct():
    temps = build_templates(8, seed=0)
    assert temps.shape == (8, GRID_SIDE, GRID_SIDE)
    assert np.abs(temps).max() <= 2.5
    for i in range(8):
        for j in range(i + 1, 8):
            assert np.linalg.norm(temps[i] - temps[j]) > 1.0


def test_domain_pattern_rejects_bad_label():
    spec = small_bench()
    with pytest.raises(IndexError):
        domain_pattern(spec, spec.id_domain, 8)


def test_pretrain_split_is_scaled_up():
    data = generate_benchmark(small_bench(n=48))
    # 12 pretrain domains -> factor 12 // 3 = 4
    assert data.pretrain.n == 48 * 4
    assert data.id_train.n == 48


def test_eval_splits_names():
    data = generate_benchmark(small_bench())
    assert set(data.eval_splits()) == {"id_test", "ood_rot30", "ood_rot60",
                                       "ood_noise", "ood_mix"}


def test_generate_rejects_too_small_split():
    with pytest.raises(ConfigError):
        generate_benchmark(dataclasses.replace(default_benchmark(),
                                               n_per_split=8, min_per_class=2))


def test_duplicate_domain_ids_rejected():
    spec = default_benchmark()
    dup = dataclasses.replace(spec.ood_domains[0])
    with pytest.raises(ConfigError):
        dataclasses.replace(spec, ood_domains=[*spec.ood_domains, dup])


def test_batches_partition_each_epoch():
    ds = Dataset(features=np.arange(70.0).reshape(10, 7),
                 labels=np.arange(10) % 3)
    seen = []
    sizes = []
    for xb, yb in batches(ds, batch_size=4, seed=0, epoch=0):
        sizes.append(len(yb))
        seen.extend(xb[:, 0].tolist())
    assert sizes == [4, 4, 2]
    assert sorted(seen) == [float(i * 7) for i in range(10)]
    # keyed by (seed, epoch): same key replays, different key reshuffles
    first = [yb.tolist() for _, yb in batches(ds, 4, seed=0, epoch=0)]
    again = [yb.tolist() for _, yb in batches(ds, 4, seed=0, epoch=0)]
    other = [yb.tolist() for _, yb in batches(ds, 4, seed=0, epoch=1)]
    assert first == again
    assert first != other


def test_batches_errors():
    ds = Dataset(features=np.zeros((4, 2)), labels=np.zeros(4, dtype=int))
    with pytest.raises(ConfigError):
        list(batches(ds, 0, seed=0, epoch=0))
    empty = Dataset(features=np.zeros((0, 2)), labels=np.zeros(0, dtype=int))
    with pytest.raises(StateError):
        list(batches(empty, 2, seed=0, epoch=0))


def test_dataset_filter_classes_remap():
    ds = Dataset(features=np.arange(12.0).reshape(6, 2),
                 labels=np.array([0, 1, 2, 1, 0, 2]))
    sub = ds.filter_classes([2, 0], remap=True)
    assert sorted(sub.labels.tolist()) == [0, 0, 1, 1]
    kept = ds.filter_classes([1])
    assert kept.labels.tolist() == [1, 1]


def test_csv_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(3)
    ds = Dataset(features=rng.standard_normal((9, 5)) * 1e3,
                 labels=rng.integers(0, 4, size=9))
    p = tmp_path / "split.csv"
    save_csv(ds, p)
    back = load_csv(p)
    assert back.features.tobytes() == ds.features.tobytes()
    assert back.labels.tolist() == ds.labels.tolist()


def test_csv_errors_carry_line_numbers(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("label,x0,x1\n0,1.0,2.0\n1,3.0\n")
    with pytest.raises(ParseError) as e:
        load_csv(p)
    assert "3" in str(e.value)

    p.write_text("label,x0,x1\n0,1.0,oops\n")
    with pytest.raises(ParseError):
        load_csv(p)
    p.write_text("nope,x0\n")
    with pytest.raises(ParseError):
        load_csv(p)
    p.write_text("label,x0\n-1,0.5\n")
    with pytest.raises(ParseError):
        load_csv(p)
    p.write_text("label,x0\n0,inf\n")
    with pytest.raises(ParseError):
        load_csv(p)
    p.write_text("")
    with pytest.raises(ParseError):
        load_csv(p)


def test_csv_label_bound_check(tmp_path):
    p = tmp_path / "k.csv"
    p.write_text("label,x0\n3,0.5\n")
    with pytest.raises(ParseError):
        load_csv(p, n_classes=3)
    assert load_csv(p, n_classes=4).labels.tolist() == [3]


def test_benchmark_dict_round_trip():
    spec = default_benchmark(seed=5)
    back = benchmark_from_dict(benchmark_to_dict(spec))
    assert benchmark_to_dict(back) == benchmark_to_dict(spec)
    assert generate_benchmark(dataclasses.replace(back, n_per_split=24)) \
        .id_test.features.tobytes() \
        == generate_benchmark(dataclasses.replace(spec, n_per_split=24)) \
        .id_test.features.tobytes()


def test_benchmark_dict_rejects_unknown_and_missing_keys():
    doc = benchmark_to_dict(default_benchmark())
    with pytest.raises(ConfigError):
        benchmark_from_dict({**doc, "bogus": 1})
    bad_domain = dict(doc)
    bad_domain["id_domain"] = {**doc["id_domain"], "rotation": 3}
    with pytest.raises(ConfigError):
        benchmark_from_dict(bad_domain)
    missing = {k: v for k, v in doc.items() if k != "n_classes"}
    with pytest.raises(ConfigError):
        benchmark_from_dict(missing)


def test_benchmark_dir_round_trip(tmp_path):
    spec = small_bench(n=24)
    data = generate_benchmark(spec)
    save_benchmark_dir(spec, data, tmp_path)
    spec2, data2 = load_benchmark_dir(tmp_path)
    assert benchmark_to_dict(spec2) == benchmark_to_dict(spec)
    assert data2.id_train.features.tobytes() == data.id_train.features.tobytes()
    assert set(data2.ood_tests) == set(data.ood_tests)
    for name in data.ood_tests:
        assert data2.ood_tests[name].features.tobytes() \
            == data.ood_tests[name].features.tobytes()


def test_load_benchmark_dir_missing_manifest(tmp_path):
    with pytest.raises(ParseError):
        load_benchmark_dir(tmp_path)


def test_domain_spec_validation():
    with pytest.raises(ConfigError):
        DomainSpec(domain_id="x", rotation_deg=0.0, noise_sigma=-0.1,
                   intensity_shift=0.0, background_texture_seed=0)


def test_input_dim_constant():
    assert INPUT_DIM == 64
    data = generate_benchmark(small_bench(n=16))
    assert data.id_train.features.shape[1] == INPUT_DIM

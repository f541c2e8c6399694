import filecmp
from pathlib import Path

import numpy as np
import pytest

from drag import data, netpbm
from drag.data import DatasetConfig, generate_dataset, generate_samples, load_dataset
from drag.errors import ContractError, FormatError, GenerationError

TINY = DatasetConfig(image_side=32, n_train=40, n_val=20, n_test=20, seed=3)


@pytest.fixture(scope="module")
def default_run():
    return generate_samples(DatasetConfig(), with_specs=True)


def _dir_bytes(root):
    return {p.name: p.read_bytes() for p in sorted(Path(root).iterdir())}


def test_same_seed_byte_identical_dirs(tmp_path):
    generate_dataset(TINY, tmp_path / "a")
    generate_dataset(TINY, tmp_path / "b")
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.left_only and not cmp.right_only
    assert _dir_bytes(tmp_path / "a") == _dir_bytes(tmp_path / "b")


def test_different_seed_differs():
    a = generate_samples(TINY)
    b = generate_samples(DatasetConfig(image_side=32, n_train=40, n_val=20, n_test=20, seed=4))
    assert not np.array_equal(a.images, b.images)


def test_class_ratio_within_two_percent(default_run):
    ds, _ = default_run
    assert len(ds) >= 1000
    assert abs(ds.labels.mean() - 1 / (1 + 3.0)) <= 0.02
    for split in data.SPLITS:
        assert abs(ds.split(split).labels.mean() - 0.25) <= 0.02


def test_label_is_co_occurrence(default_run):
    ds, placed = default_run
    rule = set(DatasetConfig().private_rule)
    singles = 0
    for label, specs in zip(ds.labels, placed):
        kinds = [s.kind for s, _ in specs]
        assert 2 <= len(kinds) <= 4
        assert label == int(rule <= set(kinds))
        if label == 0 and len(rule & set(kinds)) == 1:
            singles += 1
    assert singles >= 0.10 * np.sum(ds.labels == 0)


def test_patterns_do_not_overlap(default_run):
    ds, placed = default_run
    size = DatasetConfig().pattern_size
    for specs in placed[:500]:
        for a in range(len(specs)):
            for b in range(a + 1, len(specs)):
                (ya, xa), (yb, xb) = specs[a][1], specs[b][1]
                assert ya + size <= yb or yb + size <= ya or xa + size <= xb or xb + size <= xa


def test_values_in_unit_interval_and_quantised(default_run):
    ds, _ = default_run
    assert ds.images.min() >= 0 and ds.images.max() <= 1
    assert np.array_equal(np.rint(ds.images * 255) / 255, ds.images)


def test_no_mean_intensity_shortcut(default_run):
    ds, _ = default_run
    means = ds.images.reshape(len(ds), -1).mean(axis=1)
    m1, m0 = means[ds.labels == 1].mean(), means[ds.labels == 0].mean()
    assert abs(m1 - m0) <= 0.03 * max(m1, m0)


def test_shortcut_check_fires():
    n = 400
    images = np.zeros((n, 3, 4, 4))
    labels = np.arange(n) % 2
    images[labels == 1] = 0.5
    images[labels == 0] = 0.1
    with pytest.raises(GenerationError):
        data._check_no_intensity_shortcut(data.Dataset(images, labels, np.array(["train"] * n), [""] * n))


def test_splits_disjoint_substreams():
    a = generate_samples(TINY)
    bigger_train = generate_samples(DatasetConfig(image_side=32, n_train=60, n_val=20, n_test=20, seed=3))
    # val and test do not depend on the train size
    assert np.array_equal(a.split("val").images, bigger_train.split("val").images)
    assert np.array_equal(a.split("test").images, bigger_train.split("test").images)


def test_bad_configs():
    with pytest.raises(ContractError):
        DatasetConfig(private_rule=("square", "square"))
    with pytest.raises(ContractError):
        DatasetConfig(private_rule=("square", "triangle"))
    with pytest.raises(ContractError):
        DatasetConfig(image_side=12, pattern_size=8)


def test_unplaceable_patterns():
    with pytest.raises(GenerationError):
        generate_samples(DatasetConfig(image_side=16, pattern_size=8, n_train=20, n_val=0, n_test=0, min_patterns=4))


def test_pattern_masks():
    for kind in data.KINDS:
        m = data.pattern_mask(kind, 8)
        assert m.shape == (8, 8) and m.any()
    with pytest.raises(ContractError):
        data.pattern_mask("star", 8)


# -- on-disk layout ----------------------------------------------------------------


def test_roundtrip_equals_memory(tmp_path):
    mem = generate_dataset(TINY, tmp_path)
    disk = load_dataset(tmp_path)
    assert np.array_equal(disk.images, mem.images)
    assert np.array_equal(disk.labels, mem.labels)
    assert list(disk.splits) == list(mem.splits) and disk.filenames == mem.filenames
    rows = (tmp_path / "manifest.csv").read_text().splitlines()
    assert rows[0] == "index,filename,label,split" and len(rows) - 1 == len(disk)


def test_layout(tmp_path):
    generate_dataset(TINY, tmp_path)
    raw = (tmp_path / "img_00000.ppm").read_bytes()
    assert raw.startswith(b"P6\n32 32\n255\n") and len(raw) == len(b"P6\n32 32\n255\n") + 32 * 32 * 3
    assert data.read_genconfig(tmp_path) == TINY
    assert "seed=3" in (tmp_path / "genconfig.txt").read_text().splitlines()


def test_truncated_image_names_file(tmp_path):
    generate_dataset(TINY, tmp_path)
    p = tmp_path / "img_00007.ppm"
    p.write_bytes(p.read_bytes()[:-10])
    with pytest.raises(FormatError, match="img_00007.ppm"):
        load_dataset(tmp_path)


def test_missing_manifest(tmp_path):
    with pytest.raises(FormatError, match="manifest"):
        load_dataset(tmp_path)


@pytest.mark.parametrize(
    "row, needle",
    [("1,img_00001.ppm,2,train", "label"), ("1,img_00001.ppm,1,dev", "split"), ("5,img_00001.ppm,1,train", "index")],
)
def test_bad_manifest_rows(tmp_path, row, needle):
    generate_dataset(TINY, tmp_path)
    lines = (tmp_path / "manifest.csv").read_text().splitlines()
    lines[2] = row
    (tmp_path / "manifest.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(FormatError, match=rf"manifest.csv:3: .*{needle}"):
        load_dataset(tmp_path)


def test_shape_mismatch(tmp_path):
    generate_dataset(TINY, tmp_path)
    netpbm.write(tmp_path / "img_00003.ppm", np.zeros((16, 16, 3), dtype=np.uint8))
    with pytest.raises(FormatError, match="img_00003.ppm"):
        load_dataset(tmp_path)


# -- netpbm ------------------------------------------------------------------------


def test_netpbm_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    for shape in [(5, 7), (4, 3, 3)]:
        px = rng.integers(0, 256, size=shape).astype(np.uint8)
        netpbm.write(tmp_path / "x", px)
        assert np.array_equal(netpbm.read(tmp_path / "x"), px)


def test_netpbm_comments_and_errors(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# hello\n2 1\n255\n\x01\x02")
    assert netpbm.read(tmp_path / "c.pgm").tolist() == [[1, 2]]
    (tmp_path / "m.pgm").write_bytes(b"P2\n2 1\n255\n1 2")
    with pytest.raises(FormatError):
        netpbm.read(tmp_path / "m.pgm")
    (tmp_path / "v.pgm").write_bytes(b"P5\n2 1\n65535\n\x00\x01\x00\x02")
    with pytest.raises(FormatError):
        netpbm.read(tmp_path / "v.pgm")
    (tmp_path / "h.pgm").write_bytes(b"P5\n2")
    with pytest.raises(FormatError):
        netpbm.read(tmp_path / "h.pgm")

import numpy as np
import pytest

from hiergrain.data import (
    Dataset,
    DatasetSpec,
    FormatViolation,
    InvalidSpec,
    default_spec,
    generate,
    load,
    nearest_center_predict,
    parse,
    save,
    to_text,
)
from hiergrain.hierarchy import balanced_tree

SMALL = balanced_tree([2, 2, 2])


def small_spec(**kw):
    base = dict(tree=SMALL, dim=4, per_leaf=10, spreads=(3.0, 2.0, 1.0), noise=0.5, seed=0)
    base.update(kw)
    return DatasetSpec(**base)


def test_default_preset_size():
    ds = generate(default_spec())
    assert ds.tree.level_sizes == (4, 12, 36)
    assert len(ds) == 36 * 60
    assert ds.dim == 32


def test_deterministic():
    assert generate(small_spec(seed=3)) == generate(small_spec(seed=3))
    assert generate(small_spec(seed=3)).fingerprint() != generate(small_spec(seed=4)).fingerprint()


def test_labels_are_consistent_with_tree():
    ds = generate(small_spec())
    anc = SMALL.ancestor_table(3)
    assert np.array_equal(anc[:, ds.labels[:, -1]].T, ds.labels)


def test_noiseless_nearest_center_is_perfect():
    ds = generate(small_spec(noise=0.0))
    for h in range(1, 4):
        centers = ds.centers[h - 1]
        assert np.all(nearest_center_predict(centers, ds.features) == ds.labels[:, h - 1])


def test_oracle_accuracy_drops_with_depth():
    ds = generate(default_spec())
    acc = [np.mean(nearest_center_predict(ds.centers[h], ds.features) == ds.labels[:, h]) for h in range(3)]
    assert acc[0] >= acc[1] >= acc[2]
    assert 1 / 36 < acc[2] < acc[0]


def test_split_counts_per_leaf():
    ds = generate(small_spec(per_leaf=11, fractions=(0.5, 0.25, 0.25)))
    for leaf in range(8):
        tags = ds.splits[ds.labels[:, -1] == leaf]
        counts = [int(np.sum(tags == s)) for s in ("train", "val", "test")]
        for got, want in zip(counts, (5.5, 2.75, 2.75)):
            assert abs(got - want) <= 1


def test_sample_mean_converges_to_center():
    ds = generate(small_spec(per_leaf=4000, noise=1.0, dim=2))
    for leaf in range(8):
        mean = ds.features[ds.labels[:, -1] == leaf].mean(axis=0)
        assert np.max(np.abs(mean - ds.centers[-1][leaf])) < 5 * 1.0 / np.sqrt(4000)


@pytest.mark.parametrize("kw", [dict(per_leaf=0), dict(dim=0), dict(spreads=(1.0,)),
                                dict(noise=-1.0), dict(fractions=(0.5, 0.5, 0.5))])
def test_invalid_spec(kw):
    with pytest.raises(InvalidSpec):
        generate(small_spec(**kw))


class TestFile:
    def test_roundtrip_exact(self, tmp_path):
        ds = generate(small_spec())
        save(ds, tmp_path / "d.csv")
        back = load(tmp_path / "d.csv", SMALL)
        assert back == ds
        assert to_text(back) == to_text(ds)

    def test_header(self):
        first = to_text(generate(small_spec())).splitlines()[0]
        assert first == f"#hiergrain v1, d=4, H=3, tree={SMALL.fingerprint}"

    def test_truncated_row(self):
        text = to_text(generate(small_spec()))
        lines = text.splitlines()
        lines[-1] = lines[-1].rsplit(",", 2)[0]
        with pytest.raises(FormatViolation, match="fields"):
            parse("\n".join(lines), SMALL)

    def test_bad_ancestry_reports_row(self):
        lines = to_text(generate(small_spec())).splitlines()
        parts = lines[6].split(",")
        parts[-3] = str(1 - int(parts[-3]))
        lines[6] = ",".join(parts)
        with pytest.raises(FormatViolation, match="row 5"):
            parse("\n".join(lines), SMALL)

    def test_wrong_tree(self):
        with pytest.raises(FormatViolation):
            parse(to_text(generate(small_spec())), balanced_tree([2, 2, 3]))

    @pytest.mark.parametrize("text", ["", "not a header\n", "#hiergrain v1, d=4, H=3, tree=zz\n"])
    def test_bad_header(self, text):
        with pytest.raises(FormatViolation):
            parse(text, SMALL)

    def test_unknown_split(self):
        lines = to_text(generate(small_spec())).splitlines()
        lines[1] = "dev" + lines[1][lines[1].index(","):]
        with pytest.raises(FormatViolation, match="row 0"):
            parse("\n".join(lines), SMALL)

    def test_equality_ignores_centers(self):
        ds = generate(small_spec())
        assert Dataset(ds.tree, ds.features, ds.labels, ds.splits) == ds

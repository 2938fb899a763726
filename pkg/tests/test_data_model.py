import numpy as np
import pytest

from autosmart.data_model import (
    ColumnData,
    DatasetBundle,
    FeatureFrame,
    FeatureKind,
    KindMismatch,
    LabelLengthMismatch,
    MissingColumn,
    MissingTable,
    RelationSpec,
    RelationType,
    Table,
    concat_tables,
    validate_bundle,
)


def cat(name, values, missing=None):
    values = np.asarray(values, dtype=object)
    return ColumnData(name, FeatureKind.CATEGORICAL, values,
                      np.zeros(len(values), bool) if missing is None else missing)


def num(name, values):
    values = np.asarray(values, dtype=np.float64)
    return ColumnData(name, FeatureKind.NUMERICAL, values, np.isnan(values))


def two_table_bundle(n=100, labels=True):
    main = Table.from_columns("main", [cat("uid", [str(i % 10) for i in range(n)]),
                                       num("x", np.arange(n, dtype=float))])
    users = Table.from_columns("users", [cat("uid", [str(i) for i in range(10)]),
                                         num("age", np.arange(10, dtype=float))])
    rel = RelationSpec("main", "users", "uid", "uid", RelationType.MANY_TO_ONE)
    y = (np.arange(n) % 2).astype(np.int8) if labels else None
    return DatasetBundle(main, [users], [rel], y)


def test_valid_bundle_returned_unchanged():
    b = two_table_bundle()
    assert validate_bundle(b) is b
    assert validate_bundle(validate_bundle(b)) is b


def test_missing_table():
    b = two_table_bundle()
    b.relations.append(RelationSpec("main", "users2", "uid", "uid", RelationType.MANY_TO_ONE))
    with pytest.raises(MissingTable) as err:
        validate_bundle(b)
    assert err.value.name == "users2"


def test_missing_column():
    b = two_table_bundle()
    b.relations[0] = RelationSpec("main", "users", "uid", "user", RelationType.MANY_TO_ONE)
    with pytest.raises(MissingColumn):
        validate_bundle(b)


def test_key_must_be_categorical():
    b = two_table_bundle()
    b.relations[0] = RelationSpec("main", "users", "x", "uid", RelationType.MANY_TO_ONE)
    with pytest.raises(KindMismatch):
        validate_bundle(b)


def test_label_length_mismatch():
    b = two_table_bundle()
    b.labels = b.labels[:99]
    with pytest.raises(LabelLengthMismatch):
        validate_bundle(b)


def test_non_binary_labels():
    b = two_table_bundle()
    b.labels = b.labels + 1
    with pytest.raises(ValueError):
        validate_bundle(b)


def test_uneven_columns_rejected():
    t = Table("t", {"a": num("a", [1.0, 2.0]), "b": num("b", [1.0])}, 2)
    with pytest.raises(ValueError):
        validate_bundle(DatasetBundle(t))


@pytest.mark.parametrize("rel, flipped", [
    (RelationType.ONE_TO_ONE, RelationType.ONE_TO_ONE),
    (RelationType.MANY_TO_ONE, RelationType.ONE_TO_MANY),
    (RelationType.ONE_TO_MANY, RelationType.MANY_TO_ONE),
    (RelationType.MANY_TO_MANY, RelationType.MANY_TO_MANY),
])
def test_relation_flip(rel, flipped):
    assert rel.flipped() is flipped
    assert rel.is_join == (rel in (RelationType.ONE_TO_ONE, RelationType.MANY_TO_ONE))


def test_multi_categorical_take_and_concat():
    offsets = np.array([0, 2, 2, 5])
    col = ColumnData("m", FeatureKind.MULTI_CATEGORICAL, np.array([1, 2, 3, 4, 5]),
                     np.array([False, True, False]), offsets)
    t = Table.from_columns("t", [col])
    sub = t.take(np.array([2, 0]))
    assert [list(sub["m"].row_list(i)) for i in range(2)] == [[3, 4, 5], [1, 2]]
    both = concat_tables(t, sub)
    assert both.n_rows == 5
    assert [list(both["m"].row_list(i)) for i in range(5)] == \
        [[1, 2], [], [3, 4, 5], [3, 4, 5], [1, 2]]
    np.testing.assert_array_equal(both["m"].missing, [False, True, False, False, False])


def test_frame_history_is_append_only():
    frame = FeatureFrame.from_table(two_table_bundle().main)
    frame.add(num("z", np.zeros(100)), "order1")
    frame.drop("x")
    assert frame.history == [("add", "uid", "original"), ("add", "x", "original"),
                             ("add", "z", "order1"), ("drop", "x", "original")]
    with pytest.raises(ValueError):
        frame.add(num("w", np.zeros(100)), "bogus")
    with pytest.raises(ValueError):
        frame.add(num("w", np.zeros(5)), "order1")

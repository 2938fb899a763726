import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from autosmart.data_model import (
    ColumnData,
    DatasetBundle,
    FeatureKind,
    RelationSpec,
    RelationType,
    Table,
)
from autosmart.preprocess import (
    NoKeyFound,
    OverlapMatrix,
    build_feature_blocks,
    build_overlap_matrix,
    detect_base_features,
    downcast_and_sort,
    drop_low_information,
    encode_blocks,
    preprocess_bundle,
)


def cat(name, values):
    values = np.asarray(values, dtype=object)
    return ColumnData(name, FeatureKind.CATEGORICAL, values, np.zeros(len(values), bool))


def num(name, values):
    values = np.asarray(values, dtype=np.float64)
    return ColumnData(name, FeatureKind.NUMERICAL, values, np.isnan(values))


def multi(name, rows):
    flat = np.array([t for r in rows for t in r], dtype=object)
    offsets = np.cumsum([0] + [len(r) for r in rows])
    return ColumnData(name, FeatureKind.MULTI_CATEGORICAL, flat,
                      np.array([len(r) == 0 for r in rows]), offsets)


def ts(name, values):
    values = np.asarray(values, dtype=np.int64)
    return ColumnData(name, FeatureKind.TEMPORAL, values, np.zeros(len(values), bool))


def session_bundle():
    users = ["u1", "u1", "u1", "u2", "u2", "u3"]
    ip = ["a", "b", "a", "c", "c", "d"]           # each ip maps to one user
    city = ["NYC", "LA", "NYC", "NYC", "SF", "SF"]  # NYC spans u1 and u2
    main = Table.from_columns("main", [cat("user", users), cat("item", ["i1"] * 3 + ["i2"] * 3),
                                       cat("ip", ip), cat("city", city)])
    u = Table.from_columns("users", [cat("user", ["u1", "u2", "u3"])])
    it = Table.from_columns("items", [cat("item", ["i1", "i2"])])
    rels = [RelationSpec("main", "users", "user", "user", RelationType.MANY_TO_ONE),
            RelationSpec("main", "items", "item", "item", RelationType.MANY_TO_ONE)]
    return DatasetBundle(main, [u, it], rels)


def test_factor_and_sessions():
    base = detect_base_features(session_bundle())
    assert base.factor == "user"
    assert base.keys["main"] == {"user", "item"}
    assert "ip" in base.sessions
    assert "city" not in base.sessions


def test_session_needs_more_values_than_factor():
    b = session_bundle()
    # a coarser column that still depends on the user is not a session
    b.main.columns["city"] = cat("city", ["x", "x", "x", "y", "y", "z"])
    assert "city" not in detect_base_features(b).sessions


def test_no_key_found():
    main = Table.from_columns("main", [num("x", [1.0, 2.0])])
    with pytest.raises(NoKeyFound):
        detect_base_features(DatasetBundle(main))


def test_drop_low_information():
    n = 200
    t = Table.from_columns("t", [
        num("const", [5.0] * n),
        num("tiny", [0.0] * (n - 1) + [1.0]),  # scaled variance about 5e-3
        num("ok", np.arange(n)),
        cat("ids", [str(i) for i in range(n)]),
        cat("key", [str(i) for i in range(n)]),
        cat("one", ["a"] * n),
        ts("t", np.zeros(n)),
    ])
    out, dropped = drop_low_information(t, protected=["key"])
    assert set(dropped) == {"const", "ids", "one"}
    assert {"ok", "key", "t", "tiny"} <= set(out.column_names)


def test_drop_low_information_variance_floor():
    n = 2000
    v = np.zeros(n)
    v[0] = 1.0  # scaled variance = (1/n)(1 - 1/n) = 4.9975e-4, above the floor
    t = Table.from_columns("t", [num("v", v)])
    assert drop_low_information(t)[1] == []
    assert drop_low_information(t, var_floor=1e-3)[1] == ["v"]


def test_overlap_examples():
    m = build_overlap_matrix([{"x", "y"}, {"y", "z"}, {"q"}], 0.10).entries
    np.testing.assert_array_equal(m, [[1, 1, 0], [1, 1, 0], [0, 0, 1]])


def test_overlap_threshold_is_strict():
    a = set(range(10))
    b = {0} | set(range(100, 200))
    assert build_overlap_matrix([a, b], 0.10).entries[0, 1] == 0  # exactly 1/10
    assert build_overlap_matrix([a, b], 0.09).entries[0, 1] == 1


def components_oracle(m):
    """Union-find connected components, returned as a set of frozensets."""
    n = len(m)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(n):
            if m[i][j]:
                parent[find(i)] = find(j)
    groups = {}
    for i in range(n):
        groups.setdefault(find(i), set()).add(i)
    return {frozenset(g) for g in groups.values()}


def test_blocks_examples():
    assert list(build_feature_blocks(OverlapMatrix(np.eye(3, dtype=np.uint8))).blocks.values()) \
        == [[0], [1], [2]]
    m = np.eye(4, dtype=np.uint8)
    m[0, 1] = m[1, 0] = m[1, 2] = m[2, 1] = 1
    blocks = build_feature_blocks(OverlapMatrix(m))
    assert blocks.blocks == {1: [0, 1, 2], 2: [3]}
    assert blocks.visited.all()


def test_blocks_match_union_find_on_random_matrices():
    for seed in range(200):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 13))
        upper = np.triu(rng.random((n, n)) < rng.uniform(0.05, 0.5), 1)
        m = (upper | upper.T | np.eye(n, dtype=bool)).astype(np.uint8)
        got = build_feature_blocks(OverlapMatrix(m)).blocks
        assert {frozenset(v) for v in got.values()} == components_oracle(m)
        assert sorted(i for v in got.values() for i in v) == list(range(n))
        assert list(got) == list(range(1, len(got) + 1))


def test_deep_chain_has_no_recursion_limit():
    n = 5000
    m = np.eye(n, dtype=np.uint8)
    idx = np.arange(n - 1)
    m[idx, idx + 1] = m[idx + 1, idx] = 1
    assert build_feature_blocks(OverlapMatrix(m)).blocks == {1: list(range(n))}


def test_encode_shares_codes_within_block():
    t1 = Table.from_columns("a", [cat("f1", ["apple", "pear", "apple"]),
                                  cat("g", ["1", "2", "1"])])
    t2 = Table.from_columns("b", [multi("f2", [["kiwi", "apple"], [], ["pear"]]),
                                  cat("h", ["1", "3", "1"])])
    ids = [("a", "f1"), ("a", "g"), ("b", "f2"), ("b", "h")]
    m = build_overlap_matrix([{"apple", "pear"}, {"1", "2"}, {"kiwi", "apple", "pear"},
                              {"1", "3"}], 0.4)
    blocks = build_feature_blocks(m)
    tables, enc = encode_blocks({"a": t1, "b": t2}, ids, blocks)
    f1, f2 = tables["a"]["f1"].values, tables["b"]["f2"].values
    assert f1[0] == f2[1]  # "apple"
    assert f1[1] == f2[2]  # "pear"
    np.testing.assert_array_equal(f1, [0, 1, 0])
    np.testing.assert_array_equal(f2, [2, 0, 1])
    # g and h form a second block whose codes are independent of the first
    np.testing.assert_array_equal(tables["a"]["g"].values, [0, 1, 0])
    np.testing.assert_array_equal(tables["b"]["h"].values, [0, 2, 0])
    for (tn, cn), table in [(("a", "f1"), t1), (("b", "f2"), t2), (("b", "h"), t2)]:
        np.testing.assert_array_equal(enc.decode((tn, cn), tables[tn][cn].values),
                                      table[cn].values)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.lists(st.sampled_from("abcdefgh"), min_size=1, max_size=30),
                min_size=1, max_size=6),
       st.floats(0.0, 0.9))
def test_shared_token_invariant(cols, threshold):
    tables = {f"t{i}": Table.from_columns(f"t{i}", [cat("c", v)]) for i, v in enumerate(cols)}
    ids = [(f"t{i}", "c") for i in range(len(cols))]
    blocks = build_feature_blocks(build_overlap_matrix([set(v) for v in cols], threshold))
    out, enc = encode_blocks(tables, ids, blocks)
    for members in blocks.blocks.values():
        seen = {}
        for i in members:
            for tok, code in zip(cols[i], out[f"t{i}"]["c"].values):
                assert seen.setdefault(tok, code) == code
        codes = sorted(set(seen.values()))
        assert codes == list(range(len(codes)))


def test_downcast_and_sort():
    t = Table.from_columns("t", [ts("t", [30, 10, 20, 10]), num("x", [3.0, 1.0, 2.0, 1.5])])
    out = downcast_and_sort(t)
    np.testing.assert_array_equal(out["t"].values, [10, 10, 20, 30])
    np.testing.assert_array_equal(out["x"].values, [1.0, 1.5, 2.0, 3.0])  # stable
    assert out["x"].values.dtype == np.float32


def test_code_width():
    col = ColumnData("c", FeatureKind.CATEGORICAL, np.arange(201, dtype=np.int64),
                     np.zeros(201, bool))
    out = downcast_and_sort(Table.from_columns("t", [col]))
    assert out["c"].values.dtype == np.uint8
    col = ColumnData("c", FeatureKind.CATEGORICAL, np.arange(300, dtype=np.int64),
                     np.zeros(300, bool))
    assert downcast_and_sort(Table.from_columns("t", [col]))["c"].values.dtype == np.uint16


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 20), st.integers(-100, 100)), min_size=1, max_size=50))
def test_sort_is_a_permutation(rows):
    t = Table.from_columns("t", [ts("t", [r[0] for r in rows]), num("x", [r[1] for r in rows])])
    out = downcast_and_sort(t)
    before = sorted(rows)
    after = sorted(zip(out["t"].values.tolist(), out["x"].values.astype(int).tolist()))
    assert before == after
    assert np.all(np.diff(out["t"].values) >= 0)


def test_preprocess_keeps_keys_and_aligns_labels():
    b = session_bundle()
    b.main.columns["t"] = ts("t", [5, 4, 3, 2, 1, 0])
    b.labels = np.array([1, 0, 0, 0, 0, 1], dtype=np.int8)
    pre = preprocess_bundle(b)
    np.testing.assert_array_equal(pre.main_order, [5, 4, 3, 2, 1, 0])
    np.testing.assert_array_equal(pre.bundle.labels, [1, 0, 0, 0, 0, 1][::-1])
    assert {"user", "item", "ip"} <= set(pre.bundle.main.column_names)
    # join keys always share a dictionary
    ub = pre.encoding.column_block[("main", "user")]
    assert pre.encoding.column_block[("users", "user")] == ub

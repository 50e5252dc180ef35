import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hymoerec.data import (
    DataError,
    DatasetSplit,
    Interaction,
    SequenceSet,
    batch_iter,
    build_sequences,
    eval_batches,
    kcore_filter,
    load_dataset,
    pad_left,
    parse_interactions,
    save_dataset,
    split_leave_one_out,
    synthetic_memorization,
)


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


# parsing ---------------------------------------------------------------------

class TestParse:
    def test_movielens_line(self, tmp_path):
        rows = parse_interactions(write(tmp_path, "r.dat", "1::1193::5::978300760\n"))
        assert (rows[0].user, rows[0].item, rows[0].timestamp) == ("1", "1193", 978300760)

    def test_csv_row(self, tmp_path):
        rows = parse_interactions(write(tmp_path, "r.csv", "user,item,timestamp\nu1,i9,100\n"), "csv")
        assert (rows[0].user, rows[0].item, rows[0].timestamp) == ("u1", "i9", 100)

    def test_csv_rating_column_ignored_and_reordered_header(self, tmp_path):
        text = "timestamp,rating,item,user\n7,4.5,i2,u3\n"
        rows = parse_interactions(write(tmp_path, "r.csv", text), "csv")
        assert (rows[0].user, rows[0].item, rows[0].timestamp) == ("u3", "i2", 7)

    def test_file_order_recorded(self, tmp_path):
        rows = parse_interactions(write(tmp_path, "r.dat", "1::a::5::3\n1::b::5::3\n"))
        assert [r.order for r in rows] == [0, 1]

    def test_empty_file(self, tmp_path):
        with pytest.raises(DataError, match="empty dataset"):
            parse_interactions(write(tmp_path, "r.dat", ""))

    def test_malformed_line_number_reported(self, tmp_path):
        with pytest.raises(DataError, match="line 2"):
            parse_interactions(write(tmp_path, "r.dat", "1::2::5::10\n1::oops\n1::3::5::11\n"))

    def test_malformed_threshold(self, tmp_path):
        p = write(tmp_path, "r.dat", "1::2::5::10\nbad\n1::3::5::x\n")
        assert len(parse_interactions(p, max_malformed=2)) == 1
        with pytest.raises(DataError, match="2 malformed"):
            parse_interactions(p, max_malformed=1)

    def test_missing_file_names_path(self, tmp_path):
        with pytest.raises(DataError, match="nope.dat"):
            parse_interactions(tmp_path / "nope.dat")

    def test_unknown_format(self, tmp_path):
        with pytest.raises(DataError):
            parse_interactions(write(tmp_path, "r.dat", "1::2::5::10\n"), "parquet")


# filtering -------------------------------------------------------------------

def inter(user, item, ts, order=0):
    return Interaction(user, item, ts, order)


def oracle_kcore(rows, min_user, min_item):
    """Remove one offending user or item per pass until none is left."""
    rows = list(rows)
    while True:
        users, items = {}, {}
        for r in rows:
            users[r.user] = users.get(r.user, 0) + 1
            items[r.item] = items.get(r.item, 0) + 1
        bad_user = next((u for u, c in sorted(users.items()) if c < min_user), None)
        if bad_user is not None:
            rows = [r for r in rows if r.user != bad_user]
            continue
        bad_item = next((i for i, c in sorted(items.items()) if c < min_item), None)
        if bad_item is not None:
            rows = [r for r in rows if r.item != bad_item]
            continue
        return rows


class TestBuildSequences:
    def test_single_user_boundary(self):
        rows = [inter("u", f"i{k}", k) for k in range(5)]
        seqs = build_sequences(rows, 5, 1)
        assert seqs.sequences == [[1, 2, 3, 4, 5]]

    def test_short_user_removed_and_items_recounted(self):
        rows = [inter("a", f"i{k}", k) for k in range(5)] + [inter("b", f"i{k}", k) for k in range(4)]
        seqs = build_sequences(rows, 5, 1)
        assert seqs.users == ["a"]
        # with b gone, every item has count 1 and min_item=2 empties the log
        with pytest.raises(DataError, match="all interactions removed"):
            build_sequences(rows, 5, 2)

    def test_toy_log_matches_fixpoint_oracle(self):
        rows = [inter(u, i, t, n) for n, (u, i, t) in enumerate([
            ("u1", "a", 1), ("u1", "b", 2), ("u1", "c", 3), ("u1", "d", 4),
            ("u2", "a", 1), ("u2", "b", 2), ("u2", "c", 3),
            ("u3", "a", 5), ("u3", "b", 6), ("u3", "e", 7),
        ])]
        got = kcore_filter(rows, 3, 2)
        assert sorted(got, key=lambda r: r.order) == sorted(oracle_kcore(rows, 3, 2), key=lambda r: r.order)
        assert {r.user for r in got} == {"u1", "u2"}

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 7), st.integers(0, 9)), min_size=1, max_size=80),
           st.integers(1, 4), st.integers(1, 4))
    def test_random_logs_match_oracle(self, pairs, mu, mi):
        rows = [inter(f"u{u}", f"i{i}", n, n) for n, (u, i) in enumerate(pairs)]
        got = kcore_filter(rows, mu, mi)
        assert set(got) == set(oracle_kcore(rows, mu, mi))
        if got:
            users = {}
            items = {}
            for r in got:
                users[r.user] = users.get(r.user, 0) + 1
                items[r.item] = items.get(r.item, 0) + 1
            assert min(users.values()) >= mu and min(items.values()) >= mi

    def test_chronological_with_file_order_ties(self):
        rows = [inter("u", "late", 9, 0), inter("u", "x", 3, 1), inter("u", "y", 3, 2)]
        seqs = build_sequences(rows, 1, 1)
        assert [seqs.items[i - 1] for i in seqs.sequences[0]] == ["x", "y", "late"]

    def test_id_assignment_by_sorted_users_then_first_appearance(self):
        rows = [inter("b", "z", 1), inter("a", "y", 5), inter("a", "z", 2), inter("b", "q", 0)]
        seqs = build_sequences(rows, 1, 1)
        assert seqs.users == ["a", "b"]
        assert seqs.items == ["z", "y", "q"]
        assert seqs.sequences == [[1, 2], [3, 1]]

    def test_id_maps_are_bijections(self):
        rng = np.random.default_rng(0)
        rows = [inter(f"u{rng.integers(20)}", f"i{rng.integers(30)}", int(rng.integers(1000)), n)
                for n in range(600)]
        seqs = build_sequences(rows, 5, 5)
        uidx, iidx = seqs.user_index, seqs.item_index
        assert sorted(iidx.values()) == list(range(1, seqs.n_items + 1))
        assert all(seqs.users[uidx[u]] == u for u in seqs.users)
        assert all(seqs.items[iidx[i] - 1] == i for i in seqs.items)

    def test_empty_input(self):
        with pytest.raises(DataError):
            build_sequences([], 5, 5)


# split -------------------------------------------------------------------------

def seqset(seqs):
    n = max(max(s) for s in seqs)
    return SequenceSet([f"u{k}" for k in range(len(seqs))], [f"i{k}" for k in range(n)], seqs)


class TestSplit:
    def test_five(self):
        sp = split_leave_one_out(seqset([[1, 2, 3, 4, 5]]))
        assert (sp.train[0], sp.valid[0], sp.test[0]) == ([1, 2, 3], 4, 5)

    def test_minimum(self):
        sp = split_leave_one_out(seqset([[1, 2, 3]]))
        assert (sp.train[0], sp.valid[0], sp.test[0]) == ([1], 2, 3)

    def test_short_excluded_with_warning(self, caplog):
        with caplog.at_level(logging.WARNING):
            sp = split_leave_one_out(seqset([[1, 2], [1, 2, 3, 4]]))
        assert sp.excluded == 1 and sp.users == ["u1"]
        assert "excluded 1" in caplog.text

    def test_reconstruction_random(self):
        rng = np.random.default_rng(1)
        seqs = [rng.integers(1, 40, size=rng.integers(3, 30)).tolist() for _ in range(100)]
        sp = split_leave_one_out(seqset(seqs))
        for u, s in enumerate(seqs):
            assert sp.train[u] + [sp.valid[u]] + [sp.test[u]] == s


# batching ----------------------------------------------------------------------

def toy_split(n_users=10, seed=0):
    rng = np.random.default_rng(seed)
    seqs = [rng.integers(1, 25, size=rng.integers(4, 12)).tolist() for _ in range(n_users)]
    return split_leave_one_out(seqset(seqs))


class TestBatches:
    def test_same_seed_epoch_identical(self):
        sp = toy_split()
        a = list(batch_iter(sp, 6, 3, seed=4, epoch=2))
        b = list(batch_iter(sp, 6, 3, seed=4, epoch=2))
        for x, y in zip(a, b, strict=True):
            np.testing.assert_array_equal(x.items, y.items)
            np.testing.assert_array_equal(x.targets, y.targets)

    def test_epochs_differ(self):
        sp = toy_split(30)
        a = np.concatenate([b.users for b in batch_iter(sp, 6, 4, 0, 0)])
        b = np.concatenate([b.users for b in batch_iter(sp, 6, 4, 0, 1)])
        assert sorted(a) == sorted(b) and a.tolist() != b.tolist()

    def test_truncation_keeps_recent(self):
        items, lengths = pad_left([[1, 2, 3, 4, 5, 6, 7]], 5)
        assert items.tolist() == [[3, 4, 5, 6, 7]] and lengths.tolist() == [5]

    def test_left_padding(self):
        items, lengths = pad_left([[4, 5]], 4)
        assert items.tolist() == [[0, 0, 4, 5]] and lengths.tolist() == [2]

    def test_single_partial_batch(self):
        sp = toy_split(5)
        batches = list(batch_iter(sp, 8, 100, 0, 0))
        assert len(batches) == 1 and batches[0].items.shape == (5, 8)

    def test_train_batch_targets(self):
        sp = split_leave_one_out(seqset([[1, 2, 3, 4, 5, 6]]))
        (batch,) = batch_iter(sp, 5, 1, 0, 0)
        assert batch.items.tolist() == [[0, 0, 1, 2, 3]]
        assert batch.targets.tolist() == [4]
        assert batch.position_targets.tolist() == [[0, 0, 2, 3, 4]]
        assert (batch.targets > 0).all()

    def test_eval_inputs(self):
        sp = split_leave_one_out(seqset([[1, 2, 3, 4, 5]]))
        (valid,) = eval_batches(sp, "valid", 4)
        (test,) = eval_batches(sp, "test", 4)
        assert valid.items.tolist() == [[0, 1, 2, 3]] and valid.targets.tolist() == [4]
        assert test.items.tolist() == [[1, 2, 3, 4]] and test.targets.tolist() == [5]


# dataset file ------------------------------------------------------------------

class TestDatasetFile:
    def test_round_trip(self, tmp_path):
        sp = toy_split(12)
        save_dataset(tmp_path / "d.json", sp, {"note": "x"})
        back = load_dataset(tmp_path / "d.json")
        assert isinstance(back, DatasetSplit)
        assert (back.users, back.items, back.train, back.valid, back.test) == \
               (sp.users, sp.items, sp.train, sp.valid, sp.test)

    def test_bytes_stable(self, tmp_path):
        sp = toy_split(12)
        save_dataset(tmp_path / "a.json", sp)
        save_dataset(tmp_path / "b.json", load_dataset(tmp_path / "a.json"))
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_not_a_dataset(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset(write(tmp_path, "x.json", '{"format": "other"}'))
        with pytest.raises(DataError):
            load_dataset(write(tmp_path, "y.json", "not json"))

    def test_wrong_version(self, tmp_path):
        with pytest.raises(DataError, match="version"):
            load_dataset(write(tmp_path, "x.json", '{"format": "hymoerec-dataset", "version": 99}'))


def test_synthetic_memorization_shape():
    sp = synthetic_memorization()
    assert sp.n_users == 32 and sp.n_items <= 50
    assert all(8 <= len(sp.full_sequence(u)) <= 16 for u in range(32))
    again = synthetic_memorization()
    assert again.train == sp.train and again.test == sp.test

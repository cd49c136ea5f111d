import numpy as np
import pytest

from lib.errors import ConfigError, ContractError
from lib.tasks import (
    BLANK,
    DELIM,
    RESERVED,
    TaskSpec,
    chance_accuracy,
    corpus_stream,
    corpus_windows,
    detokenize,
    gen_copy,
    gen_induction,
    gen_selective_copy,
    induction_sample,
    load_byte_corpus,
    read_batch_file,
    selective_copy_sample,
    stationary_bytes,
    task_batch,
    task_stream,
    tokenize,
    write_batch_file,
)


class TestTaskSpec:
    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            TaskSpec('sorting')

    @pytest.mark.parametrize('kwargs', [
        {'payload_len': 0},
        {'payload_len': 16, 'seq_len': 16},
        {'vocab_size': 3},
    ])
    def test_invalid_synthetic_spec(self, kwargs):
        base = dict(kind='copy', seq_len=16, payload_len=3, vocab_size=10)
        base.update(kwargs)
        with pytest.raises(ContractError):
            TaskSpec(**base)

    def test_chance_levels(self):
        assert chance_accuracy(TaskSpec('copy', 16, 3, 10)) == pytest.approx(1 / 8)
        assert chance_accuracy(TaskSpec('selective_copy', 16, 3, 10)) == pytest.approx(1 / 8)
        assert chance_accuracy(TaskSpec('induction', 16, 3, 10)) == pytest.approx(1 / 4)

    def test_induction_chance_with_odd_alphabet(self):
        spec = TaskSpec('induction', seq_len=21, payload_len=3, vocab_size=17, seed=0)
        assert spec.alphabet == 15
        values = {int(gen_induction(spec, i)[1][-1]) for i in range(400)}
        assert len(values) == 8
        assert chance_accuracy(spec) == pytest.approx(1 / len(values))


class TestCopy:
    def test_layout(self):
        spec = TaskSpec('copy', seq_len=10, payload_len=3, vocab_size=10, seed=4)
        tokens, targets, mask = gen_copy(spec, 0)
        payload = tokens[:3]
        assert np.all(payload >= RESERVED)
        np.testing.assert_array_equal(tokens[3:7], BLANK)
        assert tokens[7] == DELIM
        np.testing.assert_array_equal(targets[7:], payload)
        np.testing.assert_array_equal(mask, [0] * 7 + [1] * 3)
        np.testing.assert_array_equal(targets[:7], BLANK)

    def test_deterministic_per_index(self):
        spec = TaskSpec('copy', seq_len=20, payload_len=5, vocab_size=12, seed=1)
        for a, b in zip(gen_copy(spec, 3), gen_copy(spec, 3)):
            np.testing.assert_array_equal(a, b)
        assert not np.array_equal(gen_copy(spec, 3)[0], gen_copy(spec, 4)[0])

    def test_too_short(self):
        with pytest.raises(ContractError):
            gen_copy(TaskSpec('copy', seq_len=6, payload_len=3, vocab_size=10))


class TestSelectiveCopy:
    def test_example(self):
        tokens, targets, mask = selective_copy_sample([5, 6, 7], [2, 7, 11], 16)
        assert tokens[2] == 5 and tokens[7] == 6 and tokens[11] == 7
        assert tokens[13] == DELIM
        np.testing.assert_array_equal(targets[13:], [5, 6, 7])
        assert mask.sum() == 3 and mask[13:].all()

    def test_answer_follows_position_order(self):
        ordered = selective_copy_sample([5, 6, 7], [2, 7, 11], 16)
        shuffled = selective_copy_sample([7, 5, 6], [11, 2, 7], 16)
        for a, b in zip(ordered, shuffled):
            np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize('positions', [[2, 2, 5], [0, 1, 13]])
    def test_bad_positions(self, positions):
        with pytest.raises(ContractError):
            selective_copy_sample([5, 6, 7], positions, 16)

    def test_generator(self):
        spec = TaskSpec('selective_copy', seq_len=32, payload_len=4, vocab_size=10, seed=2)
        tokens, targets, mask = gen_selective_copy(spec, 5)
        assert tokens[28] == DELIM
        placed = tokens[:28][tokens[:28] != BLANK]
        np.testing.assert_array_equal(targets[28:], placed)
        assert mask.sum() == 4


class TestInduction:
    def test_example(self):
        tokens, targets, mask = induction_sample([2, 3], [8, 9], [0, 2], 2, 9)
        np.testing.assert_array_equal(tokens[:6], [2, 8, 0, 0, 3, 9])
        assert tokens[-1] == 2
        assert targets[-1] == 8
        np.testing.assert_array_equal(mask, [0] * 8 + [1])

    def test_absent_query(self):
        with pytest.raises(ContractError):
            induction_sample([2, 3], [8, 9], [0, 1], 4, 9)

    def test_generated_query_is_present(self):
        spec = TaskSpec('induction', seq_len=21, payload_len=3, vocab_size=14, seed=0)
        num_keys = spec.alphabet // 2
        for index in range(50):
            tokens, targets, mask = gen_induction(spec, index)
            query = tokens[-1]
            assert RESERVED <= query < RESERVED + num_keys
            positions = np.flatnonzero(tokens[:-1] == query)
            assert len(positions) == 1
            assert targets[-1] == tokens[positions[0] + 1]
            assert targets[-1] >= RESERVED + num_keys
            assert mask.sum() == 1

    def test_too_many_pairs(self):
        with pytest.raises(ContractError):
            gen_induction(TaskSpec('induction', seq_len=40, payload_len=5, vocab_size=10))


class TestBatches:
    def test_stream_indices(self):
        spec = TaskSpec('copy', seq_len=10, payload_len=2, vocab_size=8)
        stream = task_stream(spec, 3)
        next(stream)
        second = next(stream)
        np.testing.assert_array_equal(second[0], task_batch(spec, 3, 3)[0])
        assert second[0].shape == (3, 10)

    def test_batch_file(self, tmp_path):
        spec = TaskSpec('induction', seq_len=11, payload_len=2, vocab_size=10)
        tokens, targets, mask = task_batch(spec, 4, 0)
        path = write_batch_file(tmp_path / 'fixtures' / 'batch.bin', 'induction', tokens, targets, mask)
        kind, t, y, m = read_batch_file(path)
        assert kind == 'induction'
        np.testing.assert_array_equal(t, tokens)
        np.testing.assert_array_equal(y, targets)
        np.testing.assert_array_equal(m, mask)

    def test_not_a_batch_file(self, tmp_path):
        path = tmp_path / 'junk.bin'
        path.write_bytes(b'x' * 40)
        with pytest.raises(ContractError):
            read_batch_file(path)


class TestByteCorpus:
    def test_split(self, tmp_path):
        path = tmp_path / 'corpus.txt'
        path.write_bytes(bytes(range(200)) * 5)
        train, val = load_byte_corpus(path, 0.9)
        assert len(train) == 900 and len(val) == 100
        assert detokenize(np.concatenate([train, val])) == path.read_bytes()

    def test_split_is_isolated(self, tmp_path):
        path = tmp_path / 'corpus.txt'
        path.write_bytes(b'abcdefghij' * 10)
        train, val = load_byte_corpus(path, 0.5)
        before = val.copy()
        train[:] = 0
        np.testing.assert_array_equal(val, before)

    def test_tokenize_round_trip(self):
        data = bytes([0, 1, 127, 128, 255])
        assert detokenize(tokenize(data)) == data

    def test_errors(self, tmp_path):
        with pytest.raises(ConfigError):
            load_byte_corpus(tmp_path / 'absent.txt')
        empty = tmp_path / 'empty.txt'
        empty.write_bytes(b'')
        with pytest.raises(ContractError):
            load_byte_corpus(empty)
        with pytest.raises(ContractError):
            detokenize([256])

    def test_windows(self):
        windows = corpus_windows(np.arange(21), 5)
        assert len(windows) == 4
        np.testing.assert_array_equal(windows[1][0], [5, 6, 7, 8, 9])
        np.testing.assert_array_equal(windows[1][1], [6, 7, 8, 9, 10])
        (only,) = corpus_windows(np.arange(11), 10)
        assert len(only[0]) == 10
        with pytest.raises(ContractError, match="too short for length 10"):
            corpus_windows(np.arange(10), 10)

    def test_stream(self):
        corpus = np.arange(101)
        stream = corpus_stream(corpus, 10, 4, seed=0)
        x, y, mask = next(stream)
        assert x.shape == (4, 10)
        np.testing.assert_array_equal(y, x + 1)
        assert mask.all()
        starts = {int(row[0]) for _ in range(5) for row in next(stream)[0]}
        assert starts <= set(range(0, 91, 10))
        with pytest.raises(ContractError):
            next(corpus_stream(np.arange(5), 10, 2, seed=0))

    def test_stationary_source(self):
        a = stationary_bytes(1000, seed=3)
        np.testing.assert_array_equal(a, stationary_bytes(1000, seed=3))
        assert a.min() >= ord('a') and a.max() < ord('a') + 16
        assert not np.array_equal(a, stationary_bytes(1000, seed=4))

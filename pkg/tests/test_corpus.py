import numpy as np
import pytest

from svquant.corpus import CorpusConfig, SyntheticCorpus, read_trials, utt_id, write_trials

SMALL = CorpusConfig(n_train_speakers=4, n_test_speakers=3, utts_per_speaker=5, frames=40, test_frames=90, seed=2)


def test_utterance_is_pure_function_of_indices():
    a, b = SyntheticCorpus(SMALL), SyntheticCorpus(SMALL)
    x1, *_ = a.utterance(2, 3)
    b.utterance(0, 0)
    x2, *_ = b.utterance(2, 3)
    assert x1.tobytes() == x2.tobytes()


def test_seed_changes_data():
    x1, *_ = SyntheticCorpus(SMALL).utterance(1, 1)
    other = CorpusConfig(**{**SMALL.to_dict(), "seed": 3})
    x2, *_ = SyntheticCorpus(other).utterance(1, 1)
    assert not np.array_equal(x1, x2)


def test_splits_are_speaker_disjoint():
    corpus = SyntheticCorpus(SMALL)
    train, test = corpus.split("train"), corpus.split("test")
    assert not set(train.speaker) & set(test.speaker)
    assert train.x.shape == (20, 40, 64) and test.x.shape == (15, 90, 64)
    assert train.x.dtype == np.float32
    assert set(train.gender) == {0, 1}


def test_unknown_split():
    with pytest.raises(ValueError):
        SyntheticCorpus(SMALL).split("dev")


def test_trials_balanced_and_valid():
    corpus = SyntheticCorpus(SMALL)
    trials = corpus.trials()
    test_ids = set(corpus.split("test").ids)
    labels = [t.label for t in trials]
    # 5 utterances per speaker cap the default of 10 partners at 4
    assert labels.count(1) == labels.count(0) == 4 * 15
    assert len(corpus.trials(2)) == 2 * 2 * 15
    for t in trials:
        assert t.enroll in test_ids and t.test in test_ids and t.enroll != t.test
        assert (t.enroll[:6] == t.test[:6]) == bool(t.label)


def test_trial_file_round_trip(tmp_path):
    trials = SyntheticCorpus(SMALL).trials()
    write_trials(trials, tmp_path / "t.txt")
    assert read_trials(tmp_path / "t.txt") == trials
    assert (tmp_path / "t.txt").read_text().splitlines()[0].split()[0] in ("0", "1")


def test_trial_file_keywords_and_errors(tmp_path):
    path = tmp_path / "t.txt"
    path.write_text("target a b\n\nnontarget a c\n")
    assert [t.label for t in read_trials(path)] == [1, 0]
    path.write_text("maybe a b\n")
    with pytest.raises(ValueError, match=":1:"):
        read_trials(path)


def test_utt_id_format():
    assert utt_id(3, 12) == "spk003/utt012"


def test_trials_need_two_utterances():
    cfg = CorpusConfig(n_train_speakers=2, n_test_speakers=2, utts_per_speaker=1, frames=10, test_frames=10)
    with pytest.raises(ValueError, match="two utterances"):
        SyntheticCorpus(cfg).trials()

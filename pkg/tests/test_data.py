import numpy as np
import pytest

from funnelkit.data import (
    SENTENCE,
    TOKEN,
    Batch,
    gen_sentence_task,
    gen_token_task,
    load_batch,
    parse_conll,
    save_batch,
    sentence_rule,
    token_bucket,
    token_rule,
)
from funnelkit.errors import InputError, ParseError

FIXTURES = __import__("pathlib").Path(__file__).parent / "fixtures"


def test_sentence_rule_examples():
    assert sentence_rule(np.array([[0, 0, 63, 63]]), 64)[0] == 0  # exactly half is not a majority
    assert sentence_rule(np.array([[0, 1, 2, 3]]), 64)[0] == 1
    assert sentence_rule(np.array([[40, 50, 60, 1]]), 64)[0] == 0


def test_sentence_task_balanced_and_labelled_by_rule():
    b = gen_sentence_task(0, 10_000, 16, 64)
    assert 0.4 <= b.labels.mean() <= 0.6
    np.testing.assert_array_equal(b.labels, sentence_rule(b.tokens, 64))
    assert b.kind == SENTENCE and b.mask.all()


def test_sentence_task_deterministic():
    a, b = gen_sentence_task(7, 64, 8, 16), gen_sentence_task(7, 64, 8, 16)
    np.testing.assert_array_equal(a.tokens, b.tokens)
    assert not np.array_equal(a.tokens, gen_sentence_task(8, 64, 8, 16).tokens)


def test_token_rule_examples():
    np.testing.assert_array_equal(token_rule(np.array([[5, 5, 7]])), [[0, 1, 0]])
    np.testing.assert_array_equal(token_rule(np.array([[1, 2, 3, 4]])), [[0, 0, 0, 0]])
    np.testing.assert_array_equal(token_rule(np.array([[3, 3, 3]])), [[0, 1, 1]])


def test_token_task_positive_rate_and_rule():
    b = gen_token_task(0, 2000, 16, 8)
    np.testing.assert_array_equal(b.labels, token_rule(b.tokens))
    rate = b.labels[:, 1:].mean()
    # copy with p=0.3 plus a 1/8 chance of an accidental repeat
    assert abs(rate - (0.3 + 0.7 / 8)) < 0.02
    assert b.tokens.max() < 8 and b.kind == TOKEN


def test_token_task_deterministic():
    np.testing.assert_array_equal(gen_token_task(3, 10, 6, 8).tokens, gen_token_task(3, 10, 6, 8).tokens)


def test_generator_argument_checks():
    with pytest.raises(ValueError):
        gen_sentence_task(0, 4, 4, 2)
    with pytest.raises(ValueError):
        gen_token_task(0, 4, 1, 8)


def test_batch_shape_checks():
    with pytest.raises(ValueError):
        Batch(np.zeros((2, 3), int), np.ones((2, 3), bool), np.zeros(2, int), TOKEN)
    with pytest.raises(ValueError):
        Batch(np.zeros((2, 3), int), np.ones((2, 3), bool), np.zeros(2, int), "other")


def test_conll_single_token(tmp_path):
    p = tmp_path / "a.conll"
    p.write_text("EU NNP B-NP B-ORG\n\n")
    c = parse_conll(p)
    assert c.sentences == [[("EU", "B-ORG")]]
    assert c.tags == ["B-ORG"]


def test_conll_empty_file(tmp_path):
    p = tmp_path / "e.conll"
    p.write_text("")
    c = parse_conll(p)
    assert c.sentences == [] and c.tags == []
    with pytest.raises(InputError):
        c.encode(16)


def test_conll_malformed_line_reports_line_number(tmp_path):
    p = tmp_path / "bad.conll"
    p.write_text("EU NNP B-NP B-ORG\nrejects\n")
    with pytest.raises(ParseError, match="line 2"):
        parse_conll(p)


def test_conll_missing_file(tmp_path):
    with pytest.raises(InputError):
        parse_conll(tmp_path / "nope.conll")


def test_conll_fixture_two_sentences():
    c = parse_conll(FIXTURES / "two_sentences.conll")
    assert len(c.sentences) == 2
    assert [t for t, _ in c.sentences[0]] == ["EU", "rejects", "German", "call"]
    assert c.tags == ["B-ORG", "O", "B-MISC", "B-PER", "I-PER"]
    b = c.encode(32)
    assert b.tokens.shape == (2, 4)
    np.testing.assert_array_equal(b.mask, [[1, 1, 1, 1], [1, 1, 0, 0]])
    np.testing.assert_array_equal(b.labels[0], [0, 1, 2, 1])
    assert b.negative_tag == 1
    assert b.tokens[0, 0] == token_bucket("EU", 32)
    assert c.encode(32, max_len=3).tokens.shape == (2, 3)


def test_token_bucket_stable():
    assert token_bucket("EU", 1000) == token_bucket("EU", 1000)
    assert 0 <= token_bucket("anything", 7) < 7


@pytest.mark.parametrize("kind", [SENTENCE, TOKEN])
def test_save_load_round_trip(tmp_path, kind):
    b = gen_sentence_task(1, 12, 6, 16) if kind == SENTENCE else gen_token_task(1, 12, 6, 16)
    b.mask[0, 4:] = False
    b.tokens[0, 4:] = 0
    if kind == TOKEN:
        b.labels[0, 4:] = 0
    out = load_batch(save_batch(b, tmp_path / "d.txt", {"seed": 1}))
    np.testing.assert_array_equal(out.tokens, b.tokens)
    np.testing.assert_array_equal(out.mask, b.mask)
    np.testing.assert_array_equal(out.labels, b.labels)
    assert out.kind == kind


def test_load_rejects_bad_files(tmp_path):
    p = tmp_path / "x.txt"
    p.write_text("not a header\n")
    with pytest.raises(ParseError):
        load_batch(p)
    p.write_text("# funnelkit-data kind=token\n1 2 3\n")
    with pytest.raises(ParseError, match="line 2"):
        load_batch(p)

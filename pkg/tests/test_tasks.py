import datetime
import filecmp

import numpy as np
import pytest

from dca.errors import ConfigError, DataError
from dca.model import forward
from dca.tasks import (Example, Tokenizer, encode_batch, gen_arithmetic, gen_date, gen_letter_concat,
                       letter_answer, letter_prompt, make_splits, read_jsonl, write_jsonl)


def test_second_last_letter_example():
    assert letter_answer(["GALLEGOS", "MORAN"], "second last") == "OA"
    assert letter_prompt(["GALLEGOS", "MORAN"]).startswith("Take the second last letters")


def test_arithmetic_prompt_format():
    for e in gen_arithmetic(0, 50):
        assert e.prompt.endswith("=?")
        assert e.prompt[:-2].replace("+", "").replace("-", "").isdigit()
    ex = Example("1+2=?", "3", "arithmetic")
    assert ex.prompt == "1+2=?" and ex.answer == "3"


@pytest.mark.parametrize("today,tomorrow", [("12/31/1999", "01/01/2000"), ("02/28/2000", "02/29/2000"),
                                             ("02/28/1900", "03/01/1900"), ("02/29/2024", "03/01/2024")])
def test_date_examples(today, tomorrow):
    from dca.tasks import next_day, format_date
    m, d, y = map(int, today.split("/"))
    assert format_date(*next_day(y, m, d)) == tomorrow


def test_date_generator_matches_datetime():
    for e in gen_date(7, 1000):
        today = e.prompt.split("If today is ")[1].split(",")[0]
        d = datetime.datetime.strptime(today, "%m/%d/%Y").date()
        expect = datetime.date.fromordinal(d.toordinal() + 1).strftime("%m/%d/%Y")
        assert e.answer == expect


def test_arithmetic_generator_oracle():
    ex = gen_arithmetic(3, 1000, operand_range=(-50, 50))
    for e in ex:
        body = e.prompt[:-2]
        op_at = body.index("+" if "+" in body[1:] else "-", 1)
        a, op, b = int(body[:op_at]), body[op_at], int(body[op_at + 1:])
        assert int(e.answer) == (a + b if op == "+" else a - b)


def test_letter_generator_oracle():
    for e in gen_letter_concat(5, 1000, n_words=3):
        words = e.prompt.split('"')[1].split()
        assert len(words) == 3
        assert e.answer == "".join(w[-2] for w in words)


def test_generators_deterministic_and_seed_sensitive():
    assert gen_letter_concat(1, 20) == gen_letter_concat(1, 20)
    assert gen_letter_concat(1, 20) != gen_letter_concat(2, 20)
    assert gen_date(1, 20) == gen_date(1, 20)


def test_bad_generator_config():
    with pytest.raises(ConfigError):
        gen_letter_concat(0, 5, word_len=(1, 1))
    with pytest.raises(ConfigError):
        gen_letter_concat(0, 5, position="middle")
    with pytest.raises(ConfigError):
        gen_date(0, 5, year_range=(2000, 1990))


def test_tokenizer_round_trip():
    tok = Tokenizer()
    text = 'Take the "AB CD" 12/31/1999 -5+3=?'
    assert tok.decode(tok.encode(text)) == text
    assert tok.vocab_size == 99
    with pytest.raises(DataError):
        tok.encode("café")


def test_batch_masks():
    tok = Tokenizer()
    batch = encode_batch(tok, gen_letter_concat(0, 6), max_seq=96)
    assert not np.any(batch.answer_mask & batch.pad_mask)
    for row, ans, pad in zip(batch.tokens, batch.answer_mask, batch.pad_mask):
        assert row[0] == tok.BOS
        sep = list(row).index(tok.SEP)
        assert not ans[:sep + 1].any()
        assert np.all(row[pad] == tok.PAD)
        assert row[ans][-1] == tok.EOS


def test_overlong_example_rejected():
    with pytest.raises(DataError, match="max_seq"):
        encode_batch(Tokenizer(), gen_letter_concat(0, 1), max_seq=10)


def test_answer_loss_ignores_prompt_only_through_logits(small_cfg):
    """Masked CE depends on prompt tokens only via the model; masking itself never reads them."""
    from dca import tensor as T
    from dca.model import init_params

    tok = Tokenizer()
    cfg = small_cfg.replace(vocab_size=tok.vocab_size, max_seq_len=96)
    params = init_params(cfg, 0)
    batch = encode_batch(tok, gen_letter_concat(0, 3), 96)
    logits = forward(params, None, batch.inputs, cfg).logits
    ce = T.cross_entropy(logits, batch.targets, batch.loss_mask).item()
    corrupted = batch.targets.copy()
    corrupted[~batch.loss_mask] = tok.PAD
    assert T.cross_entropy(logits, corrupted, batch.loss_mask).item() == ce


def test_splits_are_disjoint():
    train, test = make_splits("letter_concat", 0, 300, 100)
    assert len(train) == 300 and len(test) == 100
    assert not {e.prompt for e in train} & {e.prompt for e in test}
    assert len({e.prompt for e in train}) == 300


def test_jsonl_byte_identical(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_jsonl(a, gen_date(4, 50))
    write_jsonl(b, gen_date(4, 50))
    assert filecmp.cmp(a, b, shallow=False)
    assert read_jsonl(a) == gen_date(4, 50)


def test_read_jsonl_rejects_malformed(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"prompt": "x"}\n')
    with pytest.raises(DataError, match="bad.jsonl:1"):
        read_jsonl(p)

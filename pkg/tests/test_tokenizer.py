from pathlib import Path

import pytest

from services.errors import ConfigurationError, InputError
from services.model_core import load_config
from services.tokenizer import ByteBpeTokenizer, load_tokenizer

CONFIG_DIR = Path(__file__).resolve().parent.parent / "data" / "configs"


@pytest.mark.parametrize("text", [
    "The harbor opened at dawn.",
    "def f(x):\n    return x ** 2\n",
    "$\\frac{a}{b}$ and \\cite{smith2020}",
    "Kraków, Zoë and Grüße",
    "",
])
def test_decode_inverts_encode(tokenizer, text):
    assert tokenizer.decode(tokenizer.encode(text)) == text


def test_merges_shorten_common_words(tokenizer):
    ids = tokenizer.encode(" the")
    assert len(ids) == 1
    assert ids[0] >= 256


def test_rare_capitals_stay_single_bytes(tokenizer):
    assert tokenizer.encode(" QZ") == [32, 81, 90]


def test_byte_offsets_cover_the_text(tokenizer):
    text = "the net and the rope"
    ids = tokenizer.encode(text)
    starts, ends = tokenizer.byte_offsets(ids)
    assert starts[0] == 0
    assert ends[-1] == len(text.encode("utf-8"))
    assert (starts[1:] == ends[:-1]).all()


@pytest.mark.parametrize("config_name", ["tiny_moe.json", "tiny_dense.json", "olmoe_toy.json"])
def test_vocab_matches_the_shipped_configs(tokenizer, config_name):
    config = load_config((CONFIG_DIR / config_name).read_text(encoding="utf-8"))
    assert tokenizer.vocab_size == config.vocab_size == 512
    assert tokenizer.tokenizer_id == "bytebpe-v1"


def test_bad_merge_tables():
    with pytest.raises(ConfigurationError, match="undefined"):
        ByteBpeTokenizer([(b"ab", b"c")], "x")
    with pytest.raises(ConfigurationError, match="duplicates"):
        ByteBpeTokenizer([(b"a", b"b"), (b"a", b"b")], "x")


def test_missing_merge_file(tmp_path):
    with pytest.raises(ConfigurationError):
        load_tokenizer(tmp_path / "nope.json")


def test_decoding_an_unknown_id(tokenizer):
    with pytest.raises(InputError, match="outside"):
        tokenizer.decode_bytes([32, tokenizer.vocab_size])

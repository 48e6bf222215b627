import random

import pytest

from nsed.data import (MatchExample, Vocabulary, cognate_classes, load_cognates, load_transduction,
                       parse_pharaoh_line, read_cognate_words, read_examples, read_pharaoh, split_items,
                       split_target, write_examples, write_pharaoh)
from nsed.errors import DataError, VocabularyError


def test_tsv_line(tmp_path):
    path = tmp_path / "g2p.tsv"
    path.write_text("EQUAL\tIY K W AH L\nabc\txyz\n", encoding="utf-8")
    items = load_transduction(path)
    assert items[0].source == ["E", "Q", "U", "A", "L"]
    assert items[0].target == ["IY", "K", "W", "AH", "L"]
    assert items[1].target == ["x", "y", "z"]


def test_malformed_line_reports_its_number(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_text("ab\tcd\nno-tab-here\n", encoding="utf-8")
    with pytest.raises(DataError, match=":2:"):
        load_transduction(path)


def test_repeated_sources_become_references(tmp_path):
    path = tmp_path / "multi.tsv"
    path.write_text("abc\tx y\nabc\tx z\nd\tq\n", encoding="utf-8")
    items = load_transduction(path)
    assert len(items) == 2
    assert items[0].references == [["x", "y"], ["x", "z"]]


def test_cmudict_format(tmp_path):
    path = tmp_path / "cmudict.dict"
    path.write_text(";;; comment\nequal IY1 K W AH0 L\nendler EH1 N D L ER0 # name\n"
                    "endler(2) EH1 N D L ER0 Z\n", encoding="utf-8")
    items = load_transduction(path, "cmudict")
    assert items[0].source == list("EQUAL")
    assert items[0].target == ["IY", "K", "W", "AH", "L"]
    assert items[1].references == [["EH", "N", "D", "L", "ER"], ["EH", "N", "D", "L", "ER", "Z"]]
    kept = load_transduction(path, "cmudict", strip_stress=False)
    assert kept[0].target[0] == "IY1"


def test_unknown_format(tmp_path):
    with pytest.raises(DataError):
        load_transduction(tmp_path / "x", "xml")


def test_split_target():
    assert split_target("IY K") == ["IY", "K"]
    assert split_target("abc") == ["a", "b", "c"]


def test_split_items_is_deterministic_and_disjoint():
    items = list(range(50))
    a = split_items(items, 5, 10, seed=3)
    assert a == split_items(items, 5, 10, seed=3)
    assert [len(p) for p in a] == [35, 5, 10]
    assert sorted(a[0] + a[1] + a[2]) == items
    with pytest.raises(DataError):
        split_items(items, 25, 25)


def test_vocabulary():
    vocab = Vocabulary.build([["b", "a"], ["c"]])
    assert vocab.symbols == ["<s>", "</s>", "a", "b", "c"]
    assert vocab.encode(["c", "a"]) == [4, 2]
    assert vocab.decode([4, 2]) == ["c", "a"]
    assert Vocabulary.from_json(vocab.to_json()) == vocab
    with pytest.raises(VocabularyError):
        vocab.encode(["z"])
    with pytest.raises(KeyError):
        vocab.encode(["z"])
    with pytest.raises(VocabularyError):
        vocab.decode([9])


def test_pharaoh():
    assert parse_pharaoh_line("0-0 1-2") == {(1, 1), (2, 3)}
    assert parse_pharaoh_line("1-1", zero_based=False) == {(1, 1)}
    assert parse_pharaoh_line("") == set()
    with pytest.raises(DataError):
        parse_pharaoh_line("0:1")


def test_pharaoh_round_trip(tmp_path):
    sets = [{(1, 1), (2, 3)}, set(), {(4, 2)}]
    write_pharaoh(tmp_path / "a.txt", sets)
    assert read_pharaoh(tmp_path / "a.txt") == sets


def write_cognates(path, n_classes=40, size=3, singletons=5, seed=0):
    rng = random.Random(seed)
    lines = ["language\tconcept\tipa\tcogid"]
    for c in range(n_classes):
        base = "".join(rng.choice("ptkaeiou") for _ in range(4))
        for lang in range(size):
            lines.append(f"L{lang}\tc{c % 7}\t{base[:3] + rng.choice('mn')}\t{c}")
    for k in range(singletons):
        lines.append(f"L0\tlonely\tzzz{k}\t{1000 + k}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def test_singleton_classes_are_dropped(tmp_path):
    path = tmp_path / "cog.tsv"
    write_cognates(path)
    classes = cognate_classes(read_cognate_words(path))
    assert len(classes) == 40
    assert all(len(v) == 3 for v in classes.values())


def test_class_identity_includes_the_concept(tmp_path):
    path = tmp_path / "cog.tsv"
    path.write_text("language\tconcept\tipa\tcogid\nA\thand\tab\t1\nB\thand\tac\t1\nA\tfoot\tpq\t1\n",
                    encoding="utf-8")
    classes = cognate_classes(read_cognate_words(path))
    assert list(classes) == [("hand", "1")]


def test_negatives_per_positive(tmp_path):
    path = tmp_path / "cog.tsv"
    write_cognates(path)
    train, valid, test = load_cognates(path, max_positives=100, valid=0, test=0)
    examples = train + valid + test
    assert sum(e.label for e in examples) == 100
    assert len(examples) == 1100
    negatives = {(e.source, e.target) for e in examples if e.label == 0}
    assert len(negatives) == 1000


def test_cognate_splits_are_deterministic(tmp_path):
    path = tmp_path / "cog.tsv"
    write_cognates(path)
    first = load_cognates(path, seed=5)
    assert first == load_cognates(path, seed=5)
    assert first != load_cognates(path, seed=6)
    for name, split in zip("abc", first):
        write_examples(tmp_path / f"{name}1.tsv", split)
        write_examples(tmp_path / f"{name}2.tsv", load_cognates(path, seed=5)["abc".index(name)])
        assert (tmp_path / f"{name}1.tsv").read_bytes() == (tmp_path / f"{name}2.tsv").read_bytes()
    assert len(first[1]) > 0 and len(first[2]) > 0


def test_missing_columns(tmp_path):
    path = tmp_path / "cog.tsv"
    path.write_text("language\tword\nA\tab\n", encoding="utf-8")
    with pytest.raises(DataError):
        read_cognate_words(path)


def test_examples_round_trip(tmp_path):
    examples = [MatchExample(("a", "b"), ("c",), 1), MatchExample(("ts",), ("a", "b"), 0)]
    write_examples(tmp_path / "e.tsv", examples)
    assert read_examples(tmp_path / "e.tsv") == examples
    (tmp_path / "bad.tsv").write_text("a\tb\t2\n", encoding="utf-8")
    with pytest.raises(DataError):
        read_examples(tmp_path / "bad.tsv")

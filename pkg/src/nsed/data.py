"""Datasets, vocabularies and alignment files."""

from __future__ import annotations

import csv
import json
import random
import re
from collections import OrderedDict, defaultdict
from dataclasses import dataclass
from pathlib import Path

from .errors import DataError, VocabularyError

RESERVED = ("<s>", "</s>")


class Vocabulary:
    """Bijection between symbols and indices; ``<s>`` is 0 and ``</s>`` is 1."""

    def __init__(self, symbols=()):
        self.symbols = list(RESERVED)
        self.index = {s: i for i, s in enumerate(self.symbols)}
        for s in symbols:
            self.add(s)

    @classmethod
    def build(cls, sequences) -> "Vocabulary":
        return cls(sorted({s for seq in sequences for s in seq} - set(RESERVED)))

    def add(self, symbol) -> int:
        if symbol not in self.index:
            self.index[symbol] = len(self.symbols)
            self.symbols.append(symbol)
        return self.index[symbol]

    def __len__(self):
        return len(self.symbols)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.symbols == other.symbols

    def encode(self, sequence) -> list[int]:
        try:
            return [self.index[s] for s in sequence]
        except KeyError as err:
            raise VocabularyError(f"symbol {err.args[0]!r} is not in the vocabulary") from None

    def decode(self, indices) -> list[str]:
        try:
            return [self.symbols[i] for i in indices]
        except IndexError:
            raise VocabularyError(f"index outside vocabulary of {len(self)} symbols") from None

    def to_json(self) -> str:
        return json.dumps(self.symbols[len(RESERVED):], ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        return cls(json.loads(text))


def split_target(text: str) -> list[str]:
    """Whitespace tokens when the text has spaces, single characters otherwise."""
    text = text.strip()
    return text.split() if " " in text else list(text)


# ------------------------------------------------------------ transduction


@dataclass
class TransductionItem:
    source: list
    references: list

    @property
    def target(self):
        return self.references[0]


def _group(pairs):
    groups: OrderedDict = OrderedDict()
    for source, target in pairs:
        groups.setdefault(tuple(source), []).append(target)
    return [TransductionItem(list(s), refs) for s, refs in groups.items()]


def read_tsv_pairs(path):
    pairs = []
    with open(path, encoding="utf-8") as handle:
        for number, line in enumerate(handle, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) < 2 or not parts[0] or not parts[1].strip():
                raise DataError(f"{path}:{number}: expected 'source<TAB>target'")
            pairs.append((list(parts[0]), split_target(parts[1])))
    return pairs


_VARIANT = re.compile(r"^(.+?)\(\d+\)$")
_STRESS = re.compile(r"\d+$")


def read_cmudict_pairs(path, strip_stress: bool = True):
    """``WORD PH PH ...`` lines; ``WORD(2)`` marks an alternative pronunciation.

    Comment lines (``;;;``) and trailing ``# ...`` notes are ignored; words are
    upper-cased and phoneme stress digits removed unless ``strip_stress`` is off.
    """
    pairs = []
    with open(path, encoding="utf-8", errors="strict") as handle:
        for number, line in enumerate(handle, 1):
            if line.startswith(";;;") or not line.strip():
                continue
            line = line.split(" #", 1)[0]
            fields = line.split()
            if len(fields) < 2:
                raise DataError(f"{path}:{number}: expected a word followed by phonemes")
            word = fields[0]
            variant = _VARIANT.match(word)
            if variant:
                word = variant.group(1)
            phones = [_STRESS.sub("", p) if strip_stress else p for p in fields[1:]]
            pairs.append((list(word.upper()), phones))
    return pairs


def load_transduction(path, fmt: str = "tsv", strip_stress: bool = True) -> list[TransductionItem]:
    """Items with every reference of a repeated source grouped together."""
    if fmt == "tsv":
        return _group(read_tsv_pairs(path))
    if fmt == "cmudict":
        return _group(read_cmudict_pairs(path, strip_stress))
    raise DataError(f"unknown transduction format {fmt!r}")


def split_items(items, valid: int, test: int, seed: int = 13):
    """Shuffle and cut into ``(train, valid, test)``; sizes may be fractions."""
    items = list(items)
    random.Random(seed).shuffle(items)
    total = len(items)
    n_valid = int(round(valid * total)) if isinstance(valid, float) else valid
    n_test = int(round(test * total)) if isinstance(test, float) else test
    if n_valid + n_test >= total:
        raise DataError(f"{total} items cannot give {n_valid} validation and {n_test} test items")
    return items[n_valid + n_test:], items[:n_valid], items[n_valid:n_valid + n_test]


def write_transduction(path, items):
    with open(path, "w", encoding="utf-8") as handle:
        for item in items:
            for ref in item.references:
                handle.write("".join(item.source) + "\t" + " ".join(ref) + "\n")


# ------------------------------------------------------------------ cognates


@dataclass(frozen=True)
class MatchExample:
    source: tuple
    target: tuple
    label: int


COLUMN_NAMES = {
    "language": ("language", "doculect", "lang", "language_id"),
    "concept": ("concept", "gloss", "meaning", "parameter_id"),
    "form": ("tokens", "segments", "ipa", "form", "word", "value"),
    "cognate": ("cogid", "cognate_class", "cognateset", "cognateset_id", "cognate", "class", "cogclass"),
}


def _find(header, role):
    lowered = [h.strip().lower() for h in header]
    for name in COLUMN_NAMES[role]:
        if name in lowered:
            return lowered.index(name)
    return None


def read_cognate_words(path):
    """Words with their cognate class from a tab-separated file with a header."""
    with open(path, encoding="utf-8", newline="") as handle:
        rows = list(csv.reader(handle, delimiter="\t", quoting=csv.QUOTE_NONE))
    rows = [r for r in rows if r and not r[0].startswith("#")]
    if not rows:
        raise DataError(f"{path}: empty file")
    header = rows[0]
    form, cognate = _find(header, "form"), _find(header, "cognate")
    concept, language = _find(header, "concept"), _find(header, "language")
    if form is None or cognate is None:
        raise DataError(f"{path}: need a form column and a cognate class column, found {header}")
    words = []
    for number, row in enumerate(rows[1:], 2):
        if len(row) <= max(form, cognate):
            raise DataError(f"{path}:{number}: too few columns")
        text, cls = row[form].strip(), row[cognate].strip()
        if not text or not cls:
            continue
        symbols = tuple(text.split()) if " " in text else tuple(text)
        key = (row[concept].strip(), cls) if concept is not None else ("", cls)
        lang = row[language].strip() if language is not None else ""
        words.append((lang, symbols, key))
    return words


def cognate_classes(words):
    """Classes with at least two members (singletons are excluded)."""
    classes = defaultdict(list)
    for lang, symbols, key in words:
        classes[key].append((lang, symbols))
    return {k: v for k, v in classes.items() if len(v) > 1}


def positive_pairs(classes, rng, max_positives=None):
    """Shuffled within-class word pairs and the pool of all class members."""
    keys = sorted(classes)
    positives = []
    for key in keys:
        members = classes[key]
        for a in range(len(members)):
            for b in range(a + 1, len(members)):
                positives.append((members[a][1], members[b][1], key))
    rng.shuffle(positives)
    if max_positives is not None:
        positives = positives[:max_positives]
    pool = [(w[1], key) for key in keys for w in classes[key]]
    return positives, pool


def load_cognates(path, negatives_per_positive: int = 10, seed: int = 13, valid=0.1, test=0.1,
                  max_positives=None):
    """Train, validation and test :class:`MatchExample` lists.

    Splits are made over positive pairs; each positive brings its own
    negatives, which pair its source word with words of other classes.
    Duplicated negatives are dropped and drawn again.
    """
    classes = cognate_classes(read_cognate_words(path))
    if not classes:
        raise DataError(f"{path}: no cognate class has two members")
    rng = random.Random(seed)
    positives, pool = positive_pairs(classes, rng, max_positives)
    n = len(positives)
    n_valid = int(round(valid * n)) if isinstance(valid, float) else valid
    n_test = int(round(test * n)) if isinstance(test, float) else test
    parts = (positives[n_valid + n_test:], positives[:n_valid], positives[n_valid:n_valid + n_test])
    seen = set()
    splits = []
    for part in parts:
        examples = []
        for src, tgt, key in part:
            examples.append(MatchExample(src, tgt, 1))
            drawn, attempts = 0, 0
            while drawn < negatives_per_positive and attempts < 100 * negatives_per_positive:
                attempts += 1
                other, other_key = pool[rng.randrange(len(pool))]
                pair = (src, other) if src <= other else (other, src)
                if other_key == key or pair in seen:
                    continue
                seen.add(pair)
                examples.append(MatchExample(src, other, 0))
                drawn += 1
        splits.append(examples)
    return tuple(splits)


def write_examples(path, examples):
    with open(path, "w", encoding="utf-8") as handle:
        for ex in examples:
            handle.write(f"{' '.join(ex.source)}\t{' '.join(ex.target)}\t{ex.label}\n")


def read_examples(path):
    examples = []
    with open(path, encoding="utf-8") as handle:
        for number, line in enumerate(handle, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3 or parts[2] not in ("0", "1"):
                raise DataError(f"{path}:{number}: expected 'source<TAB>target<TAB>label'")
            examples.append(MatchExample(tuple(parts[0].split()), tuple(parts[1].split()), int(parts[2])))
    return examples


# ------------------------------------------------------------------ Pharaoh


def parse_pharaoh_line(line: str, zero_based: bool = True) -> set[tuple[int, int]]:
    """``"i-j i-j"`` to a set of 1-based links."""
    shift = 1 if zero_based else 0
    links = set()
    for token in line.split():
        try:
            i, j = token.split("-")
            links.add((int(i) + shift, int(j) + shift))
        except ValueError:
            raise DataError(f"malformed alignment link {token!r}") from None
    return links


def read_pharaoh(path, zero_based: bool = True) -> list[set[tuple[int, int]]]:
    with open(path, encoding="utf-8") as handle:
        return [parse_pharaoh_line(line, zero_based) for line in handle]


def write_pharaoh(path, link_sets, zero_based: bool = True):
    shift = 1 if zero_based else 0
    with open(path, "w", encoding="utf-8") as handle:
        for links in link_sets:
            handle.write(" ".join(f"{i - shift}-{j - shift}" for i, j in sorted(links)) + "\n")


def data_file(directory, name) -> Path:
    path = Path(directory) / name
    if not path.exists():
        raise DataError(f"missing data file {path}")
    return path

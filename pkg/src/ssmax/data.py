"""Byte-level tokenizer and the synthetic corpus.

Filler text comes from a fixed word-level Markov chain rendered as bytes, so
predicting it needs local context (the current word so far, the previous
word). Retrieval records follow the needle format

    The special magic <city> number is: <7 digits>.

and are later queried with a question ending in ``A:`` so the first answer
byte is the first digit. Pretraining also mixes in sequences where a random
digit/letter chunk recurs, which is only predictable by copying.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

VOCAB_SIZE = 256
EOS = 0x03  # ASCII end-of-text; never part of generated text

CITIES = (
    "Tokyo", "Paris", "London", "Berlin", "Madrid", "Rome", "Vienna", "Prague",
    "Warsaw", "Dublin", "Oslo", "Lisbon", "Athens", "Cairo", "Nairobi", "Lagos",
    "Dakar", "Accra", "Tunis", "Rabat", "Delhi", "Mumbai", "Dhaka", "Karachi",
    "Kabul", "Tehran", "Baghdad", "Riyadh", "Doha", "Dubai", "Muscat", "Ankara",
    "Moscow", "Kyiv", "Minsk", "Riga", "Vilnius", "Tallinn", "Helsinki", "Stockholm",
    "Beijing", "Shanghai", "Seoul", "Osaka", "Manila", "Hanoi", "Bangkok", "Jakarta",
    "Sydney", "Perth", "Auckland", "Lima", "Quito", "Bogota", "Caracas", "Santiago",
    "Havana", "Toronto", "Chicago", "Boston", "Denver", "Seattle", "Houston", "Miami",
)  # fmt: skip
assert len(CITIES) == 64

NEEDLE_PREFIX = "The special magic {city} number is:"
NEEDLE_TEMPLATE = NEEDLE_PREFIX + " {number}."
QUESTION_TEMPLATE = "\nQ: What is the special magic {city} number?\nA:"
ANSWER_DIGITS = 7


def encode(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def decode(ids) -> str:
    return bytes(int(i) for i in ids).decode("utf-8", errors="replace")


@dataclass
class MarkovLanguage:
    """Word-level Markov chain over a fixed random lexicon."""

    words: list[str]
    successors: np.ndarray  # (W, branching) word indices
    probs: np.ndarray  # (W, branching) rows sum to 1

    @classmethod
    def build(cls, seed: int = 1234, num_words: int = 400, branching: int = 8) -> "MarkovLanguage":
        rng = np.random.default_rng(seed)
        letters = np.array(list("abcdefghijklmnopqrstuvwxyz"))
        # vowel-heavy letter weights keep words pronounceable-ish and the unigram skewed
        weights = rng.dirichlet(np.full(26, 0.8))
        words: set[str] = set()
        while len(words) < num_words:
            length = int(rng.integers(2, 8))
            words.add("".join(rng.choice(letters, size=length, p=weights)))
        lexicon = sorted(words)
        successors = np.stack([rng.choice(num_words, size=branching, replace=False) for _ in range(num_words)])
        probs = rng.dirichlet(np.full(branching, 0.5), size=num_words)
        return cls(lexicon, successors, probs)

    def sample_text(self, rng: np.random.Generator, num_bytes: int) -> str:
        """At least ``num_bytes`` bytes of filler, truncated to exactly that length."""
        out: list[str] = []
        size = 0
        w = int(rng.integers(len(self.words)))
        since_period = 0
        while size <= num_bytes:
            word = self.words[w]
            since_period += 1
            if since_period >= 6 and rng.random() < 0.15:
                word += "."
                since_period = 0
            out.append(word)
            size += len(word) + 1
            w = int(self.successors[w, rng.choice(self.successors.shape[1], p=self.probs[w])])
        return " ".join(out)[:num_bytes]


_DEFAULT_LANGUAGE: MarkovLanguage | None = None


def default_language() -> MarkovLanguage:
    global _DEFAULT_LANGUAGE
    if _DEFAULT_LANGUAGE is None:
        _DEFAULT_LANGUAGE = MarkovLanguage.build()
    return _DEFAULT_LANGUAGE


def random_number(rng: np.random.Generator) -> str:
    return "".join(str(d) for d in rng.integers(0, 10, size=ANSWER_DIGITS))


def needle_text(city: str, number: str) -> str:
    return NEEDLE_TEMPLATE.format(city=city, number=number)


def question_text(city: str) -> str:
    return QUESTION_TEMPLATE.format(city=city)


def needle_span_offset(city: str) -> int:
    """Byte offset inside the needle where the span (right after the colon) starts."""
    return len(NEEDLE_PREFIX.format(city=city))


@dataclass
class RetrievalRecord:
    """One sequence with an embedded needle and the question/answer about it.

    ``tokens`` is the full byte sequence. ``answer_start`` indexes the first
    answer digit; ``span`` is the half-open needle span ``[start, end)``.
    """

    tokens: np.ndarray
    city: str
    number: str
    span: tuple[int, int]
    answer_start: int

    @property
    def answer_mask(self) -> np.ndarray:
        mask = np.zeros(len(self.tokens), dtype=bool)
        mask[self.answer_start : self.answer_start + ANSWER_DIGITS] = True
        return mask


def build_record(
    rng: np.random.Generator,
    length: int,
    needle_pos: int | None = None,
    language: MarkovLanguage | None = None,
    tail: int = 0,
) -> RetrievalRecord:
    """Filler of exactly ``length`` bytes with a needle and a trailing QA pair.

    The QA pair ends ``tail`` bytes before the end of the sequence (the tail is
    filler). ``needle_pos`` is the byte index of the needle's first character;
    random in the first 90% of the available room when omitted.
    """
    language = language or default_language()
    city = CITIES[int(rng.integers(len(CITIES)))]
    number = random_number(rng)
    needle = " " + needle_text(city, number) + " "
    qa = question_text(city) + number + "\n"
    room = length - len(needle) - len(qa) - tail
    if room < 0:
        raise ValueError(f"length {length} too small for a retrieval record")
    if needle_pos is None:
        before = int(rng.integers(0, int(0.9 * room) + 1))
    else:
        before = needle_pos - 1
        if not 0 <= before <= room:
            raise ValueError(f"needle position {needle_pos} does not fit in length {length}")
    filler = language.sample_text(rng, room + tail)
    text = filler[:before] + needle + filler[before:room] + qa + filler[room:]
    tokens = np.frombuffer(text.encode("ascii"), dtype=np.uint8).astype(np.int64)
    assert len(tokens) == length
    span_start = before + 1 + needle_span_offset(city)
    span_end = before + 1 + len(needle_text(city, number))
    answer_start = before + len(needle) + (room - before) + len(question_text(city))
    return RetrievalRecord(tokens, city, number, (span_start, span_end), answer_start)


def min_record_length() -> int:
    """Shortest length that fits a record for every city."""
    city = max(CITIES, key=len)
    return len(" " + needle_text(city, "0" * ANSWER_DIGITS) + " ") + len(question_text(city)) + ANSWER_DIGITS + 1


def filler_sequence(rng: np.random.Generator, length: int, language: MarkovLanguage | None = None) -> np.ndarray:
    language = language or default_language()
    return np.frombuffer(language.sample_text(rng, length).encode("ascii"), dtype=np.uint8).astype(np.int64)


def repeat_sequence(rng: np.random.Generator, length: int, language: MarkovLanguage | None = None) -> np.ndarray:
    """Filler with a random digit or capital-letter chunk repeated 2-4 times.

    The chunks are unpredictable except by copying an earlier occurrence, which
    is what later lets the model lift the needle digits out of the context."""
    language = language or default_language()
    size = min(int(rng.integers(8, 33)), length // 2 - 2)
    if size < 2:
        return filler_sequence(rng, length, language)
    alphabet = (48, 58) if rng.random() < 0.5 else (65, 91)
    chunk = " " + bytes(rng.integers(*alphabet, size=size).astype(np.uint8).tolist()).decode() + " "
    copies = int(rng.integers(2, 5))
    while copies * len(chunk) > length:
        copies -= 1
    room = length - copies * len(chunk)
    gaps = np.diff(np.concatenate([[0], np.sort(rng.integers(0, room + 1, copies)), [room]]))
    filler = language.sample_text(rng, room)
    out, pos = [], 0
    for gap in gaps[:-1]:
        out += [filler[pos : pos + gap], chunk]
        pos += gap
    out.append(filler[pos:])
    return np.frombuffer("".join(out).encode("ascii"), dtype=np.uint8).astype(np.int64)


def corpus_sequence(rng: np.random.Generator, length: int, kv_fraction: float = 0.5, copy_fraction: float = 0.3) -> np.ndarray:
    """One pretraining sequence: a retrieval record (probability ``kv_fraction``),
    a repeated-chunk sequence (``copy_fraction``), otherwise pure filler.

    Records end in a random amount of trailing filler, so the QA pair lands
    anywhere from the end of the sequence back to just after the needle room."""
    u = rng.random()
    if u < kv_fraction:
        room = length - min_record_length()
        if room >= 0:
            return build_record(rng, length, tail=int(rng.integers(0, room + 1))).tokens
    elif u < kv_fraction + copy_fraction:
        return repeat_sequence(rng, length)
    return filler_sequence(rng, length)


def corpus_batch(rng: np.random.Generator, batch_size: int, length: int, kv_fraction: float = 0.5, copy_fraction: float = 0.3) -> np.ndarray:
    return np.stack([corpus_sequence(rng, length, kv_fraction, copy_fraction) for _ in range(batch_size)])

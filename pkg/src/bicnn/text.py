"""Report preprocessing: section extraction, tokenization, vocabulary and padding."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PAD_INDEX = 0

_TOKEN_RE = re.compile(r"[^\W_]+")
_SECTION_RE = re.compile(r"^[ \t]*(findings|impression)\b[ \t]*:?[ \t]*", re.IGNORECASE | re.MULTILINE)
# any other "Header:" line or a radiologist signature closes the current section
_BOUNDARY_RE = re.compile(
    r"^[ \t]*(?:[A-Za-z][A-Za-z /&-]{0,40}:|(?:dr\.?|signed|electronically signed|reported by|dictated by)\b)",
    re.IGNORECASE | re.MULTILINE,
)


class SequenceTooLong(ValueError):
    pass


@dataclass(frozen=True)
class Report:
    id: str
    raw_text: str
    label: int
    findings: str = ""
    impression: str = ""

    @classmethod
    def from_text(cls, id: str, raw_text: str, label: int) -> "Report":
        findings, impression = extract_sections(raw_text) if raw_text else ("", "")
        return cls(id=id, raw_text=raw_text, label=label, findings=findings, impression=impression)

    @property
    def body(self) -> str:
        """Findings and impression joined with a sentence boundary."""
        return join_sections(self.findings, self.impression)


def join_sections(findings: str, impression: str) -> str:
    findings, impression = findings.strip(), impression.strip()
    if not findings or not impression:
        return findings or impression
    if not findings.endswith((".", "!", "?")):
        findings += "."
    return f"{findings}\n{impression}"


def extract_sections(raw_text: str) -> tuple[str, str]:
    """Return the (findings, impression) sections of a report.

    A section starts at a line beginning with ``findings`` or ``impression``
    (any case, optional colon) and runs until the next header line, a
    signature line, or the end of the text. Without either header the whole
    text is treated as findings.
    """
    headers = list(_SECTION_RE.finditer(raw_text))
    if not headers:
        return raw_text.strip(), ""

    sections = {"findings": "", "impression": ""}
    for match in headers:
        start = match.end()
        end = len(raw_text)
        # boundary search starts on the line after the header
        newline = raw_text.find("\n", start)
        if newline != -1:
            # the header line itself may carry text, but never a boundary
            nxt = _BOUNDARY_RE.search(raw_text, newline + 1)
            if nxt is not None:
                end = nxt.start()
        else:
            newline = len(raw_text)
        name = match.group(1).lower()
        text = raw_text[start:end].strip()
        if sections[name]:
            text = join_sections(sections[name], text)
        sections[name] = text
    return sections["findings"], sections["impression"]


def tokenize(text: str) -> list[str]:
    """Lower-case and split on every non-alphanumeric character.

    >>> tokenize("Mild-to-moderate edema, right.")
    ['mild', 'to', 'moderate', 'edema', 'right']
    """
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Vocabulary:
    """Token <-> index map. Index 0 is padding, ``size + 1`` is the unknown token."""

    index_to_word: list[str] = field(default_factory=list)
    word_to_index: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.word_to_index and self.index_to_word:
            self.word_to_index = {w: i + 1 for i, w in enumerate(self.index_to_word)}

    @property
    def size(self) -> int:
        return len(self.index_to_word)

    @property
    def unk_index(self) -> int:
        return self.size + 1

    @property
    def table_rows(self) -> int:
        """Rows needed in an embedding table (pad + words + unknown)."""
        return self.size + 2

    def add(self, token: str) -> int:
        idx = self.word_to_index.get(token)
        if idx is None:
            self.index_to_word.append(token)
            idx = len(self.index_to_word)
            self.word_to_index[token] = idx
        return idx

    def lookup(self, token: str) -> int:
        return self.word_to_index.get(token, self.unk_index)

    def __contains__(self, token: str) -> bool:
        return token in self.word_to_index

    def __len__(self) -> int:
        return self.size

    def to_json(self) -> str:
        return json.dumps(self.word_to_index, ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        mapping = json.loads(text)
        words = sorted(mapping, key=mapping.__getitem__)
        if [mapping[w] for w in words] != list(range(1, len(words) + 1)):
            raise ValueError("vocabulary indices must be contiguous from 1")
        return cls(index_to_word=words)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def build_vocabulary(corpus: Iterable[Sequence[str]]) -> Vocabulary:
    vocab = Vocabulary()
    for tokens in corpus:
        for tok in tokens:
            vocab.add(tok)
    return vocab


@dataclass(frozen=True)
class IndexedSequence:
    forward: np.ndarray
    reverse: np.ndarray
    n_words: int


def index_and_pad(tokens: Sequence[str], vocab: Vocabulary, n_max: int) -> IndexedSequence:
    """Map tokens to indices and zero-pad both channel inputs to ``n_max``.

    The second channel holds the non-padded indices in reverse order, so the
    padding stays trailing in both.
    """
    if len(tokens) > n_max:
        raise SequenceTooLong(f"{len(tokens)} tokens exceed n_max={n_max}")
    idx = [vocab.lookup(t) for t in tokens]
    n = len(idx)
    fwd = np.zeros(n_max, dtype=np.int64)
    rev = np.zeros(n_max, dtype=np.int64)
    fwd[:n] = idx
    rev[:n] = idx[::-1]
    return IndexedSequence(forward=fwd, reverse=rev, n_words=n)


def encode(tokens: Sequence[str], vocab: Vocabulary, n_max: int) -> IndexedSequence:
    """Like :func:`index_and_pad` but truncates over-long inputs, keeping the head."""
    if len(tokens) > n_max:
        logger.warning("truncating report of %d tokens to %d", len(tokens), n_max)
        tokens = tokens[:n_max]
    return index_and_pad(tokens, vocab, n_max)


def report_tokens(report: Report) -> list[str]:
    return tokenize(report.body)


def encode_batch(token_lists: Sequence[Sequence[str]], vocab: Vocabulary, n_max: int) -> tuple[np.ndarray, np.ndarray]:
    """Stack encoded sequences into (forward, reverse) index matrices."""
    seqs = [encode(t, vocab, n_max) for t in token_lists]
    if not seqs:
        empty = np.zeros((0, n_max), dtype=np.int64)
        return empty, empty.copy()
    return np.stack([s.forward for s in seqs]), np.stack([s.reverse for s in seqs])


def read_corpus(path: str | Path) -> list[Report]:
    """Read a JSON-lines corpus with ``id``, ``text`` and integer ``label`` fields."""
    reports = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                reports.append(Report.from_text(str(obj["id"]), obj["text"], int(obj["label"])))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad corpus record ({exc})") from exc
    return reports


def write_corpus(reports: Iterable[Report], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in reports:
            fh.write(json.dumps({"id": r.id, "text": r.raw_text, "label": r.label}, ensure_ascii=False))
            fh.write("\n")

"""Shared-task data handling: articles, span labels, tokens and tags.

File formats (all UTF-8, offsets count Unicode characters, not bytes):

* article files: ``article<id>.txt``, raw text; character offsets in label
  files index into this text exactly.
* SI label / prediction rows: ``<article_id>\\t<begin>\\t<end>``
* TC label / prediction rows: ``<article_id>\\t<technique>\\t<begin>\\t<end>``
* label-set file: one technique name per line.

The tokenizer splits on Unicode whitespace and then splits every
non-alphanumeric character into its own token, so token offsets always
slice the original text to the token surface and every non-whitespace
character belongs to exactly one token.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import AlignmentError, ContractError, CorpusIOError, FormatError, SpanRangeError

_ARTICLE_RE = re.compile(r"^article(.+)\.txt$")

SENTENCE_TERMINATORS = ".!?"
# closing quotes/brackets that stay attached to the sentence they end
CLOSERS = set("\"'”’»)]}")


@dataclass(frozen=True)
class Article:
    id: str
    text: str


@dataclass(frozen=True)
class SpanAnnotation:
    article_id: str
    begin: int
    end: int
    technique: str | None = None


@dataclass(frozen=True)
class Token:
    surface: str
    begin: int
    end: int


@dataclass(frozen=True)
class Sentence:
    article_id: str
    begin: int
    end: int
    tokens: tuple[Token, ...]
    tags: tuple[int, ...] | None = None


@dataclass(frozen=True)
class TcSample:
    """One classification instance: a marked token sequence plus its labels.

    ``token_ids`` contains exactly two marker tokens surrounding the span;
    ``span_token_range`` is the half-open index interval of the in-span
    tokens within ``token_ids`` (markers excluded).
    """

    article_id: str
    begin: int
    end: int
    token_ids: tuple[int, ...]
    span_token_range: tuple[int, int]
    label_vector: tuple[int, ...]


def _article_sort_key(article_id: str):
    return (0, int(article_id), "") if article_id.isdigit() else (1, 0, article_id)


def load_articles(directory) -> list[Article]:
    """Read every ``article<id>.txt`` under ``directory``, sorted numerically by id."""
    directory = Path(directory)
    if not directory.is_dir():
        raise CorpusIOError(f"not a directory: {directory}")
    by_id: dict[str, Article] = {}
    for entry in directory.iterdir():
        m = _ARTICLE_RE.match(entry.name)
        if not m or not entry.is_file():
            continue
        article_id = m.group(1)
        if article_id in by_id:
            raise FormatError(f"duplicate article id {article_id!r} in {directory}")
        try:
            text = entry.read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            raise CorpusIOError(f"cannot read article file {entry}: {exc}") from exc
        by_id[article_id] = Article(id=article_id, text=text)
    return [by_id[k] for k in sorted(by_id, key=_article_sort_key)]


def load_span_labels(path, mode: str, label_set=None) -> list[SpanAnnotation]:
    """Parse a span TSV. ``mode`` is ``"si"`` (3 columns) or ``"tc"`` (4 columns)."""
    if mode not in ("si", "tc"):
        raise ContractError(f"mode must be 'si' or 'tc', got {mode!r}")
    path = Path(path)
    try:
        content = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise CorpusIOError(f"cannot read label file {path}: {exc}") from exc

    rows = []
    for lineno, line in enumerate(content.splitlines(), start=1):
        if not line.strip():
            continue
        cols = line.split("\t")
        want = 3 if mode == "si" else 4
        if len(cols) != want:
            raise FormatError(f"{path}: expected {want} columns for {mode}, "
                              f"got {len(cols)} at line {lineno}")
        if mode == "si":
            article_id, technique, b, e = cols[0], None, cols[1], cols[2]
        else:
            article_id, technique, b, e = cols[0], cols[1], cols[2], cols[3]
        try:
            begin, end = int(b), int(e)
        except ValueError:
            raise FormatError(f"{path}: non-integer offset at line {lineno}") from None
        if begin >= end:
            raise FormatError(f"{path}: begin ≥ end at line {lineno}")
        if begin < 0:
            raise FormatError(f"{path}: negative offset at line {lineno}")
        if technique is not None and label_set is not None and technique not in label_set:
            raise FormatError(f"{path}: unknown technique {technique!r} at line {lineno}")
        rows.append(SpanAnnotation(article_id=article_id, begin=begin, end=end,
                                   technique=technique))
    return rows


def write_span_labels(path, rows) -> None:
    lines = []
    for r in rows:
        if r.technique is None:
            lines.append(f"{r.article_id}\t{r.begin}\t{r.end}")
        else:
            lines.append(f"{r.article_id}\t{r.technique}\t{r.begin}\t{r.end}")
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def load_label_set(path) -> list[str]:
    try:
        content = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise CorpusIOError(f"cannot read label set {path}: {exc}") from exc
    names = [line.strip() for line in content.splitlines() if line.strip()]
    if len(names) != len(set(names)):
        raise FormatError(f"{path}: duplicate technique names")
    return names


def tokenize(text: str) -> list[Token]:
    """Whitespace split, then each non-alphanumeric character as its own token.

    Every offset pair slices ``text`` back to the surface, and the dropped
    inter-token characters are exactly the whitespace.
    """
    tokens = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
        elif ch.isalnum():
            j = i + 1
            while j < n and text[j].isalnum():
                j += 1
            tokens.append(Token(surface=text[i:j], begin=i, end=j))
            i = j
        else:
            tokens.append(Token(surface=ch, begin=i, end=i + 1))
            i += 1
    return tokens


def _sentence_boundaries(text: str) -> list[int]:
    bounds = []
    i, n = 0, len(text)
    while i < n:
        if text[i] in SENTENCE_TERMINATORS:
            j = i + 1
            while j < n and text[j] in CLOSERS:
                j += 1
            if j >= n or text[j].isspace():
                bounds.append(j)
                i = j
                continue
        i += 1
    if not bounds or bounds[-1] < n:
        bounds.append(n)
    return bounds


def split_sentences(article: Article) -> list[Sentence]:
    """Partition the article's tokens into sentences.

    A sentence ends after ``.``, ``!`` or ``?`` followed by whitespace;
    closing quotes or brackets immediately after the terminator stay with
    the sentence. Text without a terminator is a single sentence.
    """
    tokens = tokenize(article.text)
    if not tokens:
        return []
    sentences = []
    ti = 0
    for bound in _sentence_boundaries(article.text):
        group = []
        while ti < len(tokens) and tokens[ti].end <= bound:
            group.append(tokens[ti])
            ti += 1
        if group:
            sentences.append(Sentence(article_id=article.id, begin=group[0].begin,
                                      end=group[-1].end, tokens=tuple(group)))
    return sentences


def _overlaps(token: Token, begin: int, end: int) -> bool:
    return token.begin < end and begin < token.end


def project_spans_to_tags(sentences, spans, article_length: int) -> list[Sentence]:
    """Tag every token that overlaps any span with 1, the rest with 0.

    A span crossing a sentence boundary contributes positive tags to each
    sentence it touches, which is exactly how such spans get split.
    """
    for s in spans:
        if not (0 <= s.begin < s.end <= article_length):
            raise SpanRangeError(
                f"span ({s.begin}, {s.end}) outside article of length {article_length}")
    out = []
    for sent in sentences:
        tags = tuple(
            1 if any(_overlaps(tok, s.begin, s.end) for s in spans) else 0
            for tok in sent.tokens)
        out.append(replace(sent, tags=tags))
    return out


def tags_to_spans(sentence: Sentence, tags, text: str | None = None) -> list[SpanAnnotation]:
    """Turn a binary tag vector back into character spans.

    Each maximal run of 1-tags becomes one span from the first token's begin
    to the last token's end. Adjacent runs whose gap contains only whitespace
    are merged; with ``text`` absent, a gap is whitespace-only exactly when no
    token of this sequence lies inside it.
    """
    tokens = sentence.tokens
    tags = list(tags)
    if len(tags) != len(tokens):
        raise ContractError(f"{len(tags)} tags for {len(tokens)} tokens")
    if any(t not in (0, 1) for t in tags):
        raise ContractError("tags must be binary")

    runs = []  # (first_token_idx, last_token_idx)
    start = None
    for i, t in enumerate(tags):
        if t == 1 and start is None:
            start = i
        elif t == 0 and start is not None:
            runs.append((start, i - 1))
            start = None
    if start is not None:
        runs.append((start, len(tags) - 1))

    spans = []
    for first, last in runs:
        begin, end = tokens[first].begin, tokens[last].end
        if spans and _gap_is_whitespace(spans[-1], (first, last), tokens, text):
            prev = spans.pop()
            spans.append((prev[0], end, prev[2], last))
        else:
            spans.append((begin, end, first, last))
    return [SpanAnnotation(article_id=sentence.article_id, begin=b, end=e)
            for b, e, _, _ in spans]


def _gap_is_whitespace(prev, run, tokens, text):
    _, prev_end, _, prev_last = prev
    first = run[0]
    if text is not None:
        return text[prev_end:tokens[first].begin].isspace() or prev_end == tokens[first].begin
    return first == prev_last + 1


def spans_from_tagged_sentences(article: Article, tagged: list[Sentence]) -> list[SpanAnnotation]:
    """Collect SI predictions for one article, merging runs that continue
    across a sentence boundary (the inverse of span splitting)."""
    tokens, tags = [], []
    for sent in tagged:
        if sent.tags is None:
            raise ContractError(f"sentence at {sent.begin} has no tags")
        tokens.extend(sent.tokens)
        tags.extend(sent.tags)
    merged = Sentence(article_id=article.id, begin=0, end=len(article.text),
                      tokens=tuple(tokens))
    return tags_to_spans(merged, tags, text=article.text)


# ---------------------------------------------------------------------------
# vocabulary


class Vocabulary:
    """Bijective token-surface <-> id map with reserved control ids."""

    PAD, UNK, BOS, CLS, MASK, MARKER = range(6)
    RESERVED = ("<pad>", "<unk>", "<bos>", "<cls>", "<mask>", "<marker>")

    def __init__(self, surfaces):
        self._id_to_surface = list(self.RESERVED) + list(surfaces)
        self._surface_to_id = {s: i for i, s in enumerate(self._id_to_surface)}
        if len(self._surface_to_id) != len(self._id_to_surface):
            raise ContractError("vocabulary surfaces must be unique")

    @classmethod
    def from_corpus(cls, token_sequences, min_freq: int = 2) -> "Vocabulary":
        counts = Counter()
        for seq in token_sequences:
            counts.update(tok.surface for tok in seq)
        kept = sorted((s for s, c in counts.items() if c >= min_freq),
                      key=lambda s: (-counts[s], s))
        return cls(kept)

    def __len__(self):
        return len(self._id_to_surface)

    @property
    def size(self) -> int:
        return len(self._id_to_surface)

    @property
    def n_reserved(self) -> int:
        return len(self.RESERVED)

    def id(self, surface: str) -> int:
        return self._surface_to_id.get(surface, self.UNK)

    def surface(self, token_id: int) -> str:
        return self._id_to_surface[token_id]

    def encode(self, tokens) -> list[int]:
        return [self.id(t.surface if isinstance(t, Token) else t) for t in tokens]

    def learned_surfaces(self) -> list[str]:
        return self._id_to_surface[len(self.RESERVED):]


# ---------------------------------------------------------------------------
# technique-classification samples


def build_tc_samples(tokens, spans, vocab: Vocabulary, label_index: dict[str, int],
                     article_id: str | None = None) -> list[TcSample]:
    """One sample per distinct (begin, end) span group over a shared window.

    Markers go immediately before the first and after the last in-span token
    of that group's span only; groups with identical offsets union their
    technique labels into one sample.
    """
    tokens = list(tokens)
    k = len(label_index)
    groups: dict[tuple[int, int], list] = {}
    for s in spans:
        groups.setdefault((s.begin, s.end), []).append(s)

    samples = []
    for (begin, end) in sorted(groups):
        members = groups[(begin, end)]
        idxs = [i for i, tok in enumerate(tokens) if _overlaps(tok, begin, end)]
        if not idxs:
            raise AlignmentError(f"span ({begin}, {end}) maps to no token in window")
        first, last = idxs[0], idxs[-1]
        base = vocab.encode(tokens)
        ids = base[:first] + [vocab.MARKER] + base[first:last + 1] + [vocab.MARKER] + base[last + 1:]
        label_vector = [0] * k
        for s in members:
            if s.technique is not None:
                if s.technique not in label_index:
                    raise ContractError(f"technique {s.technique!r} not in label set")
                label_vector[label_index[s.technique]] = 1
        samples.append(TcSample(
            article_id=article_id if article_id is not None else members[0].article_id,
            begin=begin, end=end,
            token_ids=tuple(ids),
            span_token_range=(first + 1, last + 2),
            label_vector=tuple(label_vector)))
    return samples


def tc_samples_for_article(article: Article, sentences, spans, vocab: Vocabulary,
                           label_index: dict[str, int]) -> list[TcSample]:
    """Build TC samples using, for each span, the window of all sentences it
    overlaps; spans sharing a window share its unmarked text."""
    if not spans:
        return []
    windows: dict[tuple[int, int], list] = {}
    for s in spans:
        touched = [i for i, sent in enumerate(sentences)
                   if sent.begin < s.end and s.begin < sent.end]
        if not touched:
            raise AlignmentError(
                f"span ({s.begin}, {s.end}) of article {article.id} overlaps no sentence")
        windows.setdefault((touched[0], touched[-1]), []).append(s)

    samples = []
    for (lo, hi) in sorted(windows):
        window_tokens = [tok for sent in sentences[lo:hi + 1] for tok in sent.tokens]
        samples.extend(build_tc_samples(window_tokens, windows[(lo, hi)], vocab,
                                        label_index, article_id=article.id))
    samples.sort(key=lambda s: (s.begin, s.end))
    return samples

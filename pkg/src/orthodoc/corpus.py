"""Corpus ingestion: reading JSONL documents and cutting them into passages."""

from __future__ import annotations

import hashlib
import json
import re
import unicodedata
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Iterator

DEFAULT_MAX_CHUNK_TOKENS = 256
DEFAULT_OVERLAP_TOKENS = 32
STORE_SCHEMA_VERSION = 1

# Fixed English stopword list. Changing it changes every index, graph and
# grounding score, so treat edits as a schema change.
STOPWORDS = frozenset(
    """
    a about above after again against all am an and any are as at be because
    been before being below between both but by can could did do does doing
    down during each few for from further had has have having he her here hers
    herself him himself his how i if in into is it its itself just me more most
    my myself no nor not now of off on once only or other our ours ourselves out
    over own same she should so some such than that the their theirs them
    themselves then there these they this those through to too under until up
    very was we were what when where which while who whom why will with would
    you your yours yourself yourselves also may might must shall upon via per
    """.split()
)

# Runs of letters/digits, joined by single intra-word hyphens.
_TOKEN_RE = re.compile(r"[^\W_]+(?:-[^\W_]+)*")


class CorpusError(ValueError):
    """Raised for malformed corpus files or invalid chunking parameters."""


@dataclass(frozen=True)
class Document:
    doc_id: str
    title: str
    source: str
    text: str


@dataclass(frozen=True)
class Token:
    surface: str
    is_content: bool


@dataclass(frozen=True)
class Passage:
    passage_id: str
    doc_id: str
    ordinal: int
    text: str
    token_count: int


def normalize(text: str) -> str:
    return unicodedata.normalize("NFC", text)


def _token_spans(text: str) -> Iterator[tuple[int, int, str]]:
    for m in _TOKEN_RE.finditer(text):
        yield m.start(), m.end(), m.group().lower()


def tokenize(text: str) -> list[Token]:
    """Split ``text`` into lowercased tokens, keeping intra-word hyphens.

    Apostrophes and other punctuation act as separators, so ``"Colles'"``
    becomes ``colles``. Stopwords are kept but marked ``is_content=False``.
    """
    return [Token(s, s not in STOPWORDS) for _, _, s in _token_spans(normalize(text))]


def content_terms(text: str) -> list[str]:
    return [t.surface for t in tokenize(text) if t.is_content]


def content_set(text: str) -> frozenset[str]:
    return frozenset(content_terms(text))


def load_corpus(path: str | Path) -> list[Document]:
    """Read a JSONL corpus, one document object per line.

    Blank lines are ignored. Errors carry the 1-based line number; a
    duplicated ``doc_id`` names both lines.
    """
    path = Path(path)
    if not path.is_file():
        raise CorpusError(f"corpus file not found: {path}")
    docs: list[Document] = []
    seen: dict[str, int] = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                doc = Document(
                    doc_id=str(obj["doc_id"]),
                    title=str(obj.get("title", "")),
                    source=str(obj.get("source", "")),
                    text=str(obj["text"]),
                )
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CorpusError(f"{path}:{lineno}: malformed document line ({exc})") from exc
            if not doc.text.strip():
                raise CorpusError(f"{path}:{lineno}: document {doc.doc_id!r} has empty text")
            if doc.doc_id in seen:
                raise CorpusError(
                    f"{path}: duplicate doc_id {doc.doc_id!r} on lines {seen[doc.doc_id]} and {lineno}"
                )
            seen[doc.doc_id] = lineno
            docs.append(doc)
    return docs


def chunk_document(
    doc: Document,
    max_chunk_tokens: int = DEFAULT_MAX_CHUNK_TOKENS,
    overlap_tokens: int = DEFAULT_OVERLAP_TOKENS,
) -> list[Passage]:
    """Cut a document into sliding token windows.

    Windows start every ``max_chunk_tokens - overlap_tokens`` tokens. The
    walk stops after the first window that starts inside the final
    ``overlap_tokens`` tokens (or when the next start would run off the end),
    so every window but the last overlaps its predecessor by exactly
    ``overlap_tokens``. Passage text is the original (NFC) substring spanning
    the window, punctuation included.
    """
    if max_chunk_tokens < 1 or not 0 <= overlap_tokens < max_chunk_tokens:
        raise CorpusError(
            f"need 0 <= overlap_tokens < max_chunk_tokens, got {overlap_tokens}, {max_chunk_tokens}"
        )
    text = normalize(doc.text)
    spans = list(_token_spans(text))
    n = len(spans)
    stride = max_chunk_tokens - overlap_tokens
    passages = []
    start = 0
    while start < n:
        end = min(start + max_chunk_tokens, n)
        passages.append(
            Passage(
                passage_id=f"{doc.doc_id}#{len(passages)}",
                doc_id=doc.doc_id,
                ordinal=len(passages),
                text=text[spans[start][0] : spans[end - 1][1]],
                token_count=end - start,
            )
        )
        if start >= n - overlap_tokens:
            break
        start += stride
    return passages


def chunk_corpus(
    docs: Iterable[Document],
    max_chunk_tokens: int = DEFAULT_MAX_CHUNK_TOKENS,
    overlap_tokens: int = DEFAULT_OVERLAP_TOKENS,
) -> list[Passage]:
    out: list[Passage] = []
    for doc in docs:
        out.extend(chunk_document(doc, max_chunk_tokens, overlap_tokens))
    return out


def fingerprint(passages: Iterable[Passage]) -> str:
    h = hashlib.sha256()
    for p in passages:
        h.update(p.passage_id.encode("utf-8"))
        h.update(b"\x00")
        h.update(p.text.encode("utf-8"))
        h.update(b"\x01")
    return h.hexdigest()


@dataclass(frozen=True)
class Store:
    """An ingested, chunked corpus. Immutable once built."""

    documents: tuple[Document, ...]
    passages: tuple[Passage, ...]
    max_chunk_tokens: int = DEFAULT_MAX_CHUNK_TOKENS
    overlap_tokens: int = DEFAULT_OVERLAP_TOKENS

    @classmethod
    def build(cls, docs, max_chunk_tokens=DEFAULT_MAX_CHUNK_TOKENS, overlap_tokens=DEFAULT_OVERLAP_TOKENS):
        docs = tuple(docs)
        return cls(docs, tuple(chunk_corpus(docs, max_chunk_tokens, overlap_tokens)),
                   max_chunk_tokens, overlap_tokens)

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.passages)

    def passage(self, passage_id: str) -> Passage:
        return self._by_id[passage_id]

    def document(self, doc_id: str) -> Document:
        return self._docs_by_id[doc_id]

    def __contains__(self, passage_id: object) -> bool:
        return passage_id in self._by_id

    @property
    def _by_id(self) -> dict[str, Passage]:
        cache = self.__dict__.get("_pid_cache")
        if cache is None:
            cache = {p.passage_id: p for p in self.passages}
            object.__setattr__(self, "_pid_cache", cache)
        return cache

    @property
    def _docs_by_id(self) -> dict[str, Document]:
        cache = self.__dict__.get("_doc_cache")
        if cache is None:
            cache = {d.doc_id: d for d in self.documents}
            object.__setattr__(self, "_doc_cache", cache)
        return cache

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        _write_jsonl(directory / "documents.jsonl", (asdict(d) for d in self.documents))
        _write_jsonl(directory / "passages.jsonl", (asdict(p) for p in self.passages))
        meta = {
            "schema": "orthodoc.store",
            "version": STORE_SCHEMA_VERSION,
            "fingerprint": self.fingerprint,
            "max_chunk_tokens": self.max_chunk_tokens,
            "overlap_tokens": self.overlap_tokens,
            "documents": len(self.documents),
            "passages": len(self.passages),
        }
        (directory / "store.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory: str | Path) -> "Store":
        directory = Path(directory)
        meta_path = directory / "store.json"
        if not meta_path.is_file():
            raise CorpusError(f"not a corpus store (missing store.json): {directory}")
        meta = json.loads(meta_path.read_text())
        if meta.get("version") != STORE_SCHEMA_VERSION:
            raise CorpusError(f"unsupported store version {meta.get('version')!r}")
        docs = tuple(Document(**o) for o in _read_jsonl(directory / "documents.jsonl"))
        passages = tuple(Passage(**o) for o in _read_jsonl(directory / "passages.jsonl"))
        store = cls(docs, passages, meta["max_chunk_tokens"], meta["overlap_tokens"])
        if store.fingerprint != meta["fingerprint"]:
            raise CorpusError(f"store fingerprint mismatch in {directory}")
        return store


def _write_jsonl(path: Path, rows) -> None:
    with path.open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def _read_jsonl(path: Path) -> list[dict]:
    with path.open(encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]

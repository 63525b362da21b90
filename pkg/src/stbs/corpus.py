"""Corpus ingestion, filtering, and design-matrix construction.

Counts are kept as sorted (doc, term, count) triplets with implicit zeros.
Covariates are categorical with a declared baseline per column; formulas
expand to a treatment-coded 0/1 design matrix with a leading intercept.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import CorpusError, FormulaError


@dataclass(frozen=True)
class DocTermMatrix:
    """Sparse D x V count matrix with a document -> author map.

    Entries are parallel arrays sorted by (doc, term); counts are >= 1 and
    each (doc, term) pair appears at most once.
    """

    num_docs: int
    num_terms: int
    num_authors: int
    doc_idx: np.ndarray
    term_idx: np.ndarray
    counts: np.ndarray
    doc_author: np.ndarray
    vocab: list[str] | None = None

    def __post_init__(self):
        doc_idx = np.asarray(self.doc_idx, dtype=np.int64)
        term_idx = np.asarray(self.term_idx, dtype=np.int64)
        counts = np.asarray(self.counts, dtype=np.int64)
        doc_author = np.asarray(self.doc_author, dtype=np.int64)
        if not (len(doc_idx) == len(term_idx) == len(counts)):
            raise CorpusError("entry arrays must have equal length")
        order = np.lexsort((term_idx, doc_idx))
        doc_idx, term_idx, counts = doc_idx[order], term_idx[order], counts[order]
        if np.any(counts <= 0):
            raise CorpusError("counts must be >= 1 (zeros are implicit)")
        if len(doc_idx) and (doc_idx.min() < 0 or doc_idx.max() >= self.num_docs):
            raise CorpusError("document index out of range")
        if len(term_idx) and (term_idx.min() < 0 or term_idx.max() >= self.num_terms):
            raise CorpusError("term index out of range")
        if len(doc_idx) > 1:
            same = (np.diff(doc_idx) == 0) & (np.diff(term_idx) == 0)
            if same.any():
                d = int(doc_idx[1:][same][0])
                t = int(term_idx[1:][same][0])
                raise CorpusError(f"duplicate (doc, term) pair ({d}, {t})")
        if doc_author.shape != (self.num_docs,):
            raise CorpusError("doc_author must assign an author to every document")
        if self.num_docs and (doc_author.min() < 0 or doc_author.max() >= self.num_authors):
            raise CorpusError("author index out of range")
        if self.vocab is not None and len(self.vocab) != self.num_terms:
            raise CorpusError("vocab length must equal num_terms")
        object.__setattr__(self, "doc_idx", doc_idx)
        object.__setattr__(self, "term_idx", term_idx)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "doc_author", doc_author)

    @property
    def nnz(self) -> int:
        return len(self.counts)

    @property
    def total_count(self) -> int:
        return int(self.counts.sum())

    def doc_indptr(self) -> np.ndarray:
        """CSR-style row pointer over the sorted entries."""
        return np.searchsorted(self.doc_idx, np.arange(self.num_docs + 1))

    def doc_totals(self) -> np.ndarray:
        out = np.zeros(self.num_docs, dtype=np.int64)
        np.add.at(out, self.doc_idx, self.counts)
        return out

    def docs_per_author(self) -> np.ndarray:
        return np.bincount(self.doc_author, minlength=self.num_authors)

    def dense(self) -> np.ndarray:
        out = np.zeros((self.num_docs, self.num_terms), dtype=np.int64)
        out[self.doc_idx, self.term_idx] = self.counts
        return out


def _parse_int(value: str, what: str, lineno: int) -> int:
    try:
        return int(value)
    except ValueError:
        raise CorpusError(f"line {lineno}: cannot parse {what} from {value!r}") from None


def load_counts(path, doc_author=None, num_authors=None, vocab=None) -> DocTermMatrix:
    """Read a `doc_id,term_id,count` CSV.  Without an explicit author map
    every document is assigned to a single author 0."""
    docs, terms, counts = [], [], []
    seen = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["doc_id", "term_id", "count"]:
            raise CorpusError(f"{path}: expected header 'doc_id,term_id,count'")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise CorpusError(f"line {lineno}: expected 3 fields, got {len(row)}")
            d = _parse_int(row[0], "doc_id", lineno)
            t = _parse_int(row[1], "term_id", lineno)
            c = _parse_int(row[2], "count", lineno)
            if d < 0 or t < 0:
                raise CorpusError(f"line {lineno}: negative index")
            if c <= 0:
                raise CorpusError(f"line {lineno}: count must be >= 1, got {c}")
            if (d, t) in seen:
                raise CorpusError(f"line {lineno}: duplicate (doc, term) pair ({d}, {t})")
            seen.add((d, t))
            docs.append(d)
            terms.append(t)
            counts.append(c)
    if not docs:
        raise CorpusError(f"{path}: no non-empty documents")
    num_docs = max(docs) + 1
    num_terms = max(terms) + 1
    if doc_author is None:
        doc_author = np.zeros(num_docs, dtype=np.int64)
        num_authors = 1
    else:
        doc_author = np.asarray(doc_author, dtype=np.int64)
        if len(doc_author) < num_docs:
            raise CorpusError("author map does not cover every document in the counts file")
        num_docs = len(doc_author)
        if num_authors is None:
            num_authors = int(doc_author.max()) + 1
    return DocTermMatrix(num_docs, num_terms, num_authors,
                         np.array(docs), np.array(terms), np.array(counts),
                         doc_author, vocab)


def load_authors(path) -> np.ndarray:
    """Read a `doc_id,author_id` CSV into a dense doc -> author array."""
    pairs = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["doc_id", "author_id"]:
            raise CorpusError(f"{path}: expected header 'doc_id,author_id'")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise CorpusError(f"line {lineno}: expected 2 fields, got {len(row)}")
            d = _parse_int(row[0], "doc_id", lineno)
            a = _parse_int(row[1], "author_id", lineno)
            if d in pairs:
                raise CorpusError(f"line {lineno}: duplicate doc_id {d}")
            pairs[d] = a
    if not pairs:
        raise CorpusError(f"{path}: empty authors file")
    num_docs = max(pairs) + 1
    if len(pairs) != num_docs:
        missing = next(d for d in range(num_docs) if d not in pairs)
        raise CorpusError(f"{path}: no author assigned to document {missing}")
    return np.array([pairs[d] for d in range(num_docs)], dtype=np.int64)


def load_vocab(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh]


def load_corpus(counts_path, authors_path, vocab_path=None) -> DocTermMatrix:
    doc_author = load_authors(authors_path)
    vocab = load_vocab(vocab_path) if vocab_path else None
    return load_counts(counts_path, doc_author=doc_author, vocab=vocab)


def write_counts(m: DocTermMatrix, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["doc_id", "term_id", "count"])
        for d, t, c in zip(m.doc_idx, m.term_idx, m.counts):
            writer.writerow([int(d), int(t), int(c)])


def write_authors(m: DocTermMatrix, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["doc_id", "author_id"])
        for d in range(m.num_docs):
            writer.writerow([d, int(m.doc_author[d])])


# ---------------------------------------------------------------------------
# corpus filters


def apply_corpus_filters(m: DocTermMatrix,
                         min_doc_frac: float = 0.001,
                         max_doc_frac: float = 0.30,
                         min_authors_per_term: int = 10,
                         min_docs_per_author: int = 24) -> DocTermMatrix:
    """Filter terms by document-frequency band and author spread, then drop
    low-volume authors and empty documents, and compact all indices.

    The four passes run in that fixed order and the cycle repeats until
    nothing changes, so the result is a fixed point (applying the filters
    twice equals applying them once).
    """
    if not 0.0 <= min_doc_frac < max_doc_frac <= 1.0:
        raise CorpusError("need 0 <= min_doc_frac < max_doc_frac <= 1")
    doc_alive = np.ones(m.num_docs, dtype=bool)
    term_alive = np.ones(m.num_terms, dtype=bool)
    author_alive = np.ones(m.num_authors, dtype=bool)

    while True:
        before = (doc_alive.sum(), term_alive.sum(), author_alive.sum())
        entry_alive = doc_alive[m.doc_idx] & term_alive[m.term_idx]

        # 1. document-frequency band
        n_docs = int(doc_alive.sum())
        if n_docs == 0:
            raise CorpusError("empty corpus after filtering")
        df = np.zeros(m.num_terms, dtype=np.int64)
        np.add.at(df, m.term_idx[entry_alive], 1)
        frac = df / n_docs
        term_alive &= (frac >= min_doc_frac) & (frac <= max_doc_frac)
        entry_alive = doc_alive[m.doc_idx] & term_alive[m.term_idx]

        # 2. author spread per term
        pairs = np.unique(np.stack([m.term_idx[entry_alive],
                                    m.doc_author[m.doc_idx[entry_alive]]]), axis=1)
        spread = np.zeros(m.num_terms, dtype=np.int64)
        np.add.at(spread, pairs[0], 1)
        term_alive &= spread >= min_authors_per_term
        entry_alive = doc_alive[m.doc_idx] & term_alive[m.term_idx]

        # 3. author speech count (documents still present, even if empty)
        per_author = np.zeros(m.num_authors, dtype=np.int64)
        np.add.at(per_author, m.doc_author[doc_alive], 1)
        author_alive &= per_author >= min_docs_per_author
        doc_alive &= author_alive[m.doc_author]
        entry_alive = doc_alive[m.doc_idx] & term_alive[m.term_idx]

        # 4. drop empty documents
        totals = np.zeros(m.num_docs, dtype=np.int64)
        np.add.at(totals, m.doc_idx[entry_alive], m.counts[entry_alive])
        doc_alive &= totals > 0

        after = (doc_alive.sum(), term_alive.sum(), author_alive.sum())
        if after == before:
            break

    entry_alive = doc_alive[m.doc_idx] & term_alive[m.term_idx]
    if not doc_alive.any() or not entry_alive.any():
        raise CorpusError("empty corpus after filtering")

    # compact indices: keep docs alive, terms with surviving entries,
    # authors with surviving documents
    term_used = np.zeros(m.num_terms, dtype=bool)
    term_used[m.term_idx[entry_alive]] = True
    author_used = np.zeros(m.num_authors, dtype=bool)
    author_used[m.doc_author[doc_alive]] = True

    new_doc = np.cumsum(doc_alive) - 1
    new_term = np.cumsum(term_used) - 1
    new_author = np.cumsum(author_used) - 1

    vocab = None
    if m.vocab is not None:
        vocab = [m.vocab[t] for t in range(m.num_terms) if term_used[t]]
    return DocTermMatrix(
        num_docs=int(doc_alive.sum()),
        num_terms=int(term_used.sum()),
        num_authors=int(author_used.sum()),
        doc_idx=new_doc[m.doc_idx[entry_alive]],
        term_idx=new_term[m.term_idx[entry_alive]],
        counts=m.counts[entry_alive],
        doc_author=new_author[m.doc_author[doc_alive]],
        vocab=vocab,
    )


# ---------------------------------------------------------------------------
# covariates and design matrices


@dataclass(frozen=True)
class Covariate:
    """One categorical column: a label per author plus a declared baseline."""

    name: str
    labels: tuple[str, ...]
    baseline: str

    def __post_init__(self):
        if self.baseline not in self.labels:
            raise CorpusError(f"baseline {self.baseline!r} does not occur in column {self.name!r}")

    @property
    def levels(self) -> list[str]:
        """Unique labels in order of first appearance."""
        seen = []
        for lab in self.labels:
            if lab not in seen:
                seen.append(lab)
        return seen

    @property
    def nonbaseline_levels(self) -> list[str]:
        return [lev for lev in self.levels if lev != self.baseline]


@dataclass(frozen=True)
class CovariateTable:
    num_authors: int
    columns: tuple[Covariate, ...]

    def __post_init__(self):
        for col in self.columns:
            if len(col.labels) != self.num_authors:
                raise CorpusError(f"column {col.name!r} must have one label per author")

    def column(self, name: str) -> Covariate:
        for col in self.columns:
            if col.name == name:
                return col
        raise FormulaError(f"unknown covariate {name!r}")


def load_covariates(path, baselines: dict[str, str]) -> CovariateTable:
    """Read `author_id,<col>,...` CSV; `baselines` declares the reference
    level for every column."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[0].strip() != "author_id":
            raise CorpusError(f"{path}: expected header starting with 'author_id'")
        names = [h.strip() for h in header[1:]]
        rows = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(names) + 1:
                raise CorpusError(f"line {lineno}: expected {len(names) + 1} fields")
            a = _parse_int(row[0], "author_id", lineno)
            if a in rows:
                raise CorpusError(f"line {lineno}: duplicate author_id {a}")
            rows[a] = [v.strip() for v in row[1:]]
    if not rows:
        raise CorpusError(f"{path}: empty covariates file")
    num_authors = max(rows) + 1
    if len(rows) != num_authors:
        missing = next(a for a in range(num_authors) if a not in rows)
        raise CorpusError(f"{path}: no covariates for author {missing}")
    columns = []
    for j, name in enumerate(names):
        if name not in baselines:
            raise CorpusError(f"no baseline declared for covariate {name!r}")
        labels = tuple(rows[a][j] for a in range(num_authors))
        columns.append(Covariate(name, labels, baselines[name]))
    return CovariateTable(num_authors, tuple(columns))


def write_covariates(table: CovariateTable, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["author_id"] + [c.name for c in table.columns])
        for a in range(table.num_authors):
            writer.writerow([a] + [c.labels[a] for c in table.columns])


@dataclass(frozen=True)
class DesignMatrix:
    """A x L treatment-coded 0/1 matrix with a leading intercept column.

    `term_groups` maps each covariate (and each interaction block) to the
    indices of its columns, for joint coverage tests.
    """

    matrix: np.ndarray
    column_names: tuple[str, ...]
    term_groups: dict[str, tuple[int, ...]]

    def __post_init__(self):
        mat = np.asarray(self.matrix, dtype=np.float64)
        if mat.ndim != 2 or mat.shape[1] != len(self.column_names):
            raise CorpusError("design matrix shape does not match column names")
        if not np.all(mat[:, 0] == 1.0):
            raise CorpusError("first design column must be the intercept")
        seen = set()
        for name, idx in self.term_groups.items():
            for j in idx:
                if j == 0 or j >= mat.shape[1]:
                    raise CorpusError(f"group {name!r} references an invalid column")
                if j in seen:
                    raise CorpusError(f"column {j} belongs to more than one group")
                seen.add(j)
        if seen != set(range(1, mat.shape[1])):
            raise CorpusError("every non-intercept column must belong to exactly one group")
        object.__setattr__(self, "matrix", mat)

    @property
    def num_authors(self) -> int:
        return self.matrix.shape[0]

    @property
    def num_coefs(self) -> int:
        return self.matrix.shape[1]

    def zero_columns(self) -> np.ndarray:
        """Indices of all-zero columns (empty interaction cells)."""
        return np.flatnonzero(~self.matrix.any(axis=0))


_NAME = r"[A-Za-z_][A-Za-z0-9_]*"


def parse_formula(formula: str) -> list[tuple]:
    """Parse `~ term (+ term)*` where a term is a column name or
    `col1 * (col2 + col3 + ...)`.  Returns ('main', name) and
    ('interaction', name, [names]) items in order."""
    body = formula.strip()
    if not body.startswith("~"):
        raise FormulaError("formula must start with '~'")
    body = body[1:].strip()
    if not body:
        raise FormulaError("empty formula")
    terms, depth, cur = [], 0, []
    for ch in body:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
            if depth < 0:
                raise FormulaError("unbalanced parentheses")
        if ch == "+" and depth == 0:
            terms.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    if depth != 0:
        raise FormulaError("unbalanced parentheses")
    terms.append("".join(cur))

    parsed = []
    for term in terms:
        term = term.strip()
        if re.fullmatch(_NAME, term):
            parsed.append(("main", term))
            continue
        inter = re.fullmatch(rf"({_NAME})\s*\*\s*\((.*)\)", term, flags=re.S)
        if inter is None:
            raise FormulaError(f"cannot parse term {term!r}")
        main = inter.group(1)
        others = [p.strip() for p in inter.group(2).split("+")]
        if not others or any(not re.fullmatch(_NAME, p) for p in others):
            raise FormulaError(f"cannot parse interaction list in {term!r}")
        parsed.append(("interaction", main, others))
    return parsed


def build_design_matrix(table: CovariateTable, formula: str) -> DesignMatrix:
    """Treatment-code `formula` against the declared baselines.

    Interaction columns are elementwise products of their parent indicator
    columns; all-zero columns from empty cells are retained."""
    parsed = parse_formula(formula)
    num_authors = table.num_authors

    def indicator(col: Covariate, level: str) -> np.ndarray:
        return np.array([1.0 if lab == level else 0.0 for lab in col.labels])

    columns = [np.ones(num_authors)]
    names = ["(intercept)"]
    groups: dict[str, list[int]] = {}
    added_mains: set[str] = set()

    def add_main(name: str) -> None:
        if name in added_mains:
            return
        col = table.column(name)
        added_mains.add(name)
        idx = []
        for level in col.nonbaseline_levels:
            idx.append(len(columns))
            columns.append(indicator(col, level))
            names.append(f"{name}[{level}]")
        if idx:
            groups[name] = idx

    for term in parsed:
        if term[0] == "main":
            add_main(term[1])
        else:
            _, main, others = term
            add_main(main)
            for other in others:
                add_main(other)
            main_col = table.column(main)
            for other in others:
                other_col = table.column(other)
                idx = []
                for lev1 in main_col.nonbaseline_levels:
                    left = indicator(main_col, lev1)
                    for lev2 in other_col.nonbaseline_levels:
                        idx.append(len(columns))
                        columns.append(left * indicator(other_col, lev2))
                        names.append(f"{main}[{lev1}]:{other}[{lev2}]")
                if idx:
                    groups[f"{main}:{other}"] = idx

    matrix = np.column_stack(columns)
    return DesignMatrix(matrix, tuple(names),
                        {k: tuple(v) for k, v in groups.items()})

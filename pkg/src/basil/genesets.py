"""
Binary gene-set membership matrices: file parsing, size filtering and
alignment with the gene order of an expression matrix.

Two on-disk layouts are supported:

dense-csv
    header row holds set ids, first column holds gene ids, cells are 0/1
triplet-tsv
    ``gene_id<TAB>set_id`` per line, ``#`` starts a comment
"""

from __future__ import annotations

import csv
import gzip
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    AllSetsFiltered,
    DimensionMismatch,
    DuplicateGeneId,
    EmptyIntersection,
    MissingGenes,
    NonBinaryEntry,
    ParseError,
    ValidationError,
)
from .matrixcore import DataMatrix

log = logging.getLogger(__name__)

DEFAULT_MIN_GENES = 10


@dataclass(frozen=True)
class GeneSetMatrix:
    membership: np.ndarray
    gene_ids: tuple
    set_ids: tuple

    def __post_init__(self):
        m = np.asarray(self.membership)
        if m.ndim != 2:
            raise ValidationError("membership must be a 2-d array")
        if not np.all((m == 0) | (m == 1)):
            raise NonBinaryEntry("membership entries must be 0 or 1")
        gene_ids = tuple(str(g) for g in self.gene_ids)
        set_ids = tuple(str(s) for s in self.set_ids)
        if len(gene_ids) != m.shape[0] or len(set_ids) != m.shape[1]:
            raise DimensionMismatch(
                f"ids ({len(gene_ids)} genes, {len(set_ids)} sets) do not match a {m.shape} matrix"
            )
        if len(set(gene_ids)) != len(gene_ids):
            raise DuplicateGeneId("duplicate gene ids in gene-set matrix")
        if len(set(set_ids)) != len(set_ids):
            raise ValidationError("duplicate set ids in gene-set matrix")
        object.__setattr__(self, "membership", m.astype(np.float64))
        object.__setattr__(self, "gene_ids", gene_ids)
        object.__setattr__(self, "set_ids", set_ids)

    @classmethod
    def from_array(cls, membership, gene_ids=None, set_ids=None):
        membership = np.asarray(membership)
        p, q = membership.shape
        if gene_ids is None:
            gene_ids = [f"g{j}" for j in range(p)]
        if set_ids is None:
            set_ids = [f"set{l}" for l in range(q)]
        return cls(membership, tuple(gene_ids), tuple(set_ids))

    @property
    def n_genes(self):
        return self.membership.shape[0]

    @property
    def n_sets(self):
        return self.membership.shape[1]

    @property
    def set_sizes(self):
        return self.membership.sum(axis=0)

    def select_genes(self, gene_ids):
        index = {g: j for j, g in enumerate(self.gene_ids)}
        rows = [index[g] for g in gene_ids]
        return GeneSetMatrix(self.membership[rows], tuple(gene_ids), self.set_ids)


@dataclass
class FilterReport:
    min_genes: int
    removed_sets: list = field(default_factory=list)
    removed_genes: list = field(default_factory=list)

    @property
    def n_removed_sets(self):
        return len(self.removed_sets)

    @property
    def n_removed_genes(self):
        return len(self.removed_genes)


def _parse_binary(cell, path, line, column):
    text = cell.strip()
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"non-numeric entry {text!r}", path, line, column) from None
    if value not in (0.0, 1.0):
        raise NonBinaryEntry(f"entry {text!r} is not 0 or 1", path, line, column)
    return value


def _open_text(path):
    if Path(path).suffix.lower() == ".gz":
        return gzip.open(path, "rt", newline="")
    return open(path, newline="")


def _load_dense_csv(path):
    with _open_text(path) as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", path, 1) from None
        set_ids = [h.strip() for h in header[1:]]
        gene_ids, rows = [], []
        seen = set()
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(
                    f"expected {len(header)} fields, found {len(row)}", path, line
                )
            gene = row[0].strip()
            if gene in seen:
                raise DuplicateGeneId(f"{path}, line {line}: duplicate gene id {gene!r}")
            seen.add(gene)
            gene_ids.append(gene)
            rows.append([_parse_binary(c, path, line, j + 2) for j, c in enumerate(row[1:])])
    if not gene_ids:
        raise ParseError("no gene rows", path)
    return GeneSetMatrix(np.array(rows, dtype=float), tuple(gene_ids), tuple(set_ids))


def _load_triplets(path):
    genes, sets = {}, {}
    pairs = set()
    with _open_text(path) as fh:
        for line, raw in enumerate(fh, start=1):
            text = raw.split("#", 1)[0].strip()
            if not text:
                continue
            parts = text.split("\t")
            if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
                raise ParseError("expected 'gene_id<TAB>set_id'", path, line)
            g, s = parts[0].strip(), parts[1].strip()
            gi = genes.setdefault(g, len(genes))
            si = sets.setdefault(s, len(sets))
            pairs.add((gi, si))
    if not pairs:
        raise ParseError("no memberships found", path)
    membership = np.zeros((len(genes), len(sets)))
    rows, cols = zip(*pairs)
    membership[list(rows), list(cols)] = 1.0
    return GeneSetMatrix(membership, tuple(genes), tuple(sets))


def load_gene_sets(path, format=None) -> GeneSetMatrix:
    """Read a gene-set matrix from ``path``.

    ``format`` is ``"dense-csv"`` or ``"triplet-tsv"``; when omitted it is
    guessed from the extension: .tsv, .txt and .tab mean triplets, anything
    else dense CSV. A trailing .gz is decompressed on the fly.
    """
    path = Path(path)
    if format is None:
        stem = path.with_suffix("") if path.suffix.lower() == ".gz" else path
        format = "triplet-tsv" if stem.suffix.lower() in (".tsv", ".txt", ".tab") else "dense-csv"
    if format == "dense-csv":
        return _load_dense_csv(path)
    if format == "triplet-tsv":
        return _load_triplets(path)
    raise ValidationError(f"unknown gene-set format {format!r}")


def write_gene_sets(C: GeneSetMatrix, path):
    """Write ``C`` in the dense-csv layout."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["gene_id", *C.set_ids])
        for g, row in zip(C.gene_ids, C.membership.astype(int)):
            writer.writerow([g, *row.tolist()])


def filter_gene_sets(C: GeneSetMatrix, min_genes=DEFAULT_MIN_GENES, drop_unannotated_genes=False):
    """Drop sets with fewer than ``min_genes`` members.

    Returns the filtered matrix and a ``FilterReport``. With
    ``drop_unannotated_genes`` the genes left without any membership are
    removed too.
    """
    if min_genes < 1:
        raise ValidationError("min_genes must be at least 1")
    report = FilterReport(min_genes=min_genes)
    keep = C.set_sizes >= min_genes
    if not keep.any():
        raise AllSetsFiltered(f"no gene set has at least {min_genes} genes")
    report.removed_sets = [s for s, k in zip(C.set_ids, keep) if not k]
    membership = C.membership[:, keep]
    set_ids = tuple(s for s, k in zip(C.set_ids, keep) if k)
    gene_ids = C.gene_ids
    if drop_unannotated_genes:
        annotated = membership.sum(axis=1) > 0
        report.removed_genes = [g for g, a in zip(gene_ids, annotated) if not a]
        membership = membership[annotated]
        gene_ids = tuple(g for g, a in zip(gene_ids, annotated) if a)
    if report.removed_sets or report.removed_genes:
        log.info(
            "filtered %d gene sets and %d genes", report.n_removed_sets, report.n_removed_genes
        )
    return GeneSetMatrix(membership, gene_ids, set_ids), report


def align_genes(Y: DataMatrix, C: GeneSetMatrix, policy="intersect"):
    """Put ``Y`` and ``C`` on one gene sequence, sorted by gene id.

    ``intersect`` keeps genes present on both sides. ``require-superset``
    requires every expression gene to appear in ``C`` (extra catalog genes
    are dropped).
    """
    y_genes, c_genes = set(Y.gene_ids), set(C.gene_ids)
    if policy == "intersect":
        common = sorted(y_genes & c_genes)
        dropped = len(y_genes) + len(c_genes) - 2 * len(common)
        if dropped:
            log.info(
                "align_genes: dropped %d expression-only and %d catalog-only genes",
                len(y_genes - c_genes),
                len(c_genes - y_genes),
            )
    elif policy == "require-superset":
        missing = sorted(y_genes - c_genes)
        if missing:
            raise MissingGenes(missing)
        common = sorted(y_genes)
    else:
        raise ValidationError(f"unknown alignment policy {policy!r}")
    if not common:
        raise EmptyIntersection("expression and gene-set matrices share no gene ids")
    return Y.select_genes(common), C.select_genes(common)

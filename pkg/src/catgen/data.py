"""Expression matrices and the preprocessing protocol.

Matrices are stored dense, genes x observations, with string identifiers on
both axes. The on-disk format is UTF-8 CSV/TSV with header
``gene_id,<obs1>,<obs2>,...`` and one row per gene. All operations are pure:
they return new matrices and never mutate their inputs.

The preparation pipeline for a paired dataset is: quality-control filter on
observations, per-observation library-size normalization, highly-variable
gene selection per modality, then intersection of the surviving gene sets
(spatial genes must be covered by the single-cell reference).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DataFormatError,
    DegenerateInputError,
    EmptyResultError,
    ShapeMismatchError,
)

ST = "ST"
SC = "SC"


@dataclass
class ExpressionMatrix:
    """Nonnegative expression values for ``n_genes`` genes over ``n_obs`` spots or cells."""

    gene_ids: list[str]
    obs_ids: list[str]
    values: np.ndarray  # (n_genes, n_obs) float64
    modality: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.modality not in (ST, SC):
            raise ShapeMismatchError(f"modality must be ST or SC, got {self.modality!r}")
        if self.values.ndim != 2:
            raise ShapeMismatchError(f"values must be 2-D, got shape {self.values.shape}")
        if len(self.gene_ids) != self.values.shape[0]:
            raise ShapeMismatchError(
                f"{len(self.gene_ids)} gene ids vs {self.values.shape[0]} rows"
            )
        if len(self.obs_ids) != self.values.shape[1]:
            raise ShapeMismatchError(
                f"{len(self.obs_ids)} observation ids vs {self.values.shape[1]} columns"
            )
        if len(set(self.gene_ids)) != len(self.gene_ids):
            raise DataFormatError("duplicate gene ids")
        if len(set(self.obs_ids)) != len(self.obs_ids):
            raise DataFormatError("duplicate observation ids")
        if not np.isfinite(self.values).all():
            raise DataFormatError("matrix contains NaN or Inf")
        if (self.values < 0).any():
            raise DataFormatError("matrix contains negative expression values")

    @property
    def n_genes(self) -> int:
        return self.values.shape[0]

    @property
    def n_obs(self) -> int:
        return self.values.shape[1]

    def gene_index(self) -> dict[str, int]:
        return {g: i for i, g in enumerate(self.gene_ids)}

    def subset_genes(self, indices) -> "ExpressionMatrix":
        indices = list(indices)
        return ExpressionMatrix(
            gene_ids=[self.gene_ids[i] for i in indices],
            obs_ids=list(self.obs_ids),
            values=self.values[indices].copy(),
            modality=self.modality,
        )

    def subset_obs(self, indices) -> "ExpressionMatrix":
        indices = list(indices)
        return ExpressionMatrix(
            gene_ids=list(self.gene_ids),
            obs_ids=[self.obs_ids[i] for i in indices],
            values=self.values[:, indices].copy(),
            modality=self.modality,
        )


def _delimiter(fmt: str) -> str:
    if fmt == "csv":
        return ","
    if fmt == "tsv":
        return "\t"
    raise DataFormatError(f"unknown matrix format {fmt!r}")


def load_matrix(path, fmt: str = "csv", modality: str = ST) -> ExpressionMatrix:
    """Read a gene x observation matrix from a delimited text file.

    The first row holds observation ids (first cell is a label for the gene
    column and is ignored); each following row is a gene id followed by its
    expression values. Ragged rows, non-numeric cells and duplicate ids are
    reported with their position.
    """
    delim = _delimiter(fmt)
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except OSError as exc:
        raise DataFormatError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh, delimiter=delim)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        obs_ids = [h.strip() for h in header[1:]]
        if not obs_ids:
            raise DataFormatError(f"{path}: header has no observation columns")
        gene_ids: list[str] = []
        rows: list[np.ndarray] = []
        seen: set[str] = set()
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            gene = row[0].strip()
            if gene in seen:
                raise DataFormatError(f"{path}: duplicate gene id {gene!r} at row {lineno}")
            seen.add(gene)
            cells = row[1:]
            if len(cells) != len(obs_ids):
                raise DataFormatError(
                    f"{path}: row {lineno} has {len(cells)} values, expected {len(obs_ids)}"
                )
            parsed = np.empty(len(cells), dtype=np.float64)
            for j, cell in enumerate(cells):
                try:
                    parsed[j] = float(cell)
                except ValueError:
                    raise DataFormatError(
                        f"{path}: non-numeric cell {cell!r} at row {lineno}, column {j + 2}"
                    ) from None
            gene_ids.append(gene)
            rows.append(parsed)
    if not rows:
        raise DataFormatError(f"{path}: no gene rows")
    return ExpressionMatrix(
        gene_ids=gene_ids, obs_ids=obs_ids, values=np.vstack(rows), modality=modality
    )


def save_matrix(m: ExpressionMatrix, path, fmt: str = "csv") -> None:
    delim = _delimiter(fmt)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter=delim, lineterminator="\n")
        writer.writerow(["gene_id", *m.obs_ids])
        for gene, row in zip(m.gene_ids, m.values):
            writer.writerow([gene, *(repr(float(x)) for x in row)])


def qc_filter(
    m: ExpressionMatrix, min_genes_sc: int = 500, min_genes_st: int = 1
) -> ExpressionMatrix:
    """Drop observations detecting too few genes; the gene set is unchanged."""
    threshold = min_genes_sc if m.modality == SC else min_genes_st
    detected = (m.values > 0).sum(axis=0)
    keep = np.flatnonzero(detected >= threshold)
    if keep.size == 0:
        raise EmptyResultError(
            f"qc_filter removed every {m.modality} observation (threshold {threshold})"
        )
    if keep.size == m.n_obs:
        return m.subset_obs(range(m.n_obs))
    return m.subset_obs(keep)


def normalize(m: ExpressionMatrix) -> ExpressionMatrix:
    """Library-size normalization: log(N * count / obs_total + 1), natural log.

    N is the median total count per observation (midpoint of the two central
    values when the observation count is even). Every observation must have a
    positive total, which qc_filter guarantees.
    """
    totals = m.values.sum(axis=0)
    if (totals <= 0).any():
        bad = m.obs_ids[int(np.argmax(totals <= 0))]
        raise DegenerateInputError(f"observation {bad!r} has zero total count")
    n_median = float(np.median(totals))
    scaled = m.values * (n_median / totals)
    return ExpressionMatrix(
        gene_ids=list(m.gene_ids),
        obs_ids=list(m.obs_ids),
        values=np.log1p(scaled),
        modality=m.modality,
    )


def select_hvg(m: ExpressionMatrix, top_fraction: float = 0.25) -> ExpressionMatrix:
    """Keep the ceil(top_fraction * n_genes) most variable genes, input order preserved.

    Variance is the population variance across observations; ties at the cut
    keep the gene with the smaller original index.
    """
    if not 0.0 < top_fraction <= 1.0:
        raise ShapeMismatchError(f"top_fraction must be in (0, 1], got {top_fraction}")
    variances = m.values.var(axis=1)
    k = math.ceil(top_fraction * m.n_genes)
    ranked = np.argsort(-variances, kind="stable")  # stable sort breaks ties by index
    keep = np.sort(ranked[:k])
    return m.subset_genes(keep)


@dataclass(frozen=True)
class SplitAssignment:
    """Disjoint train/val/test index sets covering the shared gene set."""

    train_genes: tuple[int, ...]
    val_genes: tuple[int, ...]
    test_genes: tuple[int, ...]

    def __post_init__(self):
        parts = (set(self.train_genes), set(self.val_genes), set(self.test_genes))
        total = len(self.train_genes) + len(self.val_genes) + len(self.test_genes)
        if len(parts[0] | parts[1] | parts[2]) != total:
            raise ShapeMismatchError("split sets overlap")
        n = total
        for count, frac in zip((len(p) for p in parts), (0.7, 0.2, 0.1)):
            if abs(count - frac * n) > 1.0 + 1e-9:
                raise ShapeMismatchError(
                    f"split sizes {[len(p) for p in parts]} deviate from 70/20/10 over {n}"
                )


def split_genes(shared_genes, seed: int) -> SplitAssignment:
    """Deterministic 70/20/10 split of the shared gene indices."""
    indices = list(shared_genes)
    n = len(indices)
    if n < 10:
        raise EmptyResultError(f"need at least 10 shared genes to split, got {n}")
    n_train = round(0.7 * n)
    n_val = round(0.2 * n)
    n_test = n - n_train - n_val
    if n_test == 0:
        n_train -= 1
        n_test = 1
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    shuffled = [indices[i] for i in order]
    return SplitAssignment(
        train_genes=tuple(sorted(shuffled[:n_train])),
        val_genes=tuple(sorted(shuffled[n_train : n_train + n_val])),
        test_genes=tuple(sorted(shuffled[n_train + n_val :])),
    )


@dataclass
class PreparedPair:
    st: ExpressionMatrix
    sc: ExpressionMatrix
    genes: list[str] = field(init=False)

    def __post_init__(self):
        if self.st.gene_ids != self.sc.gene_ids:
            raise ShapeMismatchError("prepared pair must share an identical gene list")
        self.genes = list(self.st.gene_ids)


def prepare_pair(
    st_raw: ExpressionMatrix,
    sc_raw: ExpressionMatrix,
    top_fraction: float = 0.25,
    min_genes_sc: int = 500,
    min_genes_st: int = 1,
    apply_normalize: bool = True,
) -> PreparedPair:
    """Full preprocessing protocol for a paired ST / SC dataset.

    Gene ids are matched case-sensitively; the shared gene order follows the
    spatial matrix. N for normalization is computed after QC filtering.
    """
    st = qc_filter(st_raw, min_genes_sc=min_genes_sc, min_genes_st=min_genes_st)
    sc = qc_filter(sc_raw, min_genes_sc=min_genes_sc, min_genes_st=min_genes_st)
    if apply_normalize:
        st = normalize(st)
        sc = normalize(sc)
    st = select_hvg(st, top_fraction)
    sc = select_hvg(sc, top_fraction)
    shared = [g for g in st.gene_ids if g in set(sc.gene_ids)]
    if not shared:
        raise EmptyResultError("no genes survive HVG selection in both modalities")
    st_idx = st.gene_index()
    sc_idx = sc.gene_index()
    return PreparedPair(
        st=st.subset_genes([st_idx[g] for g in shared]),
        sc=sc.subset_genes([sc_idx[g] for g in shared]),
    )

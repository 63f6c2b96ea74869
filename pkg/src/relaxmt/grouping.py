"""Decompositions of the hypothesis set, subset summaries, and screening.

A decomposition partitions the M atoms (single hypotheses) into m
nonempty subsets.  Each subset is summarized by the standardized mean of
its scores, ``T_i = sum(Z_j, j in subset_i) / sqrt(s_i)``, which is
standard normal when the subset holds only independent null scores.  The
matching one-sided p-value ``P_i`` feeds the first-step screen, which
splits subsets into positive (selected) and negative classes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError, SchemaError
from .stats import one_sided_pvalue

DECOMPOSITION_HEADER = ("atom_id", "subset_id")

SCREEN_NMCP = "nmcp"
SCREEN_BONFERRONI = "bonferroni"
SCREEN_LSU = "lsu"
_SCREEN_KINDS = (SCREEN_NMCP, SCREEN_BONFERRONI, SCREEN_LSU)


@dataclass(frozen=True, eq=False)
class Decomposition:
    """Partition of atom indices 0..M-1 into subsets 0..m-1.

    ``subset_of_atom[j]`` is the subset index of atom j; ``sizes[i]`` the
    number of atoms in subset i.  Instances are immutable after
    construction and safe to share.
    """

    subset_of_atom: np.ndarray
    sizes: np.ndarray
    atom_ids: tuple[str, ...] | None = None
    subset_labels: tuple[str, ...] | None = None

    def __post_init__(self):
        assign = np.asarray(self.subset_of_atom, dtype=int)
        if assign.ndim != 1 or assign.size == 0:
            raise InputError("decomposition needs at least one atom")
        m = int(assign.max()) + 1 if assign.size else 0
        if assign.min() < 0:
            raise InputError("subset indices must be nonnegative")
        sizes = np.bincount(assign, minlength=m)
        if np.any(sizes == 0):
            empty = np.nonzero(sizes == 0)[0]
            raise InputError(f"empty subsets are not allowed (indices {empty.tolist()})")
        object.__setattr__(self, "subset_of_atom", assign)
        object.__setattr__(self, "sizes", sizes)

    @property
    def n_atoms(self) -> int:
        return int(self.subset_of_atom.size)

    @property
    def n_subsets(self) -> int:
        return int(self.sizes.size)

    def atoms_in_subset(self, i: int) -> np.ndarray:
        return np.nonzero(self.subset_of_atom == i)[0]

    @classmethod
    def from_labels(cls, labels, atom_ids=None) -> "Decomposition":
        """Build from arbitrary per-atom subset labels.

        Subsets are indexed by the sorted order of their distinct labels,
        making the mapping deterministic regardless of input order.
        """
        labels = list(labels)
        if not labels:
            raise InputError("decomposition needs at least one atom")
        uniq = sorted(set(labels), key=str)
        index = {lab: i for i, lab in enumerate(uniq)}
        assign = np.array([index[lab] for lab in labels], dtype=int)
        return cls(subset_of_atom=assign, sizes=np.empty(0, dtype=int),
                   atom_ids=tuple(atom_ids) if atom_ids is not None else None,
                   subset_labels=tuple(str(u) for u in uniq))


def load_decomposition_file(path) -> dict[str, str]:
    """Read an ``atom_id,subset_id`` CSV into an ordered mapping.

    The header line is mandatory.  Duplicate atom ids are rejected (each
    atom belongs to exactly one subset).
    """
    path = Path(path)
    mapping: dict[str, str] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty decomposition file") from None
        if tuple(h.strip() for h in header) != DECOMPOSITION_HEADER:
            raise SchemaError(
                f"{path}: expected header 'atom_id,subset_id', got {','.join(header)!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 2:
                raise SchemaError(f"{path}:{lineno}: expected two fields, got {len(row)}")
            atom, subset = row[0].strip(), row[1].strip()
            if not atom or not subset:
                raise SchemaError(f"{path}:{lineno}: empty atom_id or subset_id")
            if atom in mapping:
                raise SchemaError(f"{path}:{lineno}: atom {atom!r} assigned twice")
            mapping[atom] = subset
    if not mapping:
        raise SchemaError(f"{path}: no atom assignments")
    return mapping


def write_decomposition_file(path, mapping: dict[str, str]) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(DECOMPOSITION_HEADER)
        for atom, subset in mapping.items():
            writer.writerow([atom, subset])


def square_decomposition(side: int, block: int) -> Decomposition:
    """Partition an N x N grid (row-major atoms) into b x b square blocks."""
    side = int(side)
    block = int(block)
    if side < 1 or block < 1:
        raise InputError("side and block must be positive")
    if side % block != 0:
        raise InputError(f"block size {block} does not divide grid side {side}")
    per_row = side // block
    rows, cols = np.divmod(np.arange(side * side), side)
    assign = (rows // block) * per_row + (cols // block)
    return Decomposition(subset_of_atom=assign, sizes=np.empty(0, dtype=int))


@dataclass(frozen=True)
class SubsetSummary:
    """Standardized subset means and their one-sided p-values."""

    t: np.ndarray
    p: np.ndarray


def summarize_subsets(scores, decomposition: Decomposition) -> SubsetSummary:
    """Standardized mean ``T_i = sum(scores in subset i) / sqrt(s_i)``."""
    z = np.asarray(scores, dtype=float)
    if z.ndim != 1 or z.size != decomposition.n_atoms:
        raise InputError(
            f"scores length {z.size} does not match decomposition "
            f"({decomposition.n_atoms} atoms)")
    if np.any(~np.isfinite(z)):
        raise InputError("scores must be finite")
    sums = np.bincount(decomposition.subset_of_atom, weights=z,
                       minlength=decomposition.n_subsets)
    t = sums / np.sqrt(decomposition.sizes)
    return SubsetSummary(t=t, p=one_sided_pvalue(t))


@dataclass(frozen=True)
class ScreeningRule:
    """First-step screen: compare subset p-values to a threshold U.

    ``nmcp``        U = alpha (no subset-level correction),
    ``bonferroni``  U = alpha / m,
    ``lsu``         U = k * alpha / m for the largest k with
                    P_(k) <= k * alpha / m (U = 0 when none passes).
    """

    kind: str
    alpha: float

    def __post_init__(self):
        if self.kind not in _SCREEN_KINDS:
            raise InputError(f"unknown screening rule {self.kind!r}")
        if not 0.0 < self.alpha < 1.0:
            raise InputError(f"screening alpha must lie in (0, 1), got {self.alpha!r}")


def resolve_threshold(summary: SubsetSummary, rule: ScreeningRule, m: int | None = None) -> float:
    """Probability-scale screening threshold implied by ``rule``."""
    if m is None:
        m = summary.p.size
    if m < 1:
        raise InputError("need at least one subset")
    if rule.kind == SCREEN_NMCP:
        return rule.alpha
    if rule.kind == SCREEN_BONFERRONI:
        return rule.alpha / m
    sorted_p = np.sort(summary.p)
    crit = rule.alpha * np.arange(1, m + 1) / m
    passing = np.nonzero(sorted_p <= crit)[0]
    if passing.size == 0:
        return 0.0
    k = int(passing[-1]) + 1
    return k * rule.alpha / m


@dataclass(frozen=True)
class ScreeningOutcome:
    """Split of subsets into positive (P <= U) and negative classes."""

    positive: np.ndarray
    negative: np.ndarray
    m_plus_atoms: int
    m_minus_atoms: int
    threshold_used: float
    atom_in_positive: np.ndarray = field(repr=False)

    @property
    def n_positive(self) -> int:
        return int(self.positive.size)


def screen_at_threshold(summary: SubsetSummary, decomposition: Decomposition,
                        threshold: float) -> ScreeningOutcome:
    """Classify subsets by ``P_i <= threshold``."""
    if summary.p.size != decomposition.n_subsets:
        raise InputError("summary and decomposition subset counts differ")
    pos_mask = summary.p <= threshold
    positive = np.nonzero(pos_mask)[0]
    negative = np.nonzero(~pos_mask)[0]
    atom_pos = pos_mask[decomposition.subset_of_atom]
    m_plus = int(decomposition.sizes[positive].sum())
    return ScreeningOutcome(
        positive=positive,
        negative=negative,
        m_plus_atoms=m_plus,
        m_minus_atoms=decomposition.n_atoms - m_plus,
        threshold_used=float(threshold),
        atom_in_positive=atom_pos,
    )


def screen(summary: SubsetSummary, decomposition: Decomposition,
           rule: ScreeningRule) -> ScreeningOutcome:
    """Resolve the rule's threshold and classify subsets."""
    u = resolve_threshold(summary, rule, decomposition.n_subsets)
    return screen_at_threshold(summary, decomposition, u)


def modify_pvalues(p, decomposition: Decomposition, outcome: ScreeningOutcome,
                   relax: float, tighten: float) -> tuple[np.ndarray, np.ndarray]:
    """Divide p-values by the relaxation (positive subsets) or tightening
    (negative subsets) coefficient, clipping into [0, 1].

    ``p / 0`` is defined as 1, so ``tighten = 0`` removes negative subsets
    from contention.  Returns ``(modified_p, weights)`` where the weight
    vector (relax on positive atoms, tighten on negative) supports the
    ``sum(weights) <= M`` control check.
    """
    arr = np.asarray(p, dtype=float)
    if arr.shape != outcome.atom_in_positive.shape:
        raise InputError("p-values do not align with the screening outcome")
    relax = float(relax)
    tighten = float(tighten)
    if relax <= 0:
        raise InputError(f"relaxation coefficient must be positive, got {relax!r}")
    if not 0.0 <= tighten <= 1.0:
        raise InputError(f"tightening coefficient must lie in [0, 1], got {tighten!r}")
    weights = np.where(outcome.atom_in_positive, relax, tighten)
    safe = np.where(weights > 0, weights, 1.0)
    modified = np.where(weights > 0, np.minimum(arr / safe, 1.0), 1.0)
    return modified, weights

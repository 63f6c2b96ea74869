#!/usr/bin/env python3
"""Generate the committed regression dataset under tests/data/.

A small two-group matrix shaped like a connectivity study: 90 atoms in 9
blocks of 10, two blocks carrying a shift in group X on six of their ten
atoms.  Regenerating with this script must reproduce the committed files
byte for byte; the analyze regression test asserts the frozen rejection
lists.
"""

from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parent.parent / "tests" / "data"

N_PER_GROUP = 12
N_BLOCKS = 9
BLOCK_SIZE = 10
AFFECTED_BLOCKS = (2, 6)
AFFECTED_PER_BLOCK = 6
SHIFT = 1.1
SEED = 20240817


def main() -> None:
    rng = np.random.default_rng(np.random.SeedSequence(SEED))
    m_atoms = N_BLOCKS * BLOCK_SIZE
    atom_ids = [f"edge_{j:02d}" for j in range(m_atoms)]
    subset_ids = [f"block_{j // BLOCK_SIZE + 1}" for j in range(m_atoms)]

    x = rng.standard_normal((N_PER_GROUP, m_atoms))
    y = rng.standard_normal((N_PER_GROUP, m_atoms))
    for b in AFFECTED_BLOCKS:
        cols = range(b * BLOCK_SIZE, b * BLOCK_SIZE + AFFECTED_PER_BLOCK)
        for c in cols:
            x[:, c] += SHIFT

    OUT.mkdir(parents=True, exist_ok=True)
    with (OUT / "regression_data.csv").open("w", newline="") as fh:
        fh.write("group," + ",".join(atom_ids) + "\n")
        for row in x:
            fh.write("X," + ",".join(repr(float(v)) for v in row) + "\n")
        for row in y:
            fh.write("Y," + ",".join(repr(float(v)) for v in row) + "\n")
    with (OUT / "regression_decomposition.csv").open("w", newline="") as fh:
        fh.write("atom_id,subset_id\n")
        for atom, subset in zip(atom_ids, subset_ids):
            fh.write(f"{atom},{subset}\n")
    print(f"wrote {OUT / 'regression_data.csv'}")
    print(f"wrote {OUT / 'regression_decomposition.csv'}")


if __name__ == "__main__":
    main()

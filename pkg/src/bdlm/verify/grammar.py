"""Deterministic toy grammar used by the end-to-end conversion experiment.

Three line families, each ``prompt=response``:

* ``aaa=bbb``       - a^n b^n
* ``4719=4719``     - copy a digit string
* ``cfx=dgy``       - shift every lowercase letter by one

Each response token is fixed by the prompt token at the same offset, so the
task is exact-match checkable and learnable by a very small model.
"""

from __future__ import annotations

import numpy as np

LETTERS = "cdefghijklmnopqrstuvwxy"


def _line(rng: np.random.Generator) -> tuple[str, str]:
    kind = rng.integers(3)
    if kind == 0:
        n = int(rng.integers(1, 13))
        return "a" * n + "=", "b" * n
    n = int(rng.integers(3, 11))
    if kind == 1:
        s = "".join(str(d) for d in rng.integers(0, 10, n))
        return s + "=", s
    s = "".join(LETTERS[i] for i in rng.integers(0, len(LETTERS), n))
    return s + "=", "".join(chr(ord(c) + 1) for c in s)


def make_pairs(n: int, seed: int, exclude: set[str] | None = None) -> list[tuple[str, str]]:
    rng = np.random.default_rng(seed)
    out, seen = [], set(exclude or ())
    while len(out) < n:
        p, r = _line(rng)
        if p in seen and not p.startswith("a"):
            continue
        seen.add(p)
        out.append((p, r))
    return out


def split(n_train: int, n_test: int, seed: int):
    """Train pairs and held-out pairs whose copy/shift prompts never occur in training."""
    train = make_pairs(n_train, seed)
    test = make_pairs(n_test, seed + 1, exclude={p for p, _ in train})
    return train, test

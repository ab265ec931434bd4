"""Generate the two tiny classification tasks under data/tasks/.

marker: single sentences; label 1 iff the word "vermilion" appears. Linearly
separable from the token table alone, so any working fine-tune setup should
saturate it.

match: sentence pairs; label 1 iff both sentences mention the same color.
Exists to exercise the pair encoding (separator token, per-side truncation).
"""

import argparse
from pathlib import Path

import numpy as np

FILLER = (
    "the a one this that near under over box lamp crate chair window door "
    "table shelf floor corner wall stood sat rested leaned waited room hall "
    "kitchen garden yard old small quiet dusty plain heavy wooden round"
).split()

MARKER = "vermilion"
COLORS = ("red", "blue", "green", "amber")


def _sentence(rng: np.random.Generator, insert: str | None) -> str:
    words = list(rng.choice(FILLER, size=rng.integers(5, 10)))
    if insert is not None:
        words.insert(int(rng.integers(0, len(words) + 1)), insert)
    return " ".join(words)


def make_marker(rng: np.random.Generator, n: int) -> list[tuple[int, str]]:
    rows = []
    for i in range(n):
        label = i % 2
        rows.append((label, _sentence(rng, MARKER if label else None)))
    return rows


def make_match(rng: np.random.Generator, n: int) -> list[tuple[int, str, str]]:
    rows = []
    for i in range(n):
        label = i % 2
        c1 = str(rng.choice(COLORS))
        c2 = c1 if label else str(rng.choice([c for c in COLORS if c != c1]))
        rows.append((label, _sentence(rng, c1), _sentence(rng, c2)))
    return rows


def write_tsv(path: Path, header: list[str], rows) -> None:
    lines = ["\t".join(header)]
    lines += ["\t".join(str(c) for c in row) for row in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=11)
    ap.add_argument("--out", type=Path, default=Path("data/tasks"))
    args = ap.parse_args()

    args.out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    write_tsv(args.out / "marker_train.tsv", ["label", "sentence1"], make_marker(rng, 512))
    write_tsv(args.out / "marker_dev.tsv", ["label", "sentence1"], make_marker(rng, 128))
    write_tsv(args.out / "match_train.tsv", ["label", "sentence1", "sentence2"], make_match(rng, 256))
    write_tsv(args.out / "match_dev.tsv", ["label", "sentence1", "sentence2"], make_match(rng, 64))
    for name in ("marker_train", "marker_dev", "match_train", "match_dev"):
        print(f"wrote {args.out / (name + '.tsv')}")


if __name__ == "__main__":
    main()

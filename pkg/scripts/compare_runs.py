# scripts/compare_runs.py
"""Compare two run directories file by file with sha256; exit 0 when every artifact matches."""
from __future__ import annotations

import argparse
import pathlib
import sys

from t3d.checkpoint import sha256_file

ARTIFACTS = ("*.ckpt", "*.csv")


def digests(root: pathlib.Path, patterns: tuple) -> dict:
    found = {}
    for pattern in patterns:
        for path in root.rglob(pattern):
            if not path.is_file():
                continue
            found[str(path.relative_to(root))] = sha256_file(path)
    return found


def main(argv: list | None = None) -> int:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("a", type=pathlib.Path)
    p.add_argument("b", type=pathlib.Path)
    p.add_argument("--all-files", action="store_true", help="hash every file, not only checkpoints and CSVs")
    args = p.parse_args(argv)

    patterns = ("*",) if args.all_files else ARTIFACTS
    left, right = digests(args.a, patterns), digests(args.b, patterns)
    bad = 0
    for name in sorted(set(left) | set(right)):
        if name not in left or name not in right:
            print(f"[compare] missing in {'a' if name not in left else 'b'}: {name}")
            bad += 1
        elif left[name] != right[name]:
            print(f"[compare] differs: {name}")
            bad += 1
        else:
            print(f"[compare] ok: {name} {left[name][:12]}")
    print(f"[compare] {len(set(left) | set(right)) - bad} identical, {bad} mismatched")
    return 1 if bad else 0


if __name__ == "__main__":
    sys.exit(main())

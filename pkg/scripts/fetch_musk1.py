#!/usr/bin/env python3
"""Fetch the MUSK1 benchmark CSV into data/musk1.csv.

Tries the UCI-derived copies bundled with public MIL libraries on GitHub.
Inside sandboxed environments an Artifactory remote that proxies github.com
can be supplied via --mirror (e.g. https://<host>/artifactory/github).
"""

import argparse
import io
import sys
import tarfile
import urllib.request
from pathlib import Path

ARCHIVE_PATH = "rosasalberto/mil/archive/refs/heads/master.tar.gz"
CSV_MEMBER = "mil-master/mil/data/datasets/csv/musk1.csv"
EXPECTED = {"bags": 92, "d": 166, "positives": 47}


def fetch(base: str) -> bytes:
    url = f"{base.rstrip('/')}/{ARCHIVE_PATH}"
    print(f"fetching {url}")
    with urllib.request.urlopen(url, timeout=120) as resp:
        return resp.read()


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="data/musk1.csv")
    parser.add_argument("--mirror", default="https://github.com",
                        help="base URL that serves github.com paths")
    args = parser.parse_args()

    blob = fetch(args.mirror)
    with tarfile.open(fileobj=io.BytesIO(blob), mode="r:gz") as tar:
        member = tar.extractfile(CSV_MEMBER)
        if member is None:
            print(f"archive layout changed: {CSV_MEMBER} missing", file=sys.stderr)
            return 1
        text = member.read().decode("utf-8")

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)

    sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))
    from efficientmil.data import load_musk_style
    bags = load_musk_style(out)
    counts = {"bags": len(bags), "d": bags[0].d, "positives": sum(b.label for b in bags)}
    if counts != EXPECTED:
        print(f"unexpected dataset: {counts} != {EXPECTED}", file=sys.stderr)
        return 1
    print(f"wrote {out} ({counts['bags']} bags, d={counts['d']}, "
          f"{counts['positives']} positive)")
    return 0


if __name__ == "__main__":
    sys.exit(main())

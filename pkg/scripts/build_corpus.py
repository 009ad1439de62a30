"""Rebuild data/shakespeare.txt from the ``shakespeare`` 0.6 source distribution.

The sdist on PyPI ships plain-text Project Gutenberg editions of the plays
under ``shksprdata/texts``. Eight of them, concatenated in the order below,
give a ~1 MB public-domain byte corpus.

    python3 scripts/build_corpus.py [--out data/shakespeare.txt]
"""
import argparse
import hashlib
import subprocess
import sys
import tarfile
import tempfile
from pathlib import Path

PLAYS = ("hamlet", "macbeth", "lear", "othello", "romeo_and_juliet", "julius_caesar", "tempest",
         "midsummer_nights_dream")
SHA256 = "cf19e72cefbc9344b4351c5d36601a34c9e60ae3d93ecc40e2740e5f61e837a2"


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path(__file__).resolve().parents[1] / "data" / "shakespeare.txt")
    args = ap.parse_args()
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run([sys.executable, "-m", "pip", "download", "--no-deps", "--no-binary", ":all:",
                        "-d", tmp, "shakespeare==0.6"], check=True)
        (sdist,) = Path(tmp).glob("shakespeare-0.6.tar.gz")
        with tarfile.open(sdist) as tar:
            parts = [tar.extractfile(f"shakespeare-0.6/shksprdata/texts/{p}_gut.txt").read() for p in PLAYS]
    data = b"".join(parts)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_bytes(data)
    digest = hashlib.sha256(data).hexdigest()
    print(f"{args.out}: {len(data)} bytes, sha256 {digest}")
    if digest != SHA256:
        print("warning: digest differs from the committed corpus", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

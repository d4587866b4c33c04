"""Fetch the four MNIST IDX files into data/mnist (gzip-compressed).

Tries the ``mnist-data`` npm package first (works behind a package mirror),
then the public MNIST mirror over HTTPS.  Files are checked with the IDX
loader before the script reports success.
"""
import argparse
import gzip
import os
import shutil
import subprocess
import sys
import tarfile
import tempfile
import urllib.request

from bnnkit import modelio as M

FILES = ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"]
MIRROR = "https://ossci-datasets.s3.amazonaws.com/mnist/"


def from_npm(out):
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(["npm", "pack", "mnist-data@1.2.6"], cwd=tmp, check=True, capture_output=True)
        tgz = next(f for f in os.listdir(tmp) if f.endswith(".tgz"))
        with tarfile.open(os.path.join(tmp, tgz)) as tar:
            for name in FILES:
                src = tar.extractfile(f"package/data/{name}")
                with gzip.open(os.path.join(out, name + ".gz"), "wb") as dst:
                    shutil.copyfileobj(src, dst)


def from_mirror(out):
    for name in FILES:
        urllib.request.urlretrieve(MIRROR + name + ".gz", os.path.join(out, name + ".gz"))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="data/mnist")
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)
    for fetch in (from_npm, from_mirror):
        try:
            fetch(args.out)
            break
        except Exception as exc:
            print(f"{fetch.__name__} failed: {exc}", file=sys.stderr)
    else:
        sys.exit("could not fetch MNIST")
    train, val, test = M.mnist_splits(args.out)
    print(f"MNIST in {args.out}: {len(train)} train, {len(val)} validation, {len(test)} test")


if __name__ == "__main__":
    main()

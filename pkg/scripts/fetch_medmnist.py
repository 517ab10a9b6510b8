#!/usr/bin/env python3
"""Download the biomedical archives used by the full-scale presets.

The library itself never touches the network; run this once and point
ESSENTIAL_DATA_DIR (or the data_dir config key) at the target directory.

Archives (MedMNIST v2 layout, hosted on Zenodo record 10519652):
  pathmnist.npz       9-class colorectal histology patches at 28x28
  bloodmnist_224.npz  8-class blood-cell images at 224x224

Alternative: `pip install medmnist` and export the same .npz files via its
API if the direct download is unavailable.
"""

import argparse
import os
import sys
import urllib.request

RECORD = "https://zenodo.org/records/10519652/files"
ARCHIVES = ("pathmnist.npz", "bloodmnist_224.npz")


def fetch(name: str, dest_dir: str):
    url = f"{RECORD}/{name}?download=1"
    dest = os.path.join(dest_dir, name)
    if os.path.exists(dest):
        print(f"{dest} already present, skipping")
        return
    print(f"downloading {url} -> {dest}")
    urllib.request.urlretrieve(url, dest)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--dest", default=os.environ.get("ESSENTIAL_DATA_DIR", "."),
                        help="target directory (default: $ESSENTIAL_DATA_DIR or .)")
    parser.add_argument("--archives", default=",".join(ARCHIVES),
                        help="comma list of archive names to fetch")
    args = parser.parse_args()
    os.makedirs(args.dest, exist_ok=True)
    for name in args.archives.split(","):
        fetch(name.strip(), args.dest)


if __name__ == "__main__":
    sys.exit(main())

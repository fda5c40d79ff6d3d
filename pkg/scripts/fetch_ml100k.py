#!/usr/bin/env python3
"""Write MovieLens-100k as ``u.data`` under ``data/ml-100k/``.

The RecBole wheel ships ``ml-100k.inter`` (same rows as GroupLens ``u.data``
plus a typed header), so the file can be obtained through a Python package
index instead of a direct download. Pass ``--wheel`` to use a local copy.
"""
import argparse
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

MEMBER = "recbole/dataset_example/ml-100k/ml-100k.inter"


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--wheel", help="path to a recbole-*.whl; downloaded with pip when omitted")
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "data" / "ml-100k" / "u.data"))
    args = ap.parse_args(argv)

    out = Path(args.out)
    if out.exists():
        print(f"{out} already present")
        return 0
    with tempfile.TemporaryDirectory() as tmp:
        wheel = args.wheel
        if wheel is None:
            subprocess.run(
                [sys.executable, "-m", "pip", "download", "recbole==1.2.1", "--no-deps", "-d", tmp, "-q"],
                check=True,
            )
            wheel = next(Path(tmp).glob("recbole-*.whl"))
        with zipfile.ZipFile(wheel) as zf:
            lines = zf.read(MEMBER).decode("utf-8").splitlines()
    out.parent.mkdir(parents=True, exist_ok=True)
    body = [ln for ln in lines[1:] if ln.strip()]
    out.write_text("\n".join(body) + "\n", encoding="utf-8")
    print(f"wrote {len(body)} interactions to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
